"""Frozen-backbone embeddings for users and regions, and small MLP heads trained on top."""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ContractError, DegenerateTaskError, FormatError, InsufficientDataError
from .model import ModelParams, _zip_write, forward
from .pretrain import Adam
from .tensor import Tensor
from .trajectory import DEFAULT_PROXIMITY_M, GriddedTrajectory, NormalizationStats, Region, WindowIndex

POOLINGS = ("last", "mean")
DEFAULT_K_DAYS = 7


@dataclass
class TrajectoryEmbedding:
    user_id: str
    vector: np.ndarray
    window: tuple[int, int]


@dataclass
class RegionEmbedding:
    region_id: str
    vector: np.ndarray
    contributing_user_count: int
    window: tuple[int, int]
    K: int
    proximity_m: float
    contributors: list[str] = field(default_factory=list)


def _span(traj: GriddedTrajectory) -> tuple[int, int]:
    return traj.start_t, traj.start_t + 900 * len(traj)


def embed_trajectory(params: ModelParams, traj: GriddedTrajectory, stats: NormalizationStats,
                     pooling: str = "last") -> TrajectoryEmbedding:
    """Eval-mode forward; the vector is the final row of E (or the mean over rows)."""
    if pooling not in POOLINGS:
        raise ConfigError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    if len(traj) == 0:
        raise InsufficientDataError(f"trajectory {traj.user_id!r} is empty")
    if len(traj) > params.config.max_seq_len:
        raise CapacityError(f"trajectory length {len(traj)} exceeds max_seq_len {params.config.max_seq_len}")
    E = forward(params, stats.normalize(traj.coords)).E.data
    vec = E[-1] if pooling == "last" else E.mean(axis=0)
    return TrajectoryEmbedding(traj.user_id, vec.copy(), _span(traj))


def embed_many(params: ModelParams, trajs: Iterable[GriddedTrajectory], stats: NormalizationStats,
               pooling: str = "last", truncate: bool = False) -> list[TrajectoryEmbedding]:
    """Embed each trajectory on its own so a vector never depends on its batch mates.

    With ``truncate`` the last ``max_seq_len`` points are kept instead of raising.
    """
    n_max = params.config.max_seq_len
    return [embed_trajectory(params, t.tail(n_max) if truncate else t, stats, pooling) for t in trajs]


def region_window(as_of: int, K: int) -> tuple[int, int]:
    if K < 1:
        raise ConfigError(f"K must be >= 1 day, got {K}")
    return int(as_of - K * 86400), int(as_of)


def window_embeddings(params: ModelParams, trajs: Sequence[GriddedTrajectory], stats: NormalizationStats,
                      window: tuple[int, int], pooling: str = "last") -> dict[str, TrajectoryEmbedding]:
    """Embeddings of each user's slice inside ``window`` (last max_seq_len points of it)."""
    out = {}
    for t in trajs:
        part = t.window(*window)
        if len(part):
            out[t.user_id] = embed_trajectory(params, part.tail(params.config.max_seq_len), stats, pooling)
    return out


def sum_vectors(vectors: Sequence[np.ndarray], d: int) -> np.ndarray:
    if not len(vectors):
        return np.zeros(d, dtype=np.float64)
    m = np.asarray(vectors, dtype=np.float64)
    return np.array([math.fsum(col) for col in m.T])


def pool_region(region: Region, index: WindowIndex, user_vectors: dict[str, np.ndarray],
                window: tuple[int, int], K: int, proximity_m: float, d: int) -> RegionEmbedding:
    """Sum the precomputed vectors of users near ``region`` during ``window``.

    Each coordinate is a correctly rounded sum, so the result cannot depend on user order.
    """
    ids = [u for u in index.members(region, proximity_m) if u in user_vectors]
    vec = sum_vectors([user_vectors[u] for u in ids], d)
    return RegionEmbedding(region.region_id, vec, len(ids), window, K, proximity_m, ids)


def region_embed(params: ModelParams, trajs: Sequence[GriddedTrajectory], region: Region, as_of: int,
                 stats: NormalizationStats, K: int = DEFAULT_K_DAYS, proximity_m: float = DEFAULT_PROXIMITY_M,
                 pooling: str = "last") -> RegionEmbedding:
    """Sum-pool the K-day-window embeddings of every user who came within ``proximity_m`` of the region."""
    window = region_window(as_of, K)
    index = WindowIndex(trajs, window)
    near = set(index.members(region, proximity_m))
    vecs = {k: e.vector.astype(np.float64) for k, e in
            window_embeddings(params, [t for t in trajs if t.user_id in near], stats, window, pooling).items()}
    return pool_region(region, index, vecs, window, K, proximity_m, params.config.d_model)


def region_embed_all(params: ModelParams, trajs: Sequence[GriddedTrajectory], regions: Sequence[Region],
                     as_of: int, stats: NormalizationStats, K: int = DEFAULT_K_DAYS,
                     proximity_m: float = DEFAULT_PROXIMITY_M, pooling: str = "last") -> list[RegionEmbedding]:
    """Same as calling :func:`region_embed` per region, with each user embedded only once."""
    window = region_window(as_of, K)
    vecs = {k: e.vector.astype(np.float64) for k, e in window_embeddings(params, trajs, stats, window, pooling).items()}
    index = WindowIndex(trajs, window)
    return [pool_region(r, index, vecs, window, K, proximity_m, params.config.d_model) for r in regions]


# heads -----------------------------------------------------------------------

@dataclass
class HeadConfig:
    hidden: int | None = None
    learning_rate: float = 3e-3
    steps: int = 400
    batch_size: int = 64
    weight_decay: float = 0.0
    eval_every: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("head learning_rate, steps, batch_size and eval_every must be positive")


@dataclass
class TaskHead:
    task_id: str
    kind: str
    n_classes: int | None
    weights: dict[str, np.ndarray]
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    pooling: str = "last"
    config: HeadConfig = field(default_factory=HeadConfig)

    @property
    def out_width(self) -> int:
        return self.n_classes if self.kind == "classification" else 1


def _head_forward(w: dict[str, Tensor], x: Tensor) -> Tensor:
    return T.gelu(x @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]


def _head_loss(kind: str, out: Tensor, y: np.ndarray) -> Tensor:
    if kind == "classification":
        return T.cross_entropy(out, y)
    return T.abs_(out.reshape(-1) - y).mean()


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    keys = [x[:, j] for j in range(x.shape[1] - 1, -1, -1)] + [y]
    return np.lexsort(keys)


def train_head(x, y, kind: str, config: HeadConfig | None = None, *, task_id: str = "task",
               n_classes: int | None = None, val: tuple | None = None, pooling: str = "last") -> TaskHead:
    """Fit an MLP head (d -> hidden -> out, GELU) with Adam on frozen embeddings.

    Examples are put into a canonical order first, so the result does not depend on how the
    caller ordered them. When ``val`` is given the weights with the lowest validation loss win.
    """
    cfg = config or HeadConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or len(x) != len(y):
        raise ContractError(f"need (n, d) inputs and n labels, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise DegenerateTaskError("need at least 2 training examples")
    if kind == "classification":
        y = y.astype(np.int64)
        n_classes = int(n_classes or y.max() + 1)
        if y.min() < 0 or y.max() >= n_classes:
            raise ContractError(f"class labels must lie in [0, {n_classes})")
        if len(np.unique(y)) < 2:
            raise DegenerateTaskError("classification training set has a single class")
    elif kind == "regression":
        y = y.astype(np.float64)
        n_classes = None
    else:
        raise ConfigError(f"kind must be classification or regression, got {kind!r}")

    order = _canonical_order(x, y)
    x, y = x[order], y[order]
    x_mean = x.mean(axis=0)
    x_std = x.std(axis=0)
    x_std[x_std < 1e-8] = 1.0
    y_mean, y_scale = 0.0, 1.0
    if kind == "regression":
        y_mean = float(y.mean())
        y_scale = float(y.std()) or 1.0
    xs = (x - x_mean) / x_std
    ys = y if kind == "classification" else (y - y_mean) / y_scale

    d = x.shape[1]
    hidden = cfg.hidden or d
    out_w = n_classes if kind == "classification" else 1
    rng = np.random.default_rng([cfg.seed, 7])
    w = {
        "w1": Tensor(rng.normal(0, 1 / np.sqrt(d), (d, hidden)), requires_grad=True, dtype=np.float64),
        "b1": Tensor(np.zeros(hidden), requires_grad=True, dtype=np.float64),
        "w2": Tensor(rng.normal(0, 0.01, (hidden, out_w)), requires_grad=True, dtype=np.float64),
        "b2": Tensor(np.zeros(out_w), requires_grad=True, dtype=np.float64),
    }
    opt = Adam(w, 0.9, 0.999, 1e-8, cfg.weight_decay)

    def snapshot():
        return {k: t.data.copy() for k, t in w.items()}

    head = TaskHead(task_id, kind, n_classes, snapshot(), x_mean, x_std, y_mean, y_scale, pooling, cfg)
    best, best_loss = head.weights, np.inf
    if val is not None:
        xv = (np.asarray(val[0], dtype=np.float64) - x_mean) / x_std
        yv = np.asarray(val[1])
        yv = yv.astype(np.int64) if kind == "classification" else (yv.astype(np.float64) - y_mean) / y_scale

    n = len(xs)
    bs = min(cfg.batch_size, n)
    perm, pos = rng.permutation(n), 0
    for step in range(1, cfg.steps + 1):
        if pos + bs > n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + bs]
        pos += bs
        for t in w.values():
            t.zero_grad()
        with T.Tape() as tape:
            loss = _head_loss(kind, _head_forward(w, Tensor(xs[idx], dtype=np.float64)), ys[idx])
        T.backward(loss, tape)
        opt.step(cfg.learning_rate)
        if val is not None and len(yv) and (step % cfg.eval_every == 0 or step == cfg.steps):
            vl = _head_loss(kind, _head_forward(w, Tensor(xv, dtype=np.float64)), yv).item()
            if vl < best_loss:
                best, best_loss = snapshot(), vl
    head.weights = best if val is not None and np.isfinite(best_loss) else snapshot()
    return head


def head_outputs(head: TaskHead, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = (np.atleast_2d(x) - head.x_mean) / head.x_std
    w = {k: Tensor(v, dtype=np.float64) for k, v in head.weights.items()}
    out = _head_forward(w, Tensor(xs, dtype=np.float64)).data
    return out[0] if single else out


def predict(head: TaskHead, x) -> np.ndarray:
    """Class probabilities (rows sum to 1) or denormalized regression values."""
    out = head_outputs(head, x)
    if head.kind == "classification":
        z = out - out.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)
    return out[..., 0] * head.y_scale + head.y_mean


def predict_labels(head: TaskHead, x) -> np.ndarray:
    if head.kind != "classification":
        raise ContractError("predict_labels needs a classification head")
    return np.argmax(head_outputs(head, x), axis=-1)


# files -----------------------------------------------------------------------

def write_embeddings(path, items: Sequence[TrajectoryEmbedding | RegionEmbedding]) -> None:
    """One JSON object per line: {user_id|region_id, vector}."""
    with open(path, "w") as fh:
        for e in items:
            key = "user_id" if isinstance(e, TrajectoryEmbedding) else "region_id"
            rec = {key: getattr(e, key), "vector": [float(v) for v in e.vector]}
            if isinstance(e, RegionEmbedding):
                rec["contributing_user_count"] = e.contributing_user_count
            fh.write(json.dumps(rec) + "\n")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    ids, vecs = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(str(rec.get("user_id", rec.get("region_id"))))
                vecs.append(rec["vector"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"{path}:{ln}: bad embedding record ({exc})") from None
    if not vecs:
        raise FormatError(f"{path}: no embeddings")
    return ids, np.asarray(vecs, dtype=np.float64)


def save_head(path, head: TaskHead) -> None:
    meta = {"task_id": head.task_id, "kind": head.kind, "n_classes": head.n_classes,
            "y_mean": head.y_mean, "y_scale": head.y_scale, "pooling": head.pooling,
            "config": asdict(head.config)}
    arrays = {**{f"w.{k}": v for k, v in head.weights.items()}, "x_mean": head.x_mean, "x_std": head.x_std}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _zip_write(zf, name + ".npy", buf.getvalue())


def load_head(path) -> TaskHead:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            arrays = {n[:-4]: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
                      for n in zf.namelist() if n.endswith(".npy")}
        weights = {k: arrays[f"w.{k}"] for k in ("w1", "b1", "w2", "b2")}
        return TaskHead(meta["task_id"], meta["kind"], meta["n_classes"], weights, arrays["x_mean"],
                        arrays["x_std"], meta["y_mean"], meta["y_scale"], meta["pooling"],
                        HeadConfig(**meta["config"]))
    except (KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read head checkpoint {path}: {exc}") from None
