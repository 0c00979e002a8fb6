"""Metrics, constant and hand-crafted baselines, and the rollout error study."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .finetune import HeadConfig, TaskHead, predict, predict_labels, train_head
from .geo import haversine_m
from .model import ModelParams
from .pretrain import rollout_normalized
from .trajectory import (DEFAULT_PROXIMITY_M, GRID_SECONDS, STEPS_PER_DAY, GriddedTrajectory,
                         NormalizationStats, Region)

UNDEFINED = None  # returned by pcc when a correlation does not exist

__all__ = ["UNDEFINED", "mae", "rmse", "pcc", "spearman", "acc", "hamming", "haversine_m"]


def _pair(preds, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise ContractError(f"need equal nonzero lengths, got {p.size} and {t.size}")
    return p, t


def mae(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def rmse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def pcc(preds, targets) -> float | None:
    """Pearson correlation, or ``UNDEFINED`` when either side has zero variance."""
    p, t = _pair(preds, targets)
    if np.all(p == p[0]) or np.all(t == t[0]):
        return UNDEFINED
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.dot(dp, dp)), np.sqrt(np.dot(dt, dt))
    if sp == 0 or st == 0 or not np.isfinite(sp * st):
        return UNDEFINED
    return float(np.clip(np.dot(dp, dt) / (sp * st), -1.0, 1.0))


def _ranks(a: np.ndarray) -> np.ndarray:
    """Average ranks (ties share the mean of their positions)."""
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a))
    ranks[order] = np.arange(len(a), dtype=np.float64)
    vals, inverse = np.unique(a, return_inverse=True)
    sums = np.bincount(inverse, weights=ranks)
    counts = np.bincount(inverse)
    return (sums / counts)[inverse]


def spearman(a, b) -> float | None:
    """Rank correlation; ``UNDEFINED`` when either side is constant."""
    p, t = _pair(a, b)
    return pcc(_ranks(p), _ranks(t))


def _labels(pred_labels, true_labels) -> tuple[np.ndarray, np.ndarray]:
    p, t = np.asarray(pred_labels).ravel(), np.asarray(true_labels).ravel()
    if p.shape != t.shape or p.size == 0:
        raise ContractError(f"need equal nonzero lengths, got {p.size} and {t.size}")
    return p, t


def acc(pred_labels, true_labels) -> float:
    p, t = _labels(pred_labels, true_labels)
    return float(np.count_nonzero(p == t) / p.size)


def hamming(pred_labels, true_labels) -> float:
    p, t = _labels(pred_labels, true_labels)
    return float(np.count_nonzero(p != t) / p.size)


def regression_metrics(preds, targets) -> dict:
    return {"mae": mae(preds, targets), "rmse": rmse(preds, targets), "pcc": pcc(preds, targets)}


def classification_metrics(pred_labels, true_labels) -> dict:
    return {"acc": acc(pred_labels, true_labels), "hamming": hamming(pred_labels, true_labels)}


# baselines -------------------------------------------------------------------

@dataclass(frozen=True)
class UniqueBaseline:
    kind: str
    value: float

    def predict(self, n: int) -> np.ndarray:
        dtype = np.int64 if self.kind == "classification" else np.float64
        return np.full(n, self.value, dtype=dtype)


def unique_baseline(train_labels, kind: str) -> UniqueBaseline:
    """Majority class (smallest label on ties) or the training mean."""
    y = np.asarray(train_labels).ravel()
    if y.size == 0:
        raise ContractError("unique baseline needs at least one training label")
    if kind == "classification":
        classes, counts = np.unique(y.astype(np.int64), return_counts=True)
        return UniqueBaseline(kind, int(classes[np.argmax(counts)]))
    if kind == "regression":
        return UniqueBaseline(kind, float(y.astype(np.float64).mean()))
    raise ConfigError(f"kind must be classification or regression, got {kind!r}")


STATICS_DIM = 240


def statics_features(trajs: Sequence[GriddedTrajectory], regions: Sequence[Region],
                     proximity_m: float = DEFAULT_PROXIMITY_M) -> np.ndarray:
    """Hand-built flow features per region, shape (n_regions, 240).

    Blocks: entries per 15-minute slot of day (96), exits per slot (96), distinct users per
    hour of day (24), mean minutes spent per present user per hour of day (24).
    """
    feats = np.zeros((len(regions), STATICS_DIM))
    trajs = [t for t in trajs if len(t)]
    boxes = np.array([[t.coords[:, 0].min(), t.coords[:, 1].min(), t.coords[:, 0].max(), t.coords[:, 1].max()]
                      for t in trajs]).reshape(-1, 4)
    for r_i, region in enumerate(regions):
        slot_in = np.zeros(STEPS_PER_DAY)
        slot_out = np.zeros(STEPS_PER_DAY)
        hour_users = [set() for _ in range(24)]
        hour_steps = np.zeros(24)
        lon0, lat0, lon1, lat1 = region.expanded_bounds(proximity_m)
        overlap = (boxes[:, 0] <= lon1) & (boxes[:, 2] >= lon0) & (boxes[:, 1] <= lat1) & (boxes[:, 3] >= lat0)
        for i in np.flatnonzero(overlap):
            t = trajs[i]
            c = t.coords
            inside = (c[:, 0] >= lon0) & (c[:, 0] <= lon1) & (c[:, 1] >= lat0) & (c[:, 1] <= lat1)
            if inside.any():
                inside[inside] = region.near(c[inside, 0], c[inside, 1], proximity_m)
            if not inside.any():
                continue
            slot = ((t.times // GRID_SECONDS) % STEPS_PER_DAY).astype(np.int64)
            enter = inside[1:] & ~inside[:-1]
            leave = inside[:-1] & ~inside[1:]
            np.add.at(slot_in, slot[1:][enter], 1)
            np.add.at(slot_out, slot[1:][leave], 1)
            hours = slot[inside] // 4
            np.add.at(hour_steps, hours, 1)
            for h in np.unique(hours):
                hour_users[h].add(t.user_id)
        n_users = np.array([len(s) for s in hour_users], dtype=np.float64)
        dwell = np.divide(hour_steps * (GRID_SECONDS / 60), n_users, out=np.zeros(24), where=n_users > 0)
        feats[r_i] = np.concatenate([slot_in, slot_out, n_users, dwell])
    return feats


def statics_baseline(features: np.ndarray, labels, split: "Split", kind: str,
                     config: HeadConfig | None = None, task_id: str = "statics") -> TaskHead:
    """Train the same head machinery on the hand-built features."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[1] != STATICS_DIM:
        raise ContractError(f"statics features must have {STATICS_DIM} columns, got {features.shape[1]}")
    return train_head(features[split.train], labels[split.train], kind, config, task_id=task_id,
                      val=(features[split.val], labels[split.val]))


# splits ----------------------------------------------------------------------

@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def sizes(self) -> dict:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> Split:
    """Seeded shuffle cut into train/val/test; every part gets at least one item when n >= 3."""
    if n < 3:
        raise ContractError(f"need at least 3 items to split, got {n}")
    perm = np.random.default_rng([seed, 3]).permutation(n)
    n_val = max(1, int(round(fractions[1] * n)))
    n_test = max(1, int(round(fractions[2] * n)))
    n_train = n - n_val - n_test
    return Split(np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                 np.sort(perm[n_train + n_val:]))


def evaluate_head(head: TaskHead, x, y) -> dict:
    if head.kind == "classification":
        return classification_metrics(predict_labels(head, x), y)
    return regression_metrics(predict(head, x), y)


def evaluate_unique(baseline: UniqueBaseline, y) -> dict:
    pred = baseline.predict(len(np.asarray(y)))
    if baseline.kind == "classification":
        return classification_metrics(pred, y)
    return regression_metrics(pred, y)


# reports ---------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}"


@dataclass
class MetricReport:
    task_id: str
    split_sizes: dict
    metrics: dict  # method name -> {metric: value}
    rollout: "RolloutTable | None" = None

    def to_dict(self) -> dict:
        out = {"task_id": self.task_id, "split_sizes": self.split_sizes, "metrics": self.metrics}
        if self.rollout is not None:
            out["rollout"] = self.rollout.to_dict()
        return out

    def to_text(self) -> str:
        lines = [f"task: {self.task_id}",
                 "splits: " + ", ".join(f"{k}={v}" for k, v in self.split_sizes.items())]
        names = sorted({m for vals in self.metrics.values() for m in vals})
        if names:
            width = max(10, *(len(k) for k in self.metrics))
            lines.append(f"{'method':<{width}}" + "".join(f"{n:>10}" for n in names))
            for method, vals in self.metrics.items():
                lines.append(f"{method:<{width}}" + "".join(f"{_fmt(vals.get(n)):>10}" for n in names))
        if self.rollout is not None:
            lines.append(self.rollout.to_text())
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: str = "report") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.txt").write_text(self.to_text())
        (directory / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


# rollout study ---------------------------------------------------------------

def parse_clock(s: str) -> int:
    """'08:00' or '08:00:00' -> seconds after midnight."""
    parts = [int(p) for p in s.split(":")]
    if not 2 <= len(parts) <= 3:
        raise ConfigError(f"bad clock time {s!r}")
    parts += [0] * (3 - len(parts))
    return parts[0] * 3600 + parts[1] * 60 + parts[2]


@dataclass
class RolloutTable:
    start_times: list[str]
    horizons: list[int]
    mean_error_m: np.ndarray  # (n_horizons, n_start_times); NaN where no prompt qualified
    counts: np.ndarray
    paths: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"start_times": self.start_times, "horizons": self.horizons,
                "mean_error_m": [[None if np.isnan(v) else float(v) for v in row] for row in self.mean_error_m],
                "counts": self.counts.tolist()}

    def to_text(self) -> str:
        head = f"{'horizon':>8}" + "".join(f"{s:>12}" for s in self.start_times)
        rows = [head]
        for i, h in enumerate(self.horizons):
            cells = "".join(f"{'-' if np.isnan(v) else f'{v:.4f}':>12}" for v in self.mean_error_m[i])
            rows.append(f"{h * GRID_SECONDS / 3600:>7.2f}h" + cells)
        return "\n".join(rows)

    def horizon_means(self) -> np.ndarray:
        """Mean over start times of each horizon row, weighted by prompt count."""
        c = self.counts.astype(np.float64)
        total = np.where(np.isnan(self.mean_error_m), 0.0, self.mean_error_m) * c
        return total.sum(axis=1) / np.maximum(c.sum(axis=1), 1)


def rollout_error_table(params: ModelParams, trajs: Sequence[GriddedTrajectory], stats: NormalizationStats,
                        start_times: Sequence[str] = ("08:00:00", "11:00:00", "14:00:00", "17:00:00"),
                        horizons: Sequence[int] = tuple(range(1, 11)), keep_paths: int = 0,
                        batch_size: int = 64) -> RolloutTable:
    """Mean haversine error per (horizon, start time) over prompts ending just before each start time.

    A prompt is the user's grid points of that day before the start time (trimmed so prompt plus
    horizon fits the model). Horizon h is averaged over exactly the prompts whose ground truth
    extends h steps.
    """
    horizons = sorted(int(h) for h in horizons)
    if not horizons or horizons[0] < 1:
        raise ConfigError("horizons must be positive step counts")
    h_max = horizons[-1]
    max_prompt = params.config.max_seq_len - h_max
    if max_prompt < 1:
        raise ConfigError(f"horizon {h_max} leaves no room for a prompt within max_seq_len")
    sums = np.zeros((len(horizons), len(start_times)))
    counts = np.zeros((len(horizons), len(start_times)), dtype=np.int64)
    paths = []
    for s_i, clock in enumerate(start_times):
        offset = parse_clock(clock)
        jobs: dict[int, list] = {}
        for t in trajs:
            if not len(t):
                continue
            first_day = t.start_t // 86400
            last_day = (t.start_t + GRID_SECONDS * (len(t) - 1)) // 86400
            for day in range(first_day, last_day + 1):
                start = day * 86400 + offset
                prompt = t.window(day * 86400, start).tail(max_prompt)
                if len(prompt) == 0 or prompt.start_t + GRID_SECONDS * len(prompt) != start:
                    continue
                truth = t.window(start, start + GRID_SECONDS * h_max).coords
                if len(truth) == 0:
                    continue
                jobs.setdefault(len(prompt), []).append((t.user_id, prompt, truth))
        for n, items in sorted(jobs.items()):
            for b in range(0, len(items), batch_size):
                chunk = items[b:b + batch_size]
                block = np.stack([stats.normalize(p.coords) for _, p, _ in chunk])
                pred = stats.denormalize(rollout_normalized(params, block, h_max).astype(np.float64))
                for (uid, prompt, truth), path in zip(chunk, pred):
                    err = haversine_m(path[:len(truth), 0], path[:len(truth), 1], truth[:, 0], truth[:, 1])
                    err = np.atleast_1d(err)
                    for h_i, h in enumerate(horizons):
                        if h <= len(truth):
                            sums[h_i, s_i] += err[h - 1]
                            counts[h_i, s_i] += 1
                    if len(paths) < keep_paths:
                        paths.append({"user_id": uid, "start_time": clock, "prompt": prompt.coords,
                                      "truth": truth, "predicted": path[:len(truth)]})
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return RolloutTable(list(start_times), horizons, means, counts, paths)


def rollout_geojson(table: RolloutTable) -> dict:
    """FeatureCollection of true and predicted paths for visual inspection."""
    features = []
    for p in table.paths:
        anchor = p["prompt"][-1:]
        for role in ("truth", "predicted"):
            line = np.vstack([anchor, p[role]])
            features.append({"type": "Feature",
                             "properties": {"user_id": p["user_id"], "start_time": p["start_time"], "role": role},
                             "geometry": {"type": "LineString", "coordinates": line.tolist()}})
    return {"type": "FeatureCollection", "features": features}
