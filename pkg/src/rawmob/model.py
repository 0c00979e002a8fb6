"""Decoder-only transformer over continuous (lon, lat) sequences.

Layout: position-wise input FFN (2 -> 4d -> d) plus a learned positional table,
L pre-norm decoder layers with causal multi-head attention, a final layer norm
giving the embeddings E, and a linear head mapping each row of E to the next
(x, y). Attention scores are scaled by sqrt(d_head).
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, FormatError
from .tensor import Tensor
from .trajectory import NormalizationStats

CHECKPOINT_FORMAT = 1
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    max_seq_len: int
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.n_layers < 1 or self.d_model < 1 or self.n_heads < 1:
            raise ConfigError("n_layers, d_model and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be at least 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p {self.dropout_p} not in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


# size presets; max_seq_len 960 = 10 days of 15-minute steps
RAW_TINY = ModelConfig(n_layers=12, d_model=768, n_heads=12, max_seq_len=960, dropout_p=0.1)
RAW_SMALL = ModelConfig(n_layers=24, d_model=1024, n_heads=16, max_seq_len=960, dropout_p=0.1)
RAW_MIDDLE = ModelConfig(n_layers=24, d_model=1536, n_heads=16, max_seq_len=960, dropout_p=0.1)
RAW_LARGE = ModelConfig(n_layers=24, d_model=2048, n_heads=16, max_seq_len=960, dropout_p=0.1)
# desk-scale: one day of 15-minute steps
RAW_NANO = ModelConfig(n_layers=4, d_model=128, n_heads=4, max_seq_len=96, dropout_p=0.1)

PRESETS = {"raw-tiny": RAW_TINY, "raw-small": RAW_SMALL, "raw-middle": RAW_MIDDLE,
           "raw-large": RAW_LARGE, "raw-nano": RAW_NANO}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, 4 * cfg.d_model
    shapes = {
        "input_ffn.w1": (2, f), "input_ffn.b1": (f,),
        "input_ffn.w2": (f, d), "input_ffn.b2": (d,),
        "pos.wp": (cfg.max_seq_len, d),
    }
    for l in range(cfg.n_layers):
        p = f"layer.{l}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,), p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    shapes.update({"final_ln.gain": (d,), "final_ln.bias": (d,), "output.wo": (d, 2), "output.bo": (2,)})
    return shapes


def count_params(cfg: ModelConfig) -> int:
    d, L = cfg.d_model, cfg.n_layers
    input_ffn = 2 * 4 * d + 4 * d + 4 * d * d + d
    positional = cfg.max_seq_len * d
    per_layer = 12 * d * d + 9 * d
    return input_ffn + positional + L * per_layer + 2 * d + 2 * d + 2


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data, requires_grad=v.requires_grad, name=k, dtype=dtype)
                                         for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data) if flag else None
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Normal(0, 0.02) weights, zero biases, unit gains; residual outputs scaled by 1/sqrt(2L)."""
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / np.sqrt(2 * cfg.n_layers)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf in ("bias", "b1", "b2", "bo"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
            if name.startswith("layer.") and name.endswith(("attn.wo", "ffn.w2")):
                data *= resid_scale
        tensors[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)
    return ModelParams(cfg, tensors)


@dataclass
class ForwardOutput:
    E: Tensor
    predictions: Tensor


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _ffn(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = T.gelu(x @ params[prefix + "w1"] + params[prefix + "b1"])
    return h @ params[prefix + "w2"] + params[prefix + "b2"]


def input_embed(params: ModelParams, coords, training: bool = False, rng=None) -> Tensor:
    """H0 = dropout(FFN(coords)) + W_p[:n]; coords shaped (n, 2) or (batch, n, 2)."""
    x = coords if isinstance(coords, Tensor) else Tensor(coords, dtype=params.dtype)
    n = x.shape[-2]
    if n > params.config.max_seq_len:
        raise CapacityError(f"sequence length {n} exceeds max_seq_len {params.config.max_seq_len}")
    h = T.dropout(_ffn(x, params, "input_ffn."), params.config.dropout_p, training, rng)
    return h + params["pos.wp"][:n]


def masked_multi_head(hn: Tensor, params: ModelParams, layer: int, mask: np.ndarray | None = None) -> Tensor:
    """Causal multi-head self-attention of (batch, n, d) inputs, heads fused into d x d projections."""
    cfg = params.config
    b, n, d = hn.shape
    h, dh = cfg.n_heads, cfg.d_head
    p = f"layer.{layer}.attn."
    mask = causal_mask(n) if mask is None else mask

    def heads(w):
        return (hn @ params[p + w]).reshape(b, n, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    att = T.softmax(scores, mask)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return out @ params[p + "wo"]


def decoder_layer(x: Tensor, params: ModelParams, layer: int, training: bool = False, rng=None,
                  mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm block; the FFN branch normalizes the post-attention residual stream."""
    p = f"layer.{layer}."
    drop = params.config.dropout_p
    hn = T.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
    x = x + T.dropout(masked_multi_head(hn, params, layer, mask), drop, training, rng)
    hn = T.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
    return x + T.dropout(_ffn(hn, params, p + "ffn."), drop, training, rng)


def forward(params: ModelParams, coords, training: bool = False, rng=None) -> ForwardOutput:
    """Run the network; row j of ``predictions`` estimates coordinate j + 1."""
    x = coords if isinstance(coords, Tensor) else Tensor(coords, dtype=params.dtype)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    h = input_embed(params, x, training, rng)
    mask = causal_mask(h.shape[1])
    for l in range(params.config.n_layers):
        h = decoder_layer(h, params, l, training, rng, mask)
    E = T.layer_norm(h, params["final_ln.gain"], params["final_ln.bias"])
    pred = E @ params["output.wo"] + params["output.bo"]
    if squeeze:
        E = E.reshape(E.shape[1:])
        pred = pred.reshape(pred.shape[1:])
    return ForwardOutput(E, pred)


# checkpoints ----------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, params: ModelParams, stats: NormalizationStats | None = None, *,
                    seed: int | None = None, step: int = 0, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write a byte-deterministic zip of ``.npy`` members plus ``meta.json``.

    Readable with ``np.load``. ``extra`` holds additional arrays such as optimizer moments.
    """
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": asdict(params.config),
        "normalization": stats.to_dict() if stats is not None else None,
        "seed": seed,
        "step": int(step),
        "tensors": list(params.tensors),
        "extra": sorted(extra) if extra else [],
        "meta": meta or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(header, indent=1, sort_keys=True).encode())
        arrays = [(k, t.data) for k, t in params.tensors.items()]
        arrays += sorted((extra or {}).items())
        for name, arr in arrays:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            _zip_write(zf, name + ".npy", buf.getvalue())


@dataclass
class Checkpoint:
    params: ModelParams
    stats: NormalizationStats | None
    seed: int | None
    step: int
    extra: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            if header.get("format_version") != CHECKPOINT_FORMAT:
                raise FormatError(f"unsupported checkpoint format {header.get('format_version')!r}")

            def read(name):
                return np.lib.format.read_array(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)

            cfg = ModelConfig(**header["model_config"])
            tensors = {k: Tensor(a, requires_grad=True, name=k, dtype=a.dtype)
                       for k in header["tensors"] for a in [read(k)]}
            extra = {k: read(k) for k in header["extra"]}
    except (KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    expected = param_shapes(cfg)
    if {k: t.shape for k, t in tensors.items()} != expected:
        raise FormatError(f"checkpoint {path} tensors do not match its model config")
    stats = NormalizationStats(**header["normalization"]) if header["normalization"] else None
    return Checkpoint(ModelParams(cfg, tensors), stats, header["seed"], header["step"], extra, header["meta"])
