"""Next-GPS pretraining with teacher forcing, Adam, and greedy rollout."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ContractError, DegenerateBatchError, NonFiniteError, TrainingDivergedError
from .model import ModelParams, forward, save_checkpoint
from .tensor import Tensor
from .trajectory import GriddedTrajectory, NormalizationStats

log = logging.getLogger(__name__)

LOSS_KINDS = ("L1", "MSE")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 16
    total_steps: int = 2000
    grad_clip_norm: float = 1.0
    lr_warmup_steps: int = 100
    seed: int = 0
    loss_kind: str = "L1"

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate, weight_decay must be >= 0 and adam_eps > 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.total_steps < 0 or self.lr_warmup_steps < 0:
            raise ConfigError("batch_size must be >= 1; total_steps and lr_warmup_steps >= 0")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_warmup_steps == 0:
            return self.learning_rate
        return self.learning_rate * min(1.0, (step + 1) / self.lr_warmup_steps)


def decays(name: str) -> bool:
    """Weight decay applies to matrices only, never to biases or layer-norm gains."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("gain", "bias", "b1", "b2", "bo")


class Adam:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: ModelParams | dict[str, Tensor], beta1=0.9, beta2=0.95, eps=1e-8,
                 weight_decay=0.0):
        self.tensors = dict(params.tensors if isinstance(params, ModelParams) else params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.tensors.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and decays(k):
                update += self.weight_decay * p.data
            p.data -= (lr * update).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.tensors:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()
        self.t = t


def clip_grad_norm(tensors: Sequence[Tensor], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64))) for t in tensors)))
    if not np.isfinite(total):
        return total
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for t in tensors:
            t.grad *= scale
    return total


def next_gps_loss(predictions: Tensor, targets: np.ndarray, valid_mask: np.ndarray | None = None,
                  kind: str = "L1") -> Tensor:
    """Mean over valid positions of |dx|+|dy| (L1) or dx^2+dy^2 (MSE), in normalized units."""
    targets = np.asarray(targets, dtype=predictions.dtype)
    if predictions.shape != targets.shape or predictions.shape[-1] != 2:
        raise ContractError(f"prediction shape {predictions.shape} does not match targets {targets.shape}")
    if valid_mask is None:
        valid_mask = np.ones(predictions.shape[:-1], dtype=bool)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    n_valid = int(valid_mask.sum())
    if n_valid == 0:
        raise DegenerateBatchError("no valid positions in batch")
    diff = predictions - targets
    if kind == "L1":
        per = T.abs_(diff).sum(axis=-1)
    elif kind == "MSE":
        per = (diff * diff).sum(axis=-1)
    else:
        raise ConfigError(f"unknown loss kind {kind!r}")
    if n_valid == valid_mask.size:
        return per.mean()
    return (per * valid_mask.astype(predictions.dtype)).sum() * (1.0 / n_valid)


def make_batch(sequences: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays: inputs are points 0..n-2, targets 1..n-1; right-padded with a mask."""
    lengths = [len(s) for s in sequences]
    if min(lengths) < 2:
        raise DegenerateBatchError("every trajectory in a batch needs at least 2 points")
    width = max(lengths) - 1
    inputs = np.zeros((len(sequences), width, 2))
    targets = np.zeros_like(inputs)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for i, s in enumerate(sequences):
        s = np.asarray(s)
        n = len(s) - 1
        inputs[i, :n] = s[:-1]
        targets[i, :n] = s[1:]
        inputs[i, n:] = s[-2]
        targets[i, n:] = s[-1]
        mask[i, :n] = True
    return inputs, targets, mask


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Adam
    config: TrainConfig
    step: int = 0
    data_rng: np.random.Generator = None
    dropout_rng: np.random.Generator = None
    losses: list[float] = field(default_factory=list)
    stats: NormalizationStats | None = None
    last_grad_norm: float = 0.0

    @classmethod
    def create(cls, params: ModelParams, cfg: TrainConfig) -> "TrainState":
        opt = Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
        return cls(params, opt, cfg, 0,
                   np.random.default_rng([cfg.seed, 1]), np.random.default_rng([cfg.seed, 2]))

    def rng_state(self) -> dict:
        return {"data": self.data_rng.bit_generator.state, "dropout": self.dropout_rng.bit_generator.state}


def train_step(state: TrainState, batch: Sequence[np.ndarray]) -> float:
    """One teacher-forced update; returns the batch loss.

    Batch items are normalized (n, 2) arrays, or GriddedTrajectory objects normalized with
    ``state.stats``.
    """
    cfg = state.config
    if any(isinstance(b, GriddedTrajectory) for b in batch):
        if state.stats is None:
            raise ContractError("GriddedTrajectory batches need normalization stats on the train state")
        batch = [state.stats.normalize(b.coords) if isinstance(b, GriddedTrajectory) else b for b in batch]
    inputs, targets, mask = make_batch(batch)
    params = state.params
    params.zero_grad()
    try:
        with T.Tape() as tape:
            out = forward(params, inputs, training=True, rng=state.dropout_rng)
            loss = next_gps_loss(out.predictions, targets, mask, cfg.loss_kind)
        T.backward(loss, tape)
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"step {state.step}: {exc}; max|grad| {_max_grad(params):.3g}") from exc
    tensors = list(params.tensors.values())
    gnorm = clip_grad_norm(tensors, cfg.grad_clip_norm)
    if not np.isfinite(gnorm):
        raise TrainingDivergedError(f"step {state.step}: non-finite gradient norm; max|grad| {_max_grad(params):.3g}")
    lr = cfg.lr_at(state.step)
    if lr > 0:
        state.optimizer.step(lr)
    state.step += 1
    value = loss.item()
    state.losses.append(value)
    state.last_grad_norm = gnorm
    return value


def _max_grad(params: ModelParams) -> float:
    vals = [np.nanmax(np.abs(t.grad)) for _, t in params if t.grad is not None and t.grad.size]
    return float(max(vals)) if vals else float("nan")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - n % batch_size if n >= batch_size else n, batch_size if n >= batch_size else n):
            yield order[i:i + batch_size]


def pretrain(params: ModelParams, sequences: Sequence[np.ndarray], cfg: TrainConfig, *,
             stats: NormalizationStats | None = None, log_path=None, checkpoint_dir=None,
             checkpoint_every: int = 0, state: TrainState | None = None) -> TrainState:
    """Run ``cfg.total_steps`` updates over normalized sequences, sampling epochs without replacement.

    The log gets one JSON line per step: step, loss, lr, grad_norm, wall_ms.
    """
    if not sequences:
        raise DegenerateBatchError("no training sequences")
    state = state or TrainState.create(params, cfg)
    state.stats = state.stats or stats
    log_file = open(log_path, "a" if state.step else "w") if log_path else None
    batches = _batches(len(sequences), cfg.batch_size, state.data_rng)
    try:
        while state.step < cfg.total_steps:
            idx = next(batches)
            t0 = time.perf_counter()
            lr = cfg.lr_at(state.step)
            loss = train_step(state, [sequences[i] for i in idx])
            wall_ms = (time.perf_counter() - t0) * 1000.0
            if log_file:
                rec = {"step": state.step, "loss": loss, "lr": lr, "grad_norm": state.last_grad_norm,
                       "wall_ms": round(wall_ms, 3)}
                log_file.write(json.dumps(rec) + "\n")
            if state.step % 100 == 0:
                log.info("step %d loss %.5f lr %.2e", state.step, loss, lr)
            if checkpoint_dir and checkpoint_every and state.step % checkpoint_every == 0:
                write_train_checkpoint(Path(checkpoint_dir) / f"step_{state.step:06d}.ckpt", state, stats)
    finally:
        if log_file:
            log_file.close()
    return state


def write_train_checkpoint(path, state: TrainState, stats: NormalizationStats | None) -> None:
    save_checkpoint(path, state.params, stats, seed=state.config.seed, step=state.step,
                    extra=state.optimizer.state_arrays(),
                    meta={"train_config": asdict(state.config), "rng_state": state.rng_state(),
                          "reduction": "whole batch as one array op; single process, fixed order"})


def evaluate_loss(params: ModelParams, sequences: Sequence[np.ndarray], kind: str = "L1",
                  batch_size: int = 64) -> float:
    """Eval-mode next-GPS loss averaged over all valid positions."""
    total, count = 0.0, 0
    for i in range(0, len(sequences), batch_size):
        inputs, targets, mask = make_batch(sequences[i:i + batch_size])
        pred = forward(params, inputs).predictions
        n = int(mask.sum())
        total += next_gps_loss(pred, targets, mask, kind).item() * n
        count += n
    return total / count


def rollout_normalized(params: ModelParams, prompts: np.ndarray, n_future: int) -> np.ndarray:
    """Greedy generation for a (batch, n, 2) block of equal-length normalized prompts."""
    prompts = np.asarray(prompts, dtype=params.dtype)
    squeeze = prompts.ndim == 2
    seq = prompts[None] if squeeze else prompts
    if seq.shape[1] + n_future > params.config.max_seq_len:
        raise CapacityError(f"prompt {seq.shape[1]} + {n_future} future steps exceeds max_seq_len "
                            f"{params.config.max_seq_len}")
    out = np.empty((seq.shape[0], n_future, 2), dtype=params.dtype)
    for j in range(n_future):
        nxt = forward(params, seq).predictions.data[:, -1]
        out[:, j] = nxt
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out[0] if squeeze else out


def rollout(params: ModelParams, prompt: GriddedTrajectory, n_future: int,
            stats: NormalizationStats) -> np.ndarray:
    """Predict ``n_future`` grid points after ``prompt``; returns (n_future, 2) lon/lat."""
    if n_future == 0:
        return np.empty((0, 2))
    pred = rollout_normalized(params, stats.normalize(prompt.coords), n_future)
    return stats.denormalize(pred.astype(np.float64))
