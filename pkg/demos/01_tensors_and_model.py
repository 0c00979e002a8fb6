"""
Tensors, gradients and the RAW network
======================================

A tour of the building blocks: tape autodiff on numpy arrays, a finite-difference check,
the decoder-only model and its causal mask.
"""

import numpy as np

from rawmob import tensor as T
from rawmob.gradcheck import check_gradients
from rawmob.model import PRESETS, RAW_NANO, count_params, forward, init_params
from rawmob.tensor import Tape, Tensor, backward

# a small computation recorded on a tape
x = Tensor(np.array([[0.5, -1.0, 2.0]]), requires_grad=True, dtype=np.float64, name="x")
w = Tensor(np.array([[1.0], [2.0], [-0.5]]), requires_grad=True, dtype=np.float64, name="w")
with Tape() as tape:
    y = T.gelu(x @ w).sum()
backward(y, tape)
print("y =", y.item())
print("dy/dw =", w.grad.ravel())

# the same gradient by central differences
rows = check_gradients(lambda: T.gelu(x @ w).sum(), [x, w])
for name, worst, bad in rows:
    print(f"gradcheck {name}: worst abs error {worst:.2e}, failures {bad}")

###############################################################################
# Model sizes: the analytic count needs no allocation, so the big presets are cheap to inspect.
for name, cfg in PRESETS.items():
    print(f"{name:11s} L={cfg.n_layers:2d} d={cfg.d_model:4d} h={cfg.n_heads:2d} params={count_params(cfg):,}")

###############################################################################
# A forward pass over 20 normalized coordinates. Position j only sees positions <= j,
# so changing the tail leaves every earlier prediction bit-for-bit unchanged.
params = init_params(RAW_NANO, seed=0)
rng = np.random.default_rng(0)
coords = rng.normal(size=(20, 2))
out = forward(params, coords)
print("predictions", out.predictions.shape, "embeddings", out.E.shape)

changed = coords.copy()
changed[12:] += 5.0
again = forward(params, changed)
print("prefix unchanged:", np.array_equal(out.predictions.data[:12], again.predictions.data[:12]))
print("suffix changed:  ", not np.array_equal(out.predictions.data[12:], again.predictions.data[12:]))
