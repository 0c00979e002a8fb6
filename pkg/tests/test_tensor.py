import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rawmob import tensor as T
from rawmob.errors import ContractError, DimensionError, NonFiniteError
from rawmob.gradcheck import check_gradients
from rawmob.tensor import Tape, Tensor, backward


def t64(a, grad=True, name=None):
    return Tensor(a, requires_grad=grad, name=name, dtype=np.float64)


def assert_grads_ok(f, params, **kw):
    for name, worst, bad in check_gradients(f, params, **kw):
        assert bad == 0, f"{name}: worst abs error {worst}"


# one representative closure per op; all float64 so the 1e-3 step is the only error source
OPS = {
    "add_broadcast": lambda a, b, c: (a + c[0]).sum(),
    "sub": lambda a, b, c: ((a - b) * (a - b)).sum(),
    "mul_broadcast": lambda a, b, c: (a * c[0]).sum(),
    "div_scalar": lambda a, b, c: (a / 3.0 * b).sum(),
    "abs": lambda a, b, c: T.abs_(a).sum(),
    "gelu": lambda a, b, c: (T.gelu(a) * b).sum(),
    "matmul_2d": lambda a, b, c: ((a @ c) * (a @ c)).sum(),
    "matmul_batched": lambda a, b, c: ((a.reshape(3, 2, 2) @ b.reshape(3, 2, 2)) * b.reshape(3, 2, 2)).sum(),
    "transpose": lambda a, b, c: (a.T * c[:, :3]).sum(),
    "reshape": lambda a, b, c: (a.reshape(4, 3) * b.reshape(4, 3)).sum(),
    "getitem": lambda a, b, c: (a[1:, ::2] * a[1:, ::2]).sum() + a[np.array([0, 0, 2]), np.array([1, 1, 3])].sum(),
    "concat": lambda a, b, c: (T.concat([a, b], axis=0) * T.concat([b, a], axis=0)).sum(),
    "sum_axis": lambda a, b, c: (a.sum(axis=1) * a.sum(axis=1)).sum(),
    "mean": lambda a, b, c: (a.mean(axis=0) * b.mean(axis=0)).sum() + a.mean(),
    "softmax": lambda a, b, c: (T.softmax(a) * b).sum(),
    "softmax_masked": lambda a, b, c: (T.softmax(a[:, :3], np.tril(np.ones((3, 3), bool))) * b[:, :3]).sum(),
    "log_softmax": lambda a, b, c: (T.log_softmax(a) * b).sum(),
    "layer_norm": lambda a, b, c: (T.layer_norm(a, c[0], c[1]) * b).sum(),
    "cross_entropy": lambda a, b, c: T.cross_entropy(a * b, np.array([0, 3, 1])),
}


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(5))
def test_op_gradients(op, seed):
    rng = np.random.default_rng(seed)
    a = t64(rng.normal(size=(3, 4)), name="a")
    b = t64(rng.normal(size=(3, 4)), name="b")
    c = t64(rng.normal(size=(4, 4)) + 0.5, name="c")
    params = [a, b, c]
    # keep abs away from its kink
    if op == "abs":
        a.data += np.sign(a.data) * 0.1
    assert_grads_ok(lambda: OPS[op](a, b, c), params)


def test_dropout_gradient_with_fixed_mask():
    a = t64(np.random.default_rng(0).normal(size=(5, 6)))

    def f():
        return (T.dropout(a, 0.3, True, np.random.default_rng(7)) * a).sum()

    assert_grads_ok(f, [a])


def test_dropout_identity_in_eval():
    a = Tensor(np.ones((4, 4)))
    assert np.array_equal(T.dropout(a, 0.5, False).data, a.data)
    assert np.array_equal(T.dropout(a, 0.0, True, np.random.default_rng(0)).data, a.data)


def test_dropout_scales_survivors():
    out = T.dropout(Tensor(np.ones(10000)), 0.25, True, np.random.default_rng(0)).data
    kept = out[out != 0]
    assert np.allclose(kept, 1 / 0.75)
    assert abs(len(kept) / 10000 - 0.75) < 0.02


def test_gelu_matches_math_erf():
    x = np.linspace(-6, 6, 1001)
    ref = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    got = T.gelu(Tensor(x, dtype=np.float64)).data
    assert np.max(np.abs(got - ref)) < 1e-6


def test_erf_approximation_error_bound():
    x = np.linspace(-5, 5, 20001)
    ref = np.array([math.erf(v) for v in x])
    assert np.max(np.abs(T._erf(x.copy()) - ref)) < 1.5e-7


def test_layer_norm_closed_form():
    x = np.array([[1.0, 2.0, 3.0, 6.0]])
    mu, var = 3.0, (4 + 1 + 0 + 9) / 4
    ref = (x - mu) / np.sqrt(var + 1e-5)
    got = T.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(4), dtype=np.float64),
                       Tensor(np.zeros(4), dtype=np.float64)).data
    assert np.allclose(got, ref, atol=1e-12)


def test_softmax_mask_gives_exact_zeros():
    s = T.softmax(Tensor(np.random.default_rng(0).normal(size=(4, 4))), np.tril(np.ones((4, 4), bool))).data
    assert np.all(s[np.triu_indices(4, 1)] == 0.0)
    assert np.allclose(s.sum(-1), 1.0, atol=1e-6)


def test_cross_entropy_hand_value():
    logits = Tensor([[0.0, math.log(3.0)]], dtype=np.float64)
    # p(class 1) = 3/4
    assert T.cross_entropy(logits, [1]).item() == pytest.approx(-math.log(0.75), abs=1e-12)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.floats(-50, 50))
def test_softmax_shift_invariance(xs, c):
    a = np.array(xs)
    s1 = T.softmax(Tensor(a, dtype=np.float64)).data
    s2 = T.softmax(Tensor(a + c, dtype=np.float64)).data
    assert np.allclose(s1, s2, atol=1e-12)
    assert s1.sum() == pytest.approx(1.0, abs=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


def test_incompatible_broadcast_raises():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_rejected_at_the_op():
    with pytest.raises(NonFiniteError):
        Tensor([1e30]) * Tensor([1e30])


def test_backward_needs_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_no_recording_without_grad_inputs():
    with Tape() as tape:
        (Tensor(np.ones(3)) * 2.0).sum()
    assert tape.records == []


def test_gradients_accumulate_until_zeroed():
    w = Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
    for _ in range(2):
        with Tape() as tape:
            loss = (w * w).sum()
        backward(loss, tape)
    assert np.allclose(w.grad, [4.0, 8.0])
    w.zero_grad()
    assert np.all(w.grad == 0)


def test_shared_subexpression_gradient_sums():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = x * x
        loss = (y + y * x).sum()  # 2*x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    backward(loss, tape)
    assert x.grad[0] == pytest.approx(6 + 27)


def test_float32_default_dtype():
    w = Tensor([1.0, 2.0], requires_grad=True)
    assert w.dtype == np.float32 and w.grad.dtype == np.float32
