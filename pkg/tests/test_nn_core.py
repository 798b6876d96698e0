import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amalgam.nn_core import (
    PROB_EPS,
    ContractViolation,
    DropoutMask,
    ModelSpec,
    OptimizerState,
    backward,
    dumps_checkpoint,
    entropy,
    forward,
    init_params,
    loads_checkpoint,
    optimizer_step,
    param_layout,
    softmax,
    unflatten,
    weighted_kl_loss,
)

# frozen from tests/oracles/derive_frozen.py
SOFTMAX_1_0 = (0.731058578630, 0.268941421370)
ENTROPY_09_01 = 0.325082973391
KL_ONEHOT_HALF = 0.693147180560
ADAM_FIRST_STEP = -0.000999999990


def fd_gradient(f, params, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(params)
    for j in range(params.size):
        up, down = params.copy(), params.copy()
        up[j] += h
        down[j] -= h
        g[j] = (f(up) - f(down)) / (2 * h)
    return g


def rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


# -- forward ------------------------------------------------------------------

def test_zero_weights_give_zero_logits():
    spec = ModelSpec(5, (7, 3), 4)
    x = np.random.default_rng(0).normal(size=(6, 5))
    assert np.all(forward(spec, np.zeros(spec.num_params), x) == 0)


def test_rate_zero_mask_matches_deterministic():
    spec = ModelSpec(4, (8, 8), 3, dropout_rate=0.0)
    rng = np.random.default_rng(1)
    params = init_params(spec, rng)
    x = rng.normal(size=(10, 4))
    mask = DropoutMask.sample(spec, rng, (10,))
    assert np.array_equal(forward(spec, params, x, mask), forward(spec, params, x))


def test_forward_is_repeatable():
    spec = ModelSpec(4, (8,), 3)
    params = init_params(spec, np.random.default_rng(2))
    x = np.random.default_rng(3).normal(size=(5, 4))
    a = forward(spec, params, x, DropoutMask.sample(spec, np.random.default_rng(9), (5,)))
    b = forward(spec, params, x, DropoutMask.sample(spec, np.random.default_rng(9), (5,)))
    assert np.array_equal(a, b)


def test_width_mismatch_names_layer():
    spec = ModelSpec(4, (8,), 3)
    with pytest.raises(ContractViolation, match="layer 0"):
        forward(spec, np.zeros(spec.num_params), np.zeros((2, 5)))


def test_mask_entries():
    spec = ModelSpec(3, (1000,), 2, dropout_rate=0.2)
    m = DropoutMask.sample(spec, np.random.default_rng(0)).layers[0]
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.8}
    assert 0.7 < np.mean(m > 0) < 0.9


def test_layout_is_contiguous():
    spec = ModelSpec(3, (4, 5), 2)
    spans = param_layout(spec)
    assert spans[0].start == 0 and spans[-1].stop == spec.num_params
    assert all(a.stop == b.start for a, b in zip(spans, spans[1:]))
    assert [w.shape for w, _ in unflatten(spec, np.zeros(spec.num_params))] == [(3, 4), (4, 5), (5, 2)]


# -- softmax / entropy ----------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    big = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0)
    assert np.allclose(softmax([1.0, 0.0]), SOFTMAX_1_0, atol=1e-9)


def test_entropy_examples():
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2))
    assert entropy([1.0, 0.0]) == 0.0
    assert entropy([0.9, 0.1]) == pytest.approx(ENTROPY_09_01, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(arrays(float, st.integers(2, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(z):
    p = softmax(z)
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)
    assert np.allclose(softmax(z + 3.7), p)
    assert 0 <= entropy(p) <= math.log(z.size) + 1e-12


# -- weighted KL ------------------------------------------------------------------

def test_kl_examples():
    loss, grad = weighted_kl_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert loss == pytest.approx(KL_ONEHOT_HALF, abs=1e-9)
    p = np.array([[0.2, 0.3, 0.5]])
    loss, grad = weighted_kl_loss(p, p)
    assert loss[0] == pytest.approx(0.0, abs=1e-15) and np.allclose(grad, 0)
    q = np.array([[0.6, 0.3, 0.1]])
    loss, grad = weighted_kl_loss(p, q, weight=np.array([0.0]))
    assert loss[0] == 0 and np.all(grad == 0)


def test_kl_clamps_zero_student():
    loss, _ = weighted_kl_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    assert np.isfinite(loss)
    assert loss == pytest.approx(0.5 * math.log(0.5 / 1.0) + 0.5 * math.log(0.5 / PROB_EPS))


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_kl_gradient_finite_differences(direction):
    rng = np.random.default_rng(4)
    for _ in range(50):
        k = rng.integers(2, 7)
        z = rng.normal(size=k)
        t = softmax(rng.normal(size=k) * 2)
        w = rng.uniform(0.1, 2.0)
        _, g = weighted_kl_loss(softmax(z), t, w, direction)
        fd = fd_gradient(lambda zz: float(weighted_kl_loss(softmax(zz), t, w, direction)[0]), z)
        assert rel_error(g, fd) < 1e-4 or np.max(np.abs(g - fd)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_kl_non_negative(k, seed):
    rng = np.random.default_rng(seed)
    s, t = softmax(rng.normal(size=k) * 3), softmax(rng.normal(size=k) * 3)
    for d in ("forward", "reverse"):
        assert weighted_kl_loss(s, t, 1.0, d)[0] >= -1e-12


# -- backward -------------------------------------------------------------------------

def test_backward_zero_upstream():
    spec = ModelSpec(3, (5,), 2)
    params = init_params(spec, np.random.default_rng(0))
    assert np.all(backward(spec, params, np.ones((4, 3)), None, np.zeros((4, 2))) == 0)


def test_single_linear_layer_closed_form():
    spec = ModelSpec(3, (), 2)
    rng = np.random.default_rng(0)
    params, x, up = rng.normal(size=spec.num_params), rng.normal(size=3), rng.normal(size=2)
    (gW, gb), = unflatten(spec, backward(spec, params, x, None, up))
    assert np.allclose(gW, np.outer(x, up))
    assert np.allclose(gb, up)


def _random_case(rng):
    act = ("relu", "tanh")[rng.integers(2)]
    spec = ModelSpec(int(rng.integers(2, 6)), (int(rng.integers(2, 7)), int(rng.integers(2, 7))),
                     int(rng.integers(2, 5)), dropout_rate=0.3, activation=act)
    params = init_params(spec, rng) + rng.normal(scale=0.1, size=spec.num_params)
    n = int(rng.integers(1, 4))
    x = rng.normal(size=(n, spec.input_dim))
    mask = DropoutMask.sample(spec, rng, (n,)) if rng.random() < 0.5 else None
    up = rng.normal(size=(n, spec.num_classes))
    return spec, params, x, mask, up


def _relu_kink_near(spec, params, x, mask, h=1e-5):
    """True when a ReLU pre-activation is so close to 0 that differences straddle it."""
    if spec.activation != "relu":
        return False
    layers = unflatten(spec, params)
    a = x
    for i, (W, b) in enumerate(layers[:-1]):
        z = a @ W + b
        if np.min(np.abs(z)) < 1e-3:
            return True
        a = np.maximum(z, 0) * (mask.layers[i] if mask is not None else 1)
    return False


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 120:
        spec, params, x, mask, up = _random_case(rng)
        if _relu_kink_near(spec, params, x, mask):
            continue
        g = backward(spec, params, x, mask, up)
        fd = fd_gradient(lambda p: float(np.sum(forward(spec, p, x, mask) * up)), params)
        assert rel_error(g, fd) < 1e-4 or np.max(np.abs(g - fd)) < 1e-8, spec
        checked += 1


def test_backward_with_pass_dimension():
    spec = ModelSpec(3, (6,), 2, dropout_rate=0.4)
    rng = np.random.default_rng(1)
    params = init_params(spec, rng)
    x = rng.normal(size=(5, 3))
    mask = DropoutMask.sample(spec, rng, (4, 5))
    up = rng.normal(size=(4, 5, 2))
    total = sum(
        backward(spec, params, x, DropoutMask(tuple(m[k] for m in mask.layers), mask.keep_prob), up[k])
        for k in range(4)
    )
    assert np.allclose(backward(spec, params, x, mask, up), total)


# -- optimizer ----------------------------------------------------------------------

def test_sgd_step():
    p = np.array([1.0])
    optimizer_step(OptimizerState("sgd", 0.1), p, np.array([1.0]))
    assert p[0] == pytest.approx(0.9)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_params(kind):
    p = np.array([1.0, -2.0])
    optimizer_step(OptimizerState(kind), p, np.zeros(2))
    assert np.array_equal(p, [1.0, -2.0])


def test_adam_first_step():
    p = np.array([0.0])
    optimizer_step(OptimizerState("adam", 1e-3), p, np.array([1.0]))
    assert p[0] == pytest.approx(ADAM_FIRST_STEP, abs=1e-15)


def test_non_finite_gradient_names_span():
    spec = ModelSpec(2, (3,), 2)
    g = np.zeros(spec.num_params)
    g[spec.num_params - 1] = np.nan
    with pytest.raises(FloatingPointError, match="layer 1 b"):
        optimizer_step(OptimizerState(), np.zeros(spec.num_params), g, spec)


# -- checkpoints --------------------------------------------------------------------------

def test_checkpoint_round_trip_is_exact():
    spec = ModelSpec(4, (5, 3), 3, 0.25, "tanh")
    params = init_params(spec, np.random.default_rng(7))
    text = dumps_checkpoint(spec, params)
    spec2, params2 = loads_checkpoint(text)
    assert spec2 == spec and np.array_equal(params2, params)
    assert dumps_checkpoint(spec2, params2) == text


def test_checkpoint_bad_header():
    spec = ModelSpec(2, (2,), 2)
    text = dumps_checkpoint(spec, np.zeros(spec.num_params)).replace("v1", "v9", 1)
    with pytest.raises(ValueError, match="line 1"):
        loads_checkpoint(text)
