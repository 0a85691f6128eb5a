import numpy as np
import pytest

from adamshap.attribution import (
    AllocationAccountant,
    AttributionLedger,
    GhostCoefficients,
    ValGradient,
    adam_exact_scores,
    adam_ghost_scores,
    adam_taylor_scores,
    ghost_pairwise_dot,
    ghost_weighted_dot,
    sgd_inrun_scores,
)
from adamshap.model import BatchTrace, ModelSpec, backward_with_trace
from adamshap.numerics import DimensionError, Rng, pearson
from adamshap.optim import Adam

from conftest import random_instance


def setup(seed, batch=8, n_val=3, dims=None, steps=5, **kw):
    spec, theta, X, y = random_instance(seed, batch=batch + n_val, dims=dims, **kw)
    Xb, yb, Xv, yv = X[:batch], y[:batch], X[batch:], y[batch:]
    grad, trace = backward_with_trace(spec, theta, Xb, yb)
    val = ValGradient.compute(spec, theta, Xv, yv)
    opt = Adam(1e-3)
    rng = Rng(seed, 99)
    w = theta.copy()
    for t in range(steps):
        w = opt.step(w, 0.1 * rng.child(t).gaussian(spec.n_params))
    return spec, theta, trace, val, opt


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def test_pairwise_hand_case():
    trace = BatchTrace([np.array([[1.0, 2.0]])], [np.array([[3.0]])], np.zeros(1), bias=False)
    vtrace = BatchTrace([np.array([[0.0, 1.0]])], [np.array([[2.0]])], np.zeros(1), bias=False)
    val = ValGradient(np.array([0.0, 2.0]), vtrace)
    assert ghost_pairwise_dot(trace, val)[0] == 12.0
    assert np.sum(np.array([3.0, 6.0]) * val.grad) == 12.0


def test_self_inner_product():
    spec, theta, X, y = random_instance(4, batch=6)
    _, trace = backward_with_trace(spec, theta, X, y)
    val = ValGradient.compute(spec, theta, X[2:3], y[2:3])
    G = trace.per_sample_gradients()
    assert ghost_pairwise_dot(trace, val)[2] == pytest.approx(G[2] @ G[2], rel=1e-12)


def test_ghost_identity_hundred_instances():
    worst = 0.0
    for seed in range(100):
        batch = 1 + seed % 16
        spec, theta, trace, val, _ = setup(seed, batch=batch, steps=0)
        G = trace.per_sample_gradients()
        worst = max(worst, rel_err(ghost_pairwise_dot(trace, val), G @ val.grad))
        u = Rng(seed, 7).gaussian(spec.n_params)
        worst = max(worst, rel_err(ghost_weighted_dot(trace, u), G @ u))
    assert worst <= 1e-10


def test_weighted_dot_consistency_and_null():
    spec, theta, trace, val, _ = setup(1, dims=[4, 7, 5, 3])
    assert rel_err(ghost_weighted_dot(trace, val.grad), ghost_pairwise_dot(trace, val)) <= 1e-10
    assert np.all(ghost_weighted_dot(trace, np.zeros(spec.n_params)) == 0.0)
    with pytest.raises(DimensionError):
        ghost_weighted_dot(trace, np.zeros(spec.n_params + 1))


def test_architecture_mismatch():
    spec, theta, trace, _, _ = setup(1, dims=[4, 7, 3])
    spec2, theta2, X2, y2 = random_instance(2, dims=[4, 6, 3])
    with pytest.raises(DimensionError):
        ghost_pairwise_dot(trace, ValGradient.compute(spec2, theta2, X2, y2))


def test_sgd_scores():
    spec, theta, trace, val, _ = setup(3)
    G = trace.per_sample_gradients()
    assert np.all(sgd_inrun_scores(trace, val, 0.0) == 0.0)
    np.testing.assert_allclose(sgd_inrun_scores(trace, val, 0.1), -0.1 / 8 * (G @ val.grad),
                               rtol=1e-10)


def test_sgd_orthogonal_gradients_score_zero():
    spec = ModelSpec((2, 1), "identity", "mse", bias=False)
    _, trace = backward_with_trace(spec, np.zeros(2), [[1.0, 0.0]], [[-1.0]])
    val = ValGradient.compute(spec, np.zeros(2), [[0.0, 1.0]], [[-1.0]])
    assert sgd_inrun_scores(trace, val, 0.5)[0] == 0.0


def test_ghost_coefficients():
    opt = Adam(1e-3)
    w = np.zeros(6)
    for t in range(3):
        w = opt.step(w, Rng(0, t).gaussian(6))
    c = GhostCoefficients.from_optimizer(opt)
    g = Rng(1).gaussian(6)
    m, v, t = opt.moments_after(g)
    m_hat, _ = opt.corrected(m, v, t)
    np.testing.assert_allclose(c.first_moment(g), m_hat, rtol=1e-12, atol=0)
    assert np.all(c.A >= opt.eps)
    np.testing.assert_allclose(c.A, np.sqrt(opt.v / (1 - 0.999**3)) + 1e-8, rtol=1e-15)
    raw = Adam(1e-3, bias_correction=False)
    raw.step(np.zeros(6), g)
    rc = GhostCoefficients.from_optimizer(raw)
    assert (rc.c_m1, rc.c_m2, rc.c_v) == (0.9, 1 - 0.9, 1 - 0.999)


def straight_line_exact(G, g_val, m_prev, v_prev, t_prev, lr, B, b1=0.9, b2=0.999, eps=1e-8):
    out = []
    t = t_prev + 1
    for g in G:
        gh = g / B
        m = b1 * m_prev + (1 - b1) * gh
        v = b2 * v_prev + (1 - b2) * gh**2
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        out.append(-lr * sum(g_val[k] * mh[k] / (vh[k] ** 0.5 + eps) for k in range(len(g))))
    return np.array(out)


@pytest.mark.parametrize("seed", range(5))
def test_adam_exact_matches_straight_line(seed):
    spec, theta, trace, val, opt = setup(seed, steps=4)
    G = trace.per_sample_gradients()
    ref = straight_line_exact(G, val.grad, opt.m, opt.v, opt.t, 1e-3, 8)
    assert rel_err(adam_exact_scores(G, val, opt, 1e-3, 8), ref) <= 1e-12


def test_adam_exact_hand_scalar():
    spec = ModelSpec((1, 1), "identity", "mse", bias=False)
    trace = BatchTrace([np.array([[1.0]])], [np.array([[0.5]])], np.zeros(1), bias=False)
    val = ValGradient(np.array([1.0]), trace)
    score = adam_exact_scores(trace.per_sample_gradients(), val, Adam(0.1), 0.1, 1)
    assert score[0] == pytest.approx(-0.1 * 0.5 / (0.5 + 1e-8), rel=1e-14)
    assert score[0] == pytest.approx(-0.1, abs=1e-8)
    assert adam_exact_scores(np.zeros((1, 1)), val, Adam(0.1), 0.1, 1)[0] == 0.0


def test_ghost_reduces_to_rescaled_sgd():
    spec, theta, trace, val, _ = setup(6, steps=0)
    opt = Adam(1e-3, beta1=0.0, eps=1e6)
    coeffs = GhostCoefficients.from_optimizer(opt, spec.n_params)
    ghost = adam_ghost_scores(trace, val, coeffs, 1e-3)
    sgd = sgd_inrun_scores(trace, val, 1e-3)
    ratio = ghost / sgd
    assert np.max(np.abs(ratio - ratio[0])) <= 1e-9 * abs(ratio[0])
    assert ratio[0] == pytest.approx(coeffs.c_m2 / 1e6, rel=1e-12)


def test_zero_gradient_sample_gets_history_term():
    spec, theta, trace, val, opt = setup(8, steps=6)
    errors = [e.copy() for e in trace.errors]
    for e in errors:
        e[3] = 0.0
    zeroed = BatchTrace(trace.activations, errors, trace.losses, trace.bias)
    coeffs = GhostCoefficients.from_optimizer(opt)
    history = -1e-3 * val.grad @ (coeffs.c_m1 * coeffs.m_prev / coeffs.A)
    scores = adam_ghost_scores(zeroed, val, coeffs, 1e-3)
    assert scores[3] == pytest.approx(history, rel=1e-12)
    no_hist = adam_ghost_scores(zeroed, val, coeffs, 1e-3, include_history=False)
    assert no_hist[3] == 0.0
    np.testing.assert_allclose(scores - no_hist, history, rtol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_freezing_second_moment_isolates_linearization(seed):
    spec, theta, trace, val, opt = setup(seed, steps=1 + seed)
    coeffs = GhostCoefficients.from_optimizer(opt)
    G = trace.per_sample_gradients()
    frozen = adam_exact_scores(G, val, opt, 1e-3, 8, freeze_second_moment=True)
    ghost = adam_ghost_scores(trace, val, coeffs, 1e-3, 8)
    assert rel_err(ghost, frozen) <= 1e-9
    assert rel_err(adam_taylor_scores(G, val, coeffs, 1e-3, 8), ghost) <= 1e-9


def perturbation_model_scores(G, g_val, coeffs, lr, B):
    """Score under the perturbed second moment v_hat_prev + c_v g_hat^2."""
    out = []
    v_hat_prev = coeffs.v_prev * coeffs.v_scale
    for g in G:
        gh = g / B
        denom = np.sqrt(v_hat_prev + coeffs.c_v * gh**2) + coeffs.eps
        out.append(-lr * g_val @ ((coeffs.c_m1 * coeffs.m_prev + coeffs.c_m2 * gh) / denom))
    return np.array(out)


@pytest.mark.parametrize("seed", range(3))
def test_taylor_remainder_shrinks_with_gradient_scale(seed):
    spec, theta, trace, val, opt = setup(12 + seed, steps=3)
    G = trace.per_sample_gradients()
    coeffs = GhostCoefficients.from_optimizer(opt)
    gaps = []
    # Past the pre-asymptotic wobble the remainder is second order in lam.
    for lam in 2.0 ** -np.arange(5, 9):
        scaled = BatchTrace(trace.activations, [e * lam for e in trace.errors], trace.losses, trace.bias)
        gaps.append(np.abs(adam_ghost_scores(scaled, val, coeffs, 1e-3, 8)
                           - perturbation_model_scores(G * lam, val.grad, coeffs, 1e-3, 8)))
    for k in range(1, 4):
        assert np.all(gaps[k] <= gaps[k - 1] * 0.5 + 1e-18)


def test_quadratic_correction_matches_expansion():
    spec, theta, trace, val, opt = setup(13, steps=5)
    G = trace.per_sample_gradients()
    c = GhostCoefficients.from_optimizer(opt)
    quad = adam_taylor_scores(G, val, c, 1e-3, 8, keep_quadratic=True)
    lin = adam_taylor_scores(G, val, c, 1e-3, 8)
    correction = np.array([1e-3 * val.grad @ (c.c_v * (g / 8) ** 2 / (2 * c.A**3) * c.first_moment(g / 8))
                           for g in G])
    np.testing.assert_allclose(quad, lin + correction, rtol=1e-10)


def test_ghost_memory_stays_per_sample_sized():
    spec = ModelSpec((32, 256, 256, 256, 2))
    rng = Rng(0)
    theta = spec.init_params(rng)
    X = rng.child(1).gaussian((64, 32))
    y = (rng.child(2).uniform(64) < 0.5).astype(int)
    _, trace = backward_with_trace(spec, theta, X, y)
    val = ValGradient.compute(spec, theta, X[:1], y[:1])
    opt = Adam(1e-3)
    opt.step(theta, 0.01 * rng.child(3).gaussian(spec.n_params))
    acct = AllocationAccountant()
    adam_ghost_scores(trace, val, GhostCoefficients.from_optimizer(opt), 1e-3, accountant=acct)
    assert acct.peak < 2 * 64 * 256 * 8
    assert acct.largest < 64 * spec.n_params * 8
    direct = AllocationAccountant()
    G = direct.alloc(trace.per_sample_gradients())
    adam_exact_scores(G, val, opt, 1e-3, accountant=direct)
    assert direct.peak >= 64 * spec.n_params * 8


def test_ledger():
    led = AttributionLedger(4)
    s = np.array([0.5, -1.0, 2.0])
    led.accumulate(0, "adam_ghost", [0, 1, 2], s)
    led.accumulate(1, "adam_ghost", [0, 1, 2], -s)
    assert np.all(led.totals("adam_ghost") == 0.0)
    for t in range(10):
        led.accumulate(t, "sgd_first_order", [3], [0.25])
    assert led.totals("sgd_first_order")[3] == pytest.approx(2.5)
    led.accumulate(11, "adam_ghost", [3, 3], [1.0, 2.0])
    assert led.totals("adam_ghost")[3] == 3.0 and led.totals("sgd_first_order")[3] == 2.5
    for m in led.methods:
        np.testing.assert_allclose(led.replay(m), led.totals(m), atol=1e-12)
    assert led.n_steps == 11
    with pytest.raises(KeyError):
        led.accumulate(0, "adam_ghost", [4], [1.0])
