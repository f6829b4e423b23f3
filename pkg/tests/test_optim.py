import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradlayer.optim import (Adam, NonFiniteGradient, RMSProp, SGDMomentum, init_state,
                             make_settings, step)


def run(settings_, grads, p0=None):
    grads = [np.atleast_1d(np.asarray(g, dtype=float)) for g in grads]
    p = np.zeros_like(grads[0]) if p0 is None else np.asarray(p0, dtype=float)
    state = init_state(settings_, p.size)
    for g in grads:
        p, state = step(state, p, g)
    return p, state


def test_adam_first_step_is_minus_alpha_sign():
    p, state = run(Adam(alpha=0.1, beta1=0.5, beta2=0.9, eps=1e-8), [[2.0]])
    assert abs(p[0] - (-0.1 * 2.0 / (2.0 + 1e-8))) <= 1e-15
    assert abs(p[0] + 0.1) <= 1e-8
    assert state.step_count == 1


@pytest.mark.parametrize("opt", [Adam(), RMSProp(), SGDMomentum()])
def test_zero_gradient_leaves_params(opt):
    p0 = np.array([1.0, -2.0, 3.5])
    p, state = run(opt, [np.zeros(3)] * 3, p0)
    np.testing.assert_array_equal(p, p0)
    assert state.step_count == 3


def test_momentum_two_steps_constant_gradient():
    # v1 = 1, v2 = 0.9 * 1 + 1 = 1.9
    p, _ = run(SGDMomentum(lr=0.1, momentum=0.9), [[1.0], [1.0]])
    assert p[0] == pytest.approx(-0.1 * (1 + 1.9), abs=1e-15)


def test_rmsprop_first_step():
    # s = 0.1 g^2, step = lr g / (sqrt(0.1) |g| + eps)
    p, _ = run(RMSProp(lr=0.01, decay=0.9, eps=0.0), [[3.0]])
    assert p[0] == pytest.approx(-0.01 / np.sqrt(0.1), rel=1e-14)


def test_length_mismatch_and_nonfinite():
    state = init_state(Adam(), 3)
    with pytest.raises(ValueError):
        step(state, np.zeros(3), np.zeros(2))
    with pytest.raises(NonFiniteGradient) as err:
        step(state, np.zeros(3), np.array([0.0, 1.0, np.nan]))
    assert err.value.index == 2


def test_replay_from_saved_state_is_bit_exact(rng):
    grads = rng.standard_normal((20, 5))
    opt = Adam(alpha=1e-2)
    p, state = np.zeros(5), init_state(opt, 5)
    for g in grads[:10]:
        p, state = step(state, p, g)
    saved_p, saved_state = p, state
    for g in grads[10:]:
        p, state = step(state, p, g)
    q, s2 = saved_p, saved_state
    for g in grads[10:]:
        q, s2 = step(s2, q, g)
    assert p.tobytes() == q.tobytes()
    assert s2.step_count == state.step_count == 20


def test_step_does_not_mutate_inputs(rng):
    p = rng.standard_normal(4)
    g = rng.standard_normal(4)
    state = init_state(Adam(), 4)
    p_copy, m_copy = p.copy(), state.moments[0].copy()
    step(state, p, g)
    np.testing.assert_array_equal(p, p_copy)
    np.testing.assert_array_equal(state.moments[0], m_copy)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([-1.0, 1.0]), min_size=1, max_size=40),
       st.floats(0.01, 100.0))
def test_adam_step_bounded_by_alpha_for_constant_magnitude(signs, mag):
    opt = Adam(alpha=1e-3, beta1=0.5, beta2=0.9, eps=1e-8)
    p, state = np.zeros(1), init_state(opt, 1)
    for s in signs:
        new, state = step(state, p, [s * mag])
        assert abs(new[0] - p[0]) <= opt.alpha * (1 + 1e-12)
        p = new


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10.0, 10.0, allow_nan=False), min_size=1, max_size=30))
def test_adam_step_within_cauchy_schwarz_bound(gs):
    # m_hat = sum w_i g_i, v_hat = sum u_i g_i^2 with both weight sets summing to
    # one, so |m_hat| / sqrt(v_hat) <= sqrt(sum w_i^2 / u_i).
    opt = Adam(alpha=1e-3, beta1=0.5, beta2=0.9, eps=1e-8)
    b1, b2 = opt.beta1, opt.beta2
    p, state = np.zeros(1), init_state(opt, 1)
    for t, g in enumerate(gs, start=1):
        new, state = step(state, p, [g])
        ages = np.arange(t)[::-1]
        w = (1 - b1) * b1 ** ages / (1 - b1 ** t)
        u = (1 - b2) * b2 ** ages / (1 - b2 ** t)
        bound = opt.alpha * np.sqrt(np.sum(w * w / u))
        assert abs(new[0] - p[0]) <= bound * (1 + 1e-9) + 1e-300
        p = new


def test_adam_can_exceed_alpha_after_quiet_history():
    # documents why the bound above is not simply alpha
    opt = Adam(alpha=1.0, beta1=0.5, beta2=0.9, eps=0.0)
    p, _ = run(opt, [[1e-3]] * 30 + [[1.0]])
    q, _ = run(opt, [[1e-3]] * 30)
    assert abs(p[0] - q[0]) > 1.4


def test_make_settings():
    assert make_settings("adam", alpha=1e-4) == Adam(alpha=1e-4)
    with pytest.raises(ValueError):
        make_settings("lbfgs")
