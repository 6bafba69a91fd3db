import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from samba.envs import (
    CartPoleDoubleParams, PendulumParams, SafeCartPoleDoublePendulum, SafePendulum, SafetySpec,
    cartpole_double_cost, cartpole_double_derivative, cartpole_double_energy, cartpole_double_step,
    default_safety_scale, is_violation, make_env, pendulum_accel, pendulum_cost, pendulum_energy,
    pendulum_step, read_trajectories_csv, rk4_step, safety_loss, should_terminate, wrap_angle,
    write_trajectories_csv,
)

DEG = math.pi / 180.0
SPEC = SafetySpec()


# ---------------------------------------------------------------------------
# safety spec


def test_spec_regions():
    assert SPEC.usr_min == pytest.approx(20 * DEG)
    assert SPEC.usr_max == pytest.approx(30 * DEG)
    assert SPEC.hz_min == pytest.approx(20 * DEG - math.pi / 4)
    assert SPEC.hz_max == pytest.approx(30 * DEG + math.pi / 4)
    assert SPEC.hz_min < SPEC.usr_min < SPEC.usr_max < SPEC.hz_max


def test_spec_validation():
    with pytest.raises(ValueError):
        SafetySpec(0.5, 0.4)
    with pytest.raises(ValueError):
        SafetySpec(scale=0.0)


def test_default_scale_normalizes_pinned_trajectory():
    scale = default_safety_scale(0.99, 30)
    assert sum(0.99**t * scale for t in range(30)) == pytest.approx(1.0)


def test_safety_loss_edges_and_centre():
    assert safety_loss(SPEC.hz_min, SPEC) == pytest.approx(0.0, abs=1e-15)
    assert safety_loss(SPEC.hz_max, SPEC) == pytest.approx(0.0, abs=1e-15)
    assert safety_loss(SPEC.centre, SPEC) == pytest.approx(SPEC.scale)


def test_safety_loss_at_usr_min():
    # centre 25 deg, half width 5 deg + 45 deg = 50 deg; 20 deg is 5 deg off centre
    expected = SPEC.scale * (1.0 - (5.0 * DEG) / (50.0 * DEG))
    assert safety_loss(20 * DEG, SPEC) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.9 * SPEC.scale)


def test_safety_loss_zero_outside_hazard():
    thetas = np.concatenate([np.linspace(-math.pi, SPEC.hz_min, 50), np.linspace(SPEC.hz_max, math.pi, 50)])
    assert np.all(safety_loss(thetas, SPEC) == 0.0)


def test_safety_loss_continuity():
    th = np.linspace(-math.pi, math.pi, 200_001)
    dth = th[1] - th[0]
    jumps = np.abs(np.diff(safety_loss(th, SPEC)))
    assert jumps.max() <= SPEC.scale * dth / SPEC.half_width * (1 + 1e-9)


def test_violation_flags():
    assert is_violation(25 * DEG, SPEC)
    assert not is_violation(0.0, SPEC)
    assert is_violation(SPEC.usr_max, SPEC)
    assert is_violation(SPEC.usr_min, SPEC)
    assert not is_violation(SPEC.usr_max + 1e-9, SPEC)


@settings(max_examples=200, deadline=None)
@given(st.floats(-math.pi, math.pi))
def test_violation_implies_positive_loss(theta):
    if is_violation(theta, SPEC):
        assert safety_loss(theta, SPEC) > 0
    assert safety_loss(theta, SPEC) >= 0


def test_termination_rule():
    assert should_terminate([0.005] * 5)
    assert not should_terminate([0.005, 0.005, 0.005, 0.005, 0.02])
    assert not should_terminate([0.001] * 4)
    assert should_terminate([3.0, 2.0, 0.01, 0.01, 0.0, 0.01, 0.01])


# ---------------------------------------------------------------------------
# pendulum


def test_wrap_angle_range():
    th = np.linspace(-20, 20, 1001)
    w = wrap_angle(th)
    assert np.all(w >= -math.pi) and np.all(w < math.pi)
    np.testing.assert_allclose(np.sin(w), np.sin(th), atol=1e-12)


def test_pendulum_upright_fixed_point():
    np.testing.assert_array_equal(pendulum_step(np.array([0.0, 0.0]), 0.0), [0.0, 0.0])


def test_pendulum_hanging_fixed_point():
    s = pendulum_step(np.array([math.pi, 0.0]), 0.0)
    assert abs(abs(s[0]) - math.pi) < 1e-12 and abs(s[1]) < 1e-12


def test_pendulum_torque_and_speed_clipped():
    p = PendulumParams()
    a = pendulum_step(np.array([1.0, 0.0]), 100.0)
    b = pendulum_step(np.array([1.0, 0.0]), 2.0)
    np.testing.assert_array_equal(a, b)
    s = pendulum_step(np.array([0.1, 7.99]), 2.0)
    assert s[1] == p.max_speed


def test_pendulum_energy_drift_vs_rk4():
    p = PendulumParams()

    def deriv(s):
        return np.array([s[1], pendulum_accel(s[0], 0.0, p)])
    s_rk = s_eu = np.array([2.0, 0.0])
    e0 = pendulum_energy(s_rk, p)
    rk_drift, eu_drift = 0.0, 0.0
    for _ in range(100):
        s_rk = rk4_step(deriv, s_rk, 0.005)  # fine reference step
        for _ in range(9):
            s_rk = rk4_step(deriv, s_rk, 0.005)
        s_eu = pendulum_step(s_eu, 0.0, p)
        rk_drift = max(rk_drift, abs(pendulum_energy(s_rk, p) - e0))
        eu_drift = max(eu_drift, abs(pendulum_energy(s_eu, p) - e0))
    assert rk_drift < 1e-6
    # semi-implicit Euler is symplectic: bounded, non-growing energy error
    assert eu_drift < 0.1 * abs(e0) + 1.0


def test_pendulum_cost_values():
    assert pendulum_cost(np.array([0.0, 0.0]), 0.0) == 0.0
    assert pendulum_cost(np.array([0.1, 0.0]), 0.0) == pytest.approx(0.01)
    assert pendulum_cost(np.array([math.pi - 0.1, 0.0]), 0.0, goal=-math.pi + 0.1) == pytest.approx(0.04)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-8, 8), st.floats(-2, 2))
def test_pendulum_cost_even(err, vel, u):
    c1 = pendulum_cost(np.array([err, vel]), u)
    c2 = pendulum_cost(np.array([-err, -vel]), -u)
    assert c1 == pytest.approx(c2, abs=1e-12)
    assert c1 >= 0


def test_pendulum_reset_outside_hazard(rng):
    env = SafePendulum()
    s = env.reset(rng, 5000)
    assert np.all(env.safety_loss(s) == 0.0)
    assert np.all(np.abs(s[:, 1]) <= 1.0)
    assert s.shape == (5000, 2) and env.reset(rng).shape == (2,)


# ---------------------------------------------------------------------------
# cart-pole double pendulum


def test_cartpole_rest_hanging():
    s = np.array([0.0, 0.0, math.pi, 0.0, math.pi, 0.0])
    out = cartpole_double_step(s, 0.0)
    np.testing.assert_allclose(np.abs(out), np.abs(s), atol=1e-12)


def test_cartpole_energy_conserved():
    p = CartPoleDoubleParams()
    s = np.array([0.1, 0.3, 2.5, -0.5, 2.0, 0.8])
    e0 = cartpole_double_energy(s, p)
    for _ in range(50):
        s = cartpole_double_step(s, 0.0, p)
        assert abs(cartpole_double_energy(s, p) - e0) < 1e-4


def test_cartpole_mirror_symmetry(rng):
    for _ in range(10):
        s = rng.normal(size=6)
        f = rng.uniform(-10, 10)
        a = cartpole_double_step(s, f)
        b = cartpole_double_step(-s, -f)
        np.testing.assert_allclose(wrap_angle(a - (-b)), 0.0, atol=1e-10)


def test_cartpole_derivative_batch_matches_single(rng):
    S = rng.normal(size=(4, 6))
    F = rng.normal(size=4)
    batch = cartpole_double_derivative(S, F)
    for i in range(4):
        np.testing.assert_allclose(batch[i], cartpole_double_derivative(S[i], F[i]), atol=1e-12)


def test_cartpole_cost():
    upright = np.zeros(6)
    assert cartpole_double_cost(upright, 0.0) == 0.0
    assert cartpole_double_cost(upright, 1.0) > 0.0
    hanging = np.array([0.0, 0.0, math.pi, 0.0, math.pi, 0.0])
    assert cartpole_double_cost(hanging, 0.0) == pytest.approx((2 * 1.2) ** 2)


def test_cartpole_monitors_first_pole():
    env = SafeCartPoleDoublePendulum()
    s = np.array([0.0, 0.0, 25 * DEG, 0.0, math.pi, 0.0])
    assert env.is_violation(s)
    s[2], s[4] = math.pi, 25 * DEG
    assert not env.is_violation(s)


# ---------------------------------------------------------------------------
# env objects


@pytest.mark.parametrize("name", ["safe_pendulum", "safe_cartpole_double"])
def test_features_and_deltas(name, rng):
    env = make_env(name)
    S = env.reset(rng, 8)
    U = rng.uniform(-1, 1, size=(8, 1))
    F = env.features(S, U)
    assert F.shape == (8, env.feature_dim)
    S2 = env.step(S, U)
    np.testing.assert_allclose(wrap_angle(env.apply_delta(S, env.state_delta(S, S2)) - S2), 0.0, atol=1e-12)


def test_make_env_unknown():
    with pytest.raises(ValueError):
        make_env("safe_acrobot")


def _rollout(env, rng, policy=None, max_len=30):
    policy = policy or (lambda s: (np.array([rng.uniform(-2, 2)]), np.zeros(1), 0.0))
    return env.rollout(policy, rng, max_len)


def test_rollout_accounting_identity(rng):
    env = SafePendulum(terminate=False)
    for _ in range(20):
        tr = _rollout(env, rng)
        recs = tr.records()
        assert len(tr) <= 30
        assert tr.total_violations == sum(r.violation for r in recs)
        assert tr.total_safety_cost == pytest.approx(sum(r.safety_loss for r in recs))
        for r in recs:
            assert r.violation == bool(is_violation(r.state[0], env.spec))
            assert r.safety_loss == pytest.approx(float(safety_loss(r.state[0], env.spec)))
            np.testing.assert_allclose(r.next_state, env.step(r.state, r.action))


def test_rollout_max_length_enforced(rng):
    tr = _rollout(SafePendulum(terminate=False), rng, max_len=30)
    assert len(tr) == 30 and len(tr.states) == 31


def test_rollout_terminates_when_stabilised(rng):
    env = SafePendulum()
    tr = env.rollout(lambda s: (np.zeros(1), np.zeros(1), 0.0), rng, 30, initial_state=np.zeros(2))
    assert tr.terminated and len(tr) == 5


def test_trajectory_csv_roundtrip(tmp_path, rng):
    env = SafePendulum()
    trajs = [_rollout(env, rng) for _ in range(3)]
    path = tmp_path / "traj.csv"
    write_trajectories_csv(path, trajs, env)
    back = read_trajectories_csv(path)
    assert len(back) == 3
    for k, tr in enumerate(trajs):
        np.testing.assert_array_equal(back[k]["s0"], tr.states[:-1, 0])
        np.testing.assert_array_equal(back[k]["cost"], tr.costs)
        np.testing.assert_array_equal(back[k]["violation"], tr.violations.astype(float))
