"""Certificate network, loss terms, condition checking and training tests."""

import math

import numpy as np
import pytest

from gridlyap import controller as ctrl
from gridlyap import grid_model as gm
from gridlyap import lyapunov as lyap
from gridlyap.errors import TrainingDivergedError, ValidationError

from conftest import make_three_bus


class QuadraticSurrogate:
    """V = sum (delta - delta*)^2 + sum omega^2, bypassing the network."""

    def __init__(self, eq):
        self.eq = eq

    def value_batch(self, delta, omega):
        d2, o2 = np.atleast_2d(delta), np.atleast_2d(omega)
        return np.sum((d2 - self.eq.state.delta) ** 2, axis=1) + np.sum(o2**2, axis=1)

    def input_gradient_batch(self, delta, omega):
        d2, o2 = np.atleast_2d(delta), np.atleast_2d(omega)
        return 2.0 * (d2 - self.eq.state.delta), 2.0 * o2


def small_net(seed=0, n=3, hidden=16):
    return lyap.LyapunovNet.initialize(n, hidden=hidden, seed=seed)


# ---------------------------------------------------------------------------
# Lie derivative
# ---------------------------------------------------------------------------

def test_lie_derivative_zero_when_field_vanishes():
    # Lossless balanced case: the raw equilibrium satisfies the dynamics
    # exactly, so the field is zero and the derivative vanishes for any net.
    case = gm.NetworkCase(
        n_buses=2,
        susceptance=np.array([[0.0, 1.0], [1.0, 0.0]]),
        conductance=np.zeros((2, 2)),
        inertia=[1.0, 1.0],
        damping=[0.1, 0.1],
        mech_power=[0.5, -0.5],
        u_max=[1.0, 1.0],
        u_min=[-1.0, -1.0],
    )
    eq = gm.solve_equilibrium(case, tol=1e-13)
    for seed in range(3):
        net = small_net(seed, n=2)
        val = lyap.lie_derivative(net, case, eq.state, np.zeros(2))
        assert val == pytest.approx(0.0, abs=1e-10)


def test_lie_derivative_quadratic_surrogate_hand_formula():
    case = gm.NetworkCase(
        n_buses=2,
        susceptance=np.array([[0.0, 1.0], [1.0, 0.0]]),
        conductance=np.array([[0.0, 0.1], [0.1, 0.0]]),
        inertia=[1.0, 2.0],
        damping=[0.1, 0.2],
        mech_power=[0.5, -0.5],
        u_max=[1.0, 1.0],
        u_min=[-1.0, -1.0],
    )
    eq = gm.solve_equilibrium(case)
    surrogate = QuadraticSurrogate(eq)
    rng = np.random.default_rng(7)
    for _ in range(10):
        delta = rng.uniform(-1.0, 1.0, 2)
        omega = rng.uniform(-1.0, 1.0, 2)
        u = rng.uniform(-0.5, 0.5, 2)
        dd, od = gm.swing_rhs(case, delta, omega, u)
        expected = 2.0 * np.sum((delta - eq.state.delta) * omega) + 2.0 * np.sum(
            omega * od
        )
        state = gm.SystemState(delta=delta, omega=omega)
        got = lyap.lie_derivative(surrogate, case, state, u)
        assert got == pytest.approx(expected, rel=1e-12)


def test_lie_derivative_matches_directional_finite_difference(three_bus):
    rng = np.random.default_rng(13)
    net = small_net(3)
    h = 1e-5
    for _ in range(10):
        delta = rng.uniform(-1.0, 1.0, 3)
        omega = rng.uniform(-1.0, 1.0, 3)
        u = rng.uniform(-0.1, 0.1, 3)
        dd, od = gm.swing_rhs(three_bus, delta, omega, u)
        vp = net.value_batch(delta + h * dd, omega + h * od)[0]
        vm = net.value_batch(delta - h * dd, omega - h * od)[0]
        fd = (vp - vm) / (2 * h)
        state = gm.SystemState(delta=delta, omega=omega)
        got = lyap.lie_derivative(net, three_bus, state, u)
        assert got == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_input_gradient_zero_output_weights():
    net = small_net(1)
    zeroed = lyap.LyapunovNet(
        n_buses=3, hidden=net.hidden,
        w1_delta=net.w1_delta, w1_omega=net.w1_omega, b1=net.b1,
        w2=np.zeros(net.hidden), b2=net.b2,
    )
    gd, go = zeroed.input_gradient(gm.SystemState(delta=np.ones(3), omega=np.ones(3)))
    np.testing.assert_array_equal(gd, 0.0)
    np.testing.assert_array_equal(go, 0.0)


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(19)
    net = small_net(4)
    h = 1e-5
    delta = rng.uniform(-1.0, 1.0, 3)
    omega = rng.uniform(-1.0, 1.0, 3)
    gd, go = net.input_gradient(gm.SystemState(delta=delta, omega=omega))
    for i in range(3):
        dp, dm = delta.copy(), delta.copy()
        dp[i] += h
        dm[i] -= h
        fd = (net.value_batch(dp, omega)[0] - net.value_batch(dm, omega)[0]) / (2 * h)
        assert gd[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)
        op, om_ = omega.copy(), omega.copy()
        op[i] += h
        om_[i] -= h
        fd = (net.value_batch(delta, op)[0] - net.value_batch(delta, om_)[0]) / (2 * h)
        assert go[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_input_gradient_invariant_under_unit_duplication():
    net = small_net(6)
    h = net.hidden
    doubled = lyap.LyapunovNet(
        n_buses=3, hidden=h + 1,
        w1_delta=np.vstack([net.w1_delta, net.w1_delta[-1:]]),
        w1_omega=np.vstack([net.w1_omega, net.w1_omega[-1:]]),
        b1=np.append(net.b1, net.b1[-1]),
        w2=np.concatenate([net.w2[:-1], [net.w2[-1] / 2.0, net.w2[-1] / 2.0]]),
        b2=net.b2,
    )
    state = gm.SystemState(delta=[0.3, -0.2, 0.5], omega=[0.1, 0.0, -0.4])
    gd1, go1 = net.input_gradient(state)
    gd2, go2 = doubled.input_gradient(state)
    np.testing.assert_allclose(gd1, gd2, atol=1e-10)
    np.testing.assert_allclose(go1, go2, atol=1e-10)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def test_l1_terms_arithmetic():
    # lie = 1 at distance mu -> tanh(1) * e^-1
    val = lyap._l1_terms(np.array([1.0]), np.array([50.0]), mu=50.0)
    assert val == pytest.approx(math.tanh(1.0) * math.exp(-1.0), rel=1e-12)
    assert val == pytest.approx(0.2801, abs=2e-4)
    # saturation: very negative lie at zero distance -> -1
    val = lyap._l1_terms(np.array([-1e6]), np.array([0.0]), mu=50.0)
    assert val == pytest.approx(-1.0, abs=1e-12)


def test_l1_bounded_by_one():
    rng = np.random.default_rng(2)
    for _ in range(200):
        lie = rng.normal(scale=100.0, size=64)
        dist = np.abs(rng.normal(scale=30.0, size=64))
        assert abs(lyap._l1_terms(lie, dist, mu=50.0)) <= 1.0


def test_loss_l1_zero_at_equilibrium_batch():
    case = gm.NetworkCase(
        n_buses=2,
        susceptance=np.array([[0.0, 1.0], [1.0, 0.0]]),
        conductance=np.zeros((2, 2)),
        inertia=[1.0, 1.0],
        damping=[0.1, 0.1],
        mech_power=[0.5, -0.5],
        u_max=[1.0, 1.0],
        u_min=[-1.0, -1.0],
    )
    eq = gm.solve_equilibrium(case, tol=1e-13)
    droop = ctrl.DroopParams([0.5, 0.5])
    net = small_net(0, n=2)
    batch = (eq.state.delta[None, :], eq.state.omega[None, :])
    assert lyap.loss_l1(net, case, batch, droop, eq, mu=50.0) == pytest.approx(
        0.0, abs=1e-9
    )


def test_loss_l2_cases(three_bus, three_bus_eq):
    net = small_net(5)
    eq = three_bus_eq

    class Shifted:
        # Surrogate with controllable values.
        def __init__(self, vals, v_eq):
            self.vals = np.asarray(vals, dtype=float)
            self.v_eq = v_eq

        def value_batch(self, delta, omega):
            d2 = np.atleast_2d(delta)
            if d2.shape[0] == 1 and np.allclose(d2[0], eq.state.delta):
                return np.array([self.v_eq])
            return self.vals

    batch = (np.ones((3, 3)), np.ones((3, 3)))
    assert lyap.loss_l2(Shifted([1.0, 2.0, 3.0], 0.5), batch, eq) == 0.0
    assert lyap.loss_l2(Shifted([0.0, 1.0, 1.0], 0.5), batch, eq) == pytest.approx(
        0.5 / 3.0
    )
    eq_batch = (eq.state.delta[None, :], eq.state.omega[None, :])
    assert lyap.loss_l2(net, eq_batch, eq) == 0.0


def test_l3_terms_arithmetic():
    assert lyap._l3_terms(0.0) == 0.0
    assert lyap._l3_terms(0.1) == pytest.approx(0.11, rel=1e-12)
    assert lyap._l3_terms(-0.1) == pytest.approx(0.01, rel=1e-12)


def test_loss_l3_near_zero_at_equilibrium(three_bus, three_bus_eq):
    net = small_net(7)
    droop = ctrl.DroopParams([1.0, 1.0, 1.0])
    assert lyap.loss_l3(net, three_bus, three_bus_eq, droop) < 1e-8


def test_total_loss_weighting():
    assert lyap.total_lyapunov_loss(0.0, 0.0, 0.0, 10, 5, 100) == 0.0
    assert lyap.total_lyapunov_loss(-0.5, 0.2, 0.0, 10, 5, 100) == pytest.approx(-4.0)
    a = lyap.total_lyapunov_loss(0.3, 0.1, 0.05, 10, 5, 100)
    b = lyap.total_lyapunov_loss(0.3, 0.1, 0.05, 30, 15, 300)
    assert b == pytest.approx(3.0 * a, rel=1e-12)


def test_l2_l3_nonnegative_for_random_nets(three_bus, three_bus_eq):
    rng = np.random.default_rng(11)
    droop = ctrl.DroopParams([0.5, 0.5, 0.5])
    config = lyap.LyapunovTrainConfig(batch_size=32, episodes=0)
    for seed in range(20):
        net = small_net(seed)
        d2, o2 = lyap.sample_states(rng, config, 32, 3, three_bus_eq)
        assert lyap.loss_l2(net, (d2, o2), three_bus_eq) >= 0.0
        assert lyap.loss_l3(net, three_bus, three_bus_eq, droop) >= 0.0


# ---------------------------------------------------------------------------
# check_conditions
# ---------------------------------------------------------------------------

def test_check_conditions_stable_scalar_system_omega_slice():
    # N=1, B=G=0, M=D=1, droop gain 1: V = omega^2 has derivative
    # -2(D + l) omega^2 < 0 away from zero, so every omega-only sample
    # satisfies both conditions.
    case = gm.NetworkCase(
        n_buses=1,
        susceptance=np.zeros((1, 1)),
        conductance=np.zeros((1, 1)),
        inertia=[1.0],
        damping=[1.0],
        mech_power=[0.0],
        u_max=[10.0],
        u_min=[-10.0],
    )
    eq = gm.solve_equilibrium(case)
    surrogate = QuadraticSurrogate(eq)
    droop = ctrl.DroopParams([1.0])
    rng = np.random.default_rng(3)
    omega = rng.uniform(0.1, 3.0, (200, 1)) * rng.choice([-1.0, 1.0], (200, 1))
    delta = np.zeros((200, 1))
    report = lyap.check_conditions(surrogate, case, (delta, omega), eq, droop)
    assert report.rho == 1.0
    assert report.violators == []
    assert report.worst_lie_derivative < 0.0


def test_check_conditions_constant_net_all_violate(three_bus, three_bus_eq):
    class Constant:
        def value_batch(self, delta, omega):
            return np.full(np.atleast_2d(delta).shape[0], 2.5)

        def input_gradient_batch(self, delta, omega):
            d2 = np.atleast_2d(delta)
            return np.zeros_like(d2), np.zeros_like(d2)

    droop = ctrl.DroopParams([1.0, 1.0, 1.0])
    rng = np.random.default_rng(4)
    config = lyap.LyapunovTrainConfig(batch_size=100, episodes=0)
    d2, o2 = lyap.sample_states(rng, config, 100, 3, three_bus_eq)
    report = lyap.check_conditions(Constant(), three_bus, (d2, o2), three_bus_eq, droop)
    assert report.rho == 0.0
    assert len(report.violators) == 100


def test_check_conditions_permutation_invariant(three_bus, three_bus_eq):
    net = small_net(9)
    droop = ctrl.DroopParams([1.0, 1.0, 1.0])
    rng = np.random.default_rng(5)
    config = lyap.LyapunovTrainConfig(batch_size=256, episodes=0)
    d2, o2 = lyap.sample_states(rng, config, 256, 3, three_bus_eq)
    r1 = lyap.check_conditions(net, three_bus, (d2, o2), three_bus_eq, droop)
    perm = rng.permutation(256)
    r2 = lyap.check_conditions(net, three_bus, (d2[perm], o2[perm]), three_bus_eq, droop)
    assert r1.rho == r2.rho
    assert r1.worst_lie_derivative == r2.worst_lie_derivative


def test_check_conditions_rejects_equilibrium_sample(three_bus, three_bus_eq):
    net = small_net(2)
    droop = ctrl.DroopParams([1.0, 1.0, 1.0])
    d2 = three_bus_eq.state.delta[None, :]
    o2 = three_bus_eq.state.omega[None, :]
    with pytest.raises(ValidationError, match="exclusion"):
        lyap.check_conditions(net, three_bus, (d2, o2), three_bus_eq, droop)


def test_sampler_respects_boxes_and_exclusion(three_bus_eq):
    rng = np.random.default_rng(6)
    config = lyap.LyapunovTrainConfig(
        batch_size=1, episodes=0, delta_box=(-2.0, 2.0), omega_box=(-1.0, 1.0)
    )
    d2, o2 = lyap.sample_states(rng, config, 5000, 3, three_bus_eq)
    assert np.all(d2 >= -2.0) and np.all(d2 <= 2.0)
    assert np.all(o2 >= -1.0) and np.all(o2 <= 1.0)
    dist = np.sqrt(
        np.sum((d2 - three_bus_eq.state.delta) ** 2, axis=1) + np.sum(o2**2, axis=1)
    )
    assert np.all(dist > lyap.EQUILIBRIUM_EXCLUSION_RADIUS)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def test_train_zero_episodes_identity(three_bus, three_bus_eq):
    droop = ctrl.DroopParams([1.0, 1.0, 1.0])
    config = lyap.LyapunovTrainConfig(batch_size=16, episodes=0, hidden=8)
    start = lyap.LyapunovNet.initialize(3, hidden=8, seed=0)
    net, log = lyap.train_lyapunov(three_bus, three_bus_eq, droop, config, initial_net=start)
    assert log == []
    for name, val in start.params().items():
        assert np.array_equal(net.params()[name], val), name


def test_train_smoke_run_finite_and_batch_grows(three_bus, three_bus_eq):
    droop = ctrl.DroopParams([1.0, 0.9, 0.8])
    config = lyap.LyapunovTrainConfig(
        batch_size=32, episodes=30, hidden=12, delta_box=(-6, 6), omega_box=(-6, 6),
        resample_threshold=0.2, rng_seed=1,
    )
    net, log = lyap.train_lyapunov(three_bus, three_bus_eq, droop, config)
    assert len(log) == 30
    for row in log:
        assert np.isfinite(row["total"])
        assert abs(row["l1"]) <= 1.0
        assert row["l2"] >= 0.0 and row["l3"] >= 0.0
        assert 0.0 <= row["rho"] <= 1.0


def test_train_determinism(three_bus, three_bus_eq):
    droop = ctrl.DroopParams([1.0, 0.9, 0.8])
    config = lyap.LyapunovTrainConfig(batch_size=16, episodes=10, hidden=8, rng_seed=3)
    net1, log1 = lyap.train_lyapunov(three_bus, three_bus_eq, droop, config)
    net2, log2 = lyap.train_lyapunov(three_bus, three_bus_eq, droop, config)
    assert log1 == log2
    for name in net1.params():
        assert np.array_equal(net1.params()[name], net2.params()[name])


def test_train_aborts_on_nonfinite_loss(three_bus, three_bus_eq):
    droop = ctrl.DroopParams([1.0, 1.0, 1.0])
    config = lyap.LyapunovTrainConfig(batch_size=8, episodes=5, hidden=8)
    bad = lyap.LyapunovNet.initialize(3, hidden=8, seed=0)
    params = bad.params()
    params["w2"] = params["w2"] * np.inf
    bad = lyap.LyapunovNet.from_params(3, 8, params)
    with np.errstate(invalid="ignore"):  # inf weights are the point here
        with pytest.raises(TrainingDivergedError) as excinfo:
            lyap.train_lyapunov(three_bus, three_bus_eq, droop, config, initial_net=bad)
    assert excinfo.value.episode == 0
    assert "w2" in excinfo.value.snapshot


def test_trained_certificate_quality(three_bus, three_bus_eq, droop_params, trained_lyapunov):
    # Desk-scale training run: fresh-sample satisfaction and slice geometry.
    droop, _, _ = droop_params
    net, log, config, _ = trained_lyapunov
    rng = np.random.default_rng(999)
    d2, o2 = lyap.sample_states(rng, config, 10000, 3, three_bus_eq)
    report = lyap.check_conditions(net, three_bus, (d2, o2), three_bus_eq, droop)
    assert report.rho >= 0.99
    assert log[-1]["l3"] <= 1e-4
    assert all(np.isfinite(row["total"]) for row in log)


def test_trained_certificate_axis_slices(three_bus, three_bus_eq, droop_params, trained_lyapunov):
    droop, _, _ = droop_params
    net, _, _, _ = trained_lyapunov
    report = lyap.axis_slice_report(net, three_bus, three_bus_eq, droop)
    assert report["all_min_at_center"]
    assert report["pooled_lie_nonpositive"] >= 0.99


def test_violator_buffer_never_shrinks_batch(three_bus, three_bus_eq):
    # With a tiny threshold the batch gets augmented as soon as any rho
    # exceeds it; the augmented batch must never drop below H and the
    # buffer cap bounds it at 3H.
    droop = ctrl.DroopParams([1.0, 0.9, 0.8])
    config = lyap.LyapunovTrainConfig(
        batch_size=16, episodes=8, hidden=8, resample_threshold=0.01, rng_seed=5
    )
    net, log = lyap.train_lyapunov(three_bus, three_bus_eq, droop, config)
    assert len(log) == 8
    assert all(16 <= row["batch"] <= 48 for row in log)
    assert any(row["batch"] > 16 for row in log[1:])
    assert all(0.0 <= row["rho"] <= 1.0 for row in log)


def test_net_checkpoint_roundtrip(tmp_path):
    net = small_net(12)
    path = tmp_path / "lyap.json"
    lyap.save_net(path, net)
    loaded = lyap.load_net(path)
    for name, val in net.params().items():
        assert np.array_equal(loaded.params()[name], val)
