import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuralpi.analysis import (EquilibriumError, analytic_equilibrium, bregman, design1_equilibrium,
                               equilibrium_input, invert_monotone, k_x_inverse, kkt_bisection,
                               kkt_residual, lyapunov_decrement, lyapunov_value, steady_metrics)
from neuralpi.control import Communication, CostFamily, NeuralPI, marginal_cost
from neuralpi.dynamics import (MonotoneEdges, PowerNode, SineEdges, SystemModel, SystemState, Trajectory,
                               VehicleNode, closed_loop_deriv, make_power_model, make_vehicle_model,
                               rollout, solve_edge_balance)
from neuralpi.graph import complete_graph, line_graph, ring_graph
from neuralpi.monotone import linear_params


def _two_vehicles():
    return SystemModel(line_graph(2), VehicleNode(1.0, [5.0, 6.0], [1.0, 1.0]),
                       MonotoneEdges(linear_params(1.0), offset=2.0), 5.2)


def test_k_x_inverse_examples():
    assert k_x_inverse(VehicleNode(1.0, 5.0, 1.0), 5.2) == pytest.approx(0.2)
    assert k_x_inverse(VehicleNode(1.0, 6.0, 0.5), 5.2) == pytest.approx(-1.6)
    assert k_x_inverse(PowerNode(1.5, 1.0, 1.3), 60.0) == pytest.approx(0.3)


def test_two_vehicle_equilibrium():
    model = _two_vehicles()
    cost = CostFamily(2, [1.0, 1.0])
    eq = analytic_equilibrium(model, cost)
    assert np.allclose(eq.w_star, [-0.3, -0.3], atol=1e-12)
    assert np.allclose(eq.w_star, kkt_bisection(cost, -0.6), atol=1e-10)
    assert np.allclose(model.edges.value(eq.eta_star), [-0.5], atol=1e-10)


def test_homogeneous_system_needs_no_control():
    model = SystemModel(line_graph(3), VehicleNode(1.0, 5.2, 0.8), MonotoneEdges(linear_params(1.0), 2.0), 5.2)
    eq = analytic_equilibrium(model, CostFamily(2, [0.5, 1.0, 1.5]))
    assert np.all(np.abs(eq.w_star) <= 1e-15) and eq.gamma == 0


def test_power_balance_identity():
    model = make_power_model(6, 2)
    eq = analytic_equilibrium(model, CostFamily(4, [1.0, 2.0, 1.0, 3.0, 2.0, 1.0]))
    nodes = model.nodes
    assert np.sum(eq.w_star) == pytest.approx(np.sum(nodes.d - nodes.p_m), abs=1e-12)


@given(st.integers(0, 10**6), st.sampled_from([2, 4]), st.integers(2, 8))
def test_equilibrium_input_matches_bisection_oracle(seed, p, n):
    rng = np.random.default_rng(seed)
    cost = CostFamily(p, rng.uniform(0.1, 3.0, n))
    k = rng.normal(0, 1, n)
    w, gamma = equilibrium_input(cost, k)
    assert np.max(np.abs(w - kkt_bisection(cost, k.sum()))) <= 1e-8
    assert np.allclose(marginal_cost(cost, w), gamma, atol=1e-10)
    if abs(k.sum()) > 1e-3:
        w_lit, _ = equilibrium_input(cost, k, literal_sign=True)
        assert abs(w_lit.sum() - k.sum()) > 1e-6


def test_edge_balance_solution_is_unique():
    model = make_vehicle_model(6, 4, graph=complete_graph(6))
    rng = np.random.default_rng(0)
    target = rng.normal(0, 0.3, 6)
    target -= target.mean()
    ref = solve_edge_balance(model.E, model.edges, target, np.full(model.m, 2.0))
    for _ in range(20):
        eta = solve_edge_balance(model.E, model.edges, target, np.full(model.m, 2.0), z0=rng.normal(0, 3, 5))
        assert np.max(np.abs(eta - ref)) <= 1e-9


def test_invert_monotone_unreachable_level():
    with pytest.raises(EquilibriumError):
        invert_monotone(np.tanh, np.array([2.0]))
    assert invert_monotone(np.tanh, np.array([0.5]))[0] == pytest.approx(np.arctanh(0.5), abs=1e-12)


def test_infeasible_power_equilibrium_raises():
    model = SystemModel(line_graph(2), PowerNode(1.0, [2.0, 0.0], [0.0, 2.0]), SineEdges(1.0), 60.0)
    with pytest.raises(EquilibriumError):
        analytic_equilibrium(model, CostFamily(2, [1.0, 1e6]))


def _comm_setup(family):
    if family == "vehicle":
        model = make_vehicle_model(4, 1, graph=ring_graph(4))
    else:
        model = make_power_model(5, 3)
    cost = CostFamily(2 if family == "vehicle" else 4, np.linspace(0.6, 1.4, model.n))
    ctrl = NeuralPI.init(model.n, 5, 2, scale=0.3, center=1.0,
                         comm=Communication(complete_graph(model.n), cost))
    eq = analytic_equilibrium(model, cost, ctrl=ctrl)
    return model, ctrl, eq


@pytest.mark.parametrize("family", ["vehicle", "power"])
def test_vector_field_vanishes_at_equilibrium(family):
    model, ctrl, eq = _comm_setup(family)
    for d in closed_loop_deriv(model, ctrl, eq.state):
        assert np.max(np.abs(d)) <= 1e-9


def test_design1_equilibrium_is_stationary():
    model = make_vehicle_model(5, 0)
    ctrl = NeuralPI.init(5, 6, 3, scale=0.4, center=1.0)
    eta0 = np.full(model.m, 2.3)
    s0 = np.linspace(-0.5, 0.5, 5)
    eq = design1_equilibrium(model, ctrl, eta0, s0)
    for d in closed_loop_deriv(model, ctrl, eq.state):
        assert np.max(np.abs(d)) <= 1e-9
    assert np.allclose(eq.eta_star + eq.s_star @ model.E, eta0 + s0 @ model.E, atol=1e-12)


def test_bregman_examples():
    assert bregman(lambda z: z, 3.0, 1.0, lambda z: 0.5 * z ** 2) == pytest.approx(2.0)
    assert bregman(np.exp, 0.0, 0.0, np.exp) == 0.0
    edges = MonotoneEdges(linear_params(2.0), offset=1.0)
    assert bregman(edges, np.array([2.0]), np.array([1.0]))[0] == pytest.approx(1.0)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 100))
def test_bregman_nonnegative_for_monotone(v, vs, seed):
    ctrl = NeuralPI.init(1, 6, seed, scale=0.8)
    val = bregman(ctrl.r, np.array([v]), np.array([vs]), ctrl.r_antiderivative)[0]
    assert val >= -1e-9 * (1 + abs(v) + abs(vs)) ** 2


def test_lyapunov_value_examples():
    model, ctrl, eq = _comm_setup("vehicle")
    assert abs(lyapunov_value(model, ctrl, eq.state, eq)) <= 1e-12
    d = 0.3
    x = eq.x_star.copy()
    x[1] += d
    V = lyapunov_value(model, ctrl, SystemState(x, eq.eta_star, eq.s_star), eq)
    nodes = model.nodes
    assert V == pytest.approx(d ** 2 / (2 * nodes.kappa[1] * nodes.v1[1]), rel=1e-9)
    rng = np.random.default_rng(5)
    for _ in range(20):
        st_ = SystemState(eq.x_star + rng.normal(0, 1, 4), eq.eta_star + rng.normal(0, 1, 4),
                          eq.s_star + rng.normal(0, 1, 4))
        assert lyapunov_value(model, ctrl, st_, eq) > 0


def test_decrement_at_equilibrium_is_flat():
    model, ctrl, eq = _comm_setup("vehicle")
    traj = rollout(model, ctrl, eq.x_star, eq.eta_star, eq.s_star, 50, 0.02, "rk4")
    rep = lyapunov_decrement(traj, model, ctrl, eq)
    assert rep.passed and np.max(np.abs(rep.V)) <= 1e-12


def test_decrement_holds_off_equilibrium():
    model, ctrl, eq = _comm_setup("vehicle")
    traj = rollout(model, ctrl, eq.x_star + 0.5, eq.eta_star - 0.3, eq.s_star, 400, 0.02, "rk4")
    for bound in ("left", "trapezoid"):
        assert lyapunov_decrement(traj, model, ctrl, eq, bound=bound).passed
    with pytest.raises(ValueError):
        lyapunov_decrement(traj, model, ctrl, eq, bound="mid")


def test_kkt_residual_examples():
    model = _two_vehicles()
    cost = CostFamily(2, [1.0, 1.0])
    spread, bal = kkt_residual(cost, np.array([-0.3, -0.3]), model)
    assert spread == 0 and bal == pytest.approx(0.0, abs=1e-15)
    spread, bal = kkt_residual(cost, np.array([-0.1, -0.4]), model)
    assert spread == pytest.approx(0.3) and bal == pytest.approx(0.1)


def _synthetic_traj(x_series, dt=0.1, w=None):
    x = np.asarray(x_series, dtype=float)[None, :, None]
    z = np.zeros_like(x)
    return Trajectory(dt, x, z[..., :0], z, z if w is None else np.asarray(w, float)[None, :, None],
                      z, z[..., :0], 5.0)


def test_steady_metrics_examples():
    traj = _synthetic_traj([6.0, 5.5, 5.05, 5.005, 5.001])
    err, ts, sc = steady_metrics(traj, 5.0, 0.01)
    assert err == pytest.approx(0.001) and ts == pytest.approx(0.3) and np.isnan(sc)
    err, ts, _ = steady_metrics(_synthetic_traj([5.0, 5.0, 5.5]), 5.0, 0.01)
    assert ts == float("inf")
    assert steady_metrics(_synthetic_traj([5.0, 5.0]), 5.0, 0.01)[1] == 0.0
    traj = _synthetic_traj([5.0, 5.0, 5.0], w=[0.0, 1.0, 2.0])
    cost = CostFamily(2, [1.0])
    assert steady_metrics(traj, 5.0, 0.01, cost=cost)[2] == pytest.approx(2.0)
    assert steady_metrics(traj, 5.0, 0.01, sample_time=0.1, cost=cost)[2] == pytest.approx(0.5)
