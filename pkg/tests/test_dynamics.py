import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuralpi.control import LinearPI, NeuralPI, ZeroController
from neuralpi.dynamics import (FlowSolveError, IntegrationError, MonotoneEdges, PowerNode, SineEdges,
                               SystemModel, SystemState, TanhEdges, Trajectory, VehicleNode,
                               closed_loop_deriv, edge_output, edge_output_grad, make_power_model,
                               make_vehicle_model, node_deriv, power_flow, rollout, solve_edge_balance,
                               step_euler, step_rk4)
from neuralpi.graph import Graph, line_graph, ring_graph
from neuralpi.monotone import init, linear_params


def test_node_deriv_examples():
    veh = VehicleNode(1.0, 5.0, 1.0)
    assert node_deriv(veh, 5.0, 0.0) == 0.0
    assert node_deriv(veh, 6.0, 0.0) == -1.0
    pw = PowerNode(2.0, 1.0, 1.0, 60.0)
    assert node_deriv(pw, 60.0, 0.0) == 0.0


def test_node_validation():
    with pytest.raises(ValueError):
        VehicleNode(1.0, 5.0, 0.0)
    with pytest.raises(ValueError):
        PowerNode(0.0, 1.0, 1.0)


def test_edge_outputs():
    s = SineEdges([1.0])
    assert edge_output(s, np.pi / 2 - 1e-9) == pytest.approx(1.0)
    s2 = SineEdges([2.0])
    assert edge_output(s2, 0.0) == 0.0 and edge_output_grad(s2, 0.0) == 2.0
    assert s.out_of_range(np.array([np.pi / 2]))[0]
    ident = MonotoneEdges(linear_params(1.0, channels=(1,)))
    assert edge_output(ident, np.array([0.3]))[0] == pytest.approx(0.3, abs=1e-12)
    th = TanhEdges([1.0], 2.0)
    assert edge_output(th, np.array([2.0]))[0] == 0.0


@pytest.mark.parametrize("edges", [SineEdges([1.3, 0.7]), TanhEdges([1.0, 2.0], 0.5),
                                   MonotoneEdges(init(4, 0, 0.6, (2,), center=0.8), 0.2)])
def test_edge_antiderivative_matches_value(edges):
    eta = np.array([0.4, -0.9])
    h = 1e-6
    fd = (edges.antiderivative(eta + h) - edges.antiderivative(eta - h)) / (2 * h)
    assert np.allclose(fd, edges.value(eta), atol=1e-7)


def test_zero_controller_equal_outputs_freeze_edges():
    model = make_vehicle_model(4, 0)
    st_ = SystemState(np.full(4, 5.4), np.full(3, 2.3), np.zeros(4))
    _, deta, _ = closed_loop_deriv(model, ZeroController(), st_)
    assert np.all(deta == 0)


def test_single_node_at_rest():
    model = SystemModel(Graph(1, ()), VehicleNode([1.0], [5.0], [1.0]), TanhEdges(np.ones(0)), 5.0)
    dx, deta, ds = closed_loop_deriv(model, ZeroController(), SystemState([5.0], np.zeros(0), [0.0]))
    assert dx.tolist() == [0.0] and deta.size == 0 and ds.tolist() == [0.0]


def _probe_model():
    # scalar probe x' = -x: a vehicle with v0 = 0 under zero control
    return SystemModel(Graph(1, ()), VehicleNode([1.0], [0.0], [1.0]), TanhEdges(np.ones(0)), 0.0)


def test_euler_probe():
    out = step_euler(_probe_model(), ZeroController(), SystemState([1.0], np.zeros(0), [0.0]), 0.1)
    assert out.x[0] == pytest.approx(0.9, abs=1e-15)


def test_rk4_probe_against_exponential():
    out = step_rk4(_probe_model(), ZeroController(), SystemState([1.0], np.zeros(0), [0.0]), 0.1)
    # fourth-order Taylor polynomial of exp(-0.1)
    taylor = sum((-0.1) ** k / np.prod(range(1, k + 1)) for k in range(5))
    assert out.x[0] == pytest.approx(taylor, abs=1e-15)
    assert out.x[0] == pytest.approx(np.exp(-0.1), abs=1e-7)


def test_blowup_reports_step():
    model = SystemModel(Graph(1, ()), VehicleNode([1.0], [0.0], [1.0]), TanhEdges(np.ones(0)), 0.0)
    ctrl = LinearPI([-1e200], [0.0])
    with pytest.raises(IntegrationError) as ei, np.errstate(all="ignore"):
        rollout(model, ctrl, [1.0], np.zeros(0), [0.0], 50, 1.0)
    assert ei.value.step >= 1


def _equilibrium_two_vehicle():
    g = line_graph(2)
    nodes = VehicleNode([1.0, 1.0], [5.0, 6.0], [1.0, 1.0])
    model = SystemModel(g, nodes, MonotoneEdges(linear_params(1.0, channels=(1,)), 2.0), 5.2)
    ctrl = LinearPI([1.0, 1.0], [1.0, 1.0])
    from neuralpi.analysis import design1_equilibrium

    eq = design1_equilibrium(model, ctrl, np.array([2.0]), np.zeros(2))
    return model, ctrl, eq


def test_euler_step_from_equilibrium_is_stationary():
    model, ctrl, eq = _equilibrium_two_vehicle()
    out = step_euler(model, ctrl, eq.state, 0.02)
    assert np.allclose(out.pack(), eq.state.pack(), atol=1e-12)


def test_rollout_from_equilibrium_keeps_agreement():
    model, ctrl, eq = _equilibrium_two_vehicle()
    traj = rollout(model, ctrl, eq.x_star, eq.eta_star, eq.s_star, 100, 0.02)
    assert np.max(np.abs(traj.x - 5.2)) <= 1e-12


def test_rollout_k1_matches_step_and_is_deterministic():
    model = make_vehicle_model(3, 1)
    ctrl = NeuralPI.init(3, 4, 2)
    x0, eta0, s0 = np.array([5.1, 5.7, 5.3]), np.full(2, 2.0), np.zeros(3)
    traj = rollout(model, ctrl, x0, eta0, s0, 1, 0.02)
    st1 = step_euler(model, ctrl, SystemState(x0, eta0, s0), 0.02)
    assert np.array_equal(traj.x[0, 1], st1.x) and np.array_equal(traj.s[0, 1], st1.s)
    a = rollout(model, ctrl, x0, eta0, s0, 50, 0.02, "rk4")
    b = rollout(model, ctrl, x0, eta0, s0, 50, 0.02, "rk4")
    assert np.array_equal(a.x, b.x) and np.array_equal(a.w, b.w)


def test_rollout_argument_checks():
    model = make_vehicle_model(3, 1)
    with pytest.raises(ValueError):
        rollout(model, ZeroController(), np.ones(3), np.ones(2), np.zeros(3), 0, 0.1)
    with pytest.raises(ValueError):
        rollout(model, ZeroController(), np.ones(3), np.ones(2), np.zeros(3), 3, 0.1, "midpoint")


def test_coupling_conservation():
    model = make_vehicle_model(5, 2, graph=ring_graph(5))
    traj = rollout(model, NeuralPI.init(5, 5, 1), np.linspace(5, 6, 5), np.full(5, 2.0), np.zeros(5), 80, 0.02)
    assert np.allclose(traj.u.sum(axis=-1), traj.w.sum(axis=-1), atol=1e-12)


def test_euler_rk4_gap_is_first_order():
    model = make_vehicle_model(5, 3)
    ctrl = NeuralPI.init(5, 6, 4, scale=0.8, center=0.5)
    x0 = np.random.default_rng(0).uniform(5, 6, 5)
    gaps = []
    for dt in (0.02, 0.01):
        K = int(round(4.0 / dt))
        e = rollout(model, ctrl, x0, np.full(4, 2.0), np.zeros(5), K, dt, "euler")
        r = rollout(model, ctrl, x0, np.full(4, 2.0), np.zeros(5), K, dt, "rk4")
        gaps.append(np.max(np.abs(e.x - r.x)))
    assert 1.7 <= gaps[0] / gaps[1] <= 2.3


def test_design1_agreement_improves():
    model = make_vehicle_model(5, 0)
    ctrl = NeuralPI.init(5, 8, 0, scale=0.5)
    x0 = np.random.default_rng(3).uniform(5, 6, 5)
    traj = rollout(model, ctrl, x0, np.full(4, 2.0), np.zeros(5), 2000, 0.02, "rk4")
    dev = np.max(np.abs(traj.x[0] - 5.2), axis=-1)
    assert dev[-1] < dev[0] and dev[-1] < 1e-2


def test_trajectory_csv_round_trip():
    model = make_vehicle_model(3, 0)
    traj = rollout(model, LinearPI.unit(3), [5.5, 5.1, 5.9], [2.0, 2.0], [0, 0, 0], 10, 0.05)
    back = Trajectory.from_csv(traj.to_csv(), 5.2)
    assert np.array_equal(back.x, traj.x) and np.array_equal(back.eta, traj.eta)
    assert np.array_equal(back.s, traj.s) and np.array_equal(back.w, traj.w)
    summ = traj.summary()
    assert summ["K"] == 10 and len(summ["runs"]) == 1


def test_power_flow_and_balance_solve():
    model = make_power_model(6, 2)
    eta = power_flow(model)
    assert np.allclose(model.E @ model.edges.value(eta), model.nodes.p_m - model.nodes.d, atol=1e-10)
    with pytest.raises(FlowSolveError):
        solve_edge_balance(model.E, model.edges, np.ones(6), np.zeros(model.m))
    with pytest.raises(FlowSolveError):
        target = np.zeros(6)
        target[0], target[3] = 50.0, -50.0  # far beyond line capacity
        solve_edge_balance(model.E, model.edges, target, np.zeros(model.m))


def test_sine_range_violation_flagged():
    g = line_graph(2)
    model = SystemModel(g, PowerNode([1.0, 1.0], [0.0, 0.0], [0.0, 0.0], 60.0), SineEdges([1.0]), 60.0)
    traj = rollout(model, ZeroController(), [61.0, 59.0], [1.5], [0.0, 0.0], 50, 0.01)
    assert traj.flagged


def test_model_validation():
    with pytest.raises(ValueError):
        SystemModel(Graph(3, [(0, 1)]), VehicleNode(np.ones(3), np.ones(3) * 5, np.ones(3)),
                    TanhEdges(np.ones(1)), 5.2)
    with pytest.raises(ValueError):
        SystemModel(line_graph(3), VehicleNode(np.ones(2), np.ones(2) * 5, np.ones(2)),
                    TanhEdges(np.ones(2)), 5.2)


def test_model_dict_round_trip():
    model = make_vehicle_model(4, 5, edges=MonotoneEdges(init(3, 1, 0.5, (3,)), 2.0))
    back = SystemModel.from_dict(model.to_dict())
    st_ = SystemState(np.linspace(5, 6, 4), np.array([1.5, 2.0, 2.5]), np.linspace(-1, 1, 4))
    ctrl = LinearPI.unit(4)
    for a, b in zip(closed_loop_deriv(model, ctrl, st_), closed_loop_deriv(back, ctrl, st_)):
        assert np.array_equal(a, b)


vals = st.floats(-5, 5, allow_nan=False)


@given(st.floats(0.1, 3), st.floats(4, 7), st.floats(0.3, 2), vals, vals, vals)
def test_vehicle_strict_eip(kappa, v0, v1, x, u, u_star):
    from neuralpi.analysis import eip_residual

    node = VehicleNode(kappa, v0, v1)
    x_star = v0 + v1 * u_star  # equilibrium of the node for input u_star
    assert eip_residual(node, x + 5, u, x_star, u_star) <= 1e-12 * (1 + x * x + u * u)


@given(st.floats(0.1, 3), st.floats(-2, 2), st.floats(-2, 2), vals, vals, vals)
def test_power_strict_eip(rho, pm, d, x, u, u_star):
    from neuralpi.analysis import eip_residual

    node = PowerNode(rho, pm, d, 60.0)
    x_star = 60.0 + (pm - d + u_star) / rho
    assert eip_residual(node, 60 + x, u, x_star, u_star) <= 1e-10 * (1 + x * x + u * u)
