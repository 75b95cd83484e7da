"""Node and edge dynamics, closed-loop assembly and time stepping.

State layout: node states ``x`` (n), edge states ``eta`` (m), controller
integral states ``s`` (n).  Every routine accepts either unbatched vectors or a
leading batch axis; rollouts always store a batch axis.

Closed loop (output map y = x)::

    e     = y_bar - y
    w     = controller(e, s)
    u     = w - E psi(eta)
    x'    = f(x, u)              (affine in x and u for both node families)
    eta'  = E^T y
    s'    = e - comm(s)          (comm = 0 without a communication layer)
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .graph import Graph, is_connected
from .monotone import MonotoneParams, antiderivative as mono_antiderivative, grad_params, linear_params, materialize

__all__ = [
    "VehicleNode",
    "PowerNode",
    "SineEdges",
    "MonotoneEdges",
    "TanhEdges",
    "SystemModel",
    "SystemState",
    "Trajectory",
    "IntegrationError",
    "FlowSolveError",
    "node_deriv",
    "edge_output",
    "edge_output_grad",
    "closed_loop_deriv",
    "closed_loop_vjp",
    "step_euler",
    "step_rk4",
    "rollout",
    "solve_edge_balance",
    "make_vehicle_model",
    "make_power_model",
]


class IntegrationError(RuntimeError):
    """Non-finite state during time stepping; ``step`` is the failing step index."""

    def __init__(self, msg: str, step: int):
        super().__init__(msg)
        self.step = step


class FlowSolveError(RuntimeError):
    """Newton solve for edge states failed to converge."""


# ---------------------------------------------------------------- node families


def _arr(v):
    return np.asarray(v, dtype=float)


@dataclass(frozen=True)
class VehicleNode:
    """Optimal-velocity vehicle: ``x' = kappa (-(x - v0) + v1 u)``.

    Fields may be scalars or arrays (one entry per node, optionally batched).
    """

    kappa: np.ndarray
    v0: np.ndarray
    v1: np.ndarray

    family = "vehicle"

    def __post_init__(self):
        for k in ("kappa", "v0", "v1"):
            object.__setattr__(self, k, _arr(getattr(self, k)))
        if np.any(self.kappa <= 0) or np.any(self.v1 <= 0):
            raise ValueError("vehicle nodes need kappa > 0 and v1 > 0")

    def affine(self):
        """Coefficients ``(a, b, c)`` with ``x' = a x + b u + c``."""
        return -self.kappa, self.kappa * self.v1, self.kappa * self.v0

    def eip_rho(self):
        """Strict-passivity margin of the quadratic storage function."""
        return 1.0 / self.v1

    def storage(self, x, x_star):
        return (x - x_star) ** 2 / (2.0 * self.kappa * self.v1)

    def storage_grad(self, x, x_star):
        return (x - x_star) / (self.kappa * self.v1)

    def k_x_inverse(self, y_bar):
        """Equilibrium input that holds the node at output ``y_bar``."""
        return (y_bar - self.v0) / self.v1

    def to_dict(self):
        return {"family": "vehicle", "kappa": self.kappa.tolist(), "v0": self.v0.tolist(),
                "v1": self.v1.tolist()}


@dataclass(frozen=True)
class PowerNode:
    """Swing-type frequency dynamics: ``x' = -rho (x - x_bar) + p_m - d + u``."""

    rho: np.ndarray
    p_m: np.ndarray
    d: np.ndarray
    x_bar: float = 60.0

    family = "power"

    def __post_init__(self):
        for k in ("rho", "p_m", "d"):
            object.__setattr__(self, k, _arr(getattr(self, k)))
        object.__setattr__(self, "x_bar", float(self.x_bar))
        if np.any(self.rho <= 0):
            raise ValueError("power nodes need rho > 0")

    def affine(self):
        return -self.rho, np.ones_like(self.rho), self.rho * self.x_bar + self.p_m - self.d

    def eip_rho(self):
        return self.rho

    def storage(self, x, x_star):
        return 0.5 * (x - x_star) ** 2

    def storage_grad(self, x, x_star):
        return x - x_star

    def k_x_inverse(self, y_bar):
        return self.rho * (y_bar - self.x_bar) + self.d - self.p_m

    def to_dict(self):
        return {"family": "power", "rho": self.rho.tolist(), "p_m": self.p_m.tolist(),
                "d": self.d.tolist(), "x_bar": self.x_bar}


def node_deriv(node, x, u):
    a, b, c = node.affine()
    return a * _arr(x) + b * _arr(u) + c


def nodes_from_dict(data: dict):
    if data["family"] == "vehicle":
        return VehicleNode(data["kappa"], data["v0"], data["v1"])
    if data["family"] == "power":
        return PowerNode(data["rho"], data["p_m"], data["d"], data.get("x_bar", 60.0))
    raise ValueError(f"unknown node family {data['family']!r}")


# ---------------------------------------------------------------- edge families


@dataclass(frozen=True)
class SineEdges:
    """Line flows ``b sin(eta)``; monotone only on ``|eta| < pi/2``."""

    b: np.ndarray

    learnable = False

    def __post_init__(self):
        object.__setattr__(self, "b", _arr(self.b))
        if np.any(self.b <= 0):
            raise ValueError("susceptances must be positive")

    def value(self, eta):
        return self.b * np.sin(eta)

    def grad(self, eta):
        return self.b * np.cos(eta)

    def antiderivative(self, eta):
        return self.b * (1.0 - np.cos(eta))

    def out_of_range(self, eta):
        return np.abs(eta) >= np.pi / 2

    def params(self):
        return {}

    def with_params(self, params):
        return self

    def param_vjp(self, eta, gmu):
        return {}

    def to_dict(self):
        return {"kind": "sine", "b": self.b.tolist()}


@dataclass(frozen=True)
class MonotoneEdges:
    """Learnable ``psi_l(eta) = g_l(eta - offset_l)`` with one monotone net per edge."""

    params_: MonotoneParams
    offset: np.ndarray = field(default_factory=lambda: np.zeros(()))

    learnable = True

    def __post_init__(self):
        object.__setattr__(self, "offset", _arr(self.offset))

    @cached_property
    def weights(self):
        return materialize(self.params_)

    def value(self, eta):
        return self.weights(eta - self.offset)

    def grad(self, eta):
        return self.weights.grad(eta - self.offset)

    def antiderivative(self, eta):
        # integral of psi from offset; Bregman distances are invariant to the base point
        return mono_antiderivative(self.weights, eta - self.offset)

    def out_of_range(self, eta):
        return np.zeros(np.shape(eta), dtype=bool)

    def params(self):
        return {f"edge.{k}": v for k, v in self.params_.arrays().items()}

    def with_params(self, params):
        kw = {k: params[f"edge.{k}"] for k in self.params_.arrays()}
        return MonotoneEdges(MonotoneParams(**kw), self.offset)

    def param_vjp(self, eta, gmu):
        g = grad_params(self.weights, self.params_, eta - self.offset, gmu)
        return {f"edge.{k}": v for k, v in g.arrays().items()}

    def to_dict(self):
        return {"kind": "monotone", "params": self.params_.to_dict(), "offset": self.offset.tolist()}


@dataclass(frozen=True)
class TanhEdges:
    """Fixed baseline ``gain * tanh(eta - offset)``."""

    gain: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(()))

    learnable = False

    def __post_init__(self):
        object.__setattr__(self, "gain", _arr(self.gain))
        object.__setattr__(self, "offset", _arr(self.offset))

    def value(self, eta):
        return self.gain * np.tanh(eta - self.offset)

    def grad(self, eta):
        return self.gain / np.cosh(eta - self.offset) ** 2

    def antiderivative(self, eta):
        return self.gain * np.log(np.cosh(eta - self.offset))

    def out_of_range(self, eta):
        return np.zeros(np.shape(eta), dtype=bool)

    def params(self):
        return {}

    def with_params(self, params):
        return self

    def param_vjp(self, eta, gmu):
        return {}

    def to_dict(self):
        return {"kind": "tanh", "gain": self.gain.tolist(), "offset": self.offset.tolist()}


def edges_from_dict(data: dict):
    kind = data["kind"]
    if kind == "sine":
        return SineEdges(data["b"])
    if kind == "monotone":
        return MonotoneEdges(MonotoneParams.from_dict(data["params"]), data.get("offset", 0.0))
    if kind == "tanh":
        return TanhEdges(data["gain"], data.get("offset", 0.0))
    raise ValueError(f"unknown edge kind {kind!r}")


def edge_output(edges, eta):
    return edges.value(_arr(eta))


def edge_output_grad(edges, eta):
    return edges.grad(_arr(eta))


# ---------------------------------------------------------------- system


@dataclass(frozen=True)
class SystemModel:
    graph: Graph
    nodes: object
    edges: object
    y_bar: float

    def __post_init__(self):
        object.__setattr__(self, "y_bar", float(self.y_bar))
        n = self.graph.n
        for name, v in zip(("a", "b", "c"), self.nodes.affine()):
            if np.ndim(v) and np.shape(v)[-1] != n:
                raise ValueError(f"node parameter arrays must have trailing length n={n}")
        if not is_connected(self.graph):
            raise ValueError("physical graph must be connected")

    @property
    def family(self) -> str:
        return self.nodes.family

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def m(self) -> int:
        return self.graph.m

    @property
    def E(self) -> np.ndarray:
        return self.graph.incidence

    def with_edges(self, edges) -> "SystemModel":
        return replace(self, edges=edges)

    def with_nodes(self, nodes) -> "SystemModel":
        return replace(self, nodes=nodes)

    def k_x_inverse(self):
        return self.nodes.k_x_inverse(self.y_bar)

    def to_dict(self):
        return {"graph": self.graph.to_dict(), "nodes": self.nodes.to_dict(),
                "edges": self.edges.to_dict(), "y_bar": self.y_bar}

    @classmethod
    def from_dict(cls, data):
        return cls(Graph.from_dict(data["graph"]), nodes_from_dict(data["nodes"]),
                   edges_from_dict(data["edges"]), data["y_bar"])


@dataclass(frozen=True)
class SystemState:
    x: np.ndarray
    eta: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        for k in ("x", "eta", "s"):
            object.__setattr__(self, k, _arr(getattr(self, k)))

    def pack(self) -> np.ndarray:
        return np.concatenate([self.x, self.eta, self.s], axis=-1)

    @classmethod
    def unpack(cls, z, n: int, m: int) -> "SystemState":
        return cls(z[..., :n], z[..., n:n + m], z[..., n + m:])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.eta))
                    and np.all(np.isfinite(self.s)))


def closed_loop_deriv(model: SystemModel, controller, state: SystemState):
    """``(x', eta', s')`` of the closed loop."""
    d, _ = _deriv_cache(model, controller, state.x, state.eta, state.s)
    return d


def _deriv_cache(model, ctrl, x, eta, s):
    E = model.E
    e = model.y_bar - x
    w, comm = ctrl.evaluate(e, s)
    mu = model.edges.value(eta)
    u = w - mu @ E.T
    a, b, c = model.nodes.affine()
    dx = a * x + b * u + c
    deta = x @ E
    ds = e - comm
    return (dx, deta, ds), {"e": e, "w": w, "mu": mu, "u": u}


def closed_loop_vjp(model: SystemModel, ctrl, x, eta, s, gdx, gdeta, gds, gw_extra=None, gmu_extra=None):
    """Reverse-mode product through :func:`closed_loop_deriv`.

    ``gw_extra`` / ``gmu_extra`` inject additional cotangents on the control
    ``w`` and edge outputs ``mu`` evaluated at the same state (used for loss
    terms).  Returns ``(gx, geta, gs, gparams)`` where ``gparams`` merges
    controller and learnable-edge parameter gradients.
    """
    E = model.E
    a, b, _ = model.nodes.affine()
    e = model.y_bar - x
    gu = gdx * b
    gx = gdx * a
    gw = gu if gw_extra is None else gu + gw_extra
    gmu = -gu @ E
    if gmu_extra is not None:
        gmu = gmu + gmu_extra
    geta = gmu * model.edges.grad(eta)
    gparams = dict(model.edges.param_vjp(eta, gmu)) if model.edges.learnable else {}
    ge, gs, gctrl = ctrl.vjp(e, s, gw, -gds)
    gparams.update(gctrl)
    ge = ge + gds
    gx = gx + gdeta @ E.T - ge
    return gx, geta, gs, gparams


def _packed_deriv(model, ctrl, z):
    n, m = model.n, model.m
    (dx, deta, ds), _ = _deriv_cache(model, ctrl, z[..., :n], z[..., n:n + m], z[..., n + m:])
    return np.concatenate([dx, deta, ds], axis=-1)


def step_euler(model, controller, state: SystemState, dt: float) -> SystemState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = state.pack()
    z = z + dt * _packed_deriv(model, controller, z)
    out = SystemState.unpack(z, model.n, model.m)
    if not out.is_finite():
        raise IntegrationError("non-finite state after Euler step", 0)
    return out


def _rk4(model, ctrl, z, dt):
    k1 = _packed_deriv(model, ctrl, z)
    k2 = _packed_deriv(model, ctrl, z + 0.5 * dt * k1)
    k3 = _packed_deriv(model, ctrl, z + 0.5 * dt * k2)
    k4 = _packed_deriv(model, ctrl, z + dt * k3)
    return z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_rk4(model, controller, state: SystemState, dt: float) -> SystemState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = SystemState.unpack(_rk4(model, controller, state.pack(), dt), model.n, model.m)
    if not out.is_finite():
        raise IntegrationError("non-finite state after RK4 step", 0)
    return out


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    """Batched rollout record.  Arrays are ``(B, K+1, .)`` with index 0 the initial state."""

    dt: float
    x: np.ndarray
    eta: np.ndarray
    s: np.ndarray
    w: np.ndarray
    u: np.ndarray
    mu: np.ndarray
    y_bar: float
    scheme: str = "euler"
    range_violation: np.ndarray | None = None
    loss: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.x.shape[1] - 1

    @property
    def B(self) -> int:
        return self.x.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.x

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.K + 1)

    @property
    def flagged(self) -> bool:
        return bool(self.range_violation is not None and np.any(self.range_violation))

    def state(self, b: int, k: int) -> SystemState:
        return SystemState(self.x[b, k], self.eta[b, k], self.s[b, k])

    def agreement_error(self) -> np.ndarray:
        """``max_i |y_i(T) - y_bar|`` per batch entry."""
        return np.max(np.abs(self.x[:, -1] - self.y_bar), axis=-1)

    def to_csv(self, b: int = 0) -> str:
        n, m = self.x.shape[-1], self.eta.shape[-1]
        cols = (["t"] + [f"x_{i}" for i in range(n)] + [f"y_{i}" for i in range(n)]
                + [f"w_{i}" for i in range(n)] + [f"eta_{l}" for l in range(m)]
                + [f"s_{i}" for i in range(n)])
        data = np.column_stack([self.t, self.x[b], self.x[b], self.w[b], self.eta[b], self.s[b]])
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for row in data:
            wr.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def summary(self, eps: float = 1e-2) -> dict:
        from .analysis import steady_metrics

        out = []
        for b in range(self.B):
            err, ts, _ = steady_metrics(self, self.y_bar, eps, batch_index=b)
            out.append({"agreement_error": err, "settling_time": ts if np.isfinite(ts) else None,
                        "range_violation": bool(self.range_violation is not None
                                                and np.any(self.range_violation[b])),
                        "final_w": self.w[b, -1].tolist()})
        return {"dt": self.dt, "K": self.K, "scheme": self.scheme, "runs": out}

    def to_json(self, eps: float = 1e-2) -> str:
        return json.dumps(self.summary(eps), indent=2)

    @classmethod
    def from_csv(cls, text: str, y_bar: float) -> "Trajectory":
        """Rebuild a single-run trajectory from :meth:`to_csv` output (``u`` and ``mu`` are not stored)."""
        rows = list(csv.reader(io.StringIO(text)))
        n = sum(c.startswith("x_") for c in rows[0])
        m = sum(c.startswith("eta_") for c in rows[0])
        data = np.array(rows[1:], dtype=float)
        t = data[:, 0]
        x = data[:, 1:1 + n]
        w = data[:, 1 + 2 * n:1 + 3 * n]
        eta = data[:, 1 + 3 * n:1 + 3 * n + m]
        s = data[:, 1 + 3 * n + m:]
        dt = float(t[1] - t[0]) if t.size > 1 else 1.0
        nan = np.full_like(x, np.nan)
        return cls(dt, x[None], eta[None], s[None], w[None], nan[None], np.full_like(eta, np.nan)[None], y_bar)


def rollout(model: SystemModel, controller, x0, eta0, s0, K: int, dt: float, scheme: str = "euler",
            loss_spec=None) -> Trajectory:
    """Integrate ``K`` steps from a (batch of) initial state(s)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if scheme not in ("euler", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    n, m = model.n, model.m
    x0 = np.atleast_2d(_arr(x0))
    B = x0.shape[0]
    eta0 = np.broadcast_to(_arr(eta0), (B, m))
    s0 = np.broadcast_to(_arr(s0), (B, n))
    Z = np.empty((B, K + 1, 2 * n + m))
    Z[:, 0] = np.concatenate([x0, eta0, s0], axis=-1)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            z = Z[:, k]
            if scheme == "euler":
                Z[:, k + 1] = z + dt * _packed_deriv(model, controller, z)
            else:
                Z[:, k + 1] = _rk4(model, controller, z, dt)
            if not np.all(np.isfinite(Z[:, k + 1])):
                raise IntegrationError(f"non-finite state at step {k + 1}", k + 1)
    x, eta, s = Z[..., :n], Z[..., n:n + m], Z[..., n + m:]
    w, _ = controller.evaluate(model.y_bar - x, s)
    mu = model.edges.value(eta)
    u = w - mu @ model.E.T
    traj = Trajectory(dt, x, eta, s, w, u, mu, model.y_bar, scheme,
                      range_violation=np.any(model.edges.out_of_range(eta), axis=(1, 2)) if m else
                      np.zeros(B, dtype=bool))
    if loss_spec is not None:
        traj.loss = loss_spec.value(traj)
    return traj


# ---------------------------------------------------------------- flow solves


def solve_edge_balance(E: np.ndarray, edges, target, eta_ref, tol: float = 1e-10,
                       max_iter: int = 200, z0=None) -> np.ndarray:
    """Edge states ``eta = eta_ref + E^T z`` with ``E psi(eta) = target``.

    Damped Newton on the grounded node potentials ``z`` (``z_0 = 0``).  The
    target must sum to zero since ``1^T E = 0``.  ``z0`` optionally sets the
    starting potentials of nodes ``1..n-1``.
    """
    target = _arr(target)
    eta_ref = _arr(eta_ref)
    n, m = E.shape
    if abs(target.sum()) > 1e-9 * max(1.0, np.abs(target).sum()):
        raise FlowSolveError(f"injections must sum to zero (sum = {target.sum():.3g})")
    if m == 0:
        return eta_ref.copy()
    Er = E[1:]
    z = np.zeros(n - 1) if z0 is None else np.array(z0, dtype=float)

    def resid(z):
        eta = eta_ref + z @ Er
        return E @ edges.value(eta) - target, eta

    F, eta = resid(z)
    fn = np.max(np.abs(F))
    for _ in range(max_iter):
        if fn <= tol:
            return eta
        J = (Er * edges.grad(eta)) @ Er.T
        try:
            dz = np.linalg.solve(J, -F[1:])
        except np.linalg.LinAlgError as exc:
            raise FlowSolveError("singular Jacobian in edge-balance solve") from exc
        step = 1.0
        while step > 1e-10:
            Fn, etan = resid(z + step * dz)
            fnn = np.max(np.abs(Fn))
            if np.isfinite(fnn) and fnn < fn:
                break
            step *= 0.5
        else:
            raise FlowSolveError("line search failed in edge-balance solve")
        z, F, eta, fn = z + step * dz, Fn, etan, fnn
    if fn <= tol:
        return eta
    raise FlowSolveError(f"edge-balance solve did not converge (residual {fn:.3g})")


# ---------------------------------------------------------------- factories


VEHICLE_SPACING = 2.0


def make_vehicle_model(n: int, seed, graph: Graph | None = None, edges=None, y_bar: float = 5.2,
                       kappa: float = 1.0) -> SystemModel:
    """Vehicle platoon with ``v0 ~ U[5,6]``, ``v1 ~ U[0.5,1]``; line graph by default.

    The default edge feedback is the unit-slope monotone function centred at the
    nominal spacing.
    """
    from .graph import line_graph

    rng = np.random.default_rng(seed)
    graph = graph or line_graph(n)
    nodes = VehicleNode(np.full(n, kappa), rng.uniform(5.0, 6.0, n), rng.uniform(0.5, 1.0, n))
    if edges is None:
        edges = MonotoneEdges(linear_params(1.0, channels=(graph.m,)), VEHICLE_SPACING)
    return SystemModel(graph, nodes, edges, y_bar)


def make_power_model(n: int, seed, graph: Graph | None = None, x_bar: float = 60.0,
                     b_range=(2.0, 4.0), rho_range=(1.0, 2.0)) -> SystemModel:
    """Generator network with a balanced base operating point (``sum p_m = sum d``)."""
    from .graph import ring_graph

    rng = np.random.default_rng(seed)
    graph = graph or ring_graph(n)
    p_m = rng.uniform(0.5, 1.5, n)
    imb = rng.uniform(-0.2, 0.2, n)
    d = p_m + imb - imb.mean()
    nodes = PowerNode(rng.uniform(*rho_range, n), p_m, d, x_bar)
    edges = SineEdges(rng.uniform(*b_range, graph.m))
    return SystemModel(graph, nodes, edges, x_bar)


def power_flow(model: SystemModel) -> np.ndarray:
    """Pre-disturbance edge angles: ``E b sin(eta) = p_m - d`` with ``eta`` in range(E^T)."""
    target = np.broadcast_to(model.nodes.p_m - model.nodes.d, (model.n,))
    eta = solve_edge_balance(model.E, model.edges, target, np.zeros(model.m))
    if np.any(model.edges.out_of_range(eta)):
        raise FlowSolveError("power-flow solution leaves the monotone angle range")
    return eta
