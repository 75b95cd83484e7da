"""Equilibria, Lyapunov monitoring, KKT residuals and steady-state metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from .control import CostFamily, DenseNN, ZeroController, grad_co_inv, marginal_cost, scaling_factors
from .dynamics import FlowSolveError, SystemModel, SystemState, closed_loop_deriv, solve_edge_balance

__all__ = [
    "EquilibriumError",
    "Equilibrium",
    "k_x_inverse",
    "equilibrium_input",
    "analytic_equilibrium",
    "design1_equilibrium",
    "invert_monotone",
    "bregman",
    "lyapunov_value",
    "lyapunov_rate",
    "lyapunov_decrement",
    "DecrementReport",
    "kkt_residual",
    "kkt_bisection",
    "eip_residual",
    "steady_metrics",
]


class EquilibriumError(RuntimeError):
    """No feasible equilibrium (unreachable control level or divergent Newton solve)."""


@dataclass
class Equilibrium:
    x_star: np.ndarray
    w_star: np.ndarray
    s_star: np.ndarray | None
    eta_star: np.ndarray
    gamma: float
    marginal_cost: float

    @property
    def state(self) -> SystemState:
        return SystemState(self.x_star, self.eta_star, self.s_star)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def k_x_inverse(node, y_bar):
    """Equilibrium input holding each node at output ``y_bar``."""
    return node.k_x_inverse(y_bar)


def equilibrium_input(cost: CostFamily, k, literal_sign: bool = False):
    """Optimal steady control ``w*`` and common marginal cost for net demand ``k``.

    ``w*_i = v / c_hat_i`` with ``v = sum(k) / sum(1 / c_hat)``, so that the
    balance ``sum(w*) = sum(k)`` holds.  ``literal_sign=True`` reproduces the
    negated formula, which breaks that balance and is kept only for regression
    checks.
    """
    k = np.asarray(k, dtype=float)
    c_hat = scaling_factors(cost) * np.ones_like(k)
    v = k.sum() / np.sum(1.0 / c_hat)
    if literal_sign:
        v = -v
    gamma = np.sign(v) * abs(v) ** (cost.p - 1)
    w = grad_co_inv(cost, gamma) / c_hat
    return w, float(gamma)


def invert_monotone(f, target, s0: float = 1.0, max_growth: int = 80, iters: int = 200):
    """Componentwise solve of ``f(s) = target`` for an increasing elementwise ``f``.

    The bracket ``[-S, S]`` grows geometrically until it contains the target.
    """
    target = np.asarray(target, dtype=float)
    S = np.full(target.shape, float(s0))
    for _ in range(max_growth):
        lo_ok = f(-S) <= target
        hi_ok = f(S) >= target
        if np.all(lo_ok & hi_ok):
            break
        S = np.where(lo_ok & hi_ok, S, 2.0 * S)
    else:
        raise EquilibriumError("control function range cannot reach the required steady input")
    lo, hi = -S, S.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = f(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid))):
            break
    # pick the endpoint with the smaller residual
    return np.where(np.abs(f(lo) - target) < np.abs(f(hi) - target), lo, hi)


def _default_eta_ref(model: SystemModel):
    off = getattr(model.edges, "offset", 0.0)
    return np.broadcast_to(np.asarray(off, dtype=float), (model.m,)).copy()


def analytic_equilibrium(model: SystemModel, cost: CostFamily, y_bar: float | None = None, ctrl=None,
                         eta_ref=None) -> Equilibrium:
    """Steady state of the communication-augmented design.

    ``eta*`` lies in ``eta_ref + range(E^T)`` (the affine set reachable from an
    initial edge state ``eta_ref``); ``s*`` is only computed when a controller
    is given.
    """
    y_bar = model.y_bar if y_bar is None else float(y_bar)
    k = np.broadcast_to(model.nodes.k_x_inverse(y_bar), (model.n,))
    w, gamma = equilibrium_input(cost, k)
    eta_ref = _default_eta_ref(model) if eta_ref is None else np.asarray(eta_ref, dtype=float)
    try:
        eta = solve_edge_balance(model.E, model.edges, w - k, eta_ref)
    except FlowSolveError as exc:
        raise EquilibriumError(f"no feasible edge equilibrium: {exc}") from exc
    s = None
    if ctrl is not None:
        s = invert_monotone(ctrl.r, w)
    mc = float(np.mean(marginal_cost(cost, w)))
    return Equilibrium(np.full(model.n, y_bar), w, s, eta, gamma, mc)


def design1_equilibrium(model: SystemModel, ctrl, eta0, s0, tol: float = 1e-12,
                        max_iter: int = 200) -> Equilibrium:
    """Steady state reached by the agreement-only design from ``(eta0, s0)``.

    ``eta + E^T s`` is conserved along trajectories, which pins the equilibrium
    among the continuum allowed by the algebraic conditions.
    """
    E = model.E
    k = np.broadcast_to(model.nodes.k_x_inverse(model.y_bar), (model.n,))
    c0 = np.asarray(eta0, dtype=float) + np.asarray(s0, dtype=float) @ E

    def resid(s):
        eta = c0 - s @ E
        return ctrl.r(s) - E @ model.edges.value(eta) - k, eta

    s = np.array(s0, dtype=float)
    F, eta = resid(s)
    fn = np.max(np.abs(F))
    for _ in range(max_iter):
        if fn <= tol:
            break
        J = np.diag(ctrl.r_grad(s)) + (E * model.edges.grad(eta)) @ E.T
        ds = np.linalg.solve(J, -F)
        step = 1.0
        while step > 1e-12:
            Fn, etan = resid(s + step * ds)
            fnn = np.max(np.abs(Fn))
            if np.isfinite(fnn) and fnn < fn:
                break
            step *= 0.5
        else:
            if fn <= 1e-10:
                break
            raise EquilibriumError("Newton line search failed for the agreement equilibrium")
        s, F, eta, fn = s + step * ds, Fn, etan, fnn
    else:
        if fn > 1e-10:
            raise EquilibriumError(f"agreement equilibrium solve did not converge (residual {fn:.3g})")
    w = ctrl.r(s)
    return Equilibrium(np.full(model.n, model.y_bar), w, s, eta, float("nan"), float("nan"))


def kkt_bisection(cost: CostFamily, total: float, iters: int = 300) -> np.ndarray:
    """Reference allocation: bisection on the common marginal cost ``lam``."""
    c = np.asarray(cost.c, dtype=float)
    lo, hi = -1.0, 1.0
    while np.sum(cost.grad_inv(lo)) > total:
        lo *= 2
    while np.sum(cost.grad_inv(hi)) < total:
        hi *= 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.sum(cost.grad_inv(mid)) < total:
            lo = mid
        else:
            hi = mid
    return cost.grad_inv(0.5 * (lo + hi)) * np.ones_like(c)


# ---------------------------------------------------------------- Lyapunov


def bregman(fn, v, v_star, antiderivative=None):
    """``L(v) - L(v*) - fn(v*) (v - v*)`` with ``L`` an antiderivative of ``fn``.

    ``fn`` may be a plain callable with ``antiderivative`` supplied, or any
    object exposing ``__call__`` (or ``value``) and ``antiderivative``.
    """
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    value = fn.value if hasattr(fn, "value") else fn
    L = antiderivative if antiderivative is not None else fn.antiderivative
    return L(v) - L(v_star) - value(v_star) * (v - v_star)


def _r_bregman(ctrl, s, s_star):
    return bregman(ctrl.r, s, s_star, ctrl.r_antiderivative)


def lyapunov_value(model: SystemModel, ctrl, state: SystemState, eq: Equilibrium):
    """Storage plus edge and integral Bregman distances (batched over leading axes)."""
    V = np.sum(model.nodes.storage(state.x, eq.x_star), axis=-1)
    if model.m:
        V = V + np.sum(bregman(model.edges, state.eta, eq.eta_star), axis=-1)
    V = V + np.sum(_r_bregman(ctrl, state.s, eq.s_star), axis=-1)
    return V


def lyapunov_rate(model: SystemModel, ctrl, state: SystemState, eq: Equilibrium):
    """Exact ``dV/dt`` along the closed-loop vector field."""
    dx, deta, ds = closed_loop_deriv(model, ctrl, state)
    rate = np.sum(model.nodes.storage_grad(state.x, eq.x_star) * dx, axis=-1)
    if model.m:
        rate = rate + np.sum((model.edges.value(state.eta) - model.edges.value(eq.eta_star)) * deta, axis=-1)
    rate = rate + np.sum((ctrl.r(state.s) - ctrl.r(eq.s_star)) * ds, axis=-1)
    return rate


@dataclass
class DecrementReport:
    t: np.ndarray
    V: np.ndarray
    rate: np.ndarray            # (V[k+1] - V[k]) / dt
    bound: np.ndarray           # -sum rho (y - y*)^2, averaged over the step
    tol: float
    violations: np.ndarray      # step indices with rate > bound + tol
    worst_residual: float       # max |rate - dV/dt(t_k)|
    worst_step: int
    applicable: bool = True

    @property
    def passed(self) -> bool:
        return self.violations.size == 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "V", "decrement", "bound"])
        for k in range(self.rate.size):
            wr.writerow([repr(float(self.t[k])), repr(float(self.V[k])), repr(float(self.rate[k])),
                         repr(float(self.bound[k]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"passed": self.passed, "applicable": self.applicable, "tol": self.tol,
                "n_violations": int(self.violations.size),
                "violation_steps": self.violations[:20].tolist(),
                "worst_residual": self.worst_residual, "worst_step": self.worst_step}


def lyapunov_decrement(traj, model: SystemModel, ctrl, eq: Equilibrium, batch_index: int = 0,
                       tol_coef: float = 0.05, bound: str = "trapezoid") -> DecrementReport:
    """Discrete decrement series and bound check for one trajectory of a batch.

    ``bound`` selects where the dissipation bound is evaluated: ``"left"`` uses
    the step's start point, ``"trapezoid"`` the average of both endpoints.
    """
    b = batch_index
    st = SystemState(traj.x[b], traj.eta[b], traj.s[b])
    V = lyapunov_value(model, ctrl, st, eq)
    rate = np.diff(V) / traj.dt
    diss = -np.sum(model.nodes.eip_rho() * (traj.x[b] - eq.x_star) ** 2, axis=-1)
    if bound == "left":
        bnd = diss[:-1]
    elif bound == "trapezoid":
        bnd = 0.5 * (diss[:-1] + diss[1:])
    else:
        raise ValueError(f"unknown bound placement {bound!r}")
    tol = tol_coef * traj.dt * max(float(V[0]), 1.0)
    viol = np.flatnonzero(rate > bnd + tol)
    exact = lyapunov_rate(model, ctrl, SystemState(traj.x[b, :-1], traj.eta[b, :-1], traj.s[b, :-1]), eq)
    res = np.abs(rate - exact)
    k = int(np.argmax(res))
    applicable = not isinstance(ctrl, (DenseNN, ZeroController))
    return DecrementReport(traj.t, V, rate, bnd, tol, viol, float(res[k]), k, applicable)


# ---------------------------------------------------------------- KKT / EIP


def kkt_residual(cost: CostFamily, w, model: SystemModel, y_bar: float | None = None):
    """``(marginal-cost spread, balance residual)`` for a steady control ``w``."""
    y_bar = model.y_bar if y_bar is None else y_bar
    mc = marginal_cost(cost, w)
    k = np.broadcast_to(model.nodes.k_x_inverse(y_bar), (model.n,))
    return float(np.max(mc) - np.min(mc)), float(abs(np.sum(w) - np.sum(k)))


def eip_residual(node, x, u, x_star, u_star):
    """``dW/dt + rho (y - y*)^2 - (y - y*)(u - u*)``; nonpositive for strictly EIP nodes."""
    a, b, c = node.affine()
    dx = a * x + b * u + c
    return node.storage_grad(x, x_star) * dx + node.eip_rho() * (x - x_star) ** 2 - (x - x_star) * (u - u_star)


# ---------------------------------------------------------------- metrics


def steady_metrics(traj, y_bar: float, eps: float, sample_time: float | None = None,
                   cost: CostFamily | None = None, batch_index: int = 0):
    """``(agreement_error, settling_time, steady_cost)`` for one trajectory.

    ``settling_time`` is ``inf`` when the final deviation exceeds ``eps``;
    ``steady_cost`` samples ``w`` at ``sample_time`` (default: end) and is
    ``nan`` without a cost family.
    """
    x = traj.x[batch_index]
    dev = np.max(np.abs(x - y_bar), axis=-1)
    err = float(dev[-1])
    outside = np.flatnonzero(dev > eps)
    if outside.size == 0:
        ts = 0.0
    elif outside[-1] == dev.size - 1:
        ts = float("inf")
    else:
        ts = float(traj.t[outside[-1] + 1])
    if cost is None:
        sc = float("nan")
    else:
        k = dev.size - 1 if sample_time is None else int(min(round(sample_time / traj.dt), dev.size - 1))
        sc = float(np.sum(cost.value(traj.w[batch_index, k])))
    return err, ts, sc
