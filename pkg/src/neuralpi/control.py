"""Controllers and cost families.

Every controller exposes the same small protocol used by the closed loop and
by BPTT:

``evaluate(e, s) -> (w, comm)``
    control action ``w`` for tracking error ``e = y_bar - y`` and integral
    state ``s``; ``comm`` is the communication correction subtracted from
    ``s'`` (zeros when there is none).
``vjp(e, s, gw, gcomm) -> (ge, gs, gparams)``
    reverse-mode product of the above.
``params() / with_params(dict)``
    flat dictionary of trainable arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .graph import Graph, is_connected
from .monotone import (MonotoneParams, antiderivative as mono_antiderivative, grad_params,
                       init as mono_init, linear_params, materialize)

__all__ = [
    "CostFamily",
    "marginal_cost",
    "grad_co_inv",
    "scaling_factors",
    "Phi",
    "Communication",
    "ZeroController",
    "LinearPI",
    "NeuralPI",
    "DenseNN",
    "control_output",
    "integral_deriv",
    "controller_from_dict",
    "load_controller",
    "save_controller",
]


# ---------------------------------------------------------------- costs


@dataclass(frozen=True)
class CostFamily:
    """``C_i(w) = (c_i / p) w^p`` with even ``p >= 2``."""

    p: int
    c: np.ndarray

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 2 or self.p % 2:
            raise ValueError(f"cost exponent must be an even integer >= 2, got {self.p!r}")
        object.__setattr__(self, "p", int(self.p))
        c = np.asarray(self.c, dtype=float)
        if np.any(c <= 0):
            raise ValueError("cost coefficients must be positive")
        object.__setattr__(self, "c", c)

    @property
    def c_hat(self) -> np.ndarray:
        return scaling_factors(self)

    def value(self, w):
        return self.c / self.p * np.asarray(w, dtype=float) ** self.p

    def grad(self, w):
        return marginal_cost(self, w)

    def grad_inv(self, lam):
        """Per-node inverse marginal cost: the ``w_i`` with ``c_i w_i^(p-1) = lam``."""
        lam = np.asarray(lam, dtype=float)
        return np.sign(lam) * (np.abs(lam) / self.c) ** (1.0 / (self.p - 1))

    def to_dict(self):
        return {"p": self.p, "c": self.c.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["p"], data["c"])


def marginal_cost(cost: CostFamily, w):
    return cost.c * np.asarray(w, dtype=float) ** (cost.p - 1)


def grad_co_inv(cost, gamma):
    """Inverse of ``z -> z^(p-1)``; accepts a :class:`CostFamily` or the exponent."""
    p = cost.p if isinstance(cost, CostFamily) else int(cost)
    gamma = np.asarray(gamma, dtype=float)
    return np.sign(gamma) * np.abs(gamma) ** (1.0 / (p - 1))


def scaling_factors(cost: CostFamily) -> np.ndarray:
    """``c_hat`` with ``grad C_i(w) = grad C_o(c_hat_i w)`` for ``C_o(z) = z^p / p``."""
    return cost.c ** (1.0 / (cost.p - 1))


# ---------------------------------------------------------------- communication


@dataclass(frozen=True)
class Phi:
    """Odd, sign-preserving edge map on the communication graph."""

    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in ("identity", "tanh"):
            raise ValueError(f"unknown phi {self.kind!r}")

    def __call__(self, v):
        return v if self.kind == "identity" else np.tanh(v)

    def grad(self, v):
        return np.ones_like(v) if self.kind == "identity" else 1.0 / np.cosh(v) ** 2


@dataclass(frozen=True)
class Communication:
    """Marginal-cost exchange ``c_hat * (Et phi(Et^T grad C(r)))`` over a communication graph."""

    graph: Graph
    cost: CostFamily
    phi: Phi = Phi()

    def __post_init__(self):
        if not is_connected(self.graph):
            raise ValueError("communication graph must be connected")
        if np.shape(self.cost.c) not in ((), (self.graph.n,)):
            raise ValueError("cost coefficients do not match the communication graph size")

    @cached_property
    def c_hat(self):
        return scaling_factors(self.cost)

    def term(self, r):
        Et = self.graph.incidence
        o = marginal_cost(self.cost, r)
        return self.c_hat * (self.phi(o @ Et) @ Et.T)

    def vjp(self, r, g):
        Et = self.graph.incidence
        p = self.cost.p
        o = marginal_cost(self.cost, r)
        zeta = o @ Et
        gmu = (self.c_hat * g) @ Et
        go = (gmu * self.phi.grad(zeta)) @ Et.T
        return go * self.cost.c * (p - 1) * np.asarray(r, dtype=float) ** (p - 2)

    def cross_term(self, r):
        """``r^T c_hat (Et phi(Et^T grad C(r)))``; nonnegative for every ``r``."""
        return np.sum(np.asarray(r) * self.term(r), axis=-1)

    def to_dict(self):
        return {"graph": self.graph.to_dict(), "cost": self.cost.to_dict(), "phi": self.phi.kind}

    @classmethod
    def from_dict(cls, data):
        return cls(Graph.from_dict(data["graph"]), CostFamily.from_dict(data["cost"]),
                   Phi(data.get("phi", "identity")))


def _sum_to(a, shape):
    a = np.asarray(a, dtype=float)
    lead = a.ndim - len(shape)
    return a.sum(axis=tuple(range(lead))) if lead > 0 else a


# ---------------------------------------------------------------- controllers


class ZeroController:
    """``w = 0``; used when only the edge feedback is learned."""

    variant = "zero"
    comm = None

    def evaluate(self, e, s):
        z = np.zeros(np.broadcast_shapes(np.shape(e), np.shape(s)))
        return z, z

    def vjp(self, e, s, gw, gcomm):
        z = np.zeros(np.broadcast_shapes(np.shape(e), np.shape(s)))
        return z, z.copy(), {}

    def params(self):
        return {}

    def with_params(self, params):
        return self

    def to_dict(self):
        return {"variant": "zero"}


class _PIBase:
    """Shared evaluation for ``w = p(e) + r(s)`` with an optional communication layer."""

    comm: Communication | None

    # subclasses define: p, p_grad, r, r_grad, r_antiderivative, _p_vjp, _r_vjp

    def evaluate(self, e, s):
        e = np.asarray(e, dtype=float)
        s = np.asarray(s, dtype=float)
        r = self.r(s)
        w = self.p(e) + r
        comm = self.comm.term(r) if self.comm is not None else np.zeros_like(w)
        return w, comm

    def vjp(self, e, s, gw, gcomm):
        e = np.asarray(e, dtype=float)
        s = np.asarray(s, dtype=float)
        ge = gw * self.p_grad(e)
        gr = gw
        if self.comm is not None:
            gr = gr + self.comm.vjp(self.r(s), gcomm)
        gs = gr * self.r_grad(s)
        gparams = self._p_vjp(e, gw)
        gparams.update(self._r_vjp(s, gr))
        return ge, gs, gparams

    def _comm_dict(self):
        return None if self.comm is None else self.comm.to_dict()


@dataclass(frozen=True)
class LinearPI(_PIBase):
    """``w = theta1 * e + theta2 * s``."""

    theta1: np.ndarray
    theta2: np.ndarray
    comm: Communication | None = None

    variant = "linear"

    def __post_init__(self):
        object.__setattr__(self, "theta1", np.asarray(self.theta1, dtype=float))
        object.__setattr__(self, "theta2", np.asarray(self.theta2, dtype=float))

    @classmethod
    def unit(cls, n: int, comm=None):
        return cls(np.ones(n), np.ones(n), comm)

    def p(self, e):
        return self.theta1 * e

    def p_grad(self, e):
        return np.broadcast_to(self.theta1, np.shape(e)).copy()

    def r(self, s):
        return self.theta2 * s

    def r_grad(self, s):
        return np.broadcast_to(self.theta2, np.shape(s)).copy()

    def r_antiderivative(self, s):
        return 0.5 * self.theta2 * s ** 2

    def _p_vjp(self, e, gw):
        return {"theta1": _sum_to(gw * e, self.theta1.shape)}

    def _r_vjp(self, s, gr):
        return {"theta2": _sum_to(gr * s, self.theta2.shape)}

    def is_design1(self) -> bool:
        return bool(np.all(self.theta1 > 0) and np.all(self.theta2 > 0))

    def params(self):
        return {"theta1": self.theta1, "theta2": self.theta2}

    def with_params(self, params):
        return LinearPI(params["theta1"], params["theta2"], self.comm)

    def to_dict(self):
        return {"variant": "linear", "theta1": self.theta1.tolist(), "theta2": self.theta2.tolist(),
                "comm": self._comm_dict()}


@dataclass(frozen=True)
class NeuralPI(_PIBase):
    """``w_i = p_i(e_i) + r_i(s_i)`` with per-node monotone networks.

    With ``comm`` set this is the communication-augmented design whose integral
    law equalizes marginal costs at steady state.
    """

    p_params: MonotoneParams
    r_params: MonotoneParams
    comm: Communication | None = None

    @property
    def variant(self):
        return "neural-pi" if self.comm is None else "neural-pi-comm"

    @classmethod
    def init(cls, n: int, d: int, seed, scale: float = 0.5, comm=None, center: float = 0.0):
        rng = np.random.default_rng(seed)
        s1, s2 = rng.integers(2**31 - 1, size=2)
        return cls(mono_init(d, int(s1), scale, (n,), center=center),
                   mono_init(d, int(s2), scale, (n,), center=center), comm)

    @classmethod
    def linear(cls, n: int, kp=1.0, ki=1.0, comm=None):
        return cls(linear_params(kp, channels=(n,)), linear_params(ki, channels=(n,)), comm)

    @cached_property
    def p_weights(self):
        return materialize(self.p_params)

    @cached_property
    def r_weights(self):
        return materialize(self.r_params)

    def p(self, e):
        return self.p_weights(e)

    def p_grad(self, e):
        return self.p_weights.grad(e)

    def r(self, s):
        return self.r_weights(s)

    def r_grad(self, s):
        return self.r_weights.grad(s)

    def r_antiderivative(self, s):
        return mono_antiderivative(self.r_weights, s)

    def _p_vjp(self, e, gw):
        g = grad_params(self.p_weights, self.p_params, e, gw)
        return {f"p.{k}": v for k, v in g.arrays().items()}

    def _r_vjp(self, s, gr):
        g = grad_params(self.r_weights, self.r_params, s, gr)
        return {f"r.{k}": v for k, v in g.arrays().items()}

    def is_design1(self) -> bool:
        return True

    def params(self):
        out = {f"p.{k}": v for k, v in self.p_params.arrays().items()}
        out.update({f"r.{k}": v for k, v in self.r_params.arrays().items()})
        return out

    def with_params(self, params):
        keys = self.p_params.arrays().keys()
        return NeuralPI(MonotoneParams(**{k: params[f"p.{k}"] for k in keys}),
                        MonotoneParams(**{k: params[f"r.{k}"] for k in keys}), self.comm)

    def to_dict(self):
        return {"variant": self.variant, "p": self.p_params.to_dict(), "r": self.r_params.to_dict(),
                "comm": self._comm_dict()}


@dataclass(frozen=True)
class DenseNN:
    """Unstructured per-node baseline: ``w_i = W2_i relu(W1_i [e_i, s_i] + b1_i) + b2_i``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    variant = "dense"
    comm = None

    def __post_init__(self):
        for k in ("W1", "b1", "W2", "b2"):
            object.__setattr__(self, k, np.asarray(getattr(self, k), dtype=float))

    @classmethod
    def init(cls, n: int, seed, hidden: int = 20, scale: float = 0.3):
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((n, hidden, 2)), np.zeros((n, hidden)),
                   scale * rng.standard_normal((n, hidden)) / np.sqrt(hidden), np.zeros(n))

    def _inputs(self, e, s):
        e, s = np.broadcast_arrays(np.asarray(e, dtype=float), np.asarray(s, dtype=float))
        return np.stack([e, s], axis=-1)

    def evaluate(self, e, s):
        inp = self._inputs(e, s)
        h = np.maximum(np.einsum("nhk,...nk->...nh", self.W1, inp) + self.b1, 0.0)
        w = np.sum(self.W2 * h, axis=-1) + self.b2
        return w, np.zeros_like(w)

    def vjp(self, e, s, gw, gcomm):
        inp = self._inputs(e, s)
        z1 = np.einsum("nhk,...nk->...nh", self.W1, inp) + self.b1
        h = np.maximum(z1, 0.0)
        gh = gw[..., None] * self.W2
        gz = gh * (z1 > 0)
        n, H = self.b1.shape
        gz2 = gz.reshape(-1, n, H)
        grads = {
            "W1": np.einsum("bnh,bnk->nhk", gz2, inp.reshape(-1, n, 2)),
            "b1": gz2.sum(axis=0),
            "W2": (gw[..., None] * h).reshape(-1, n, H).sum(axis=0),
            "b2": _sum_to(gw, self.b2.shape),
        }
        ginp = np.einsum("...nh,nhk->...nk", gz, self.W1)
        return ginp[..., 0], ginp[..., 1], grads

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def with_params(self, params):
        return DenseNN(params["W1"], params["b1"], params["W2"], params["b2"])

    def to_dict(self):
        return {"variant": "dense", **{k: v.tolist() for k, v in self.params().items()}}


# ---------------------------------------------------------------- functional API


def control_output(ctrl, y, y_bar, s):
    return ctrl.evaluate(y_bar - np.asarray(y, dtype=float), s)[0]


def integral_deriv(ctrl, y, y_bar, s):
    """``s' = -(y - y_bar) - comm``."""
    e = y_bar - np.asarray(y, dtype=float)
    _, comm = ctrl.evaluate(e, s)
    return e - comm


def controller_from_dict(data: dict):
    variant = data.get("variant")
    comm = Communication.from_dict(data["comm"]) if data.get("comm") else None
    if variant == "zero":
        return ZeroController()
    if variant == "linear":
        return LinearPI(data["theta1"], data["theta2"], comm)
    if variant in ("neural-pi", "neural-pi-comm"):
        if variant == "neural-pi-comm" and comm is None:
            raise ValueError("neural-pi-comm controller needs a 'comm' block")
        return NeuralPI(MonotoneParams.from_dict(data["p"]), MonotoneParams.from_dict(data["r"]), comm)
    if variant == "dense":
        return DenseNN(data["W1"], data["b1"], data["W2"], data["b2"])
    raise ValueError(f"unknown controller variant {variant!r}")


def save_controller(ctrl, path) -> None:
    with open(path, "w") as fh:
        json.dump(ctrl.to_dict(), fh)


def load_controller(path):
    with open(path) as fh:
        return controller_from_dict(json.load(fh))
