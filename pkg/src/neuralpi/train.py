"""Transient losses, backpropagation through Euler rollouts, Adam, and the training loop.

The gradient is the exact reverse-mode derivative of the batch-mean discrete
loss.  With ``z_{k+1} = z_k + dt G(z_k)`` and ``L = sum_{k=1..K} l_k(z_k)`` the
adjoint recursion is::

    lam_K = dl_K/dz_K
    lam_k = dl_k/dz_k + lam_{k+1} + dt J_G(z_k)^T lam_{k+1}

Parameter gradients collect ``dt (dG/dtheta)^T lam_{k+1}`` plus the direct
dependence of each ``l_k`` on the control action and edge outputs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import PowerNode, SystemModel, closed_loop_vjp, power_flow, rollout, solve_edge_balance, FlowSolveError

__all__ = [
    "TrainingError",
    "TrackingLoss",
    "EdgeOnlyLoss",
    "vehicle_tracking",
    "power_tracking",
    "transient_loss",
    "bptt_grad",
    "Adam",
    "adam_step",
    "step_decay",
    "Scenarios",
    "gen_scenarios",
    "TrainConfig",
    "TrainResult",
    "train",
    "loss_spec_from_dict",
]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; ``checkpoint`` holds the last good parameters."""

    def __init__(self, msg, step=None, checkpoint=None):
        super().__init__(msg)
        self.step = step
        self.checkpoint = checkpoint


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class TrackingLoss:
    """``sum_i [ max_w * max_k |e_ik| + sum_w * sum_k |e_ik| + sum_k c_i w_ik^power ]`` over k = 1..K."""

    c: np.ndarray
    power: int = 2
    max_weight: float = 0.0
    sum_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        if np.any(self.c < 0) or self.max_weight < 0 or self.sum_weight < 0:
            raise ValueError("loss weights must be nonnegative")

    def per_node(self, traj):
        dev = np.abs(traj.x[:, 1:] - traj.y_bar)
        w = traj.w[:, 1:]
        return (self.max_weight * dev.max(axis=1) + self.sum_weight * dev.sum(axis=1)
                + np.sum(self.c * w ** self.power, axis=1))

    def value(self, traj):
        return self.per_node(traj).sum(axis=-1)

    def grads(self, traj):
        dev = traj.x[:, 1:] - traj.y_bar
        sgn = np.sign(dev)
        gx = self.sum_weight * sgn
        if self.max_weight:
            k = np.argmax(np.abs(dev), axis=1)  # first maximiser on ties
            onehot = np.zeros_like(dev)
            np.put_along_axis(onehot, k[:, None, :], 1.0, axis=1)
            gx = gx + self.max_weight * sgn * onehot
        gw = self.c * self.power * traj.w[:, 1:] ** (self.power - 1)
        return _pad({"x": gx, "w": gw})

    def to_dict(self):
        return {"kind": "tracking", "c": self.c.tolist(), "power": self.power,
                "max_weight": self.max_weight, "sum_weight": self.sum_weight}


def vehicle_tracking(c) -> TrackingLoss:
    return TrackingLoss(c, power=2, max_weight=0.0, sum_weight=1.0)


def power_tracking(c, sum_weight: float = 0.05) -> TrackingLoss:
    return TrackingLoss(c, power=4, max_weight=1.0, sum_weight=sum_weight)


@dataclass(frozen=True)
class EdgeOnlyLoss:
    """Tail-window disagreement, small-spacing penalty and an edge-output regulariser."""

    window: int = 100
    spacing: float = 1.0
    reg: float = 0.01

    def value(self, traj):
        y = traj.x[:, 1:]
        tail = y[:, -self.window:]
        dis = np.abs(tail - tail.mean(axis=-1, keepdims=True)).sum(axis=(1, 2))
        gap = np.maximum(self.spacing - traj.eta[:, 1:], 0.0).sum(axis=(1, 2))
        reg = self.reg * np.sum(traj.mu[:, 1:] ** 2, axis=(1, 2))
        return dis + gap + reg

    def grads(self, traj):
        y = traj.x[:, 1:]
        K = y.shape[1]
        gx = np.zeros_like(y)
        tail = y[:, -self.window:]
        sg = np.sign(tail - tail.mean(axis=-1, keepdims=True))
        gx[:, K - tail.shape[1]:] = sg - sg.mean(axis=-1, keepdims=True)
        geta = -(traj.eta[:, 1:] < self.spacing).astype(float)
        gmu = 2.0 * self.reg * traj.mu[:, 1:]
        return _pad({"x": gx, "eta": geta, "mu": gmu})

    def to_dict(self):
        return {"kind": "edge-only", "window": self.window, "spacing": self.spacing, "reg": self.reg}


def _pad(g):
    # prepend a zero row for k = 0, which carries no loss
    return {k: np.concatenate([np.zeros_like(v[:, :1]), v], axis=1) for k, v in g.items()}


def loss_spec_from_dict(data):
    if data["kind"] == "tracking":
        return TrackingLoss(data["c"], data["power"], data["max_weight"], data["sum_weight"])
    if data["kind"] == "edge-only":
        return EdgeOnlyLoss(data["window"], data["spacing"], data["reg"])
    raise ValueError(f"unknown loss kind {data['kind']!r}")


def transient_loss(traj, spec):
    """Per-trajectory discrete loss, shape ``(B,)``."""
    return spec.value(traj)


# ---------------------------------------------------------------- BPTT


def bptt_grad(model: SystemModel, ctrl, loss_spec, x0, eta0, s0, K: int, dt: float):
    """Batch-mean loss and its gradient over controller and learnable-edge parameters.

    Returns ``(loss, grads, traj)``; ``grads`` maps parameter names (controller
    keys, plus ``edge.*`` when the edges are learnable) to arrays.
    """
    traj = rollout(model, ctrl, x0, eta0, s0, K, dt, scheme="euler")
    losses = loss_spec.value(traj)
    B = traj.B
    lg = loss_spec.grads(traj)
    n, m = model.n, model.m
    grads = {k: np.zeros_like(v) for k, v in ctrl.params().items()}
    if model.edges.learnable:
        grads.update({k: np.zeros_like(v) for k, v in model.edges.params().items()})
    lx = np.zeros((B, n))
    leta = np.zeros((B, m))
    ls = np.zeros((B, n))
    for k in range(K, -1, -1):
        xk, ek, sk = traj.x[:, k], traj.eta[:, k], traj.s[:, k]
        gw = lg["w"][:, k] if "w" in lg else None
        gmu = lg["mu"][:, k] if "mu" in lg else None
        gx, geta, gs, gp = closed_loop_vjp(model, ctrl, xk, ek, sk, dt * lx, dt * leta, dt * ls,
                                           gw_extra=gw, gmu_extra=gmu)
        lx = lx + gx + (lg["x"][:, k] if "x" in lg else 0.0)
        leta = leta + geta + (lg["eta"][:, k] if "eta" in lg else 0.0)
        ls = ls + gs
        for key, v in gp.items():
            grads[key] += v
        if not (np.all(np.isfinite(lx)) and np.all(np.isfinite(leta)) and np.all(np.isfinite(ls))):
            raise TrainingError(f"non-finite adjoint at step {k}", step=k)
    grads = {k: v / B for k, v in grads.items()}
    return float(losses.mean()), grads, traj


# ---------------------------------------------------------------- optimiser


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt: Adam, params: dict, grads: dict, lr: float) -> dict:
    """One bias-corrected Adam update; keys absent from ``grads`` are left unchanged."""
    opt.t += 1
    out = dict(params)
    for k, g in grads.items():
        m = opt.m.get(k, np.zeros_like(g))
        v = opt.v.get(k, np.zeros_like(g))
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        opt.m[k], opt.v[k] = m, v
        mh = m / (1 - opt.beta1 ** opt.t)
        vh = v / (1 - opt.beta2 ** opt.t)
        out[k] = params[k] - lr * mh / (np.sqrt(vh) + opt.eps)
    return out


def step_decay(lr0: float, episode: int, factor: float, period: int) -> float:
    return lr0 * factor ** (episode // period)


# ---------------------------------------------------------------- scenarios


@dataclass
class Scenarios:
    x0: np.ndarray
    eta0: np.ndarray
    s0: np.ndarray
    loads: np.ndarray | None = None

    def __len__(self):
        return self.x0.shape[0]

    def model_for(self, model: SystemModel) -> SystemModel:
        """Model whose node parameters carry the per-scenario loads (power only)."""
        if self.loads is None:
            return model
        nd = model.nodes
        return model.with_nodes(PowerNode(nd.rho, nd.p_m, self.loads, nd.x_bar))


MAX_LOAD_RESAMPLES = 100


def gen_scenarios(family: str, count: int, seed, model: SystemModel | None = None, n: int | None = None,
                  eta_nominal: float = 2.0, max_steps: int = 3) -> Scenarios:
    """Random initial conditions (vehicle) or load-step disturbances (power)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    if family == "vehicle":
        if model is not None:
            n, m = model.n, model.m
        elif n is not None:
            m = n - 1
        else:
            raise ValueError("vehicle scenarios need a model or n")
        return Scenarios(rng.uniform(5.0, 6.0, (count, n)), np.full((count, m), eta_nominal),
                         np.zeros((count, n)))
    if family != "power":
        raise ValueError(f"unknown system family {family!r}")
    if model is None:
        raise ValueError("power scenarios need a model")
    nd = model.nodes
    n = model.n
    eta0 = power_flow(model)
    loads = np.empty((count, n))
    for b in range(count):
        for _ in range(MAX_LOAD_RESAMPLES):
            d = np.array(nd.d, dtype=float, copy=True)
            k = int(rng.integers(1, max_steps + 1))
            idx = rng.choice(n, size=min(k, n), replace=False)
            d[idx] += rng.uniform(-1.0, 1.0, idx.size)
            net = nd.p_m - d
            target = net - net.mean()  # equal-share redistribution of the imbalance
            try:
                eta = solve_edge_balance(model.E, model.edges, target, eta0)
            except FlowSolveError:
                continue
            if not np.any(model.edges.out_of_range(eta)):
                loads[b] = d
                break
        else:
            raise FlowSolveError(f"could not draw a feasible load step in {MAX_LOAD_RESAMPLES} attempts")
    return Scenarios(np.full((count, n), nd.x_bar), np.tile(eta0, (count, 1)), np.zeros((count, n)), loads)


# ---------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    episodes: int = 50
    batch: int = 16
    K: int = 150
    dt: float = 0.02
    lr: float = 0.05
    decay: float = 0.7
    decay_every: int = 50
    seed: int = 0
    checkpoint_every: int = 10
    train_edges: bool = False

    def __post_init__(self):
        if self.episodes < 0 or self.batch < 1 or self.K < 1 or self.checkpoint_every < 1 or self.decay_every < 1:
            raise ValueError("episodes must be >= 0 and batch, K, checkpoint_every, decay_every >= 1")
        if self.dt <= 0 or self.lr <= 0:
            raise ValueError("dt and lr must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    ctrl: object
    model: SystemModel
    history: list
    checkpoints: list

    def history_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["episode", "mean_loss", "lr"])
        for h in self.history:
            wr.writerow([h["episode"], repr(h["loss"]), repr(h["lr"])])
        return buf.getvalue()


def _split(params: dict):
    ctrl_p = {k: v for k, v in params.items() if not k.startswith("edge.")}
    edge_p = {k: v for k, v in params.items() if k.startswith("edge.")}
    return ctrl_p, edge_p


def train(model: SystemModel, ctrl, loss_spec, config: TrainConfig, family: str | None = None,
          on_checkpoint=None) -> TrainResult:
    """Gradient-descent training over freshly drawn scenario batches.

    With ``config.train_edges`` only the learnable edge functions are updated;
    otherwise only the controller is.  ``on_checkpoint(episode, ctrl, model)``
    is called every ``checkpoint_every`` episodes and after the last one.
    """
    family = family or model.family
    if config.train_edges and not model.edges.learnable:
        raise ValueError("edge training requested but the edge feedback is not learnable")
    rng = np.random.default_rng(config.seed)
    opt = Adam()
    history, checkpoints = [], []

    def snapshot(ep):
        checkpoints.append({"episode": ep, "ctrl": ctrl.to_dict(), "edges": model.edges.to_dict()})
        if on_checkpoint is not None:
            on_checkpoint(ep, ctrl, model)

    for ep in range(config.episodes):
        sc = gen_scenarios(family, config.batch, int(rng.integers(2**31 - 1)), model=model)
        m_ep = sc.model_for(model)
        loss, grads, _ = bptt_grad(m_ep, ctrl, loss_spec, sc.x0, sc.eta0, sc.s0, config.K, config.dt)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"non-finite loss or gradient in episode {ep + 1}", step=ep + 1,
                                checkpoint=checkpoints[-1] if checkpoints else None)
        lr = step_decay(config.lr, ep, config.decay, config.decay_every)
        history.append({"episode": ep + 1, "loss": loss, "lr": lr})
        log.info("episode %d loss %.6g lr %.3g", ep + 1, loss, lr)
        g_ctrl, g_edge = _split(grads)
        if config.train_edges:
            new = adam_step(opt, model.edges.params(), g_edge, lr)
            model = model.with_edges(model.edges.with_params(new))
        else:
            new = adam_step(opt, ctrl.params(), g_ctrl, lr)
            ctrl = ctrl.with_params(new)
        if (ep + 1) % config.checkpoint_every == 0 or ep + 1 == config.episodes:
            snapshot(ep + 1)
    if config.episodes == 0:
        snapshot(0)
    return TrainResult(ctrl, model, history, checkpoints)


def checkpoints_json(result: TrainResult) -> str:
    return json.dumps(result.checkpoints)
