"""Stacked-ReLU monotone scalar functions.

A function is stored as unconstrained parameters (:class:`MonotoneParams`) and
evaluated through its materialized weights (:class:`MonotoneWeights`)::

    g(z) = sum_j a+_j relu(z - b+_j) + sum_j a-_j relu(-z + b-_j) + slope_floor * z

Squaring the unconstrained parameters makes every partial sum of ``a+``
nonnegative, every partial sum of ``a-`` nonpositive, and orders the biases
``... <= b-_2 <= b-_1 = 0 = b+_1 <= b+_2 <= ...``.  Together with the fixed
``slope_floor`` term this gives a strictly increasing, piecewise-linear ``g``
with ``g(0) = 0``.

All arrays carry a trailing neuron axis of length ``d``.  Leading axes are
"channels": a stack of independent functions, e.g. one per node.  Inputs ``z``
broadcast against the channel shape, so a ``(n, d)`` stack evaluates a batch
``z`` of shape ``(B, n)`` elementwise.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SLOPE_FLOOR",
    "MonotoneParams",
    "MonotoneWeights",
    "materialize",
    "forward",
    "grad_input",
    "grad_params",
    "antiderivative",
    "interpolate_monotone",
    "init",
    "linear_params",
    "dump_table",
]

SLOPE_FLOOR = 1e-6


def _relu(v):
    return np.maximum(v, 0.0)


@dataclass(frozen=True)
class MonotoneParams:
    """Unconstrained parameters; any real values are admissible."""

    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    beta_plus: np.ndarray
    beta_minus: np.ndarray

    def __post_init__(self):
        for name in ("alpha_plus", "alpha_minus", "beta_plus", "beta_minus"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        d = self.alpha_plus.shape[-1]
        if d < 1:
            raise ValueError("monotone function needs at least one neuron")
        if self.alpha_minus.shape != self.alpha_plus.shape:
            raise ValueError("alpha_plus and alpha_minus shapes differ")
        expect = self.alpha_plus.shape[:-1] + (d - 1,)
        if self.beta_plus.shape != expect or self.beta_minus.shape != expect:
            raise ValueError(f"bias parameters must have shape {expect}")

    @property
    def d(self) -> int:
        return self.alpha_plus.shape[-1]

    @property
    def channels(self) -> tuple[int, ...]:
        return self.alpha_plus.shape[:-1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"alpha_plus": self.alpha_plus, "alpha_minus": self.alpha_minus,
                "beta_plus": self.beta_plus, "beta_minus": self.beta_minus}

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.arrays().items()}

    @classmethod
    def from_dict(cls, data: dict) -> "MonotoneParams":
        return cls(**{k: np.asarray(data[k], dtype=float)
                      for k in ("alpha_plus", "alpha_minus", "beta_plus", "beta_minus")})


@dataclass(frozen=True)
class MonotoneWeights:
    """Materialized weights; satisfy the ordering and partial-sum constraints."""

    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    beta_plus: np.ndarray
    beta_minus: np.ndarray
    slope_floor: float = SLOPE_FLOOR

    def __post_init__(self):
        for name in ("alpha_plus", "alpha_minus", "beta_plus", "beta_minus"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.slope_floor < 0:
            raise ValueError("slope_floor must be nonnegative")

    @property
    def d(self) -> int:
        return self.alpha_plus.shape[-1]

    def __call__(self, z):
        return forward(self, z)

    def grad(self, z):
        return grad_input(self, z)

    def antiderivative(self, z):
        return antiderivative(self, z)

    def constraint_violation(self) -> float:
        """Largest violation of the bias-ordering and partial-sum constraints (0 if none)."""
        worst = 0.0
        worst = max(worst, float(np.max(np.abs(self.beta_plus[..., 0]), initial=0.0)))
        worst = max(worst, float(np.max(np.abs(self.beta_minus[..., 0]), initial=0.0)))
        worst = max(worst, float(np.max(-np.diff(self.beta_plus, axis=-1), initial=0.0)))
        worst = max(worst, float(np.max(np.diff(self.beta_minus, axis=-1), initial=0.0)))
        worst = max(worst, float(np.max(-np.cumsum(self.alpha_plus, axis=-1), initial=0.0)))
        worst = max(worst, float(np.max(np.cumsum(self.alpha_minus, axis=-1), initial=0.0)))
        return worst


def materialize(p: MonotoneParams, slope_floor: float = SLOPE_FLOOR) -> MonotoneWeights:
    sq_ap = p.alpha_plus ** 2
    sq_am = p.alpha_minus ** 2
    alpha_plus = np.diff(sq_ap, axis=-1, prepend=0.0)
    alpha_minus = -np.diff(sq_am, axis=-1, prepend=0.0)
    zeros = np.zeros(p.channels + (1,))
    beta_plus = np.concatenate([zeros, np.cumsum(p.beta_plus ** 2, axis=-1)], axis=-1)
    beta_minus = -np.concatenate([zeros, np.cumsum(p.beta_minus ** 2, axis=-1)], axis=-1)
    return MonotoneWeights(alpha_plus, alpha_minus, beta_plus, beta_minus, slope_floor)


def forward(w: MonotoneWeights, z):
    z = np.asarray(z, dtype=float)
    zz = z[..., None]
    g = (np.sum(w.alpha_plus * _relu(zz - w.beta_plus), axis=-1)
         + np.sum(w.alpha_minus * _relu(w.beta_minus - zz), axis=-1))
    return g + w.slope_floor * z


def grad_input(w: MonotoneWeights, z):
    """dg/dz, with the convention that a neuron exactly at its kink contributes 0."""
    z = np.asarray(z, dtype=float)
    zz = z[..., None]
    slope = (np.sum(w.alpha_plus * (zz > w.beta_plus), axis=-1)
             - np.sum(w.alpha_minus * (zz < w.beta_minus), axis=-1))
    return slope + w.slope_floor


def antiderivative(w: MonotoneWeights, z):
    """Exact integral of ``g`` from 0 to ``z``."""
    z = np.asarray(z, dtype=float)
    zz = z[..., None]
    plus = w.alpha_plus * (_relu(zz - w.beta_plus) ** 2 - _relu(-w.beta_plus) ** 2)
    minus = w.alpha_minus * (_relu(w.beta_minus) ** 2 - _relu(w.beta_minus - zz) ** 2)
    return 0.5 * (np.sum(plus, axis=-1) + np.sum(minus, axis=-1)) + 0.5 * w.slope_floor * z ** 2


def _sum_to(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = arr.ndim - len(shape)
    if lead:
        arr = arr.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr


def _revcumsum(a: np.ndarray) -> np.ndarray:
    return np.flip(np.cumsum(np.flip(a, axis=-1), axis=-1), axis=-1)


def grad_params(w: MonotoneWeights, p: MonotoneParams, z, upstream) -> MonotoneParams:
    """Gradient of ``sum(upstream * g(z))`` with respect to the unconstrained parameters.

    ``z`` and ``upstream`` broadcast together; contributions from axes beyond the
    channel shape are summed.
    """
    z = np.asarray(z, dtype=float)
    up = np.broadcast_to(np.asarray(upstream, dtype=float), np.broadcast_shapes(np.shape(upstream), z.shape))
    zz = np.broadcast_to(z, up.shape)[..., None]
    uu = up[..., None]
    act_p = zz > w.beta_plus
    act_m = zz < w.beta_minus
    shape = p.alpha_plus.shape
    g_ap = _sum_to(uu * _relu(zz - w.beta_plus), shape)
    g_am = _sum_to(uu * _relu(w.beta_minus - zz), shape)
    g_bp = _sum_to(-uu * w.alpha_plus * act_p, shape)
    g_bm = _sum_to(uu * w.alpha_minus * act_m, shape)

    def next_(a):
        return np.concatenate([a[..., 1:], np.zeros(a.shape[:-1] + (1,))], axis=-1)

    return MonotoneParams(
        alpha_plus=2.0 * p.alpha_plus * (g_ap - next_(g_ap)),
        alpha_minus=-2.0 * p.alpha_minus * (g_am - next_(g_am)),
        beta_plus=2.0 * p.beta_plus * _revcumsum(g_bp[..., 1:]),
        beta_minus=-2.0 * p.beta_minus * _revcumsum(g_bm[..., 1:]),
    )


def interpolate_monotone(z, r, d: int | None = None, slope_floor: float = SLOPE_FLOOR,
                         origin_tol: float = 1e-9) -> MonotoneParams:
    """Parameters whose materialized function interpolates ``(z, r)`` piecewise linearly.

    ``z`` must be a strictly increasing uniform grid containing the origin and
    ``r`` nondecreasing with ``r(0) = 0``.  Knots sit on the grid points, so the
    result matches the samples exactly wherever the segment slopes exceed
    ``slope_floor``, and its sup error against an ``L``-Lipschitz target is at
    most ``L * tau`` on the sampled interval.  Outside the grid the function
    continues with the outermost segment slopes.
    """
    z = np.asarray(z, dtype=float)
    r = np.asarray(r, dtype=float)
    if z.ndim != 1 or z.shape != r.shape or z.size < 2:
        raise ValueError("samples must be two equal-length 1-D arrays with at least 2 points")
    dz = np.diff(z)
    if np.any(dz <= 0):
        raise ValueError("sample locations must be strictly increasing")
    tau = dz.mean()
    if not np.allclose(dz, tau, rtol=1e-9, atol=0.0):
        raise ValueError("sample grid is not uniform")
    if np.any(np.diff(r) < 0):
        raise ValueError("sample values are not monotonically nondecreasing")
    k0 = int(np.argmin(np.abs(z)))
    if abs(z[k0]) > 1e-9 * tau:
        raise ValueError("sample grid must contain the origin")
    if abs(r[k0]) > origin_tol:
        raise ValueError(f"target must pass through the origin, got r(0) = {r[k0]:.3g}")

    slopes_p = np.diff(r[k0:]) / tau
    slopes_m = np.diff(r[:k0 + 1])[::-1] / tau
    need = max(slopes_p.size, slopes_m.size, 1)
    if d is None:
        d = need
    elif d < need:
        raise ValueError(f"d = {d} neurons cannot represent {need} grid segments per side")

    def side(slopes):
        k = slopes.size
        full = np.zeros(d)
        if k:
            full[:k] = slopes
            full[k:] = slopes[-1]
        a = np.sqrt(np.maximum(full - slope_floor, 0.0))
        b = np.zeros(d - 1)
        b[:max(k - 1, 0)] = np.sqrt(tau)
        return a, b

    ap, bp = side(slopes_p)
    am, bm = side(slopes_m)
    return MonotoneParams(ap, am, bp, bm)


def init(d: int, seed, scale: float = 0.5, channels: tuple[int, ...] = (),
         knot_range: tuple[float, float] = (0.1, 0.5), center: float = 0.0) -> MonotoneParams:
    """Random parameters: normal slope parameters around ``center``, small positive knot spacings.

    ``center = 0`` starts near ``slope_floor * z``; ``center = 1`` starts near
    the identity with knots already spread out, so training can reshape it.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    channels = tuple(channels)
    lo, hi = knot_range
    return MonotoneParams(
        alpha_plus=center + scale * rng.standard_normal(channels + (d,)),
        alpha_minus=center + scale * rng.standard_normal(channels + (d,)),
        beta_plus=rng.uniform(lo, hi, channels + (d - 1,)),
        beta_minus=rng.uniform(lo, hi, channels + (d - 1,)),
    )


def linear_params(slope=1.0, d: int = 1, channels: tuple[int, ...] = (),
                  slope_floor: float = SLOPE_FLOOR) -> MonotoneParams:
    """Parameters of ``g(z) = slope * z`` (slope must be at least ``slope_floor``)."""
    slope = np.broadcast_to(np.asarray(slope, dtype=float), tuple(channels))
    if np.any(slope < slope_floor):
        raise ValueError("slope must be >= slope_floor")
    a = np.repeat(np.sqrt(slope - slope_floor)[..., None], d, axis=-1)
    b = np.zeros(tuple(channels) + (d - 1,))
    return MonotoneParams(a, a.copy(), b, b.copy())


def dump_table(w: MonotoneWeights, z) -> str:
    """CSV table of ``(z, g(z))``; one ``g_k`` column per channel."""
    z = np.asarray(z, dtype=float).ravel()
    nch = int(np.prod(w.alpha_plus.shape[:-1], dtype=int))
    flat = MonotoneWeights(*(a.reshape(nch, -1) for a in
                             (w.alpha_plus, w.alpha_minus, w.beta_plus, w.beta_minus)),
                           slope_floor=w.slope_floor)
    g = forward(flat, np.repeat(z[:, None], nch, axis=1))
    header = "z," + ",".join(["g"] if nch == 1 and w.alpha_plus.ndim == 1
                             else [f"g_{k}" for k in range(nch)])
    buf = io.StringIO()
    np.savetxt(buf, np.column_stack([z, g]), delimiter=",", header=header, comments="", fmt="%.12g")
    return buf.getvalue()
