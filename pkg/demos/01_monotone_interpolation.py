# Stacked-ReLU monotone functions: building one by hand, interpolating a target,
# and checking that the structure survives arbitrary parameters.
import numpy as np

from neuralpi.monotone import init, interpolate_monotone, linear_params, materialize

# A freshly initialised network.  Whatever the unconstrained parameters are,
# the materialised function is increasing, passes through the origin and has
# slope at least the floor everywhere.
w = materialize(init(d=8, seed=0, scale=1.0))
z = np.linspace(-3, 3, 13)
print("random monotone g(z):")
for zi, gi in zip(z, w(z)):
    print(f"  z={zi:+.2f}  g={gi:+.4f}")
print("g(0) =", w(np.array(0.0)), " min slope =", w.grad(np.linspace(-5, 5, 1001)).min())

# The identity is representable exactly.
ident = materialize(linear_params(1.0))
print("identity error:", np.abs(ident(z) - z).max())

# Interpolating tanh on a grid of spacing tau: the sup error on a finer grid is
# bounded by tau times the Lipschitz constant (1 for tanh).
for tau in (0.3, 0.1, 0.03):
    grid = np.linspace(-3, 3, int(round(6 / tau)) + 1)
    g = materialize(interpolate_monotone(grid, np.tanh(grid)))
    fine = np.linspace(-3, 3, 10 * (grid.size - 1) + 1)
    print(f"tau={tau:<5} knots={g.d:<4} sup|g - tanh| = {np.abs(g(fine) - np.tanh(fine)).max():.2e}")

# Non-monotone targets are refused rather than silently repaired.
try:
    interpolate_monotone(grid, np.sin(3 * grid))
except ValueError as exc:
    print("sin(3z) rejected:", exc)
