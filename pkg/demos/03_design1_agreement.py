# Output agreement with a neural-PI controller.  Any strictly increasing p and r
# through the origin drive every vehicle to the target velocity; the Lyapunov
# function built from storage and Bregman terms decreases along the way.
import numpy as np

from neuralpi.analysis import design1_equilibrium, lyapunov_decrement
from neuralpi.control import NeuralPI
from neuralpi.dynamics import make_vehicle_model, rollout
from neuralpi.monotone import init
from neuralpi.train import gen_scenarios

n = 5
model = make_vehicle_model(n, seed=0)
sc = gen_scenarios("vehicle", 6, seed=1, model=model)

for seed in range(3):
    ctrl = NeuralPI(init(10, seed, 0.8, (n,)), init(10, seed + 50, 0.8, (n,)))
    traj = rollout(model, ctrl, sc.x0, sc.eta0, sc.s0, K=2000, dt=0.02, scheme="rk4")
    worst_v = 0
    for b in range(traj.B):
        eq = design1_equilibrium(model, ctrl, sc.eta0[b], sc.s0[b])
        worst_v += lyapunov_decrement(traj, model, ctrl, eq, b).violations.size
    print(f"controller {seed}: max |y(40s) - 5.2| = {traj.agreement_error().max():.2e},"
          f" Lyapunov violations = {worst_v}")

# One trajectory in detail: velocity of each vehicle every 5 seconds.
print("\n   t   " + "  ".join(f"y_{i}" for i in range(n)))
for k in range(0, traj.K + 1, 250):
    print(f"{traj.t[k]:5.1f}  " + "  ".join(f"{v:.3f}" for v in traj.x[0, k]))
