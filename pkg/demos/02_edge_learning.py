# Learning the inter-vehicle feedback of an uncontrolled platoon.  The vehicles
# get no external input (w = 0); only the spacing feedback psi is trained, to
# bring velocities together while keeping spacings away from collision.
import numpy as np

from neuralpi.control import ZeroController
from neuralpi.dynamics import MonotoneEdges, make_vehicle_model, rollout
from neuralpi.monotone import init
from neuralpi.train import EdgeOnlyLoss, TrainConfig, gen_scenarios, train

n = 5
model = make_vehicle_model(n, seed=0)
model = model.with_edges(MonotoneEdges(init(10, 7, 0.2, (n - 1,), center=-3.0), offset=2.0))
# a weak initial feedback: the vehicles drift towards their own free-flow speeds
# and spacings go negative (collisions) within the horizon
ctrl = ZeroController()
loss = EdgeOnlyLoss(window=100, spacing=1.0, reg=0.01)

test = gen_scenarios("vehicle", 10, 123, model=model)


def report(tag, m):
    traj = rollout(m, ctrl, test.x0, test.eta0, test.s0, 400, 0.05)
    spread = np.ptp(traj.x[:, -1], axis=-1).mean()
    print(f"{tag:8s} held-out loss {loss.value(traj).mean():9.3f}   final velocity spread {spread:.4f}"
          f"   min spacing {traj.eta.min():.3f}")


report("initial", model)
res = train(model, ctrl, loss, TrainConfig(episodes=40, batch=8, K=200, dt=0.05, lr=0.1, train_edges=True))
for h in res.history[::5]:
    print(f"  episode {h['episode']:3d}  loss {h['loss']:.3f}")
report("trained", res.model)

# The learned feedback stays monotone through the spacing offset.
eta = np.linspace(0.5, 3.5, 7)
print("learned psi(eta) on edge 0:", np.round(res.model.edges.value(np.tile(eta[:, None], (1, n - 1)))[:, 0], 4))
