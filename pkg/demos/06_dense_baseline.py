# An unstructured baseline: a per-node dense network mapping (e, s) to control.
# Training can make it track well on the training distribution, but nothing
# ties it to a Lyapunov function, so behaviour beyond the training horizon is
# not guaranteed.  This is a qualitative comparison only.
import numpy as np

from neuralpi.control import DenseNN, NeuralPI
from neuralpi.dynamics import IntegrationError, make_vehicle_model, rollout
from neuralpi.monotone import init
from neuralpi.train import TrainConfig, gen_scenarios, train, vehicle_tracking

n = 5
model = make_vehicle_model(n, seed=0)
loss = vehicle_tracking(np.random.default_rng(0).uniform(0.025, 0.075, n))
cfg = TrainConfig(episodes=30, batch=16, K=150, dt=0.02, lr=0.05, seed=0)

dense = train(model, DenseNN.init(n, seed=0), loss, cfg).ctrl
npi = train(model, NeuralPI(init(10, 1, 0.2, (n,), center=1.0), init(10, 2, 0.2, (n,), center=1.0)),
            loss, cfg).ctrl

test = gen_scenarios("vehicle", 20, 77, model=model)
for name, ctrl in (("dense", dense), ("neural-pi", npi)):
    short = rollout(model, ctrl, test.x0, test.eta0, test.s0, 150, 0.02)
    try:
        long = rollout(model, ctrl, test.x0, test.eta0, test.s0, 5000, 0.02, "rk4")
        tail = f"error after 100 s {long.agreement_error().max():.2e}"
    except IntegrationError as exc:
        tail = f"diverged at step {exc.step}"
    print(f"{name:10s} training-horizon loss {loss.value(short).mean():8.3f}   {tail}")
