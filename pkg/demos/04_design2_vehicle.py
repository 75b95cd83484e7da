# Agreement plus optimal steady-state control effort.  A communication term
# exchanges marginal costs between neighbours; at steady state every vehicle
# spends the same marginal cost and the closed-form allocation w* is reached.
import numpy as np

from neuralpi.analysis import analytic_equilibrium, kkt_residual
from neuralpi.control import Communication, CostFamily, NeuralPI
from neuralpi.dynamics import make_vehicle_model, rollout
from neuralpi.graph import ring_graph
from neuralpi.monotone import init
from neuralpi.train import gen_scenarios

n = 5
model = make_vehicle_model(n, seed=0)
cost = CostFamily(2, np.random.default_rng(0).uniform(0.5, 1.5, n))
sc = gen_scenarios("vehicle", 3, seed=1, model=model)

plain = NeuralPI(init(10, 0, 0.5, (n,)), init(10, 100, 0.5, (n,)))
comm = NeuralPI(plain.p_params, plain.r_params, Communication(ring_graph(n), cost))
eq = analytic_equilibrium(model, cost, ctrl=comm)
print("closed-form optimum w*:", np.round(eq.w_star, 5), " common marginal cost:", round(eq.marginal_cost, 5))

for name, ctrl in (("without comm", plain), ("with comm", comm)):
    traj = rollout(model, ctrl, sc.x0, sc.eta0, sc.s0, K=7500, dt=0.02, scheme="rk4")
    w_end = traj.w[:, -1]
    spread = max(kkt_residual(cost, w, model)[0] for w in w_end)
    cost_end = cost.value(w_end).sum(axis=-1)
    print(f"{name:13s} agreement {traj.agreement_error().max():.1e}  marginal-cost spread {spread:.1e}"
          f"  steady cost {np.round(cost_end, 4)}  (optimum {cost.value(eq.w_star).sum():.4f})")
