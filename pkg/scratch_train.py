import time

import numpy as np

from reachtrack.brs import refine_tubes
from reachtrack.controller import (
    TrainConfig, baseline_control, forward_raw, train_step_controller,
)
from reachtrack.geom import interval_hull, sample
from reachtrack.model import DubinsCar, default_disturbance, dubins_problem
from reachtrack.nominal import plan_rrt, RrtParams
from reachtrack.numerics import pseudoinverse

spec = dubins_problem(start=(1.0, 1.0, 0.0))
model = DubinsCar(default_disturbance())
traj = plan_rrt(spec, model, seed=0, params=RrtParams(margin=(0.08, 0.08, 0.08)))
brs = refine_tubes(model, spec, traj, gamma=1.1)
N = traj.horizon
print("N =", N)

cfg = TrainConfig(seed=11)
total_t = 0.0
worst = []
for k in range(N):
    t0 = time.time()
    net, log = train_step_controller(
        k, brs.lambdas[k], brs.deflated[k + 1], traj.states[k + 1],
        traj.inputs[k], brs.tubes_u[k].radius, model, cfg,
    )
    dt = time.time() - t0
    total_t += dt

    # fresh evaluation samples
    pts = sample(brs.lambdas[k], 500, "uniform", seed=999 + k)
    pts_ex = sample(brs.lambdas[k], 500, "extreme", seed=1999 + k)
    allpts = np.vstack([pts, pts_ex])
    u = forward_raw(net, allpts)
    pinv = pseudoinverse(brs.deflated[k + 1].generators)
    d = (model.step(allpts, u) - traj.states[k + 1]) @ pinv.T
    dinf = np.max(np.abs(d), axis=1)
    frac_ok = float(np.mean(dinf <= 1.0))
    worst.append((k, dinf.max(), frac_ok))
    print(f"k={k:2d} t={dt:4.1f}s stop={log.stopped_epoch:5d} init_val={log.initial_val:7.3f} "
          f"best={log.best_val:6.3f} fresh_max_d={dinf.max():6.3f} frac<=1={frac_ok:.3f}")

print(f"total train time {total_t:.1f}s")
bad = [w for w in worst if w[2] < 1.0]
print("steps with violations on fresh samples:", bad if bad else "none")

# baseline on a few steps
for k in [0, N // 2, N - 1]:
    pts = sample(brs.lambdas[k], 50, "uniform", seed=77 + k)
    vals = [baseline_control(x, k, brs, model).value for x in pts]
    print(f"baseline k={k}: max objective over 50 samples = {max(vals):.4f}")
