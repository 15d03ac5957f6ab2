"""Scratch: end-to-end viability probe for the default instance."""
import time

import numpy as np

from reachtrack.model import DubinsCar, default_disturbance, dubins_problem
from reachtrack.nominal import plan_rrt, validate
from reachtrack.brs import refine_tubes, conservative_linearization_check, linearize_step
from reachtrack.geom import interval_hull, sample, membership

t0 = time.time()
spec = dubins_problem(start=(1.0, 1.0, 0.0))
model = DubinsCar(default_disturbance())

traj = plan_rrt(spec, model, seed=7)
print(f"planned N={traj.horizon} in {time.time()-t0:.2f}s")
viol = validate(traj, spec, model)
print("violations:", viol)
print("states head:", traj.states[:3])
print("states tail:", traj.states[-3:])

t0 = time.time()
brs = refine_tubes(model, spec, traj, gamma=1.1)
print(f"brs in {time.time()-t0:.2f}s")
for k in range(0, traj.horizon + 1, max(1, traj.horizon // 8)):
    hull = interval_hull(brs.lambdas[k])
    print(f"k={k:3d} q={brs.lambdas[k].order:3d} hull radius={np.round(hull.radius, 4)}")

print("lambda0 hull:", np.round(interval_hull(brs.lambdas[0]).radius, 4))
print("probe (1,0.8,0) in lambda0:", membership(brs.lambdas[0], np.array([1.0, 0.8, 0.0])))
