import numpy as np

from reachtrack.model import DubinsCar, default_disturbance, dubins_problem
from reachtrack.nominal import plan_rrt
from reachtrack.brs import (
    BrsEmptyError, TubeParams, compute_brs, initial_tubes, linearization_error, _tube_boxes,
)
from reachtrack.geom import Box, interval_hull

spec = dubins_problem(start=(1.0, 1.0, 0.0))
model = DubinsCar(default_disturbance())
traj = plan_rrt(spec, model, seed=7)
params = TubeParams()
radii_x, radii_u = initial_tubes(spec, traj, params)
N = traj.horizon
for k in range(N + 1):
    print(f"k={k:2d} x={np.round(traj.states[k],3)} rx={np.round(radii_x[k],4)}"
          + (f" ru={np.round(radii_u[k],3)}" if k < N else ""))

tubes_x, tubes_u = _tube_boxes(traj, radii_x, radii_u)
for k in range(N):
    e = linearization_error(model, tubes_x[k], tubes_u[k])
    print(f"k={k:2d} e={np.round(e, 5)}")

try:
    res = compute_brs(model, spec, traj, tubes_x, tubes_u, 1.1)
    print("success")
    for k in range(N + 1):
        print(k, np.round(interval_hull(res.lambdas[k]).radius, 4))
except BrsEmptyError as exc:
    print("FAIL:", exc)
