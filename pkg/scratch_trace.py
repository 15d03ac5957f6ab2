import numpy as np

from reachtrack.model import DubinsCar, default_disturbance, dubins_problem
from reachtrack.nominal import plan_rrt, RrtParams
from reachtrack.brs import TubeParams, initial_tubes, _condition_errors, linearize_step
from reachtrack.geom import (
    Box, Zonotope, EmptySetError, interval_hull, linear_map, minkowski_diff_under,
    minkowski_sum, shrink_into_box,
)

spec = dubins_problem(start=(1.0, 1.0, 0.0))
model = DubinsCar(default_disturbance())
traj = plan_rrt(spec, model, seed=0, params=RrtParams(margin=(0.06, 0.06, 0.06)))
N = traj.horizon
print("N=", N)
print("speeds:", np.round(traj.inputs[:, 0], 2))
print("turns:", np.round(traj.inputs[:, 1], 2))
params = TubeParams()
rx, ru = initial_tubes(spec, traj, params)
rx, ru = _condition_errors(model, traj, rx, ru, 1.1, params)

gamma = 1.1
gw = Box.from_center(np.zeros(3), gamma * model.disturbance.radius)
lam = Box.from_center(traj.states[N], rx[N]).as_zonotope()
defl = minkowski_diff_under(lam, gw)
for k in range(N - 1, -1, -1):
    t_x = Box.from_center(traj.states[k], rx[k])
    t_u = Box.from_center(traj.inputs[k], ru[k])
    step = linearize_step(model, traj.states[k], traj.inputs[k], t_x, t_u, gamma, k)
    e_box = Box.from_center(np.zeros(3), step.err)
    dh = interval_hull(defl).radius
    print(f"k={k:2d} rx={np.round(rx[k],3)} ru={np.round(ru[k],3)} e={np.round(step.err,5)} "
          f"defl_next={np.round(dh,4)} q={defl.order}", end=" ")
    try:
        psi = minkowski_diff_under(defl, e_box)
    except EmptySetError:
        print("PSI-FAIL")
        break
    reach = Zonotope(-(step.c + step.B @ traj.inputs[k]), -step.B @ np.diag(t_u.radius))
    pre = linear_map(step.A_inv, minkowski_sum(psi, reach))
    try:
        lam = shrink_into_box(pre, t_x)
    except ValueError as exc:
        print("SHRINK-FAIL", exc)
        break
    try:
        defl = minkowski_diff_under(lam, gw)
    except EmptySetError:
        print(f"DEFL-FAIL lam_hull={np.round(interval_hull(lam).radius,4)} "
              f"pre_hull={np.round(interval_hull(pre).radius,4)}")
        break
    print(f"psi={np.round(interval_hull(psi).radius,3)} pre={np.round(interval_hull(pre).radius,3)} "
          f"lam={np.round(interval_hull(lam).radius,3)}")
