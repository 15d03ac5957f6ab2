import time

import numpy as np

from reachtrack.brs import refine_tubes
from reachtrack.controller import TrainConfig, train_step_controller
from reachtrack.conformal import build_safe_sets, certify, score
from reachtrack.geom import membership
from reachtrack.model import DubinsCar, default_disturbance, dubins_problem
from reachtrack.nominal import plan_rrt, RrtParams
from reachtrack.rollout import batch_rollouts, nn_policy, rollout

spec = dubins_problem(start=(1.0, 1.0, 0.0))
model = DubinsCar(default_disturbance())
traj = plan_rrt(spec, model, seed=0, params=RrtParams(margin=(0.08, 0.08, 0.08)))
brs = refine_tubes(model, spec, traj, gamma=1.1)
N = traj.horizon

cfg = TrainConfig(seed=11)
t0 = time.time()
nets = []
for k in range(N):
    net, _ = train_step_controller(
        k, brs.lambdas[k], brs.deflated[k + 1], traj.states[k + 1],
        traj.inputs[k], brs.tubes_u[k].radius, model, cfg,
    )
    nets.append(net)
print(f"trained in {time.time()-t0:.0f}s")

policy = nn_policy(nets, spec.inputs)
safe = build_safe_sets(traj, spec, margin=0.01)

t0 = time.time()
trajs = batch_rollouts(policy, brs.lambdas[0], 200, model.disturbance, model, N, base_seed=42)
per_roll = time.time() - t0
scores = [score(t.states, safe, spec.target)[1] for t in trajs]
nz = [s for s in scores if s > 0]
print(f"200 rollouts in {per_roll:.2f}s ({per_roll/200*1000:.1f} ms each); nonzero scores: {len(nz)}")
if nz:
    print("worst:", max(nz))
rep = certify(scores, 0.05)
print(rep.verdict)

# containment diagnostics: how many rollouts stay in Lambda_k at every step
stay = 0
for t in trajs[:50]:
    ok = all(membership(brs.lambdas[k], t.states[k]) for k in range(N + 1))
    stay += ok
print(f"{stay}/50 rollouts inside their reachable set at every step")

# enlarged initial set
trajs2 = batch_rollouts(policy, brs.lambdas[0], 200, model.disturbance, model, N, base_seed=77, sigma=0.2)
scores2 = [score(t.states, safe, spec.target)[1] for t in trajs2]
print(f"sigma=0.2: zero-score fraction {np.mean(np.array(scores2)==0.0):.3f}")

# baseline-failure probe
from reachtrack.controller import baseline_control
probe = np.array([1.0, 0.8, 0.0])
print("probe in lam0:", membership(brs.lambdas[0], probe))
res = baseline_control(probe, 0, brs, model)
print(f"baseline at probe: value={res.value:.3f} success={res.success}")
t = rollout(policy, probe, None, model, N, seed=0)
s = score(t.states, safe, spec.target)[1]
print(f"NN rollout from probe, zero disturbance: score={s}, final={t.states[-1]}, in target={spec.target.contains(t.states[-1])}")
