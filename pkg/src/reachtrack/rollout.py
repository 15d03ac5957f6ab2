"""Closed-loop simulation with reproducible disturbance sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import forward_trimmed, mix_seed
from .geom import Box, Zonotope
from .model import DynamicsModel
from .nominal import NominalTrajectory

__all__ = [
    "Trajectory",
    "rollout",
    "batch_rollouts",
    "nn_policy",
    "nominal_policy",
    "save_rollouts",
    "load_rollouts",
]


@dataclass(frozen=True)
class Trajectory:
    """One simulated run: states, applied inputs, realized disturbances."""

    states: np.ndarray  # (N+1, n)
    inputs: np.ndarray  # (N, m)
    disturbances: np.ndarray  # (N, n)
    seed: int

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def nn_policy(nets: list, inputs: Box):
    """Feedback policy from per-step controllers, trimmed into the input box."""

    def policy(x, k):
        return forward_trimmed(nets[k], x, inputs)

    return policy


def nominal_policy(traj: NominalTrajectory):
    """Open-loop replay of the nominal inputs."""

    def policy(x, k):
        return traj.inputs[k]

    return policy


def rollout(
    policy,
    x0,
    disturbance: Box | None,
    model: DynamicsModel,
    N: int,
    seed: int = 0,
) -> Trajectory:
    """Simulate N steps; disturbances are uniform over the given box (or zero).

    Deterministic given the seed; aborts on a non-finite state, naming the
    step.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x0, dtype=float)
    states = [x.copy()]
    inputs, noises = [], []
    for k in range(N):
        u = np.asarray(policy(x, k), dtype=float)
        if disturbance is None:
            w = np.zeros(model.n)
        else:
            w = rng.uniform(disturbance.lower, disturbance.upper)
        x = model.step(x, u) + w
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at step {k}")
        states.append(x.copy())
        inputs.append(u)
        noises.append(w)
    return Trajectory(
        states=np.array(states),
        inputs=np.array(inputs),
        disturbances=np.array(noises),
        seed=seed,
    )


def batch_rollouts(
    policy,
    lam0: Zonotope,
    count: int,
    disturbance: Box | None,
    model: DynamicsModel,
    N: int,
    base_seed: int = 0,
    sigma: float = 0.0,
) -> list:
    """Independent rollouts from the (optionally inflated) initial set.

    Start points are drawn uniformly in factor space of (1 + sigma) times
    the generator matrix; every rollout owns a derived seed, so batches are
    reproducible and safely parallelizable.
    """
    if count < 1:
        raise ValueError("need at least one rollout")
    scaled = Zonotope(lam0.center, (1.0 + sigma) * lam0.generators)
    out = []
    for i in range(count):
        seed_i = mix_seed(base_seed, i)
        rng = np.random.default_rng(mix_seed(seed_i, 0))
        factors = rng.uniform(-1.0, 1.0, size=scaled.order)
        x0 = scaled.center + scaled.generators @ factors
        out.append(rollout(policy, x0, disturbance, model, N, seed=mix_seed(seed_i, 1)))
    return out


# ---------------------------------------------------------------------------
# Trajectory logs: CSV, one row per step, full-precision floats.
# ---------------------------------------------------------------------------


def save_rollouts(trajectories: list, path):
    if not trajectories:
        raise ValueError("nothing to save")
    n = trajectories[0].states.shape[1]
    m = trajectories[0].inputs.shape[1]
    cols = (
        ["rollout", "k"]
        + [f"x{i}" for i in range(n)]
        + [f"u{i}" for i in range(m)]
        + [f"w{i}" for i in range(n)]
    )
    with open(path, "w") as fh:
        for idx, traj in enumerate(trajectories):
            fh.write(f"# rollout {idx} seed {traj.seed}\n")
        fh.write(",".join(cols) + "\n")
        for idx, traj in enumerate(trajectories):
            for k in range(traj.horizon + 1):
                row = [str(idx), str(k)]
                row += [repr(float(v)) for v in traj.states[k]]
                if k < traj.horizon:
                    row += [repr(float(v)) for v in traj.inputs[k]]
                    row += [repr(float(v)) for v in traj.disturbances[k]]
                else:
                    row += [""] * (m + n)
                fh.write(",".join(row) + "\n")


def load_rollouts(path) -> list:
    seeds = {}
    rows = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line.split()
                seeds[int(parts[2])] = int(parts[4])
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append(line.split(","))
    if header is None:
        raise ValueError(f"{path}: no data")
    n = sum(1 for c in header if c.startswith("x"))
    m = sum(1 for c in header if c.startswith("u"))

    grouped: dict[int, list] = {}
    for row in rows:
        grouped.setdefault(int(row[0]), []).append(row)
    out = []
    for idx in sorted(grouped):
        chunk = sorted(grouped[idx], key=lambda r: int(r[1]))
        states = np.array([[float(v) for v in r[2 : 2 + n]] for r in chunk])
        steps = chunk[:-1]
        inputs = np.array([[float(v) for v in r[2 + n : 2 + n + m]] for r in steps])
        noises = np.array([[float(v) for v in r[2 + n + m :]] for r in steps])
        out.append(
            Trajectory(
                states=states,
                inputs=inputs,
                disturbances=noises,
                seed=seeds.get(idx, 0),
            )
        )
    return out
