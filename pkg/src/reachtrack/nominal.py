"""Nominal trajectories: representation, validation, planning, and file I/O."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geom import ParseError
from .model import DynamicsModel, ProblemSpec

__all__ = [
    "NominalTrajectory",
    "RrtParams",
    "PlanningError",
    "validate",
    "plan_rrt",
    "save_trajectory",
    "load_trajectory",
]

DYNAMICS_TOL = 1e-9


class PlanningError(RuntimeError):
    """The planner exhausted its iteration budget without reaching the target."""


@dataclass(frozen=True)
class NominalTrajectory:
    """States x0..xN and inputs u0..u_{N-1} of a disturbance-free run."""

    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        inputs = np.array(self.inputs, dtype=float)
        if states.ndim != 2 or inputs.ndim != 2:
            raise ValueError("states and inputs must be 2-d arrays")
        if states.shape[0] != inputs.shape[0] + 1:
            raise ValueError("need exactly one more state than inputs")
        if inputs.shape[0] < 1:
            raise ValueError("trajectories need at least one step")
        states.setflags(write=False)
        inputs.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]


def _strictly_inside(x, box, margin) -> bool:
    return bool(
        np.all(x > box.lower + margin) and np.all(x < box.upper - margin)
    )


def validate(
    traj: NominalTrajectory,
    spec: ProblemSpec,
    model: DynamicsModel,
    margin=1e-9,
) -> list[str]:
    """Check every nominal-sequence condition; returns the violations found.

    An empty list certifies the trajectory.  ``margin`` (scalar or
    per-coordinate) sets how strictly interior memberships are tested.
    """
    margin = np.broadcast_to(np.asarray(margin, dtype=float), (traj.n,)).copy()
    violations = []
    N = traj.horizon

    for k in range(N):
        residual = np.max(
            np.abs(traj.states[k + 1] - model.step(traj.states[k], traj.inputs[k]))
        )
        if residual > DYNAMICS_TOL:
            violations.append(f"dynamics residual at k={k} ({residual:.3e})")
        if not spec.inputs.contains(traj.inputs[k]):
            violations.append(f"input outside bounds at k={k}")

    for k in range(N):
        x = traj.states[k]
        if not _strictly_inside(x, spec.operating, margin):
            violations.append(f"state not interior to operating domain at k={k}")
        for i, piece in enumerate(spec.unsafe.pieces):
            if piece.contains(x, tol=0.0):
                violations.append(f"state inside unsafe piece {i} at k={k}")

    if not spec.initial.contains(traj.states[0], tol=1e-12):
        violations.append("initial state outside the initial set")
    if not _strictly_inside(traj.states[N], spec.target, margin):
        violations.append("terminal state not interior to the target set")
    return violations


@dataclass
class RrtParams:
    """Knobs for the forward-propagating kinodynamic planner."""

    max_iters: int = 40000
    goal_bias: float = 0.1
    margin: tuple = (0.02, 0.02, 0.05)  # interior clearance per coordinate
    input_grid: tuple = ((0.0, 2.5, 4.0, 6.0), (-4.0, -2.0, 0.0, 2.0, 4.0))
    metric_weights: tuple = (1.0, 1.0, 0.5)
    max_depth: int | None = None
    # crawl steps kill downstream set growth; allow short bursts for turning
    slow_speed: float = 1.0
    max_slow_run: int = 2


def _admissible(x, spec: ProblemSpec, margin) -> bool:
    """Margin-interior test matched to the face-clearance geometry downstream.

    Requires every active constraint-face distance (domain faces plus
    obstacle faces strictly ahead or behind per coordinate) to be at least
    the margin, and each unsafe piece to be cleared by the margin in at
    least one coordinate.  States passing this keep all later per-coordinate
    radius formulas strictly positive.
    """
    r_plus, r_minus = spec.face_clearances(x, [True] * spec.n)
    if np.any(r_plus < margin) or np.any(r_minus < margin):
        return False
    for piece in spec.unsafe.pieces:
        separated = any(
            x[j] <= piece.lower[j] - margin[j] or x[j] >= piece.upper[j] + margin[j]
            for j in range(spec.n)
        )
        if not separated:
            return False
    return True


def plan_rrt(
    spec: ProblemSpec,
    model: DynamicsModel,
    seed: int = 0,
    params: RrtParams | None = None,
) -> NominalTrajectory:
    """Grow a forward kinodynamic tree until some state reaches the target.

    Inputs are piecewise constant over one step, drawn from a finite grid;
    expansion steers the nearest node toward a sampled point (biased toward
    the target).  Deterministic for a fixed seed; raises PlanningError when
    the iteration budget runs out.
    """
    params = params or RrtParams()
    rng = np.random.default_rng(seed)
    margin = np.broadcast_to(np.asarray(params.margin, dtype=float), (spec.n,))
    weights = np.asarray(params.metric_weights, dtype=float)
    inputs = np.array(list(itertools.product(*params.input_grid)), dtype=float)
    for u in inputs:
        if not spec.inputs.contains(u):
            raise ValueError(f"input grid point {u} lies outside the input set")
    max_depth = params.max_depth or spec.horizon

    start = spec.initial.center
    if not _admissible(start, spec, margin):
        raise PlanningError("start state violates interior margins")
    goal = spec.target.center

    nodes = [start]
    parents = [-1]
    via_input = [None]
    depths = [0]
    slow_runs = [0]
    states_arr = np.array(nodes)

    def extract(idx: int) -> NominalTrajectory:
        path_states, path_inputs = [], []
        while idx >= 0:
            path_states.append(nodes[idx])
            if via_input[idx] is not None:
                path_inputs.append(via_input[idx])
            idx = parents[idx]
        path_states.reverse()
        path_inputs.reverse()
        states = np.array(path_states)
        # Trim to the first target entry.
        for k in range(1, len(states)):
            if _strictly_inside(states[k], spec.target, margin):
                return NominalTrajectory(states[: k + 1], np.array(path_inputs[:k]))
        return NominalTrajectory(states, np.array(path_inputs))

    if _strictly_inside(start, spec.target, margin):
        # Degenerate instance: hold position if a zero-ish input exists.
        for u in inputs:
            nxt = model.step(start, u)
            if _strictly_inside(nxt, spec.target, margin):
                return NominalTrajectory(np.vstack([start, nxt]), u[None, :])

    for _ in range(params.max_iters):
        if rng.uniform() < params.goal_bias:
            target_pt = goal
        else:
            target_pt = rng.uniform(spec.operating.lower, spec.operating.upper)

        dists = np.sum(weights * (states_arr - target_pt) ** 2, axis=1)
        nearest = int(np.argmin(dists))
        if max_depth is not None and depths[nearest] >= max_depth:
            continue

        candidates = model.step(np.broadcast_to(nodes[nearest], (len(inputs), spec.n)), inputs)
        best_u, best_state, best_d = None, None, np.inf
        for u, nxt in zip(inputs, candidates):
            if abs(u[0]) <= params.slow_speed and slow_runs[nearest] >= params.max_slow_run:
                continue
            if not _admissible(nxt, spec, margin):
                continue
            d = float(np.sum(weights * (nxt - target_pt) ** 2))
            if d < best_d:
                best_u, best_state, best_d = u, nxt, d
        if best_u is None:
            continue

        nodes.append(best_state)
        parents.append(nearest)
        via_input.append(best_u)
        depths.append(depths[nearest] + 1)
        slow_runs.append(
            slow_runs[nearest] + 1 if abs(best_u[0]) <= params.slow_speed else 0
        )
        states_arr = np.vstack([states_arr, best_state])

        if _strictly_inside(best_state, spec.target, margin):
            return extract(len(nodes) - 1)

    raise PlanningError(
        f"no trajectory found within {params.max_iters} iterations"
    )


def save_trajectory(traj: NominalTrajectory, path):
    """Plain-text trajectory file: header (n, m, N), states, then inputs."""
    with open(path, "w") as fh:
        fh.write(f"{traj.n} {traj.m} {traj.horizon}\n")
        for row in traj.states:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        for row in traj.inputs:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_trajectory(path) -> NominalTrajectory:
    with open(path) as fh:
        lines = fh.read().splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not lines:
        raise ParseError(1, "empty trajectory file")
    lineno, header = lines[0]
    parts = header.split()
    try:
        n, m, N = (int(p) for p in parts)
    except ValueError:
        raise ParseError(lineno, "header must be three integers: n m N") from None
    if n < 1 or m < 1 or N < 1:
        raise ParseError(lineno, f"bad dimensions in header: {header!r}")
    expected = 1 + (N + 1) + N
    if len(lines) < expected:
        raise ParseError(
            lines[-1][0], f"truncated file: expected {expected} lines, got {len(lines)}"
        )

    def parse_row(entry, width, what):
        lineno, line = entry
        parts = line.split()
        if len(parts) != width:
            raise ParseError(lineno, f"{what}: expected {width} values, got {len(parts)}")
        try:
            return [float(p) for p in parts]
        except ValueError:
            raise ParseError(lineno, f"{what}: bad float") from None

    states = [parse_row(lines[1 + k], n, "state row") for k in range(N + 1)]
    inputs = [parse_row(lines[2 + N + k], m, "input row") for k in range(N)]
    return NominalTrajectory(np.array(states), np.array(inputs))
