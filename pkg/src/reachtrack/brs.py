"""Backward reachable sets along a nominal trajectory.

The recursion walks the horizon backwards: subtract the inflated
disturbance and the linearization error from the next set, add back the
control authority of the input tube, pull through the inverse state
Jacobian, and clamp into the state tube.  Every operation under-
approximates, so landing in a computed set really does certify one safe
step forward.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .geom import (
    Box,
    EmptySetError,
    Zonotope,
    interval_hull,
    linear_map,
    minkowski_diff_under,
    minkowski_sum,
    read_records,
    shrink_into_box_lp,
    write_records,
)
from .model import DynamicsModel, ProblemSpec
from .nominal import NominalTrajectory
from .numerics import invert, pseudoinverse

__all__ = [
    "LinearizationStep",
    "BrsResult",
    "BrsEmptyError",
    "TubeParams",
    "linearization_error",
    "linearize_step",
    "conservative_linearization_check",
    "compute_brs",
    "refine_tubes",
    "save_brs",
    "load_brs",
]


class BrsEmptyError(RuntimeError):
    """A backward step produced an empty set; carries the step index."""

    def __init__(self, k: int, message: str):
        super().__init__(f"empty set at step k={k}: {message}")
        self.k = k


def _deflation_floor(Z: Zonotope, w_bar: np.ndarray) -> np.ndarray:
    """Protective box the deflated set should keep containing.

    Proportional to the spare per-axis extent but never more than twice the
    subtracted radius; keeps repeated deflations from flattening the set
    along oblique directions while staying feasible for thin sets.
    """
    spare = np.maximum(interval_hull(Z).radius - w_bar, 0.0)
    return np.minimum(0.4 * spare, 2.0 * w_bar)


def _shrink_floor(Z: Zonotope, B, w_bar: np.ndarray) -> np.ndarray:
    """Protective box for the intersection step, bounded by both operands."""
    slack = np.minimum(B.upper - Z.center, Z.center - B.lower)
    reachable = np.minimum(interval_hull(Z).radius, np.maximum(slack, 0.0))
    return np.minimum(0.4 * reachable, 2.0 * w_bar)


def _psi_step(
    deflated_next: Zonotope, err: np.ndarray, margin: float, w_scale: np.ndarray
) -> Zonotope:
    """Pre-image target: the deflated next set minus the error box, tempered.

    The margin pulls the target toward the nominal point, giving the factor
    deviations of states driven through it some slack below one, which both
    the pseudoinverse-based checks and the training loss lean on.  A
    protective floor keeps the difference from flattening the target
    obliquely.
    """
    err = np.asarray(err, dtype=float)
    err_box = Box.from_center(np.zeros(deflated_next.dim), err)
    spare = np.maximum(interval_hull(deflated_next).radius - err, 0.0)
    floor = np.minimum(0.4 * spare, 2.0 * w_scale)
    psi = minkowski_diff_under(deflated_next, err_box, floor=floor)
    return Zonotope(psi.center, margin * psi.generators)


@dataclass(frozen=True)
class LinearizationStep:
    """Affine model A x + B u + c with a symmetric error-plus-disturbance box."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    A_inv: np.ndarray
    err: np.ndarray  # linearization-error bound e over the tubes
    err_set: Box  # gamma-inflated disturbance + [-e, e]


@dataclass(frozen=True)
class BrsResult:
    lambdas: tuple  # backward reachable zonotopes, indices 0..N
    deflated: tuple  # disturbance-deflated companions, indices 0..N
    psi: tuple  # pre-image targets, indices 0..N-1 (diagnostic)
    tubes_x: tuple  # state tubes, indices 0..N
    tubes_u: tuple  # input tubes, indices 0..N-1
    gamma: float

    @property
    def horizon(self) -> int:
        return len(self.lambdas) - 1


def linearization_error(model: DynamicsModel, t_x: Box, t_u: Box) -> np.ndarray:
    """Per-coordinate bound on |f - affine| over a tube pair: the quadratic
    remainder of the Taylor expansion with entry-wise Hessian sups."""
    r = np.concatenate([t_x.radius, t_u.radius])
    bounds = model.hessian_bounds(t_x, t_u)
    return 0.5 * np.einsum("p,ipq,q->i", r, bounds, r)


def linearize_step(
    model: DynamicsModel,
    x_nom: np.ndarray,
    u_nom: np.ndarray,
    t_x: Box,
    t_u: Box,
    gamma: float,
    k: int | None = None,
) -> LinearizationStep:
    A, B = model.jacobians(x_nom, u_nom)
    c = model.step(x_nom, u_nom) - A @ x_nom - B @ u_nom
    e = linearization_error(model, t_x, t_u)
    w_bar = gamma * model.disturbance.radius + e
    return LinearizationStep(
        A=A,
        B=B,
        c=c,
        A_inv=invert(A, step=k),
        err=e,
        err_set=Box.from_center(np.zeros(model.n), w_bar),
    )


def conservative_linearization_check(
    step: LinearizationStep,
    model: DynamicsModel,
    t_x: Box,
    t_u: Box,
    samples: int = 10000,
    seed: int = 0,
    tol: float = 1e-12,
) -> bool:
    """Sampled soundness check of the affine enclosure over the tubes."""
    rng = np.random.default_rng(seed)
    xs = rng.uniform(t_x.lower, t_x.upper, size=(samples, t_x.dim))
    us = rng.uniform(t_u.lower, t_u.upper, size=(samples, t_u.dim))
    affine = xs @ step.A.T + us @ step.B.T + step.c
    residual = np.abs(model.step(xs, us) - affine)
    return bool(np.all(residual <= step.err + tol))


def _tube_boxes(traj: NominalTrajectory, radii_x, radii_u):
    tubes_x = tuple(
        Box.from_center(traj.states[k], radii_x[k]) for k in range(traj.horizon + 1)
    )
    tubes_u = tuple(
        Box.from_center(traj.inputs[k], radii_u[k]) for k in range(traj.horizon)
    )
    return tubes_x, tubes_u


def compute_brs(
    model: DynamicsModel,
    spec: ProblemSpec,
    traj: NominalTrajectory,
    tubes_x,
    tubes_u,
    gamma: float = 1.1,
    psi_margin: float = 0.95,
) -> BrsResult:
    """Run the backward recursion for the given tubes.

    The deflated set at k+1 is computed first and the linearization error is
    subtracted from it, which keeps the training target consistent: any
    state mapped into psi_k plus linearization error lands inside the
    deflated set at k+1, and any disturbance then stays inside the plain set.
    Raises BrsEmptyError when a difference or shrink dies at some step.
    """
    if gamma < 1.0:
        raise ValueError("disturbance inflation gamma must be >= 1")
    N = traj.horizon
    if len(tubes_x) != N + 1 or len(tubes_u) != N:
        raise ValueError("tube sequences must match the trajectory horizon")

    gamma_w = Box.from_center(
        np.zeros(model.n), gamma * model.disturbance.radius
    )

    lambdas: list = [None] * (N + 1)
    deflated: list = [None] * (N + 1)
    psi: list = [None] * N

    lambdas[N] = tubes_x[N].as_zonotope()
    try:
        deflated[N] = minkowski_diff_under(
            lambdas[N], gamma_w, floor=_deflation_floor(lambdas[N], gamma_w.radius)
        )
    except EmptySetError as exc:
        raise BrsEmptyError(N, f"deflation failed: {exc}") from exc

    for k in range(N - 1, -1, -1):
        step = linearize_step(
            model, traj.states[k], traj.inputs[k], tubes_x[k], tubes_u[k], gamma, k
        )
        try:
            psi[k] = _psi_step(deflated[k + 1], step.err, psi_margin, gamma_w.radius)
        except EmptySetError as exc:
            raise BrsEmptyError(k, f"linearization error too large: {exc}") from exc

        # Exact zonotope for -(c_k + B_k T_u,k).
        reach_back = Zonotope(
            -(step.c + step.B @ traj.inputs[k]),
            -step.B @ np.diag(tubes_u[k].radius),
        )
        pre = linear_map(step.A_inv, minkowski_sum(psi[k], reach_back))
        try:
            lambdas[k] = shrink_into_box_lp(
                pre, tubes_x[k], floor=_shrink_floor(pre, tubes_x[k], gamma_w.radius)
            )
        except ValueError as exc:
            raise BrsEmptyError(k, f"intersection with state tube failed: {exc}") from exc
        try:
            deflated[k] = minkowski_diff_under(
                lambdas[k], gamma_w, floor=_deflation_floor(lambdas[k], gamma_w.radius)
            )
        except EmptySetError as exc:
            raise BrsEmptyError(k, f"deflation failed: {exc}") from exc

    result = BrsResult(
        lambdas=tuple(lambdas),
        deflated=tuple(deflated),
        psi=tuple(psi),
        tubes_x=tuple(tubes_x),
        tubes_u=tuple(tubes_u),
        gamma=gamma,
    )
    _check_invariants(result, spec)
    return result


def _check_invariants(result: BrsResult, spec: ProblemSpec):
    N = result.horizon
    if not spec.target.contains_box(interval_hull(result.lambdas[N]), tol=1e-9):
        raise BrsEmptyError(N, "terminal set escaped the target box")
    for k in range(N + 1):
        hull = interval_hull(result.lambdas[k])
        if not result.tubes_x[k].contains_box(hull, tol=1e-9):
            raise BrsEmptyError(k, "set escaped its state tube")
        if spec.unsafe.intersects_box(hull):
            raise BrsEmptyError(k, "set hull touches the unsafe region")
        if not spec.operating.contains_box(hull, tol=1e-9):
            raise BrsEmptyError(k, "set hull escaped the operating domain")


@dataclass
class TubeParams:
    """Heuristic tube sizing: fractions of the available clearances."""

    scale_x: float = 0.9
    scale_u: float = 0.85
    margin: float = 0.01  # faces are inflated by this before measuring clearance
    shrink_factor: float = 0.7
    budget: int = 20
    min_radius: float = 1e-6
    err_fraction: float = 0.5  # local cap: e_k vs the inflated disturbance
    psi_margin: float = 0.95  # tempering of the pre-image target


def initial_tubes(
    spec: ProblemSpec, traj: NominalTrajectory, params: TubeParams
) -> tuple[list, list]:
    """Clearance-capped tube radii around the nominal states and inputs."""
    N = traj.horizon
    separating = [True] * spec.n
    radii_x = []
    for k in range(N):
        r_plus, r_minus = spec.face_clearances(traj.states[k], separating)
        clearance = np.minimum(r_plus, r_minus) - params.margin
        radii_x.append(params.scale_x * np.maximum(clearance, 0.0))
    term = np.minimum(
        spec.target.upper - traj.states[N], traj.states[N] - spec.target.lower
    )
    radii_x.append(params.scale_x * np.maximum(term, 0.0))

    radii_u = []
    for k in range(N):
        slack = np.minimum(
            spec.inputs.upper - traj.inputs[k], traj.inputs[k] - spec.inputs.lower
        )
        radii_u.append(params.scale_u * np.maximum(slack, 0.0))
    return radii_x, radii_u


def _condition_errors(
    model: DynamicsModel,
    traj: NominalTrajectory,
    radii_x,
    radii_u,
    gamma: float,
    params: TubeParams,
):
    """Shrink tubes locally until each step's linearization error sits at
    the scale of the inflated disturbance.

    Each backward step erodes the sets by the disturbance plus the
    linearization error, while the input tube regenerates extent only at a
    disturbance-like rate; errors much larger than the disturbance drain
    long horizons empty.  Front-loading this cap leaves the per-step retry
    budget for genuinely coupled failures.
    """
    w_bar = gamma * model.disturbance.radius
    budget = params.err_fraction * np.maximum(w_bar, 1e-3)
    for k in range(traj.horizon):
        for _ in range(40):
            t_x = Box.from_center(traj.states[k], radii_x[k])
            t_u = Box.from_center(traj.inputs[k], radii_u[k])
            e = linearization_error(model, t_x, t_u)
            if np.all(e <= budget):
                break
            _shrink_error_coords(model, t_x, t_u, radii_x[k], radii_u[k], params)
    return radii_x, radii_u


def _smooth_forward(
    model: DynamicsModel,
    traj: NominalTrajectory,
    radii_x,
    radii_u,
    gamma: float,
):
    """Cap every tube by the one-step forward growth cone of its predecessor.

    Tube width beyond |A| r_x + |B| r_u + disturbance cannot be reached from
    the previous tube anyway; keeping it would only make the backward
    pre-image much wider than its own tube, and the uniform intersection
    scaling would then crush the set in every axis at once.
    """
    w_bar = gamma * model.disturbance.radius
    for k in range(traj.horizon):
        A, B = model.jacobians(traj.states[k], traj.inputs[k])
        cap = np.abs(A) @ radii_x[k] + np.abs(B) @ radii_u[k] + w_bar
        radii_x[k + 1] = np.minimum(radii_x[k + 1], cap)
    return radii_x


def _shrink_error_coords(model, t_x, t_u, r_x, r_u, params: TubeParams):
    """Shrink only tube coordinates with positive marginal error contribution.

    The error is a quadratic form in the stacked radii; coordinates outside
    the Hessian support (e.g. flat position coordinates) keep their
    clearance-capped radii so the intersection step is not starved.
    """
    n = r_x.shape[0]
    r = np.concatenate([r_x, r_u])
    total = model.hessian_bounds(t_x, t_u).sum(axis=0)
    contrib = r * ((total + total.T) @ r)
    mask = contrib > 0.0
    if not mask.any():
        mask[:] = True  # degenerate bound; fall back to uniform shrinking
    r_x[mask[:n]] *= params.shrink_factor
    r_u[mask[n:]] *= params.shrink_factor


def refine_tubes(
    model: DynamicsModel,
    spec: ProblemSpec,
    traj: NominalTrajectory,
    gamma: float = 1.1,
    params: TubeParams | None = None,
) -> BrsResult:
    """Pick tubes that make the backward recursion go through.

    Starts from clearance-capped radii and walks the recursion backwards;
    an empty set at some step shrinks that step's tubes and redoes the step,
    up to the per-step attempt budget.  Steps later in the horizon never
    depend on earlier tubes, so redoing a step in place is equivalent to a
    full restart.  The multiplicative shrink preserves every soundness
    argument, it only costs set size.
    """
    params = params or TubeParams()
    radii_x, radii_u = initial_tubes(spec, traj, params)
    N = traj.horizon

    for k in range(N + 1):
        if np.any(radii_x[k] < params.min_radius):
            raise BrsEmptyError(
                k, "nominal state has no clearance; replan with larger margins"
            )
    radii_x, radii_u = _condition_errors(model, traj, radii_x, radii_u, gamma, params)

    gamma_w = Box.from_center(np.zeros(model.n), gamma * model.disturbance.radius)
    lambdas: list = [None] * (N + 1)
    deflated: list = [None] * (N + 1)
    psi: list = [None] * N

    lambdas[N] = Box.from_center(traj.states[N], radii_x[N]).as_zonotope()
    try:
        deflated[N] = minkowski_diff_under(
            lambdas[N], gamma_w, floor=_deflation_floor(lambdas[N], gamma_w.radius)
        )
    except EmptySetError as exc:
        raise BrsEmptyError(N, f"deflation failed: {exc}") from exc

    for k in range(N - 1, -1, -1):
        last_error = None
        for _ in range(params.budget):
            t_x = Box.from_center(traj.states[k], radii_x[k])
            t_u = Box.from_center(traj.inputs[k], radii_u[k])
            try:
                step = linearize_step(
                    model, traj.states[k], traj.inputs[k], t_x, t_u, gamma, k
                )
                psi_k = _psi_step(
                    deflated[k + 1], step.err, params.psi_margin, gamma_w.radius
                )
                reach_back = Zonotope(
                    -(step.c + step.B @ traj.inputs[k]),
                    -step.B @ np.diag(t_u.radius),
                )
                pre = linear_map(step.A_inv, minkowski_sum(psi_k, reach_back))
                lam_k = shrink_into_box_lp(
                    pre, t_x, floor=_shrink_floor(pre, t_x, gamma_w.radius)
                )
                deflated[k] = minkowski_diff_under(
                    lam_k, gamma_w, floor=_deflation_floor(lam_k, gamma_w.radius)
                )
                psi[k], lambdas[k] = psi_k, lam_k
                break
            except (EmptySetError, ValueError) as exc:
                last_error = exc
                _shrink_error_coords(model, t_x, t_u, radii_x[k], radii_u[k], params)
        else:
            raise BrsEmptyError(
                k,
                f"per-step budget ({params.budget}) exhausted; "
                f"last failure: {last_error}",
            )

    tubes_x, tubes_u = _tube_boxes(traj, radii_x, radii_u)
    result = BrsResult(
        lambdas=tuple(lambdas),
        deflated=tuple(deflated),
        psi=tuple(psi),
        tubes_x=tuple(tubes_x),
        tubes_u=tuple(tubes_u),
        gamma=gamma,
    )
    _check_invariants(result, spec)
    return result


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_brs(result: BrsResult, path):
    N = result.horizon
    with open(path, "w") as fh:
        fh.write(f"brs {N} {result.gamma!r}\n")
        records = []
        for k in range(N + 1):
            records.append((f"lambda{k}", result.lambdas[k]))
            records.append((f"deflated{k}", result.deflated[k]))
            records.append((f"tube_x{k}", result.tubes_x[k]))
        for k in range(N):
            records.append((f"psi{k}", result.psi[k]))
            records.append((f"tube_u{k}", result.tubes_u[k]))
        write_records(fh, records)


def load_brs(path) -> BrsResult:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "brs":
            raise ValueError(f"{path}: not a reachable-set checkpoint")
        N = int(header[1])
        gamma = float(header[2])
        records = dict(read_records(io.StringIO(fh.read())))
    try:
        return BrsResult(
            lambdas=tuple(records[f"lambda{k}"] for k in range(N + 1)),
            deflated=tuple(records[f"deflated{k}"] for k in range(N + 1)),
            psi=tuple(records[f"psi{k}"] for k in range(N)),
            tubes_x=tuple(records[f"tube_x{k}"] for k in range(N + 1)),
            tubes_u=tuple(records[f"tube_u{k}"] for k in range(N)),
            gamma=gamma,
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing record {exc}") from None
