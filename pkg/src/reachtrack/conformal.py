"""Forward safe sets, nonconformity scores, and conformal certification.

A batch of closed-loop rollouts is reduced to one score per trajectory
(accumulated Euclidean violation against per-step safe boxes and the
terminal target); an order statistic of those scores then certifies future
rollouts at the requested confidence, with no distributional assumptions
beyond exchangeability of the sampling scheme.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Box, box_distance, write_records
from .model import ProblemSpec
from .nominal import NominalTrajectory

__all__ = [
    "SafeSetSequence",
    "ConformalReport",
    "build_safe_sets",
    "score",
    "certify",
    "write_report",
]

DEFAULT_MARGIN = 0.01


@dataclass(frozen=True)
class SafeSetSequence:
    """Per-step certificate boxes around the nominal states."""

    boxes: tuple
    margin: float
    separating: tuple

    @property
    def horizon(self) -> int:
        return len(self.boxes)

    def geometry_hash(self) -> str:
        buf = io.StringIO()
        write_records(buf, [(f"s{k}", box) for k, box in enumerate(self.boxes)])
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def build_safe_sets(
    traj: NominalTrajectory,
    spec: ProblemSpec,
    margin: float = DEFAULT_MARGIN,
    separating=None,
) -> SafeSetSequence:
    """One-sided clearance boxes S_0..S_{N-1} around the nominal states.

    Separating coordinates measure distance to obstacle faces ahead of and
    behind the nominal value; non-separating ones only see the operating
    domain.  Radii must come out nonnegative for the chosen roles, and the
    resulting boxes are verified to stay inside the domain and strictly
    apart from every unsafe piece.
    """
    if separating is None:
        separating = tuple(j < 2 for j in range(spec.n))
    separating = tuple(bool(s) for s in separating)
    if len(separating) != spec.n:
        raise ValueError("need one separating flag per state coordinate")
    if margin <= 0:
        raise ValueError("safety margin must be positive")

    boxes = []
    for k in range(traj.horizon):
        x = traj.states[k]
        r_plus, r_minus = spec.face_clearances(x, separating)
        r_plus = r_plus - margin
        r_minus = r_minus - margin
        for j in range(spec.n):
            if r_plus[j] < 0 or r_minus[j] < 0:
                raise ValueError(
                    f"negative safe-set radius at k={k}, coordinate j={j}; "
                    "revisit the separating roles or the margin"
                )
        box = Box(x - r_minus, x + r_plus)
        _verify_safe_box(box, spec, k)
        boxes.append(box)
    return SafeSetSequence(boxes=tuple(boxes), margin=margin, separating=separating)


def _verify_safe_box(box: Box, spec: ProblemSpec, k: int):
    if not spec.operating.contains_box(box, tol=1e-12):
        raise ValueError(f"safe set at k={k} escapes the operating domain")
    for i, piece in enumerate(spec.unsafe.pieces):
        disjoint = any(
            box.upper[j] < piece.lower[j] or box.lower[j] > piece.upper[j]
            for j in range(spec.n)
        )
        if not disjoint:
            raise ValueError(f"safe set at k={k} touches unsafe piece {i}")


def score(states: np.ndarray, safe_sets: SafeSetSequence, target: Box):
    """Stepwise violations and their total for one rollout.

    The per-step score is the Euclidean distance to the safe box (distance
    to the target box at the final step); the trajectory score is the sum,
    so zero means the run passed every certificate.
    """
    states = np.asarray(states, dtype=float)
    N = safe_sets.horizon
    if states.shape[0] != N + 1:
        raise ValueError(
            f"horizon mismatch: {states.shape[0] - 1} steps vs {N} safe sets"
        )
    per_step = np.array(
        [box_distance(states[k], safe_sets.boxes[k]) for k in range(N)]
        + [box_distance(states[N], target)]
    )
    return per_step, float(per_step.sum())


@dataclass(frozen=True)
class ConformalReport:
    scores: tuple
    sorted_scores: tuple
    delta: float
    rank: int  # order-statistic index l
    quantile: float  # +inf when the certificate is vacuous
    vacuous: bool
    verdict: str
    sampling_note: str = (
        "validity requires initial states and disturbances drawn independently"
    )

    @property
    def count(self) -> int:
        return len(self.scores)


def certify(scores, delta: float) -> ConformalReport:
    """Empirical-quantile certificate over a batch of trajectory scores.

    With H scores and rank l = ceil((1 - delta) (H + 1)), a future rollout's
    score stays at or below the l-th smallest score with probability at
    least 1 - delta.  When l exceeds H the batch is too small for the
    requested confidence and the certificate is reported vacuous.
    """
    scores = [float(s) for s in scores]
    if len(scores) < 1:
        raise ValueError("need at least one score")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    H = len(scores)
    ordered = sorted(scores)
    rank = math.ceil((1.0 - delta) * (H + 1))
    if rank > H:
        quantile = math.inf
        vacuous = True
        verdict = (
            f"vacuous: rank {rank} exceeds the {H} available scores; "
            f"no certificate at confidence {1 - delta:g}"
        )
    else:
        quantile = ordered[rank - 1]
        vacuous = False
        verdict = (
            f"certified at confidence {1 - delta:g}: a future rollout satisfies "
            f"score <= {quantile:g} with probability at least {1 - delta:g}"
        )
    return ConformalReport(
        scores=tuple(scores),
        sorted_scores=tuple(ordered),
        delta=delta,
        rank=rank,
        quantile=quantile,
        vacuous=vacuous,
        verdict=verdict,
    )


def write_report(report: ConformalReport, safe_sets: SafeSetSequence, path_stem):
    """Human-readable summary next to a machine-readable JSON record."""
    txt_path = f"{path_stem}.txt"
    json_path = f"{path_stem}.json"
    with open(txt_path, "w") as fh:
        fh.write("conformal certification report\n")
        fh.write(f"rollouts scored      H = {report.count}\n")
        fh.write(f"miscoverage level    delta = {report.delta:g}\n")
        fh.write(f"order statistic      l = {report.rank}\n")
        q = "inf" if report.vacuous else f"{report.quantile:.17g}"
        fh.write(f"empirical quantile   q = {q}\n")
        fh.write(f"verdict: {report.verdict}\n")
        fh.write(f"note: {report.sampling_note}\n")
        nonzero = sum(1 for s in report.scores if s > 0)
        fh.write(f"nonzero scores: {nonzero} of {report.count}\n")
    record = {
        "H": report.count,
        "delta": report.delta,
        "rank": report.rank,
        "quantile": None if report.vacuous else report.quantile,
        "vacuous": report.vacuous,
        "scores": list(report.scores),
        "safe_set_hash": safe_sets.geometry_hash(),
        "sampling_note": report.sampling_note,
    }
    with open(json_path, "w") as fh:
        json.dump(record, fh, indent=2)
    return txt_path, json_path
