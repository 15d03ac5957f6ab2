"""Small dense linear algebra and feasibility primitives.

Everything here operates on tiny dense problems (state dimensions of a
handful, generator counts in the low hundreds), so the implementations
favor exactness and auditability over asymptotic speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Interval",
    "SingularMatrixError",
    "invert",
    "pseudoinverse",
    "bounded_feasible",
    "interval_hessian_bound",
]

# Condition-number guard for invert(); a bad linearization step should fail
# loudly instead of silently corrupting a backward recursion.
COND_LIMIT = 1e10

# Outward padding absorbing libm rounding so interval sups dominate any
# sampled float evaluation.
_TRIG_PAD = 1e-12


class SingularMatrixError(ValueError):
    """Raised when a matrix is singular or too ill-conditioned to invert."""


@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi] with enclosure arithmetic."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (self.lo <= self.hi):
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @staticmethod
    def point(x: float) -> "Interval":
        return Interval(float(x), float(x))

    def __add__(self, other):
        other = _as_interval(other)
        return Interval(self.lo + other.lo, self.hi + other.hi)

    __radd__ = __add__

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __sub__(self, other):
        return self + (-_as_interval(other))

    def __rsub__(self, other):
        return _as_interval(other) + (-self)

    def __mul__(self, other):
        other = _as_interval(other)
        products = (
            self.lo * other.lo,
            self.lo * other.hi,
            self.hi * other.lo,
            self.hi * other.hi,
        )
        return Interval(min(products), max(products))

    __rmul__ = __mul__

    def sin(self) -> "Interval":
        return (self - math.pi / 2.0).cos()

    def cos(self) -> "Interval":
        if self.hi - self.lo >= 2.0 * math.pi:
            return Interval(-1.0, 1.0)
        candidates = [math.cos(self.lo), math.cos(self.hi)]
        # Extrema of cos occur at integer multiples of pi.
        k_lo = math.ceil(self.lo / math.pi)
        k_hi = math.floor(self.hi / math.pi)
        for k in range(k_lo, k_hi + 1):
            candidates.append(1.0 if k % 2 == 0 else -1.0)
        lo = max(-1.0, min(candidates) - _TRIG_PAD)
        hi = min(1.0, max(candidates) + _TRIG_PAD)
        return Interval(lo, hi)

    def abs_sup(self) -> float:
        """Supremum of |x| over the interval."""
        return max(abs(self.lo), abs(self.hi))

    def contains(self, x: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= x <= self.hi + tol


def _as_interval(x) -> Interval:
    if isinstance(x, Interval):
        return x
    return Interval.point(float(x))


def invert(M: np.ndarray, step: int | None = None) -> np.ndarray:
    """Invert a small square matrix with a conditioning guard.

    Raises SingularMatrixError, naming the offending time step when one is
    given, if the condition number exceeds COND_LIMIT.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"invert expects a square matrix, got shape {M.shape}")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        where = f" at time step {step}" if step is not None else ""
        raise SingularMatrixError(
            f"matrix{where} is singular or ill-conditioned (cond={cond:.3e})"
        )
    return np.linalg.inv(M)


def pseudoinverse(M: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverse via SVD with relative rank truncation."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((M.shape[1], M.shape[0]))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((M.shape[1], M.shape[0]))
    keep = s > 1e-10 * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


# ---------------------------------------------------------------------------
# Bounded-variable phase-1 simplex.
#
# Solves: does there exist b with G b = y and -1 <= b <= 1?  Variables are
# shifted to t = b + 1 in [0, 2]; artificial variables with signs matching
# the shifted right-hand side give an immediate basic feasible point, and
# minimizing their sum to zero answers feasibility exactly.  Bland's rule
# guarantees termination on these tiny dense problems.
# ---------------------------------------------------------------------------

_AT_LOWER = 0
_AT_UPPER = 1

_FEAS_TOL = 1e-9
_PIV_TOL = 1e-11


def bounded_feasible(G: np.ndarray, y: np.ndarray) -> np.ndarray | None:
    """Find b in [-1, 1]^q with G b = y, or None if no such b exists.

    Returned vectors satisfy ||G b - y||_inf <= 1e-8.  Infeasibility is a
    normal result, not an error.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, q = G.shape
    if y.shape[0] != n:
        raise ValueError(f"shape mismatch: G is {G.shape}, y has length {y.shape[0]}")
    if q == 0:
        return np.zeros(0) if np.max(np.abs(y), initial=0.0) <= _FEAS_TOL else None

    # Shift to t in [0, 2]; append artificials (one per row, unbounded above).
    rhs = y + G @ np.ones(q)
    signs = np.where(rhs >= 0.0, 1.0, -1.0)
    A = np.hstack([G, np.diag(signs)])
    lower = np.concatenate([np.zeros(q), np.zeros(n)])
    upper = np.concatenate([np.full(q, 2.0), np.full(n, np.inf)])
    cost = np.concatenate([np.zeros(q), np.ones(n)])

    n_total = q + n
    basis = list(range(q, n_total))
    nonbasic_state = np.full(n_total, _AT_LOWER, dtype=int)

    def nonbasic_value(j: int) -> float:
        return lower[j] if nonbasic_state[j] == _AT_LOWER else upper[j]

    max_iters = 200 + 50 * n_total
    for _ in range(max_iters):
        B = A[:, basis]
        nonbasic = [j for j in range(n_total) if j not in basis]
        rhs_eff = rhs - sum(
            A[:, j] * nonbasic_value(j) for j in nonbasic if nonbasic_value(j) != 0.0
        )
        x_basic = np.linalg.solve(B, rhs_eff)
        dual = np.linalg.solve(B.T, cost[basis])

        # Entering variable (Bland: smallest improving index).
        entering = -1
        direction = 0.0
        for j in nonbasic:
            reduced = cost[j] - dual @ A[:, j]
            if nonbasic_state[j] == _AT_LOWER and reduced < -_FEAS_TOL:
                entering, direction = j, 1.0
                break
            if nonbasic_state[j] == _AT_UPPER and reduced > _FEAS_TOL:
                entering, direction = j, -1.0
                break

        if entering < 0:
            # Optimal for the phase-1 objective.
            if cost[basis] @ x_basic > 1e-7:
                return None
            t = np.zeros(q)
            for pos, var in enumerate(basis):
                if var < q:
                    t[var] = x_basic[pos]
            for j in range(q):
                if j not in basis:
                    t[j] = nonbasic_value(j)
            b = np.clip(t - 1.0, -1.0, 1.0)
            if np.max(np.abs(G @ b - y), initial=0.0) > 1e-8:
                return None
            return b

        w = np.linalg.solve(B, A[:, entering])
        span = upper[entering] - lower[entering]
        step = span if np.isfinite(span) else np.inf
        leaving_pos = -1
        leaving_to = _AT_LOWER
        for pos, var in enumerate(basis):
            delta = direction * w[pos]
            if delta > _PIV_TOL:
                limit = max((x_basic[pos] - lower[var]) / delta, 0.0)
                if limit < step - 1e-12:
                    step, leaving_pos, leaving_to = limit, pos, _AT_LOWER
            elif delta < -_PIV_TOL:
                if not np.isfinite(upper[var]):
                    continue
                limit = max((upper[var] - x_basic[pos]) / (-delta), 0.0)
                if limit < step - 1e-12:
                    step, leaving_pos, leaving_to = limit, pos, _AT_UPPER
        if not np.isfinite(step):
            # Cannot happen for the phase-1 objective, guarded regardless.
            return None

        if leaving_pos < 0:
            # Bound flip: entering moves across its whole range.
            nonbasic_state[entering] = (
                _AT_UPPER if nonbasic_state[entering] == _AT_LOWER else _AT_LOWER
            )
        else:
            leaving_var = basis[leaving_pos]
            basis[leaving_pos] = entering
            nonbasic_state[leaving_var] = leaving_to

    raise RuntimeError("bounded_feasible: iteration limit exceeded")


def interval_hessian_bound(hessian_entries, t_x, t_u) -> np.ndarray:
    """Entry-wise upper bounds on |Hessian| over a state/input tube pair.

    ``hessian_entries`` maps a list of Intervals (state coordinates followed
    by input coordinates) to a square nested sequence whose entries are
    Intervals or plain numbers.  Returns the matrix of abs-sups.
    """
    ivals = [
        Interval(float(lo), float(hi))
        for lo, hi in zip(np.asarray(t_x.lower), np.asarray(t_x.upper))
    ]
    ivals += [
        Interval(float(lo), float(hi))
        for lo, hi in zip(np.asarray(t_u.lower), np.asarray(t_u.upper))
    ]
    entries = hessian_entries(ivals)
    size = len(entries)
    out = np.zeros((size, size))
    for p in range(size):
        for r in range(size):
            e = entries[p][r]
            out[p, r] = e.abs_sup() if isinstance(e, Interval) else abs(float(e))
    return out
