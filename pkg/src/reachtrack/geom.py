"""Boxes, zonotopes, and the set operations behind the reachability pipeline.

All types are immutable after construction and every operation is a pure
function, so everything here is safe to call concurrently.  Sampling takes
an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .numerics import bounded_feasible

__all__ = [
    "Box",
    "Zonotope",
    "UnsafeRegion",
    "EmptySetError",
    "ParseError",
    "linear_map",
    "minkowski_sum",
    "minkowski_diff_under",
    "interval_hull",
    "shrink_into_box",
    "shrink_into_box_lp",
    "sample",
    "membership",
    "box_distance",
    "write_records",
    "read_records",
]

_PRUNE_TOL = 1e-12


class EmptySetError(ValueError):
    """An under-approximation came out empty (box too large for the set)."""


class ParseError(ValueError):
    """Malformed serialized geometry; carries the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _frozen_array(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("entries must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Box:
    """Axis-aligned hyper-rectangle [lower, upper]; degenerate faces allowed."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", _frozen_array(self.lower, 1))
        object.__setattr__(self, "upper", _frozen_array(self.upper, 1))
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper must have the same dimension")
        if self.dim < 1:
            raise ValueError("boxes need dimension >= 1")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @staticmethod
    def from_center(center, radius) -> "Box":
        center = np.asarray(center, dtype=float)
        radius = np.asarray(radius, dtype=float)
        if np.any(radius < 0):
            raise ValueError("radius must be nonnegative")
        return Box(center - radius, center + radius)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        self._check_dim(x.shape[0])
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def contains_box(self, other: "Box", tol: float = 0.0) -> bool:
        self._check_dim(other.dim)
        return bool(
            np.all(other.lower >= self.lower - tol)
            and np.all(other.upper <= self.upper + tol)
        )

    def intersects(self, other: "Box") -> bool:
        self._check_dim(other.dim)
        return bool(
            np.all(self.lower <= other.upper) and np.all(other.lower <= self.upper)
        )

    def vertices(self) -> np.ndarray:
        """All 2^dim corner points, one per row."""
        corners = np.stack(
            np.meshgrid(*zip(self.lower, self.upper), indexing="ij"), axis=-1
        )
        return corners.reshape(-1, self.dim)

    def as_zonotope(self) -> "Zonotope":
        return Zonotope(self.center, np.diag(self.radius))

    def _check_dim(self, dim: int):
        if dim != self.dim:
            raise ValueError(f"dimension mismatch: box is {self.dim}-d, got {dim}-d")


@dataclass(frozen=True)
class Zonotope:
    """Set {c + G b : ||b||_inf <= 1}; q = 0 generators denotes a singleton."""

    center: np.ndarray
    generators: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        center = _frozen_array(self.center, 1)
        gens = np.array(self.generators, dtype=float)
        if gens.size == 0:
            gens = np.zeros((center.shape[0], 0))
        if gens.ndim != 2 or gens.shape[0] != center.shape[0]:
            raise ValueError(
                f"generators must be ({center.shape[0]} x q), got {gens.shape}"
            )
        if not np.all(np.isfinite(gens)):
            raise ValueError("entries must be finite")
        keep = np.linalg.norm(gens, axis=0) >= _PRUNE_TOL
        gens = gens[:, keep]
        gens.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "generators", gens)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def order(self) -> int:
        return self.generators.shape[1]


@dataclass(frozen=True)
class UnsafeRegion:
    """Union of axis-aligned boxes, all of the same dimension."""

    pieces: tuple

    def __post_init__(self):
        pieces = tuple(self.pieces)
        if pieces:
            dim = pieces[0].dim
            for piece in pieces:
                if piece.dim != dim:
                    raise ValueError("unsafe pieces must share one dimension")
        object.__setattr__(self, "pieces", pieces)

    def contains(self, x, tol: float = 0.0) -> bool:
        return any(piece.contains(x, tol) for piece in self.pieces)

    def intersects_box(self, box: Box) -> bool:
        return any(piece.intersects(box) for piece in self.pieces)


# ---------------------------------------------------------------------------
# Zonotope operations
# ---------------------------------------------------------------------------


def linear_map(M: np.ndarray, Z: Zonotope) -> Zonotope:
    """Exact image M Z = <M c, M G>."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != Z.dim:
        raise ValueError(f"matrix has {M.shape[1]} columns, zonotope is {Z.dim}-d")
    return Zonotope(M @ Z.center, M @ Z.generators)


def minkowski_sum(Z: Zonotope, other) -> Zonotope:
    """Exact Minkowski sum; boxes are lifted to diagonal-generator zonotopes."""
    if isinstance(other, Box):
        other = other.as_zonotope()
    if other.dim != Z.dim:
        raise ValueError(f"dimension mismatch: {Z.dim} vs {other.dim}")
    return Zonotope(
        Z.center + other.center, np.hstack([Z.generators, other.generators])
    )


def interval_hull(Z: Zonotope) -> Box:
    """Tightest axis-aligned box around the zonotope."""
    half = np.sum(np.abs(Z.generators), axis=1)
    return Box(Z.center - half, Z.center + half)


def _scarcity_weights(G: np.ndarray) -> np.ndarray:
    """Per-generator cost of consumption: hull mass relative to each axis.

    Axes with little total extent make their generators expensive, which
    keeps minimization from stripping a thin direction bare when a cheaper
    (in absolute terms) cover exists along plentiful axes.
    """
    extents = np.sum(np.abs(G), axis=1, keepdims=True) + 1e-12
    return (np.abs(G) / extents).sum(axis=0) + 1e-9


def _diff_beta_vertex(
    G: np.ndarray, w: np.ndarray, floor: np.ndarray | None = None
) -> np.ndarray | None:
    """Least-erosion beta with [-w, w] inside <0, G diag(beta)>, or None.

    Exact containment encoding: the box sits inside the scaled zonotope iff
    every box vertex admits a factor vector bounded by beta.  By symmetry
    only half the vertices are needed.  The objective charges each beta its
    scarcity-weighted hull mass.

    When ``floor`` is given, the remainder <0, G diag(1 - beta)> must still
    contain the box [-floor, floor]; this blocks solutions that flatten the
    remainder along some oblique direction even though they cover the
    subtracted box cheaply.
    """
    n, q = G.shape
    if q == 0:
        return None
    signs = np.array(
        [[1.0 if mask & (1 << j) else -1.0 for j in range(n - 1)] + [1.0]
         for mask in range(1 << (n - 1))]
    )
    V = signs.shape[0]
    blocks = 1 if floor is None else 2
    # Variables: a_v, b_v >= 0 per vertex and box (t_v = a_v - b_v), then beta.
    n_t = blocks * 2 * V * q
    n_var = n_t + q
    cost = np.concatenate([np.zeros(n_t), _scarcity_weights(G)])

    boxes = [w] if floor is None else [w, floor]
    a_eq = np.zeros((blocks * V * n, n_var))
    b_eq = np.zeros(blocks * V * n)
    a_ub = np.zeros((blocks * V * q, n_var))
    b_ub = np.zeros(blocks * V * q)
    for blk, target in enumerate(boxes):
        base = blk * 2 * V * q
        for v in range(V):
            a_off = base + v * q
            b_off = base + V * q + v * q
            for row in range(n):
                r = (blk * V + v) * n + row
                a_eq[r, a_off : a_off + q] = G[row]
                a_eq[r, b_off : b_off + q] = -G[row]
                b_eq[r] = target[row] * signs[v, row]
            for i in range(q):
                r = (blk * V + v) * q + i
                a_ub[r, a_off + i] = 1.0
                a_ub[r, b_off + i] = 1.0
                # block 0 factors bounded by beta, block 1 by 1 - beta
                a_ub[r, n_t + i] = -1.0 if blk == 0 else 1.0
                b_ub[r] = 0.0 if blk == 0 else 1.0

    bounds = [(0, None)] * n_t + [(0, 1)] * q
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds,
                  method="highs")
    if res.status != 0:
        return None
    return np.clip(res.x[n_t:], 0.0, 1.0)


def _diff_beta_gamma(G: np.ndarray, w: np.ndarray) -> np.ndarray | None:
    """Generator-containment beta (sufficient condition), or None.

    Linearized through theta = diag(beta) Gamma: G theta = diag(w) with the
    per-row l1 mass of theta at most beta.  Keeps the problem size polynomial
    in the dimension, at the price of some conservativeness; used when the
    vertex encoding would be too large.
    """
    n, q = G.shape
    if q == 0:
        return None
    n_th = q * n
    cost = np.concatenate([np.zeros(2 * n_th), _scarcity_weights(G)])

    a_eq = np.zeros((n * n, 2 * n_th + q))
    b_eq = np.zeros(n * n)
    for a in range(n):
        for b in range(n):
            row = a * n + b
            for i in range(q):
                a_eq[row, i * n + b] = G[a, i]
                a_eq[row, n_th + i * n + b] = -G[a, i]
            if a == b:
                b_eq[row] = w[a]

    a_ub = np.zeros((q, 2 * n_th + q))
    for i in range(q):
        a_ub[i, i * n : (i + 1) * n] = 1.0
        a_ub[i, n_th + i * n : n_th + (i + 1) * n] = 1.0
        a_ub[i, 2 * n_th + i] = -1.0
    b_ub = np.zeros(q)

    bounds = [(0, None)] * (2 * n_th) + [(0, 1)] * q
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds,
                  method="highs")
    if res.status != 0:
        return None
    return np.clip(res.x[2 * n_th :], 0.0, 1.0)


_VERTEX_ENCODING_MAX_DIM = 8


def _diff_by_generator_scaling(
    G: np.ndarray, w: np.ndarray, floor: np.ndarray | None = None
) -> np.ndarray | None:
    if G.shape[0] <= _VERTEX_ENCODING_MAX_DIM:
        beta = _diff_beta_vertex(G, w, floor)
        if beta is None and floor is not None:
            beta = _diff_beta_vertex(G, w)  # floor infeasible; drop it
        return beta
    return _diff_beta_gamma(G, w)


def _box_in_zonotope(w: np.ndarray, G: np.ndarray) -> bool:
    """Exact check [-w, w] inside <0, G>: every box vertex must be a member."""
    dim = w.shape[0]
    for mask in range(1 << dim):
        signs = np.array([1.0 if mask & (1 << j) else -1.0 for j in range(dim)])
        if bounded_feasible(G, signs * w) is None:
            return False
    return True


def minkowski_diff_under(Z: Zonotope, B: Box, floor=None) -> Zonotope:
    """Under-approximate Minkowski difference Z - B for a 0-symmetric box B.

    The result Zt keeps the center of Z and satisfies Zt + B inside Z.  The
    primary route scales individual generators via a containment linear
    program; if that encoding is infeasible, a uniformly scaled copy of Z is
    searched with exact vertex-membership verification.  Raises
    EmptySetError when no same-center under-approximation exists.

    ``floor`` optionally asks the result to keep containing the box
    [-floor, floor] when that is achievable; recursive set computations use
    it to stop a difference from flattening the result obliquely.
    """
    if B.dim != Z.dim:
        raise ValueError(f"dimension mismatch: {Z.dim} vs {B.dim}")
    if np.max(np.abs(B.center), initial=0.0) > 1e-12:
        raise ValueError("box must be symmetric about the origin")
    w = B.radius.copy()
    if np.all(w <= _PRUNE_TOL):
        return Z

    G = Z.generators
    if floor is not None:
        floor = np.asarray(floor, dtype=float)
    beta = _diff_by_generator_scaling(G, w, floor)
    if beta is not None:
        return Zonotope(Z.center, G @ np.diag(1.0 - beta))

    # Fallback: largest uniform scale s with [-w, w] inside <0, (1-s) G>,
    # verified through exact vertex membership; monotone in s, so bisect.
    if G.shape[1] == 0 or not _box_in_zonotope(w, G):
        raise EmptySetError(
            "difference is empty: box does not fit inside the zonotope"
        )
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if _box_in_zonotope(w, (1.0 - mid) * G):
            lo = mid
        else:
            hi = mid
    return Zonotope(Z.center, lo * G)


def shrink_into_box(Z: Zonotope, B: Box) -> Zonotope:
    """Largest uniformly scaled copy <c, a G> whose interval hull fits in B.

    Sound stand-in for the intersection Z and B when the center of Z lies
    strictly inside B; the result is contained in both sets.
    """
    if B.dim != Z.dim:
        raise ValueError(f"dimension mismatch: {Z.dim} vs {B.dim}")
    slack = np.minimum(B.upper - Z.center, Z.center - B.lower)
    if np.any(slack <= 0.0):
        raise ValueError("zonotope center must lie strictly inside the box")
    half = np.sum(np.abs(Z.generators), axis=1)
    alpha = 1.0
    for s, h in zip(slack, half):
        if h > _PRUNE_TOL:
            alpha = min(alpha, s / h)
    return Zonotope(Z.center, alpha * Z.generators)


def shrink_into_box_lp(Z: Zonotope, B: Box, floor=None) -> Zonotope:
    """Per-generator variant of shrink_into_box: scale each generator.

    Maximizes retained interval-hull mass subject to the scaled hull fitting
    in the box, so an axis with little slack only sheds the generators that
    load it instead of starving every other axis.  Same soundness as the
    uniform version: the result is a subset of both Z and B.

    ``floor`` optionally requires the result to keep containing the box
    [-floor, floor] around its center when achievable, which stops the
    optimum from flattening the result along an oblique direction.
    """
    if B.dim != Z.dim:
        raise ValueError(f"dimension mismatch: {Z.dim} vs {B.dim}")
    slack = np.minimum(B.upper - Z.center, Z.center - B.lower)
    if np.any(slack <= 0.0):
        raise ValueError("zonotope center must lie strictly inside the box")
    G = Z.generators
    n, q = G.shape
    if q == 0:
        return Z
    abs_g = np.abs(G)
    if np.all(abs_g.sum(axis=1) <= slack):
        return Z

    def solve(with_floor):
        if not with_floor:
            return linprog(
                -_scarcity_weights(G),
                A_ub=abs_g,
                b_ub=slack,
                bounds=[(0, 1)] * q,
                method="highs",
            )
        # Result must contain [-floor, floor]: each box vertex needs factors
        # tau with |tau_i| <= beta_i (tau = diag(beta) b, exact encoding).
        signs = np.array(
            [[1.0 if mask & (1 << j) else -1.0 for j in range(n - 1)] + [1.0]
             for mask in range(1 << (n - 1))]
        )
        V = signs.shape[0]
        n_var = q + 2 * V * q  # beta, then tau+/tau- per vertex
        cost = np.concatenate([-_scarcity_weights(G), np.zeros(2 * V * q)])
        a_ub = np.zeros((n + V * q, n_var))
        b_ub = np.concatenate([slack, np.zeros(V * q)])
        a_ub[:n, :q] = abs_g
        a_eq = np.zeros((V * n, n_var))
        b_eq = np.zeros(V * n)
        for v in range(V):
            p_off = q + v * q
            m_off = q + V * q + v * q
            for row in range(n):
                a_eq[v * n + row, p_off : p_off + q] = G[row]
                a_eq[v * n + row, m_off : m_off + q] = -G[row]
                b_eq[v * n + row] = floor[row] * signs[v, row]
            for i in range(q):
                r = n + v * q + i
                a_ub[r, p_off + i] = 1.0
                a_ub[r, m_off + i] = 1.0
                a_ub[r, i] = -1.0
        bounds = [(0, 1)] * q + [(0, None)] * (2 * V * q)
        return linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                       bounds=bounds, method="highs")

    res = None
    if floor is not None:
        floor = np.asarray(floor, dtype=float)
        res = solve(True)
    if res is None or res.status != 0:
        res = solve(False)
    if res.status != 0:
        return shrink_into_box(Z, B)  # conservative fallback
    beta = np.clip(res.x[:q], 0.0, 1.0)
    return Zonotope(Z.center, G * beta)


def sample(Z: Zonotope, n: int, mode: str = "uniform", seed: int = 0) -> np.ndarray:
    """Draw n points from Z; factors are uniform over the unit cube or its
    corners ('extreme').  Uniform means uniform in factor space, which is not
    uniform in volume.  Deterministic given the seed.
    """
    if n < 0:
        raise ValueError("sample count must be nonnegative")
    rng = np.random.default_rng(seed)
    q = Z.order
    if mode == "uniform":
        factors = rng.uniform(-1.0, 1.0, size=(n, q))
    elif mode == "extreme":
        factors = rng.integers(0, 2, size=(n, q)) * 2.0 - 1.0
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return Z.center + factors @ Z.generators.T


def membership(Z: Zonotope, x, tol_unused: float = 0.0) -> bool:
    """Exact zonotope membership through the bounded feasibility solver."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != Z.dim:
        raise ValueError(f"dimension mismatch: {Z.dim} vs {x.shape[0]}")
    return bounded_feasible(Z.generators, x - Z.center) is not None


def box_distance(x, B: Box) -> float:
    """Euclidean distance from a point to a box via per-coordinate clamping."""
    x = np.asarray(x, dtype=float)
    B._check_dim(x.shape[0])
    clamped = np.clip(x, B.lower, B.upper)
    return float(np.linalg.norm(x - clamped))


# ---------------------------------------------------------------------------
# Plain-text serialization: one object per record, full-precision floats.
# ---------------------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).ravel())


def write_records(fh, records):
    """Write (label, Box-or-Zonotope) pairs as plain-text records."""
    for label, obj in records:
        if isinstance(obj, Box):
            fh.write(f"box {label}\n{obj.dim}\n")
            fh.write(_fmt(obj.lower) + "\n")
            fh.write(_fmt(obj.upper) + "\n")
        elif isinstance(obj, Zonotope):
            fh.write(f"zonotope {label}\n{obj.dim} {obj.order}\n")
            fh.write(_fmt(obj.center) + "\n")
            if obj.order > 0:
                for row in np.asarray(obj.generators):
                    fh.write(_fmt(row) + "\n")
        else:
            raise TypeError(f"cannot serialize {type(obj).__name__}")


class _LineReader:
    def __init__(self, fh):
        self.lines = fh.read().splitlines()
        self.pos = 0

    def peek(self) -> str | None:
        while self.pos < len(self.lines) and not self.lines[self.pos].strip():
            self.pos += 1
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def next(self, what: str) -> str:
        line = self.peek()
        if line is None:
            raise ParseError(len(self.lines) + 1, f"unexpected end of file, wanted {what}")
        self.pos += 1
        return line

    def floats(self, count: int, what: str) -> np.ndarray:
        lineno = self.pos + 1
        parts = self.next(what).split()
        try:
            values = np.array([float(p) for p in parts])
        except ValueError:
            raise ParseError(lineno, f"bad float in {what}") from None
        if values.shape[0] != count:
            raise ParseError(lineno, f"{what}: expected {count} values, got {len(parts)}")
        return values


def read_records(fh):
    """Parse records written by write_records; returns (label, object) pairs."""
    reader = _LineReader(fh)
    out = []
    while reader.peek() is not None:
        lineno = reader.pos + 1
        head = reader.next("record header").split(maxsplit=1)
        kind = head[0]
        label = head[1] if len(head) > 1 else ""
        if kind == "box":
            lineno = reader.pos + 1
            try:
                dim = int(reader.next("dimension"))
            except ValueError:
                raise ParseError(lineno, "bad dimension") from None
            if dim < 1:
                raise ParseError(lineno, f"bad dimension {dim}")
            lower = reader.floats(dim, "box lower bound")
            upper = reader.floats(dim, "box upper bound")
            out.append((label, Box(lower, upper)))
        elif kind == "zonotope":
            lineno = reader.pos + 1
            parts = reader.next("dimension and order").split()
            try:
                dim, order = int(parts[0]), int(parts[1])
            except (ValueError, IndexError):
                raise ParseError(lineno, "bad dimension/order header") from None
            if dim < 1 or order < 0:
                raise ParseError(lineno, f"bad dimensions {parts}")
            center = reader.floats(dim, "zonotope center")
            if order > 0:
                gens = np.vstack([reader.floats(order, "generator row") for _ in range(dim)])
            else:
                gens = np.zeros((dim, 0))
            out.append((label, Zonotope(center, gens)))
        else:
            raise ParseError(lineno, f"unknown record kind {kind!r}")
    return out
