"""Dynamics models and reach-avoid problem geometry.

Models expose analytic Jacobians and interval Hessian bounds, which the
conservative linearization needs to stay sound; new models are added as
code, not configuration.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Box, UnsafeRegion
from .numerics import Interval, interval_hessian_bound

__all__ = [
    "DynamicsModel",
    "DubinsCar",
    "AffineModel",
    "ProblemSpec",
    "dubins_step",
    "dubins_problem",
    "default_disturbance",
    "check_jacobian_invertibility",
    "get_model",
    "MODELS",
]


class DynamicsModel(abc.ABC):
    """Disturbed discrete-time system x+ = f(x, u) + w, w in a known box."""

    n: int
    m: int

    def __init__(self, disturbance: Box):
        if disturbance.dim != self.n:
            raise ValueError("disturbance box must match the state dimension")
        self.disturbance = disturbance

    @abc.abstractmethod
    def step(self, x, u) -> np.ndarray:
        """Nominal map f(x, u); broadcasts over leading batch axes."""

    @abc.abstractmethod
    def jacobians(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """(D_x f, D_u f) at a single point."""

    @abc.abstractmethod
    def hessian_bounds(self, t_x: Box, t_u: Box) -> np.ndarray:
        """(n, n+m, n+m) entry-wise sups of |Hessian of f_i| over the tubes."""

    def jacobian_u(self, x, u) -> np.ndarray:
        """Batched D_u f, shape (..., n, m).  Subclasses may vectorize."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.ndim == 1:
            return self.jacobians(x, u)[1]
        flat_x = x.reshape(-1, self.n)
        flat_u = u.reshape(-1, self.m)
        out = np.stack([self.jacobians(a, b)[1] for a, b in zip(flat_x, flat_u)])
        return out.reshape(x.shape[:-1] + (self.n, self.m))


def dubins_step(x, u, tau: float) -> np.ndarray:
    """One Dubins car step: unicycle kinematics under forward Euler."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    out = np.array(x, dtype=float, copy=True)
    out[..., 0] = x[..., 0] + tau * u[..., 0] * np.cos(x[..., 2])
    out[..., 1] = x[..., 1] + tau * u[..., 0] * np.sin(x[..., 2])
    out[..., 2] = x[..., 2] + tau * u[..., 1]
    return out


class DubinsCar(DynamicsModel):
    """Discrete-time Dubins car: position, heading; speed and turn-rate inputs."""

    n = 3
    m = 2

    def __init__(self, disturbance: Box, tau: float = 0.05):
        super().__init__(disturbance)
        self.tau = float(tau)

    def step(self, x, u) -> np.ndarray:
        return dubins_step(x, u, self.tau)

    def jacobians(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        s, c = math.sin(x[2]), math.cos(x[2])
        A = np.eye(3)
        A[0, 2] = -self.tau * u[0] * s
        A[1, 2] = self.tau * u[0] * c
        B = np.array([[self.tau * c, 0.0], [self.tau * s, 0.0], [0.0, self.tau]])
        return A, B

    def jacobian_u(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        theta = x[..., 2]
        B = np.zeros(x.shape[:-1] + (3, 2))
        B[..., 0, 0] = self.tau * np.cos(theta)
        B[..., 1, 0] = self.tau * np.sin(theta)
        B[..., 2, 1] = self.tau
        return B

    def hessian_bounds(self, t_x: Box, t_u: Box) -> np.ndarray:
        tau = self.tau

        def f1_entries(iv):
            x3, u1 = iv[2], iv[3]
            grid = [[0.0] * 5 for _ in range(5)]
            grid[2][2] = tau * u1 * x3.cos()
            grid[2][3] = grid[3][2] = tau * x3.sin()
            return grid

        def f2_entries(iv):
            x3, u1 = iv[2], iv[3]
            grid = [[0.0] * 5 for _ in range(5)]
            grid[2][2] = tau * u1 * x3.sin()
            grid[2][3] = grid[3][2] = tau * x3.cos()
            return grid

        h1 = interval_hessian_bound(f1_entries, t_x, t_u)
        h2 = interval_hessian_bound(f2_entries, t_x, t_u)
        return np.stack([h1, h2, np.zeros((5, 5))])


class AffineModel(DynamicsModel):
    """f(x, u) = A0 x + B0 u + c0; exercises the affine corner cases."""

    def __init__(self, A0, B0, c0, disturbance: Box):
        A0 = np.asarray(A0, dtype=float)
        B0 = np.asarray(B0, dtype=float)
        c0 = np.asarray(c0, dtype=float)
        self.n, self.m = B0.shape
        super().__init__(disturbance)
        self.A0, self.B0, self.c0 = A0, B0, c0

    def step(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return x @ self.A0.T + u @ self.B0.T + self.c0

    def jacobians(self, x, u):
        return self.A0.copy(), self.B0.copy()

    def jacobian_u(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.B0, x.shape[:-1] + (self.n, self.m)).copy()

    def hessian_bounds(self, t_x: Box, t_u: Box) -> np.ndarray:
        size = self.n + self.m
        return np.zeros((self.n, size, size))


@dataclass(frozen=True)
class ProblemSpec:
    """Reach-avoid instance: operate inside, avoid the union, end in the target."""

    operating: Box
    unsafe: UnsafeRegion
    target: Box
    initial: Box
    inputs: Box
    horizon: int | None = None  # optional planning cap; the planner picks N

    def __post_init__(self):
        for name, box in (("initial", self.initial), ("target", self.target)):
            if not self.operating.contains_box(box, tol=1e-12):
                raise ValueError(f"{name} set must lie inside the operating domain")
            if self.unsafe.intersects_box(box):
                raise ValueError(f"{name} set overlaps the unsafe region")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def n(self) -> int:
        return self.operating.dim

    def face_clearances(self, x, separating) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate distances from x to the nearest constraint faces.

        Separating coordinates account for unsafe pieces strictly ahead of or
        behind x in that coordinate; non-separating ones see only the
        operating-domain faces.  No safety margin is subtracted here.
        """
        x = np.asarray(x, dtype=float)
        r_plus = self.operating.upper - x
        r_minus = x - self.operating.lower
        for j in range(self.n):
            if not separating[j]:
                continue
            for piece in self.unsafe.pieces:
                ahead = piece.lower[j] - x[j]
                behind = x[j] - piece.upper[j]
                if ahead > 0.0:
                    r_plus[j] = min(r_plus[j], ahead)
                if behind > 0.0:
                    r_minus[j] = min(r_minus[j], behind)
        return r_plus, r_minus


def default_disturbance(amplitude=(0.003, 0.003, 0.015)) -> Box:
    """Symmetric disturbance box from per-coordinate amplitudes."""
    amp = np.asarray(amplitude, dtype=float)
    return Box(-amp, amp)


def dubins_problem(start=(1.0, 1.0, 0.0), horizon: int | None = None) -> ProblemSpec:
    """Benchmark course: corridor with three obstacles, heading-limited car.

    The initial set is the singleton at ``start``.
    """
    full_angle = (-math.pi / 2.0, math.pi / 2.0)
    operating = Box([0.0, 0.0, full_angle[0]], [5.0, 2.0, full_angle[1]])
    unsafe = UnsafeRegion(
        (
            Box([1.5, 0.0, full_angle[0]], [3.0, 0.5, full_angle[1]]),
            Box([1.5, 1.0, full_angle[0]], [2.5, 2.0, full_angle[1]]),
            Box([3.5, 0.0, full_angle[0]], [4.5, 1.0, full_angle[1]]),
        )
    )
    target = Box([3.5, 1.5, -math.pi / 5.0], [5.0, 2.0, math.pi / 5.0])
    start = np.asarray(start, dtype=float)
    initial = Box(start, start)
    inputs = Box([-8.0, -5.0], [8.0, 5.0])
    return ProblemSpec(operating, unsafe, target, initial, inputs, horizon)


@dataclass
class InvertibilityReport:
    samples: int
    min_abs_det: float | None = None
    max_cond: float | None = None
    passed: bool = True
    failures: list = field(default_factory=list)


def check_jacobian_invertibility(
    model: DynamicsModel,
    x_box: Box,
    u_box: Box,
    samples: int = 1000,
    seed: int = 0,
    det_floor: float = 1e-12,
    cond_limit: float = 1e10,
) -> InvertibilityReport:
    """Sample (x, u) over a region and screen D_x f for invertibility."""
    report = InvertibilityReport(samples=samples)
    if samples == 0:
        return report
    rng = np.random.default_rng(seed)
    xs = rng.uniform(x_box.lower, x_box.upper, size=(samples, x_box.dim))
    us = rng.uniform(u_box.lower, u_box.upper, size=(samples, u_box.dim))
    min_det = math.inf
    max_cond = 0.0
    for x, u in zip(xs, us):
        A, _ = model.jacobians(x, u)
        det = abs(float(np.linalg.det(A)))
        cond = float(np.linalg.cond(A))
        min_det = min(min_det, det)
        max_cond = max(max_cond, cond)
        if det < det_floor or cond > cond_limit:
            report.failures.append((x.copy(), u.copy(), det, cond))
    report.min_abs_det = min_det
    report.max_cond = max_cond
    report.passed = not report.failures
    return report


def _make_dubins(disturbance: Box | None = None, tau: float = 0.05) -> DubinsCar:
    return DubinsCar(disturbance or default_disturbance(), tau=tau)


MODELS = {"dubins": _make_dubins}


def get_model(name: str, **kwargs) -> DynamicsModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; registered: {sorted(MODELS)}") from None
    return factory(**kwargs)
