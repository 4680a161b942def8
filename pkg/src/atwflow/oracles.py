"""Closed-form references: the shrinking ball, the torus curvature and the arrival-time PDE."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage as ndi
from scipy.special import gamma

from .grid import GridSpec, ScalarField, SetMask


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / gamma(n / 2 + 1)


def ball_energy_gain(rho: float, r: float, h: float, n: int) -> float:
    """``F_h(B_rho, B_r) - F_h(empty, B_r)`` for concentric balls, ``rho <= r``."""
    w = n * unit_ball_volume(n)
    return w * (rho ** (n - 1) - (r * rho ** n / n - rho ** (n + 1) / (n + 1)) / h)


def ball_radius_next(r: float, h: float, n: int = 2) -> float:
    """Radius of the minimizer of one step started from ``B_r``.

    The larger root of ``r'^2 - r r' + (n - 1) h = 0`` when it exists and
    beats the empty set in energy; otherwise 0 (ties go to the empty set).
    """
    if r < 0 or h < 0:
        raise ValueError("r and h must be non-negative")
    if n < 2:
        raise ValueError("n must be at least 2")
    disc = r * r - 4 * (n - 1) * h
    if r == 0 or disc < 0:
        return 0.0
    rho = 0.5 * (r + math.sqrt(disc))
    if h > 0 and ball_energy_gain(rho, r, h, n) >= 0:
        return 0.0
    return rho


def ball_radius_discriminant_rule(r: float, h: float, n: int = 2) -> float:
    """Critical radius whenever the discriminant is non-negative, else 0 (no energy comparison)."""
    disc = r * r - 4 * (n - 1) * h
    return 0.5 * (r + math.sqrt(disc)) if r > 0 and disc >= 0 else 0.0


@dataclass(frozen=True)
class BallOracle:
    """Exact minimizing-movements evolution of a ball of radius ``r0`` in ``R^n``."""

    r0: float
    n: int = 2
    h: float = 0.01

    def __post_init__(self):
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        if self.n not in (2, 3):
            raise ValueError("n must be 2 or 3")
        if not self.h >= 0:
            raise ValueError("h must be non-negative")

    def radius_seq(self, K: int) -> np.ndarray:
        """``r_0, ..., r_K``."""
        r = [self.r0]
        for _ in range(K):
            r.append(ball_radius_next(r[-1], self.h, self.n))
        return np.array(r)

    def lower_bound(self, k) -> np.ndarray:
        """``sqrt(max(r0^2 - 2 k (n - 1) h, 0))``."""
        k = np.asarray(k, dtype=float)
        return np.sqrt(np.maximum(self.r0 ** 2 - 2 * k * (self.n - 1) * self.h, 0.0))

    def extinction_step(self) -> int:
        """First ``k`` with ``r_k = 0``."""
        r, k = self.r0, 0
        while r > 0:
            r = ball_radius_next(r, self.h, self.n)
            k += 1
        return k

    @property
    def extinction_time(self) -> float:
        return self.r0 ** 2 / (2 * (self.n - 1))

    @property
    def H0(self) -> float:
        return (self.n - 1) / self.r0

    def arrival(self, grid: GridSpec, center: Sequence[float] | None = None) -> ScalarField:
        return ball_arrival_exact(grid, self.r0, self.n, center)

    def tv_exact(self) -> float:
        return ball_tv_exact(self.r0, self.n)


def ball_radius_seq(oracle: BallOracle, K: int) -> np.ndarray:
    return oracle.radius_seq(K)


def ball_lower_bound(oracle: BallOracle, k) -> np.ndarray:
    return oracle.lower_bound(k)


def ball_arrival_exact(grid: GridSpec, r0: float, n: int | None = None,
                       center: Sequence[float] | None = None) -> ScalarField:
    """``(r0^2 - |x|^2) / (2 (n - 1))`` clamped at 0; ``n`` defaults to the grid dimension."""
    n = grid.dim if n is None else n
    c = np.zeros(grid.dim) if center is None else center
    r = grid.radius(c)
    return ScalarField(grid, np.maximum(r0 ** 2 - r ** 2, 0.0) / (2 * (n - 1)))


def ball_tv_exact(r0: float, n: int = 2) -> float:
    """``int |Du| = n w_n r0^(n+1) / ((n + 1)(n - 1))`` for the ball arrival time."""
    return n * unit_ball_volume(n) * r0 ** (n + 1) / ((n + 1) * (n - 1))


def torus_min_H(R: float, r_tube: float) -> float:
    """Smallest mean curvature (sum of principal curvatures) of a torus, at the inner equator."""
    if not 0 < r_tube < R:
        raise ValueError("need 0 < r_tube < R")
    return (R - 2 * r_tube) / (r_tube * (R - r_tube))


def torus_H(R: float, r_tube: float, theta) -> np.ndarray:
    """Mean curvature at tube angle ``theta`` (0 on the outer equator, pi on the inner)."""
    c = np.cos(theta)
    return 1 / r_tube + c / (R + r_tube * c)


class ResidualStats(NamedTuple):
    max_abs: float
    mean_abs: float
    n_cells: int
    n_excluded: int
    residual: np.ndarray


def radial_band(grid: GridSpec, r_inner: float, r_outer: float,
                center: Sequence[float] | None = None) -> np.ndarray:
    r = grid.radius(np.zeros(grid.dim) if center is None else center)
    return (r >= r_inner) & (r <= r_outer)


def mean_curvature_operator(u: np.ndarray, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """``|Du| div(Du / |Du|)`` by central differences, and ``|Du|``."""
    du = np.gradient(u, dx)
    grad_sq = sum(d * d for d in du)
    lap = np.zeros_like(u)
    quad = np.zeros_like(u)
    for i, di in enumerate(du):
        dii = np.gradient(di, dx)
        lap += dii[i]
        for j, dj in enumerate(du):
            quad += dii[j] * di * dj
    with np.errstate(invalid="ignore", divide="ignore"):
        op = lap - quad / grad_sq
    return op, np.sqrt(grad_sq)


def viscosity_residual(u: ScalarField, interior_band, grad_floor: float = 1e-3) -> ResidualStats:
    """Residual of ``|Du| div(Du/|Du|) = -1`` on a band of cells.

    Cells with ``|Du| < grad_floor`` are excluded and counted.
    """
    band = interior_band.inside if isinstance(interior_band, SetMask) else np.asarray(interior_band, bool)
    op, gnorm = mean_curvature_operator(np.asarray(u.values), u.grid.spacing)
    res = op + 1.0
    keep = band & (gnorm >= grad_floor)
    vals = np.abs(res[keep])
    return ResidualStats(
        max_abs=float(vals.max()) if vals.size else 0.0,
        mean_abs=float(vals.mean()) if vals.size else 0.0,
        n_cells=int(keep.sum()),
        n_excluded=int((band & ~keep).sum()),
        residual=np.where(keep, res, np.nan),
    )


def smooth_field(u: ScalarField, width: float) -> ScalarField:
    """Gaussian smoothing with standard deviation ``width`` (length units)."""
    return ScalarField(u.grid, ndi.gaussian_filter(np.asarray(u.values), width / u.grid.spacing, mode="nearest"))
