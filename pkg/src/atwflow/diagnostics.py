"""Checks of the structural properties of computed trajectories, and the convergence study.

Every check returns a :class:`CheckReport` whose tolerance is stated in grid
units. Two perimeter estimators are used: the discrete total variation of
the run (exact identities, ledgers) and a contour estimator that is
consistent with the Euclidean perimeter (comparisons with continuum values).
"""

from __future__ import annotations

import itertools
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numba as nb
import numpy as np
from scipy import ndimage as ndi
from skimage import measure

from ._rng import stream
from .distance import signed_distance_array, squared_edt_cells
from .grid import Disk, GridSpec, SetMask, check_same_grid, synth_shape
from .oracles import BallOracle, ball_arrival_exact, ball_tv_exact, unit_ball_volume
from .scheme import ArrivalField, Trajectory, arrival_time, pinning_coupling, run_scheme
from .tv import TV_MODES, SolverParams, discrete_tv, tv_cells

logger = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-3
COAREA_RTOL = 1e-10
ISOTROPIC_NESTING_FRACTION = 1e-3
MAX_EXHAUSTIVE_CELLS = 20

# contour estimator settings, in cells
_STRAIGHT_TOL = 1.0
_MAX_WINDOW = 32
_NORMAL_SMOOTHING = 1.5


class EmptyMaskWarning(UserWarning):
    """A perimeter was requested for an empty mask."""


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one check; ``passed`` is ``worst <= tolerance``.

    ``worst`` is the largest violation found (zero or negative when the
    property holds with margin) and ``location`` the step or cell where it
    occurred.
    """

    name: str
    worst: float
    tolerance: float
    units: str
    location: object = None
    details: dict = field(default_factory=dict)
    passed: bool = field(init=False)

    def __post_init__(self):
        worst = float(self.worst)
        if math.isnan(worst):
            raise ValueError("worst violation must not be NaN")
        object.__setattr__(self, "worst", worst)
        object.__setattr__(self, "tolerance", float(self.tolerance))
        object.__setattr__(self, "passed", bool(worst <= self.tolerance))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return _jsonable(d)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name}: worst {self.worst:.4g} {self.units} "
                f"(tolerance {self.tolerance:.4g}) at {self.location}")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


# perimeter estimators -------------------------------------------------------

@nb.njit(cache=True)
def _is_straight(V, a, b, tol):
    tx = V[b, 0] - V[a, 0]
    ty = V[b, 1] - V[a, 1]
    L = np.sqrt(tx * tx + ty * ty)
    if L == 0.0:
        return False
    for k in range(a + 1, b):
        if abs((V[k, 0] - V[a, 0]) * ty - (V[k, 1] - V[a, 1]) * tx) > tol * L:
            return False
    return True


@nb.njit(cache=True)
def _projected_length(V, closed, tol, wmax):
    # Each segment is projected onto the chord of the longest window of
    # vertices around it that stays within ``tol`` of its chord.
    n = V.shape[0] - 1
    if closed:
        W = np.empty((n + 2 * wmax + 1, 2))
        for k in range(-wmax, n + wmax + 1):
            W[k + wmax] = V[k % n]
        off = wmax
    else:
        W = V
        off = 0
    m = W.shape[0]
    total = 0.0
    for i in range(n):
        s = i + off
        a = s
        b = s + 1
        grow = True
        while grow:
            grow = False
            if b + 1 < m and b + 1 - s <= wmax and _is_straight(W, a, b + 1, tol):
                b += 1
                grow = True
            if a > 0 and s - a + 1 <= wmax and _is_straight(W, a - 1, b, tol):
                a -= 1
                grow = True
        tx = W[b, 0] - W[a, 0]
        ty = W[b, 1] - W[a, 1]
        sx = W[s + 1, 0] - W[s, 0]
        sy = W[s + 1, 1] - W[s, 1]
        total += abs(sx * tx + sy * ty) / np.sqrt(tx * tx + ty * ty)
    return total


def _perimeter_2d(inside: np.ndarray) -> float:
    f = np.pad(inside.astype(np.float64), 2)
    total = 0.0
    for c in measure.find_contours(f, 0.5):
        closed = bool(np.array_equal(c[0], c[-1]))
        total += _projected_length(np.ascontiguousarray(c), closed, _STRAIGHT_TOL, _MAX_WINDOW)
    return total


def _perimeter_3d(inside: np.ndarray) -> float:
    f = np.pad(inside.astype(np.float64), 3)
    verts, faces, _, _ = measure.marching_cubes(f, 0.5)
    tri = verts[faces]
    area = 0.5 * np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    smooth = ndi.gaussian_filter(f, _NORMAL_SMOOTHING)
    centroids = tri.mean(axis=1).T
    normal = np.stack([ndi.map_coordinates(g, centroids, order=1) for g in np.gradient(smooth)], axis=1)
    norm = np.linalg.norm(normal, axis=1)
    unit = normal / np.where(norm > 0, norm, 1.0)[:, None]
    proj = np.abs(np.einsum("ij,ij->i", area, unit))
    return float(np.where(norm > 0, proj, np.linalg.norm(area, axis=1)).sum())


def perimeter_euclidean(mask: SetMask) -> float:
    """Perimeter estimate that converges to the Euclidean one under refinement.

    The 0.5 level set of the bilinearly (trilinearly) interpolated indicator
    is extracted with marching squares (cubes). Its staircase excess is
    removed by projection: in 2D each segment onto the chord of the longest
    straight run of contour vertices around it, in 3D each triangle onto the
    normal of the Gaussian-smoothed indicator. Axis-aligned edges are kept
    exactly. An empty mask gives 0 with an :class:`EmptyMaskWarning`.
    """
    if mask.is_empty:
        warnings.warn("perimeter of an empty mask", EmptyMaskWarning, stacklevel=2)
        return 0.0
    inside = mask.inside
    cells = _perimeter_2d(inside) if mask.grid.dim == 2 else _perimeter_3d(inside)
    return cells * mask.grid.face_area


def perimeter_tv(mask: SetMask, mode: str = "isotropic") -> float:
    """Discrete total variation of the indicator."""
    return discrete_tv(mask, mode)


# Euler-Lagrange curvature -------------------------------------------------

class ELCurvature(NamedTuple):
    min: float
    max: float
    values: np.ndarray
    cells: np.ndarray  # flat indices of the boundary cells


def boundary_cells(mask: SetMask) -> np.ndarray:
    """Inside cells with at least one outside face neighbour."""
    structure = ndi.generate_binary_structure(mask.grid.dim, 1)
    return mask.inside & ~ndi.binary_erosion(mask.inside, structure, border_value=0)


def el_curvature_stats(E: SetMask, E_prev: SetMask, h: float, distance: str = "subcell") -> ELCurvature:
    """``d_{E_prev} / h`` on the boundary cells of ``E``.

    For an exact step this is the mean curvature of ``dE`` (sphere:
    ``(n - 1)/r``). ``min`` and ``max`` are NaN when ``E`` is empty.
    """
    check_same_grid(E, E_prev)
    if not h > 0:
        raise ValueError("h must be positive")
    bd = boundary_cells(E)
    cells = np.flatnonzero(bd)
    if cells.size == 0 or E_prev.is_empty:
        return ELCurvature(math.nan, math.nan, np.empty(0), cells)
    d = np.abs(signed_distance_array(E_prev.inside, E_prev.grid, distance)).ravel()[cells] / h
    return ELCurvature(float(d.min()), float(d.max()), d, cells)


def curvature_series(traj: Trajectory) -> list[ELCurvature]:
    """:func:`el_curvature_stats` for steps ``1..N``."""
    return [el_curvature_stats(traj.steps[k], traj.steps[k - 1], traj.h, traj.distance)
            for k in range(1, len(traj.steps))]


# trajectory checks ----------------------------------------------------------

def check_nestedness(traj: Trajectory, mode: str | None = None) -> CheckReport:
    """Count cells of ``E_{k+1}`` outside ``E_k``.

    Tolerance: no cell for anisotropic runs, 0.1% of the boundary cells of
    ``E_k`` per step for the isotropic stencils.
    """
    mode = mode or traj.tv_mode
    counts, fractions = [], []
    for k in range(traj.n_steps):
        E, F = traj.steps[k], traj.steps[k + 1]
        bad = int((F.inside & ~E.inside).sum())
        nb_ = int(boundary_cells(E).sum())
        counts.append(bad)
        fractions.append(bad / nb_ if nb_ else float(bad > 0))
    if mode == "anisotropic":
        vals, tol, units = counts, 0.0, "cells"
    else:
        vals, tol, units = fractions, ISOTROPIC_NESTING_FRACTION, "fraction of boundary cells"
    k = int(np.argmax(vals)) if vals else None
    return CheckReport("nestedness", max(vals, default=0.0), tol, units,
                       location=None if k is None else k + 1,
                       details={"mode": mode, "violating_cells": counts, "total": int(sum(counts))})


def check_perimeter_monotone(traj: Trajectory, slack: float = MONOTONE_SLACK) -> CheckReport:
    """``P(E_{k+1}) <= P(E_k)(1 + slack)`` for the run's TV and the contour estimator."""
    series = {
        "tv": [perimeter_tv(E, traj.tv_mode) for E in traj.steps],
        "euclidean": [perimeter_euclidean(E) if not E.is_empty else 0.0 for E in traj.steps],
    }
    worst, where = -math.inf, None
    for name, P in series.items():
        for k in range(len(P) - 1):
            if P[k] > 0:
                r = P[k + 1] / P[k] - 1.0
                if r > worst:
                    worst, where = r, (name, k + 1)
    if where is None:
        worst = 0.0
    return CheckReport("perimeter_monotone", worst, slack, "relative increase",
                       location=None if where is None else where[1],
                       details={"estimator": None if where is None else where[0], **series})


def check_minH_monotone(traj: Trajectory, slack_cells: float = 2.0,
                        curvature: Sequence[ELCurvature] | None = None) -> CheckReport:
    """Minimum Euler-Lagrange curvature non-decreasing in ``k`` up to ``slack_cells * dx / h``.

    Every pair ``j < k`` is compared, not only consecutive steps.
    """
    curvature = curvature if curvature is not None else curvature_series(traj)
    mins = [c.min for c in curvature]
    steps = [k + 1 for k, m in enumerate(mins) if not math.isnan(m)]
    vals = [m for m in mins if not math.isnan(m)]
    worst, where, run_max = 0.0 if len(vals) < 2 else -math.inf, None, -math.inf
    for k, m in zip(steps, vals):
        if run_max > -math.inf and run_max - m > worst:
            worst, where = run_max - m, k
        run_max = max(run_max, m)
    tol = slack_cells * traj.grid.spacing / traj.h
    return CheckReport("minH_monotone", worst, tol, "1/length", location=where,
                       details={"min_H": mins})


def check_ball_upper_bound(traj: Trajectory, oracle: BallOracle, slack_cells: float = 2.0) -> CheckReport:
    """``r_k <= sqrt(r0^2 - 2 k (n - 1) h) + slack_cells * dx`` at every step.

    The exact discrete radii satisfy ``r_k^2 <= r_{k-1}^2 - 2 (n - 1) h``, so
    the square-root profile bounds them from above.
    """
    _check_oracle(traj, oracle)
    r = ball_radii(traj)
    ub = oracle.lower_bound(np.arange(len(r)))
    over = r - ub
    k = int(np.argmax(over))
    return CheckReport("ball_upper_bound", float(over[k]), slack_cells * traj.grid.spacing, "length",
                       location=k, details={"radius": r, "upper_bound": ub})


def _check_oracle(traj: Trajectory, oracle: BallOracle) -> None:
    if not math.isclose(oracle.h, traj.h, rel_tol=1e-12) or oracle.n != traj.grid.dim:
        raise ValueError(f"oracle (h={oracle.h}, n={oracle.n}) does not match the run "
                         f"(h={traj.h}, n={traj.grid.dim})")


def check_ball_curvature(traj: Trajectory, oracle: BallOracle, slack_cells: float = 2.0,
                         curvature: Sequence[ELCurvature] | None = None) -> CheckReport:
    """Minimum Euler-Lagrange curvature against ``(n - 1)/r_k`` of the exact ball evolution.

    Steps where either the computed set or the exact ball is empty are skipped
    and counted.
    """
    _check_oracle(traj, oracle)
    curvature = curvature if curvature is not None else curvature_series(traj)
    r = oracle.radius_seq(len(curvature))
    worst, where, skipped, errs = 0.0, None, 0, []
    for k, c in enumerate(curvature, start=1):
        if math.isnan(c.min) or r[k] == 0:
            skipped += 1
            errs.append(None)
            continue
        e = abs(c.min - (oracle.n - 1) / r[k])
        errs.append(e)
        if e > worst:
            worst, where = e, k
    tol = slack_cells * traj.grid.spacing / traj.h
    return CheckReport("ball_curvature", worst, tol, "1/length", location=where,
                       details={"errors": errs, "skipped_steps": skipped})


def ball_radii(traj: Trajectory) -> np.ndarray:
    """Radius of the ball with the volume of each ``E_k``."""
    n = traj.grid.dim
    vols = np.array([E.volume for E in traj.steps])
    return (vols / unit_ball_volume(n)) ** (1.0 / n)


def check_ball_radius(traj: Trajectory, oracle: BallOracle, slack_cells: float = 2.0) -> CheckReport:
    """``|r_k - r_k^exact| <= slack_cells * dx`` with ``r_k`` the volume-equivalent radius."""
    _check_oracle(traj, oracle)
    r = ball_radii(traj)
    exact = oracle.radius_seq(len(r) - 1)
    err = np.abs(r - exact)
    k = int(np.argmax(err))
    return CheckReport("ball_radius", float(err[k]), slack_cells * traj.grid.spacing, "length", location=k,
                       details={"radius": r, "exact": exact})


def check_ball_lower_bound(traj: Trajectory, oracle: BallOracle, slack_cells: float = 2.0) -> CheckReport:
    """``r_k >= sqrt(r0^2 - 2 k (n - 1) h) - slack_cells * dx`` at every step.

    The exact discrete radii violate this near extinction (see
    :func:`check_ball_upper_bound`); compare with ``oracle.radius_seq``.
    """
    _check_oracle(traj, oracle)
    r = ball_radii(traj)
    lb = oracle.lower_bound(np.arange(len(r)))
    short = lb - r
    k = int(np.argmax(short))
    return CheckReport("ball_lower_bound", float(short[k]), slack_cells * traj.grid.spacing, "length",
                       location=k, details={"radius": r, "lower_bound": lb})


@dataclass(frozen=True)
class EnergyLedger:
    """Per-step energy bookkeeping of a trajectory; index ``k`` refers to ``E_k``.

    ``dissipation[k] = (1/h) sum_{E_k sym-diff E_{k-1}} d_{E_{k-1}} dx^n`` with
    ``dissipation[0] = 0``; min/max curvature are NaN for ``k = 0`` and for
    empty sets.
    """

    h: float
    perimeter_tv: np.ndarray
    perimeter_euclid: np.ndarray
    dissipation: np.ndarray
    min_H: np.ndarray
    max_H: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.dissipation)

    @property
    def energy(self) -> np.ndarray:
        """Step energy ``P(E_k) + dissipation[k]``."""
        return self.perimeter_tv + self.dissipation

    @property
    def total(self) -> np.ndarray:
        """``P(E_k) + sum_{j <= k} dissipation[j]``; bounded by ``P(E_0)``."""
        return self.perimeter_tv + self.cumulative

    def to_dict(self) -> dict:
        return _jsonable({"h": self.h, "perimeter_tv": self.perimeter_tv,
                          "perimeter_euclid": self.perimeter_euclid, "dissipation": self.dissipation,
                          "cumulative": self.cumulative, "min_H": self.min_H, "max_H": self.max_H})


def energy_ledger(traj: Trajectory, h: float | None = None,
                  curvature: Sequence[ELCurvature] | None = None) -> EnergyLedger:
    """Ledger of ``traj``; ``h`` overrides the step used in the formulas."""
    h = traj.h if h is None else float(h)
    grid = traj.grid
    P_tv = np.array([perimeter_tv(E, traj.tv_mode) for E in traj.steps])
    P_eu = np.array([perimeter_euclidean(E) if not E.is_empty else 0.0 for E in traj.steps])
    diss = np.zeros(len(traj.steps))
    for k in range(1, len(traj.steps)):
        d = np.abs(traj.signed_distance(k - 1))
        moved = traj.steps[k].inside ^ traj.steps[k - 1].inside
        diss[k] = d[moved].sum() * grid.cell_volume / h
    curvature = curvature if curvature is not None else curvature_series(traj)
    mins = np.array([math.nan] + [c.min for c in curvature])
    maxs = np.array([math.nan] + [c.max for c in curvature])
    if h != traj.h:
        mins, maxs = mins * traj.h / h, maxs * traj.h / h
    return EnergyLedger(h, P_tv, P_eu, diss, mins, maxs)


def apriori_ledger(traj: Trajectory, h: float | None = None, slack: float = MONOTONE_SLACK,
                   curvature: Sequence[ELCurvature] | None = None) -> tuple[EnergyLedger, CheckReport]:
    """Energy ledger and the a-priori bounds.

    Checks ``P(E_N) + sum_{k <= N} dissipation_k <= P(E_0)(1 + slack)`` for
    every ``N``, and ``TV(u_h) <= T_h P(E_0)(1 + slack)`` with ``T_h`` the
    number of nonempty sets times ``h``. Perimeters use the run's TV stencil.
    ``h`` overrides the step in the formulas (a wrong value should fail).
    """
    ledger = energy_ledger(traj, h, curvature)
    hh = ledger.h
    P0 = ledger.perimeter_tv[0]
    if P0 == 0:
        raise ValueError("E_0 has zero perimeter")
    excess = ledger.total / P0 - 1.0
    k = int(np.argmax(excess))
    counts = sum(E.inside.astype(np.int64) for E in traj.steps)
    tv_u = tv_cells(hh * counts.astype(np.float64), traj.tv_mode) * traj.grid.face_area
    T_h = hh * sum(not E.is_empty for E in traj.steps)
    tv_excess = tv_u / (T_h * P0) - 1.0
    worst = max(float(excess[k]), tv_excess)
    report = CheckReport("apriori_ledger", worst, slack, "relative excess over P(E_0)",
                         location=k if excess[k] >= tv_excess else "TV(u_h)",
                         details={"energy_excess": float(excess[k]), "tv_excess": tv_excess,
                                  "tv_u_h": tv_u, "T_h": T_h, "P0": P0, "h": hh})
    return ledger, report


# outward minimality ---------------------------------------------------------

def _batched_tv(batch: np.ndarray, mode: str) -> np.ndarray:
    """Discrete TV (cell units) of each array along the leading axis."""
    dim = batch.ndim - 1
    if mode == "isotropic":
        full = (slice(None),)
        comps = []
        for a in range(dim):
            acc = 0.0
            for corner in itertools.product((0, 1), repeat=dim):
                sl = full + tuple(slice(c, c + n - 1) for c, n in zip(corner, batch.shape[1:]))
                acc = acc + (1.0 if corner[a] else -1.0) * batch[sl]
            comps.append(acc / 2 ** (dim - 1))
        return np.sqrt(sum(c * c for c in comps)).reshape(len(batch), -1).sum(axis=1)
    diffs = []
    for a in range(dim):
        d = np.diff(batch, axis=a + 1)
        pad = [(0, 0)] * (dim + 1)
        pad[a + 1] = (0, 1)
        diffs.append(np.pad(d, pad))
    if mode == "anisotropic":
        return sum(np.abs(d).reshape(len(batch), -1).sum(axis=1) for d in diffs)
    return np.sqrt(sum(d * d for d in diffs)).reshape(len(batch), -1).sum(axis=1)


def delta_neighbourhood(mask: SetMask, delta: float) -> np.ndarray:
    """Outside cells whose centre lies within ``delta`` of an inside cell centre."""
    d = np.sqrt(squared_edt_cells(mask.inside)) * mask.grid.spacing
    return ~mask.inside & (d < delta)


def _random_blob(grid: GridSpec, rng: np.random.Generator, center_cells: np.ndarray, delta: float) -> np.ndarray:
    c = grid.index_to_point(np.unravel_index(rng.choice(center_cells), grid.shape))
    c = c + rng.uniform(-0.5, 0.5, grid.dim) * grid.spacing
    r = rng.uniform(0.0, delta)
    pts = grid.coords()
    if rng.random() < 0.5:
        return grid.radius(c) <= r
    half = rng.uniform(0.25, 1.0, grid.dim) * r
    return np.all([np.abs(x - ci) <= hi for x, ci, hi in zip(pts, c, half)], axis=0)


def outward_min_probe(mask: SetMask, delta: float, n_probes: int = 200, seed: int = 0,
                      mode: str = "isotropic") -> CheckReport:
    """Probe δ-outward minimality of ``mask`` with random competitors.

    Competitors are ``F = E ∪ B`` with ``B`` a ball or box of radius at most
    ``delta`` inside the δ-neighbourhood (violation ``P(E) - P(F)``), and
    ``G`` random unions of such blobs together with ``E``-cells, restricted to
    ``E`` plus the neighbourhood (violation ``P(E ∩ G) - P(G)``). When the
    neighbourhood has at most 20 cells every superset is also enumerated.
    Tolerance: two cell faces.
    """
    if mode not in TV_MODES:
        raise ValueError(f"unknown TV mode {mode!r}")
    if not delta > 0:
        raise ValueError("delta must be positive")
    grid = mask.grid
    if mask.padding * grid.spacing < delta and not mask.inside.all():
        raise ValueError(f"mask padding {mask.padding * grid.spacing:.4g} is smaller than delta {delta}")
    tol = 2.0 * grid.face_area
    nbhd = delta_neighbourhood(mask, delta)
    if not nbhd.any() or mask.is_empty:
        return CheckReport("outward_min_probe", 0.0, tol, "perimeter",
                           details={"vacuous": True, "neighbourhood_cells": int(nbhd.sum())})
    rng = stream(seed, "outward_min_probe")
    E = mask.inside
    region = E | nbhd
    P = lambda a: tv_cells(a.astype(np.float64), mode) * grid.face_area  # noqa: E731
    PE = P(E)
    near = np.flatnonzero(nbhd)
    ring = np.flatnonzero(region & (np.sqrt(squared_edt_cells(~E)) * grid.spacing < delta))
    worst, where = -math.inf, None
    for i in range(n_probes):
        blob = _random_blob(grid, rng, near, delta) & nbhd
        v = PE - P(E | blob)
        if v > worst:
            worst, where = v, f"superset probe {i}"
        G = np.zeros(grid.shape, dtype=bool)
        for _ in range(rng.integers(1, 4)):
            G |= _random_blob(grid, rng, ring, delta)
        G &= region
        if G.any():
            v = P(E & G) - P(G)
            if v > worst:
                worst, where = v, f"intersection probe {i}"
    details = {"vacuous": False, "neighbourhood_cells": int(nbhd.sum()), "n_probes": n_probes, "mode": mode}
    if near.size <= MAX_EXHAUSTIVE_CELLS:
        v = PE - _min_superset_perimeter(E, nbhd, mode) * grid.face_area
        details["exhaustive_worst"] = v
        if v > worst:
            worst, where = v, "exhaustive"
    return CheckReport("outward_min_probe", worst, tol, "perimeter", location=where, details=details)


def _min_superset_perimeter(E: np.ndarray, free: np.ndarray, mode: str, chunk: int = 1 << 13) -> float:
    """Smallest TV (cell units) of ``E ∪ S`` over all ``S ⊂ free``."""
    idx = np.argwhere(free)
    lo = np.maximum(idx.min(axis=0) - 2, 0)
    hi = np.minimum(idx.max(axis=0) + 3, E.shape)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    base = E[box].astype(np.float64)
    local = np.flatnonzero(free[box])
    m = local.size
    # TV outside the box does not change; measure it once
    rest = tv_cells(E.astype(np.float64), mode) - _batched_tv(base[None], mode)[0]
    shifts = np.arange(m, dtype=np.int64)
    best = math.inf
    for s in range(0, 1 << m, chunk):
        codes = np.arange(s, min(1 << m, s + chunk), dtype=np.int64)
        bits = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.float64)
        batch = np.repeat(base[None], len(codes), axis=0).reshape(len(codes), -1)
        batch[:, local] = np.maximum(batch[:, local], bits)
        best = min(best, float(_batched_tv(batch.reshape((len(codes),) + base.shape), mode).min()))
    return best + rest


# comparison, modulus, coarea ------------------------------------------------

def check_comparison(trajA: Trajectory, trajB: Trajectory) -> CheckReport:
    """Proper containment ``E_k^A ⊂⊂ E_k^B`` at every step.

    A cell of ``E_k^A`` violates if it lies outside ``E_k^B`` or has a face
    neighbour outside it. The gap is the smallest centre distance from
    ``E_k^A`` to the complement of ``E_k^B``, less one cell.
    """
    grid = check_same_grid(trajA.steps[0], trajB.steps[0])
    if trajA.h != trajB.h:
        raise ValueError("trajectories use different time steps")
    A0, B0 = trajA.steps[0], trajB.steps[0]
    gap0 = _gap(A0, B0)
    if A0.is_empty or not gap0 >= grid.spacing:
        raise ValueError(f"E_0^A is not properly contained in E_0^B (gap {gap0:.4g}, need >= {grid.spacing:.4g})")
    n = min(len(trajA.steps), len(trajB.steps))
    counts, gaps = [], []
    for k in range(n):
        A, B = trajA.steps[k], trajB.steps[k]
        if A.is_empty:
            counts.append(0)
            gaps.append(None)
            continue
        d = np.sqrt(squared_edt_cells(~B.inside))
        counts.append(int((A.inside & (d <= 1.0)).sum()))
        gaps.append(_gap(A, B))
    k = int(np.argmax(counts))
    live = [g for g in gaps if g is not None]
    return CheckReport("comparison", counts[k], 0.0, "cells", location=k,
                       details={"violating_cells": counts, "gap": gaps,
                                "min_gap": min(live) if live else None, "steps_compared": n})


def _gap(A: SetMask, B: SetMask) -> float:
    if A.is_empty:
        return math.inf
    if B.inside.all():
        return math.inf
    d = np.sqrt(squared_edt_cells(~B.inside))
    return float((d[A.inside].min() - 1.0) * A.grid.spacing)


def modulus_check(arrival: ArrivalField, H0: float, n_pairs: int = 10000, seed: int = 0,
                  C: float = 2.0, local_radius: float = 8.0) -> CheckReport:
    """``|u_h(x) - u_h(y)| <= |x - y| / H0 + h + C dx / H0`` on random cell pairs.

    Half of the pairs are uniform over the grid, half are local (``y``
    within ``local_radius`` cells of ``x``), where the bound is tightest.
    """
    if not H0 > 0:
        raise ValueError("H0 must be positive")
    grid = arrival.grid
    rng = stream(seed, "modulus_check")
    u = np.asarray(arrival.u.values).ravel()
    x = rng.integers(0, grid.size, n_pairs)
    n_glob = n_pairs // 2
    y = np.empty(n_pairs, dtype=np.int64)
    y[:n_glob] = rng.integers(0, grid.size, n_glob)
    xi = np.array(np.unravel_index(x[n_glob:], grid.shape))
    off = rng.integers(-int(local_radius), int(local_radius) + 1, size=xi.shape)
    yi = np.clip(xi + off, 0, np.array(grid.shape)[:, None] - 1)
    y[n_glob:] = np.ravel_multi_index(tuple(yi), grid.shape)
    px = grid.points()
    dist = np.linalg.norm(px[x] - px[y], axis=1)
    bound = dist / H0 + arrival.h + C * grid.spacing / H0
    excess = np.abs(u[x] - u[y]) - bound
    i = int(np.argmax(excess))
    return CheckReport("modulus", float(excess[i]), 0.0, "time",
                       location=[int(x[i]), int(y[i])],
                       details={"violations": int((excess > 0).sum()), "n_pairs": n_pairs, "H0": H0, "C": C})


def coarea_identity(traj: Trajectory, arrival: ArrivalField | None = None,
                    rtol: float = COAREA_RTOL) -> CheckReport:
    """``TV(u_h) = h sum_k P(E_k)`` in the anisotropic stencil, to ``rtol``.

    Exact for nested sets; the isotropic discrepancy is reported in the details.
    """
    if arrival is None:
        counts = sum(E.inside.astype(np.int64) for E in traj.steps)
        u = traj.h * counts.astype(np.float64)
    else:
        u = np.asarray(arrival.u.values)
    out = {}
    for mode in ("anisotropic", "isotropic"):
        lhs = tv_cells(u, mode) * traj.grid.face_area
        rhs = traj.h * sum(discrete_tv(E, mode) for E in traj.steps)
        out[mode] = (lhs, rhs, abs(lhs - rhs) / max(abs(rhs), np.finfo(float).tiny))
    return CheckReport("coarea", out["anisotropic"][2], rtol, "relative",
                       details={"tv_u_h": out["anisotropic"][0], "h_sum_perimeters": out["anisotropic"][1],
                                "isotropic_discrepancy": out["isotropic"][2]})


# convergence study ----------------------------------------------------------

@dataclass(frozen=True)
class StudyRow:
    n: int
    dx: float
    h: float
    steps: int
    extinction_time: float
    tv_isotropic: float
    tv_anisotropic: float
    tv_euclidean: float
    tv_error: float
    sup_error: float
    unconverged_steps: int
    pinning_risk: bool
    stalled: bool
    wall_time: float


@dataclass(frozen=True)
class StudyResult:
    rows: list
    report: CheckReport

    def table(self) -> list[dict]:
        return [_jsonable(asdict(r)) for r in self.rows]


def ball_ladder(cells: Sequence[int], side: float = 2.5, r0: float = 1.0, dim: int = 2,
                c: float | None = None) -> list[tuple[int, float]]:
    """Rungs ``(n, h)`` with ``h = c dx``; ``c`` defaults to the pinning rule for the ball."""
    c = pinning_coupling((dim - 1) / r0) if c is None else c
    return [(int(n), c * side / n) for n in cells]


def _study_rung(args):
    n, h, side, r0, dim, params, out_dir = args
    grid = GridSpec.cube(n, side, dim)
    E0 = synth_shape(grid, Disk(r0, (0.0,) * dim))
    # the exact ball vanishes at r0^2 / (2 (n - 1)); allow twice that
    max_steps = int(math.ceil(r0 ** 2 / (dim - 1) / h)) + 10
    t0 = time.perf_counter()
    traj = run_scheme(E0, h, params, max_steps)
    if traj.failure is not None:
        raise RuntimeError(f"rung n={n}: {traj.failure}")
    u = arrival_time(traj)
    exact_tv = ball_tv_exact(r0, dim)
    sup = float(np.abs(np.asarray(u.u.values) - np.asarray(ball_arrival_exact(grid, r0).values)).max())
    # coarea with the contour estimator: the stencil TVs of a staircase keep an O(1) bias
    tv_eu = h * sum(perimeter_euclidean(E) for E in traj.steps if not E.is_empty)
    row = StudyRow(n=n, dx=grid.spacing, h=h, steps=traj.n_steps, extinction_time=h * traj.n_steps,
                   tv_isotropic=discrete_tv(u.u, "isotropic"), tv_anisotropic=discrete_tv(u.u, "anisotropic"),
                   tv_euclidean=tv_eu, tv_error=abs(tv_eu - exact_tv) / exact_tv, sup_error=sup,
                   unconverged_steps=len(traj.unconverged_steps),
                   pinning_risk=bool(h * (dim - 1) / r0 < grid.spacing / 2), stalled=traj.stalled,
                   wall_time=time.perf_counter() - t0)
    if out_dir is not None:
        from . import io
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        io.dump_field(out_dir / "arrival.atwf", u.u)
        io.write_json(out_dir / "rung.json", {k: v for k, v in asdict(row).items() if k != "wall_time"})
    return row, u


def study_report(rows: Sequence[StudyRow], slack: float = 0.1) -> CheckReport:
    """The relative TV error may grow by at most ``slack`` times itself from one rung to the next."""
    errs = [r.tv_error for r in rows]
    worst, where = 0.0, None
    for k in range(1, len(errs)):
        v = errs[k] - (1.0 + slack) * errs[k - 1]
        if where is None or v > worst:
            worst, where = v, k
    return CheckReport("tv_convergence", worst, 0.0, "TV error increase beyond slack", location=where,
                       details={"tv_errors": errs, "sup_errors": [r.sup_error for r in rows],
                                "slack": slack, "flagged": [k for k, r in enumerate(rows)
                                                            if r.pinning_risk or r.stalled]})


def tv_convergence_study(rungs: Sequence[tuple[int, float]], side: float = 2.5, r0: float = 1.0,
                         dim: int = 2, params: SolverParams | None = None, workers: int = 1,
                         slack: float = 0.1, return_arrivals: bool = False, output=None):
    """Ball runs on a refinement ladder, compared with the exact arrival time.

    The TV error is ``|h sum_k P(E_k) - TV(u)| / TV(u)`` with the contour
    perimeter, the coarea form of ``TV(u_h)`` measured consistently with
    the continuum. Both stencil TVs of ``u_h`` are tabulated as well.

    Parameters
    ----------
    rungs : sequence of (int, float)
        Cells per axis and time step of each rung, coarse to fine
        (see :func:`ball_ladder`).
    workers : int
        Rungs run concurrently in separate processes.
    slack : float
        The relative TV error may grow by this fraction from one rung to the next.
    output : path, optional
        Each rung writes its arrival field and row to ``output/rung_KK``.

    Returns
    -------
    StudyResult, and the arrival fields if ``return_arrivals``.

    Notes
    -----
    Rungs with ``h (n - 1) / r0 < dx / 2`` are flagged ``pinning_risk``; a
    rung whose set stops moving is flagged ``stalled``. Neither is fatal.
    """
    if not rungs:
        raise ValueError("the ladder needs at least one rung")
    params = params or SolverParams()
    jobs = [(int(n), float(h), side, r0, dim, params,
             None if output is None else str(Path(output) / f"rung_{k:02d}"))
            for k, (n, h) in enumerate(rungs)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            out = list(ex.map(_study_rung, jobs))
    else:
        out = [_study_rung(j) for j in jobs]
    rows = [o[0] for o in out]
    result = StudyResult(rows, study_report(rows, slack))
    if return_arrivals:
        return result, [o[1] for o in out]
    return result
