"""Minimizing movements: single steps, trajectories to extinction and arrival times."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .distance import DISTANCE_KINDS, signed_distance_array
from .grid import GridSpec, PaddingError, ScalarField, SetMask, check_same_grid
from .tv import SolverParams, SolveStats, TVRelaxation, discrete_tv

logger = logging.getLogger(__name__)


class StepFailure(RuntimeError):
    """A step produced an invalid set (for example one leaving the padded box)."""


def auto_band(h: float, dx: float) -> int:
    """Half-width, in cells, of the band of cells the solver may change.

    The dual field must decay from the interface over a depth of about
    ``sqrt(2 h)``, so the band scales with it.
    """
    return int(math.ceil(1.5 * math.sqrt(2.0 * h) / dx)) + 4


def pinning_coupling(H_min: float, safety: float = 2.0) -> float:
    """Coupling ``c`` in ``h = c dx`` such that ``h H_min = safety * dx / 2``."""
    if not H_min > 0:
        raise ValueError("H_min must be positive")
    return safety / (2.0 * H_min)


def _distance(mask: SetMask, kind: str) -> np.ndarray:
    return signed_distance_array(mask.inside, mask.grid, kind)


def atw_step(E_prev: SetMask, h: float, params: SolverParams | None = None, *,
             distance: str = "subcell", band: int | str | None = "auto",
             solver: TVRelaxation | None = None, advance: np.ndarray | None = None,
             sd: np.ndarray | None = None) -> tuple[SetMask, SolveStats]:
    """One minimizing-movements step from ``E_prev``.

    Solves the relaxation with ``g = sd(E_prev) / h`` and thresholds at 1/2.

    Parameters
    ----------
    E_prev : SetMask
        Nonempty previous set.
    h : float
        Time step.
    params : SolverParams, optional
    distance : {"subcell", "center"}
        Signed-distance kind.
    band : int, "auto" or None
        Solver band half-width in cells around the interface; ``None`` uses
        the whole grid.
    solver : TVRelaxation, optional
        Reused solver, e.g. with ``warm_start=True``.
    advance : ndarray, optional
        Predicted inward motion per cell (length units); the solver starts
        from ``{sd + advance < 0}``. Only the initial iterate depends on it.
    sd : ndarray, optional
        Precomputed signed distance of ``E_prev`` of the given kind.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    if E_prev.is_empty:
        raise ValueError("E_prev must be nonempty")
    if distance not in DISTANCE_KINDS:
        raise ValueError(f"unknown distance kind {distance!r}")
    grid = E_prev.grid
    solver = solver if solver is not None else TVRelaxation.from_params(params or SolverParams())
    sd = _distance(E_prev, distance) if sd is None else sd
    g = ScalarField(grid, sd / h)
    active = None
    if band is not None:
        width = auto_band(h, grid.spacing) if band == "auto" else int(band)
        active = np.abs(sd) <= width * grid.spacing
    init = None if advance is None else (sd + advance < 0).astype(np.float64)
    solver.fit(g, active=active, init=init)
    try:
        E_next = SetMask(grid, solver.u_.values > 0.5, E_prev.min_padding)
    except PaddingError as exc:
        raise StepFailure(f"step left the padded box: {exc}") from None
    return E_next, solver.stats_


def predicted_advance(sd: np.ndarray, sd_prev: np.ndarray) -> np.ndarray:
    """Inward motion of the next step if the interface keeps its last normal speed.

    ``sd - sd_prev`` is the displacement of the last step wherever the two
    fronts are locally parallel, to sub-cell accuracy.
    """
    return sd - sd_prev


def step_energy(E: SetMask, E_prev: SetMask, h: float, mode: str = "anisotropic",
                distance: str = "center") -> float:
    """``P(E) + (1/h) sum_{E sym-diff E_prev} d_{E_prev} dx^n``."""
    grid = check_same_grid(E, E_prev)
    d = np.abs(_distance(E_prev, distance))
    diss = d[E.inside ^ E_prev.inside].sum() * grid.cell_volume / h
    return discrete_tv(E, mode) + float(diss)


@dataclass
class Trajectory:
    """Sets ``E_0, ..., E_N`` of one run, with per-step solver statistics.

    ``stats[k]`` belongs to the step that produced ``steps[k + 1]``.
    """

    h: float
    steps: list
    stats: list = field(default_factory=list)
    tv_mode: str = "isotropic"
    distance: str = "subcell"
    extinct: bool = False
    truncated: bool = False
    stalled: bool = False
    failure: str | None = None
    wall_time: float = 0.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not self.steps:
            raise ValueError("a trajectory needs at least E_0")
        check_same_grid(*self.steps)
        if self.steps[-1].is_empty:
            self.extinct = True

    @property
    def grid(self) -> GridSpec:
        return self.steps[0].grid

    @property
    def n_steps(self) -> int:
        return len(self.steps) - 1

    @property
    def complete(self) -> bool:
        return self.failure is None and (self.extinct or self.truncated or self.stalled)

    @property
    def unconverged_steps(self) -> list[int]:
        return [k + 1 for k, s in enumerate(self.stats) if not s.converged]

    def signed_distance(self, k: int) -> np.ndarray:
        """Signed distance of ``E_k`` with the kind used to produce the run."""
        return _distance(self.steps[k], self.distance)


def run_scheme(E0: SetMask, h: float, params: SolverParams | None = None, max_steps: int = 10000, *,
               distance: str = "subcell", band: int | str | None = "auto",
               callback: Callable[[int, SetMask, SolveStats], None] | None = None,
               stop_on_stall: bool = True, predict: bool = True) -> Trajectory:
    """Iterate :func:`atw_step` with warm starts until extinction or ``max_steps``.

    A step that leaves the padded box or hits a numerical error stops the run;
    the trajectory keeps the steps so far and records the failure. A step
    that reproduces its input set means the interface is pinned: every later
    step would repeat it, so the run stops with ``stalled`` set unless
    ``stop_on_stall`` is false.

    With ``predict`` each solve starts from the set reached by moving the
    interface once more by the displacement of the previous step. Stopping
    at the gap tolerance then leaves no systematic lag behind the exact
    minimizer, which a start from the previous set would.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if E0.is_empty:
        raise ValueError("E0 must be nonempty")
    params = params or SolverParams()
    solver = TVRelaxation.from_params(params, warm_start=True)
    traj = Trajectory(h, [E0], [], params.tv_mode, distance)
    t0 = time.perf_counter()
    E = E0
    sd_prev = None
    for k in range(max_steps):
        try:
            sd = _distance(E, distance)
            advance = predicted_advance(sd, sd_prev) if predict and sd_prev is not None else None
            E, stats = atw_step(E, h, params, distance=distance, band=band, solver=solver,
                                advance=advance, sd=sd)
        except (StepFailure, FloatingPointError) as exc:
            traj.failure = f"step {k + 1}: {exc}"
            logger.error("run stopped: %s", traj.failure)
            break
        traj.steps.append(E)
        traj.stats.append(stats)
        if not stats.converged:
            logger.warning("step %d did not reach the gap tolerance (gap %.2e)", k + 1, stats.gap)
        if callback is not None:
            callback(k + 1, E, stats)
        if E.is_empty:
            traj.extinct = True
            break
        if stop_on_stall and E.equals(traj.steps[-2]):
            traj.stalled = True
            logger.warning("set unchanged at step %d; the interface is pinned", k + 1)
            break
        sd_prev = sd
    else:
        traj.truncated = True
    traj.wall_time = time.perf_counter() - t0
    return traj


@dataclass(frozen=True, eq=False)
class ArrivalField:
    """Discrete arrival time ``u_h = h * #{k : x in E_k}``; ``{u_h > k h} = E_k``."""

    u: ScalarField
    h: float
    counts: np.ndarray = field(repr=False, default=None)

    @property
    def grid(self) -> GridSpec:
        return self.u.grid

    def superlevel(self, k: int) -> SetMask:
        return SetMask(self.grid, self.counts > k)


def arrival_time(traj: Trajectory) -> ArrivalField:
    """Arrival time of a finished trajectory."""
    if traj.failure is not None:
        raise ValueError(f"trajectory failed: {traj.failure}")
    counts = np.zeros(traj.grid.shape, dtype=np.int64)
    for E in traj.steps:
        counts += E.inside
    counts.setflags(write=False)
    return ArrivalField(ScalarField(traj.grid, traj.h * counts), traj.h, counts)


class ExtinctionTime(NamedTuple):
    time: float
    exact: bool  # False: run was truncated, time is a lower bound


def extinction_time(traj: Trajectory) -> ExtinctionTime:
    """``h N`` with ``E_N`` the first empty set; a lower bound if the run never went extinct."""
    for k, E in enumerate(traj.steps):
        if E.is_empty:
            return ExtinctionTime(traj.h * k, True)
    return ExtinctionTime(traj.h * len(traj.steps), False)


class MinimizingMovements(BaseEstimator):
    """Estimator wrapper around :func:`run_scheme`.

    ``fit(E0)`` runs the scheme; ``transform`` returns the arrival time and
    ``predict(t)`` the evolved set ``E_h(t)``.

    Parameters
    ----------
    h : float
    tv_mode : str
    distance : {"subcell", "center"}
    tolerance, max_iter, check_every, step_ratio
        Solver settings, see :class:`~atwflow.tv.SolverParams`.
    max_steps : int
    band : int, "auto" or None

    Attributes
    ----------
    trajectory_ : Trajectory
    arrival_ : ArrivalField
    extinction_time_ : ExtinctionTime
    """

    def __init__(self, h=0.01, tv_mode="isotropic", distance="subcell", tolerance=1e-6,
                 max_iter=20000, check_every=50, step_ratio=0.5, max_steps=10000, band="auto"):
        self.h = h
        self.tv_mode = tv_mode
        self.distance = distance
        self.tolerance = tolerance
        self.max_iter = max_iter
        self.check_every = check_every
        self.step_ratio = step_ratio
        self.max_steps = max_steps
        self.band = band

    def solver_params(self) -> SolverParams:
        return SolverParams(tv_mode=self.tv_mode, tolerance=self.tolerance, max_iter=self.max_iter,
                            check_every=self.check_every, step_ratio=self.step_ratio)

    def fit(self, E0: SetMask, y=None):
        if not isinstance(E0, SetMask):
            raise TypeError(f"expected a SetMask, got {type(E0).__name__}")
        self.trajectory_ = run_scheme(E0, self.h, self.solver_params(), self.max_steps,
                                      distance=self.distance, band=self.band)
        if self.trajectory_.failure is None:
            self.arrival_ = arrival_time(self.trajectory_)
        self.extinction_time_ = extinction_time(self.trajectory_)
        return self

    def transform(self, E0: SetMask | None = None) -> ScalarField:
        """Arrival-time field; refits when a new initial set is given."""
        if E0 is not None:
            self.fit(E0)
        check_is_fitted(self, "arrival_")
        return self.arrival_.u

    def fit_transform(self, E0: SetMask, y=None) -> ScalarField:
        return self.fit(E0).transform()

    def predict(self, t: float) -> SetMask:
        """``E_h(t) = E_k`` for ``t`` in ``[k h, (k + 1) h)``."""
        check_is_fitted(self, "trajectory_")
        if t < 0:
            raise ValueError("t must be non-negative")
        k = int(math.floor(t / self.h + 1e-12))
        steps = self.trajectory_.steps
        if k >= len(steps):
            if self.trajectory_.extinct:
                return SetMask.empty(self.trajectory_.grid)
            raise ValueError(f"t = {t} is beyond the computed trajectory")
        return steps[k]
