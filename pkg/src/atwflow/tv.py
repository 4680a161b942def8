"""Discrete total variation and the [0, 1] relaxation of one minimizing-movements step.

Three stencils are available:

``anisotropic``
    l1 norm of forward differences; a cut function, so thresholding the
    relaxed minimizer is exact.
``isotropic``
    l2 norm of the cell-averaged gradient at each interior vertex (the
    four, or eight, cells around it). Symmetric under the grid's rotations
    and reflections and close to the Euclidean perimeter.
``isotropic-forward``
    l2 norm of the forward-difference vector at each cell.

Differences use zero flux at the box boundary.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _kernels
from .grid import GridSpec, ScalarField, SetMask, check_same_grid, threshold_field

logger = logging.getLogger(__name__)

TV_MODES = ("anisotropic", "isotropic", "isotropic-forward")
MAX_BRUTE_FORCE_CELLS = 22


def _check_mode(mode: str) -> str:
    if mode not in TV_MODES:
        raise ValueError(f"unknown tv mode {mode!r}; expected one of {TV_MODES}")
    return mode


def operator_norm_sq(mode: str, dim: int) -> float:
    """Upper bound on ``||D||^2`` for the stencil, in cell units (divide by dx^2 for physical)."""
    _check_mode(mode)
    return 4.0 if mode == "isotropic" else 4.0 * dim


# reference operators (numpy) --------------------------------------------

def _corner_slices(shape, corner):
    return tuple(slice(c, n - 1 + c) for c, n in zip(corner, shape))


def grad(u: np.ndarray, mode: str) -> np.ndarray:
    """Difference operator in cell units; shape ``(dim, *items)``."""
    _check_mode(mode)
    dim = u.ndim
    if mode == "isotropic":
        q = np.zeros((dim,) + tuple(n - 1 for n in u.shape))
        w = 0.5 ** (dim - 1)
        for corner in itertools.product((0, 1), repeat=dim):
            s = u[_corner_slices(u.shape, corner)]
            for a in range(dim):
                q[a] += (w if corner[a] else -w) * s
        return q
    q = np.zeros((dim,) + u.shape)
    for a in range(dim):
        lo = [slice(None)] * dim
        lo[a] = slice(0, -1)
        q[(a, *lo)] = np.diff(u, axis=a)
    return q


def grad_T(p: np.ndarray, mode: str, shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`grad`."""
    _check_mode(mode)
    dim = len(shape)
    out = np.zeros(shape)
    if mode == "isotropic":
        w = 0.5 ** (dim - 1)
        for corner in itertools.product((0, 1), repeat=dim):
            sl = _corner_slices(shape, corner)
            for a in range(dim):
                out[sl] += (w if corner[a] else -w) * p[a]
        return out
    for a in range(dim):
        lo = [slice(None)] * dim
        hi = [slice(None)] * dim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        pa = p[(a, *lo)]
        out[tuple(lo)] -= pa
        out[tuple(hi)] += pa
    return out


def _item_norms(q: np.ndarray, mode: str) -> np.ndarray:
    if mode == "anisotropic":
        return np.abs(q).sum(axis=0)
    return np.sqrt((q * q).sum(axis=0))


def tv_cells(u: np.ndarray, mode: str) -> float:
    """TV in cell units (sum of dual-norm magnitudes of ``grad``)."""
    return float(_item_norms(grad(u, mode), mode).sum())


def discrete_tv(f, mode: str = "isotropic") -> float:
    """Discrete total variation of a field, in physical units (length^(n-1)).

    Parameters
    ----------
    f : ScalarField or SetMask
        Masks are measured through their indicator.
    mode : {"anisotropic", "isotropic", "isotropic-forward"}
    """
    if isinstance(f, SetMask):
        f = f.indicator()
    return tv_cells(f.values, mode) * f.grid.face_area


# solver -------------------------------------------------------------------

@dataclass(frozen=True)
class SolverParams:
    """Primal-dual configuration.

    ``primal_step`` and ``dual_step`` are in physical units; when omitted
    they are set from ``step_ratio`` so that ``tau * sigma * L^2 = 1`` with
    ``L^2 = operator_norm_sq(mode, dim) / dx^2``.
    """

    tv_mode: str = "isotropic"
    primal_step: float | None = None
    dual_step: float | None = None
    tolerance: float = 1e-6
    max_iter: int = 20000
    check_every: int = 50
    step_ratio: float = 0.5

    def __post_init__(self):
        _check_mode(self.tv_mode)
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1 or self.check_every < 1:
            raise ValueError("max_iter and check_every must be >= 1")
        if not self.step_ratio > 0:
            raise ValueError("step_ratio must be positive")
        if (self.primal_step is None) != (self.dual_step is None):
            raise ValueError("give both primal_step and dual_step, or neither")
        if self.primal_step is not None and not (self.primal_step > 0 and self.dual_step > 0):
            raise ValueError("step sizes must be positive")

    def steps(self, grid: GridSpec) -> tuple[float, float]:
        """``(tau, sigma)`` in physical units, validated against the step condition."""
        L2 = operator_norm_sq(self.tv_mode, grid.dim) / grid.spacing ** 2
        if self.primal_step is None:
            L = np.sqrt(L2)
            return self.step_ratio / L, 1.0 / (self.step_ratio * L)
        if self.primal_step * self.dual_step * L2 > 1.0 + 1e-12:
            raise ValueError(f"tau*sigma*L^2 = {self.primal_step * self.dual_step * L2:.4g} exceeds 1")
        return self.primal_step, self.dual_step

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SolveStats:
    """Outcome of one relaxed solve.

    ``gap`` is ``(best primal - best dual) / scale`` where ``scale`` is the
    largest energy magnitude seen so far (at least one cell face), so the
    recorded ``gap_history`` never increases.
    """

    iterations: int
    energy: float
    gap: float
    converged: bool
    gap_history: tuple = field(default=(), repr=False)
    active_cells: int = 0
    band_expanded: bool = False


def _gap_terms(u, p, gc, mode):
    primal = tv_cells(u, mode) + float((gc * u).sum())
    dual = float(np.minimum(0.0, gc + grad_T(p, mode, u.shape)).sum())
    return primal, dual


def _item_activity(cact: np.ndarray, mode: str) -> np.ndarray:
    """Dual components whose whole stencil lies on active cells."""
    dim = cact.ndim
    if mode == "isotropic":
        ok = np.ones(tuple(n - 1 for n in cact.shape), dtype=bool)
        for corner in itertools.product((0, 1), repeat=dim):
            ok &= cact[_corner_slices(cact.shape, corner)]
        return np.broadcast_to(ok, (dim,) + ok.shape).astype(np.uint8)
    comps = np.zeros((dim,) + cact.shape, dtype=bool)
    for a in range(dim):
        lo = [slice(None)] * dim
        hi = [slice(None)] * dim
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        comps[(a, *lo)] = cact[tuple(lo)] & cact[tuple(hi)]
    if mode == "isotropic-forward":
        # the forward vector at a cell uses the cell and its upper neighbours
        ok = cact.copy()
        for a in range(dim):
            lo = [slice(None)] * dim
            hi = [slice(None)] * dim
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            ok[tuple(lo)] &= cact[tuple(hi)]
        comps = np.broadcast_to(ok, comps.shape)
    return np.ascontiguousarray(comps, dtype=np.uint8)


class TVRelaxation(TransformerMixin, BaseEstimator):
    """Minimize ``TV(u) + sum(g u) dx^n`` over ``0 <= u <= 1`` by primal-dual iteration.

    Parameters
    ----------
    tv_mode : {"isotropic", "anisotropic", "isotropic-forward"}
    tolerance : float
        Target relative primal-dual gap.
    max_iter, check_every : int
        Iteration budget and the interval at which the gap is evaluated.
    primal_step, dual_step : float, optional
        Physical step sizes; derived from ``step_ratio`` when omitted.
    step_ratio : float
        Ratio ``tau / sigma`` (in units of the operator norm) for automatic steps.
    warm_start : bool
        Reuse ``u_`` and ``dual_`` from the previous ``fit`` on the same grid.

    Attributes
    ----------
    u_ : ScalarField
        Relaxed minimizer with the lowest primal energy seen.
    dual_ : ndarray
        Final dual field, shape ``(dim, *items)``.
    stats_ : SolveStats
    """

    def __init__(self, tv_mode="isotropic", tolerance=1e-6, max_iter=20000, check_every=50,
                 primal_step=None, dual_step=None, step_ratio=0.5, warm_start=False):
        self.tv_mode = tv_mode
        self.tolerance = tolerance
        self.max_iter = max_iter
        self.check_every = check_every
        self.primal_step = primal_step
        self.dual_step = dual_step
        self.step_ratio = step_ratio
        self.warm_start = warm_start

    @classmethod
    def from_params(cls, params: SolverParams, warm_start: bool = False) -> "TVRelaxation":
        return cls(**params.to_dict(), warm_start=warm_start)

    @property
    def params(self) -> SolverParams:
        p = self.get_params()
        p.pop("warm_start")
        return SolverParams(**p)

    def _initial_state(self, grid: GridSpec, g: np.ndarray):
        dim = grid.dim
        item_shape = grid.shape if self.tv_mode != "isotropic" else tuple(n - 1 for n in grid.shape)
        reuse = (self.warm_start and hasattr(self, "u_") and self.u_.grid == grid
                 and self._state_mode == self.tv_mode)
        if reuse:
            return self._u_state.copy(), self.dual_.copy()
        return (g < 0).astype(np.float64), np.zeros((dim,) + item_shape)

    def fit(self, g: ScalarField, y=None, active=None, init=None):
        """Solve the relaxation for the linear weight ``g``.

        Parameters
        ----------
        g : ScalarField
        active : ndarray of bool, optional
            Cells allowed to change. The rest are pinned to ``g < 0`` and
            dual components touching them are zeroed. The gap is always
            evaluated on the whole grid; if the band proves too narrow the
            solve continues on the whole grid.
        init : ndarray, optional
            Initial primal iterate with values in [0, 1]; replaces the warm
            or cold start of ``u`` (the dual warm start is kept).
        """
        if not isinstance(g, ScalarField):
            raise TypeError(f"g must be a ScalarField, got {type(g).__name__}")
        params = self.params
        grid = g.grid
        gv = np.asarray(g.values, dtype=np.float64)
        if not np.all(np.isfinite(gv)):
            raise ValueError("g must be finite")
        tau, sigma = params.steps(grid)
        dx = grid.spacing
        tau_c, sigma_c = tau / dx, sigma / dx
        gc = np.ascontiguousarray(gv * dx)
        mode = self.tv_mode

        u, p = self._initial_state(grid, gv)
        if init is not None:
            init = np.asarray(init, dtype=np.float64).reshape(grid.shape)
            if not np.all((init >= 0) & (init <= 1)):
                raise ValueError("init must take values in [0, 1]")
            u = init.copy()
        if active is None:
            cact = np.ones(grid.shape, dtype=bool)
        else:
            cact = np.asarray(active, dtype=bool).reshape(grid.shape)
            u[~cact] = (gv[~cact] < 0)
        iact = _item_activity(cact, mode)
        P = _kernels.padded_dual(p * iact, mode)
        p = _kernels.dual_view(P, mode)
        ub = u.copy()
        stepper = _kernels.Stepper(mode, cact, iact)

        best_p, best_d = np.inf, -np.inf
        best_u = u.copy()
        history = []
        it = 0
        gap = np.inf
        expanded = False
        scale = 1.0  # largest energy magnitude seen, at least one cell face
        while it < params.max_iter:
            n = min(params.check_every, params.max_iter - it)
            stepper.iterate(u, ub, P, gc, tau_c, sigma_c, n)
            it += n
            tv_val, lin, dual, leak = stepper.measure(u, p, gc)
            primal = tv_val + lin
            if not (np.isfinite(primal) and np.isfinite(dual)):
                raise FloatingPointError(f"non-finite iterate after {it} iterations")
            if primal < best_p:
                best_p = primal
                best_u = u.copy()
            best_d = max(best_d, dual)
            scale = max(scale, abs(best_p), abs(best_d))
            gap = (best_p - best_d) / scale
            history.append(gap)
            if gap <= params.tolerance:
                break
            if not expanded and not cact.all() and (leak > 1e-9 or it >= params.max_iter // 2):
                # pinned cells disagree with the band: continue on the whole grid
                logger.debug("band too narrow after %d iterations; using the full grid", it)
                cact[:] = True
                iact = _item_activity(cact, mode)
                stepper = _kernels.Stepper(mode, cact, iact)
                ub[:] = u
                expanded = True
        converged = gap <= params.tolerance
        self._u_state = u
        self._state_mode = mode
        self.dual_ = np.ascontiguousarray(p)
        self.u_ = ScalarField(grid, best_u)
        self.stats_ = SolveStats(
            iterations=it,
            energy=best_p * grid.face_area,
            gap=float(gap),
            converged=bool(converged),
            gap_history=tuple(history),
            active_cells=int(cact.sum()),
            band_expanded=expanded,
        )
        return self

    def transform(self, g: ScalarField) -> ScalarField:
        """Relaxed minimizer for ``g``."""
        return self.fit(g).u_

    def predict(self, g: ScalarField | None = None, level: float = 0.5) -> SetMask:
        """Binary minimizer ``{u > level}``; uses the fitted solution when ``g`` is omitted."""
        if g is not None:
            self.fit(g)
        check_is_fitted(self, "u_")
        return threshold_field(self.u_, level)


def solve_relaxed(g: ScalarField, params: SolverParams | None = None) -> tuple[ScalarField, SolveStats]:
    """Cold-start solve; see :class:`TVRelaxation`."""
    est = TVRelaxation.from_params(params or SolverParams()).fit(g)
    return est.u_, est.stats_


# exhaustive oracle --------------------------------------------------------

def binary_energy(inside: np.ndarray, g: np.ndarray, grid: GridSpec) -> float:
    """Anisotropic perimeter of ``inside`` plus ``sum(g) dx^n`` over inside cells."""
    ind = inside.astype(np.float64)
    return tv_cells(ind, "anisotropic") * grid.face_area + float(g[inside].sum()) * grid.cell_volume


def brute_force_min(g: ScalarField, free, base=None,
                    chunk: int = 1 << 16) -> tuple[SetMask, float]:
    """Global binary minimizer of the anisotropic energy over the ``free`` cells.

    Parameters
    ----------
    g : ScalarField
    free : SetMask or ndarray of bool
        Cells to enumerate (at most 22).
    base : SetMask or ndarray of bool, optional
        Phase of the fixed cells; empty by default. Arrays may touch the box.

    Returns
    -------
    mask : SetMask
        Minimizer; among ties (relative 1e-12) the one with the fewest inside
        cells, then the lexicographically smallest indicator over the free
        cells in row-major order.
    energy : float
    """
    grid = g.grid
    free_arr = free.inside if isinstance(free, SetMask) else np.asarray(free, dtype=bool).reshape(grid.shape)
    if isinstance(base, SetMask):
        check_same_grid(g, base)
        base = base.inside
    fixed = (np.array(base, dtype=bool).reshape(grid.shape) if base is not None
             else np.zeros(grid.shape, dtype=bool))
    fixed[free_arr] = False
    cells = np.flatnonzero(free_arr)
    m = cells.size
    if m > MAX_BRUTE_FORCE_CELLS:
        raise ValueError(f"free region has {m} cells; at most {MAX_BRUTE_FORCE_CELLS} supported")
    gv = np.asarray(g.values)
    pos = -np.ones(grid.size, dtype=np.int64)
    pos[cells] = np.arange(m)

    # every face between two cells, as flat index pairs
    flat_idx = np.arange(grid.size).reshape(grid.shape)
    pairs = []
    for a in range(grid.dim):
        lo = np.take(flat_idx, np.arange(grid.shape[a] - 1), axis=a).ravel()
        hi = np.take(flat_idx, np.arange(1, grid.shape[a]), axis=a).ravel()
        pairs.append(np.stack([lo, hi], axis=1))
    pairs = np.concatenate(pairs)
    fflat = fixed.ravel()
    is_free = pos[pairs] >= 0
    both_fixed = ~is_free.any(axis=1)
    const_cuts = int((fflat[pairs[both_fixed, 0]] != fflat[pairs[both_fixed, 1]]).sum())
    ff = pairs[is_free.all(axis=1)]
    ff = pos[ff]
    mixed = pairs[is_free[:, 0] ^ is_free[:, 1]]
    mixed_free = np.where(pos[mixed[:, 0]] >= 0, mixed[:, 0], mixed[:, 1])
    mixed_fixed = np.where(pos[mixed[:, 0]] >= 0, mixed[:, 1], mixed[:, 0])
    n_in = np.bincount(pos[mixed_free], weights=fflat[mixed_fixed], minlength=m)
    n_out = np.bincount(pos[mixed_free], weights=~fflat[mixed_fixed], minlength=m)
    const_cuts += int(n_in.sum())
    # per free cell: switching it on removes n_in cuts and adds n_out
    unary_cuts = (n_out - n_in).astype(np.int64)
    lin = gv.ravel()[cells] * grid.cell_volume
    const_lin = float(gv[fixed].sum()) * grid.cell_volume
    shifts = (m - 1 - np.arange(m)).astype(np.int64)  # first free cell is the most significant bit

    def energies(start, stop):
        codes = np.arange(start, stop, dtype=np.int64)
        bits = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.int8)
        cuts = const_cuts + bits @ unary_cuts
        if len(ff):
            cuts = cuts + (bits[:, ff[:, 0]] != bits[:, ff[:, 1]]).sum(axis=1)
        e = cuts * grid.face_area + const_lin + bits.astype(np.float64) @ lin
        return codes, bits.sum(axis=1), e

    total = 1 << m
    e_min = np.inf
    for s in range(0, total, chunk):
        _, _, e = energies(s, min(total, s + chunk))
        e_min = min(e_min, float(e.min()))
    tol = 1e-12 * max(1.0, abs(e_min))
    best = None
    for s in range(0, total, chunk):
        codes, count, e = energies(s, min(total, s + chunk))
        sel = np.flatnonzero(e <= e_min + tol)
        for i in sel:
            key = (int(count[i]), int(codes[i]))
            if best is None or key < best[0]:
                best = (key, float(e[i]))
    code = best[0][1]
    inside = fixed.copy().ravel()
    inside[cells] = ((code >> shifts) & 1).astype(bool)
    inside = inside.reshape(grid.shape)
    return SetMask(grid, inside), binary_energy(inside, gv, grid)
