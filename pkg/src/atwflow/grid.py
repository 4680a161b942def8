"""Uniform cell-centred grids, scalar fields, binary set masks and test shapes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

MIN_PADDING = 2


class GridMismatchError(ValueError):
    """Two objects that must share a grid do not."""


class PaddingError(ValueError):
    """A set comes closer to the box boundary than the required padding."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian lattice with cell-centred samples.

    Parameters
    ----------
    shape : tuple of int
        Cells per axis, two or three entries, each at least 4.
    spacing : float
        Cell edge length ``dx``.
    origin : tuple of float
        Physical coordinate of the centre of cell ``(0, ..., 0)``.
    """

    shape: tuple[int, ...]
    spacing: float
    origin: tuple[float, ...]

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        origin = tuple(float(o) for o in self.origin)
        if len(shape) not in (2, 3):
            raise ValueError(f"grid dimension must be 2 or 3, got {len(shape)}")
        if any(s < 4 for s in shape):
            raise ValueError(f"every axis needs at least 4 cells, got {shape}")
        if len(origin) != len(shape):
            raise ValueError("origin must have one entry per axis")
        if not (np.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError(f"spacing must be finite and positive, got {self.spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError("origin must be finite")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))

    @classmethod
    def cube(cls, n: int, side: float, dim: int = 2, center: float | Sequence[float] = 0.0) -> "GridSpec":
        """Grid of ``n`` cells per axis covering a box of edge ``side`` centred at ``center``."""
        dx = side / n
        c = np.broadcast_to(np.asarray(center, dtype=float), (dim,))
        origin = tuple(float(ci - side / 2 + dx / 2) for ci in c)
        return cls((n,) * dim, dx, origin)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    @property
    def face_area(self) -> float:
        return self.spacing ** (self.dim - 1)

    @property
    def center(self) -> np.ndarray:
        """Physical centre of the box."""
        return np.array([o + (n - 1) * self.spacing / 2 for o, n in zip(self.origin, self.shape)])

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing * np.arange(self.shape[axis])

    def coords(self) -> tuple[np.ndarray, ...]:
        """Cell-centre coordinates, one array per axis, ``indexing='ij'``."""
        return tuple(np.meshgrid(*(self.axis_coords(a) for a in range(self.dim)), indexing="ij"))

    def points(self) -> np.ndarray:
        """Cell centres as an ``(size, dim)`` array in row-major order."""
        return np.stack([c.ravel() for c in self.coords()], axis=1)

    def radius(self, center: Sequence[float] | None = None) -> np.ndarray:
        """Euclidean distance of every cell centre from ``center`` (box centre by default)."""
        c = self.center if center is None else np.asarray(center, dtype=float)
        return np.sqrt(sum((x - ci) ** 2 for x, ci in zip(self.coords(), c)))

    def index_to_point(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + self.spacing * idx


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    """One finite real value per cell of ``grid``."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size != self.grid.size:
            raise ValueError(f"field has {v.size} values, grid has {self.grid.size} cells")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", _frozen(v))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def equals(self, other: "ScalarField") -> bool:
        return self.grid == other.grid and np.array_equal(self.values, other.values)


def mask_padding(inside: np.ndarray) -> float:
    """Smallest number of cells between an inside cell and the box boundary (``inf`` if empty)."""
    if not inside.any():
        return float("inf")
    pad = np.inf
    for axis in range(inside.ndim):
        other = tuple(a for a in range(inside.ndim) if a != axis)
        occupied = np.flatnonzero(inside.any(axis=other))
        pad = min(pad, occupied[0], inside.shape[axis] - 1 - occupied[-1])
    return float(pad)


@dataclass(frozen=True, eq=False)
class SetMask:
    """Binary phase indicator of a set, compactly contained in the box.

    Parameters
    ----------
    grid : GridSpec
    inside : ndarray of bool
        One flag per cell; a set is the union of closed cells whose centres are inside.
    min_padding : int, default MIN_PADDING
        Required number of free cells between the set and the box boundary.
    """

    grid: GridSpec
    inside: np.ndarray
    min_padding: int = field(default=MIN_PADDING, repr=False)

    def __post_init__(self):
        a = np.asarray(self.inside)
        if a.size != self.grid.size:
            raise ValueError(f"mask has {a.size} cells, grid has {self.grid.size}")
        a = a.reshape(self.grid.shape).astype(bool)
        if self.min_padding < MIN_PADDING:
            raise ValueError(f"padding requirement below the minimum of {MIN_PADDING} cells")
        pad = mask_padding(a)
        if pad < self.min_padding:
            raise PaddingError(f"set is {pad:.0f} cells from the box boundary, need {self.min_padding}")
        object.__setattr__(self, "inside", _frozen(a))

    @property
    def padding(self) -> float:
        return mask_padding(self.inside)

    @property
    def count(self) -> int:
        return int(self.inside.sum())

    @property
    def volume(self) -> float:
        return self.count * self.grid.cell_volume

    @property
    def is_empty(self) -> bool:
        return not self.inside.any()

    def with_inside(self, inside: np.ndarray) -> "SetMask":
        return SetMask(self.grid, inside, self.min_padding)

    def equals(self, other: "SetMask") -> bool:
        return self.grid == other.grid and np.array_equal(self.inside, other.inside)

    def indicator(self) -> ScalarField:
        return ScalarField(self.grid, self.inside.astype(np.float64))

    @classmethod
    def empty(cls, grid: GridSpec) -> "SetMask":
        return cls(grid, np.zeros(grid.shape, dtype=bool))


def check_same_grid(*objs) -> GridSpec:
    grid = objs[0].grid
    for o in objs[1:]:
        if o.grid != grid:
            raise GridMismatchError(f"grid mismatch: {grid} vs {o.grid}")
    return grid


def threshold_field(f: ScalarField, level: float = 0.0, tie: str = "strictly-above") -> SetMask:
    """Superlevel set ``{f > level}`` as a mask.

    Only the strict rule is supported so that ties at ``level`` land outside.
    """
    if tie != "strictly-above":
        raise ValueError(f"unsupported tie rule {tie!r}")
    return SetMask(f.grid, f.values > level)


class MaskAlgebra(NamedTuple):
    intersection: SetMask
    union: SetMask
    difference: SetMask
    symmetric_difference: SetMask
    subset_violation_count: int


def mask_algebra(a: SetMask, b: SetMask) -> MaskAlgebra:
    """Cellwise boolean algebra; ``subset_violation_count`` is ``#(a \\ b)``."""
    grid = check_same_grid(a, b)
    diff = a.inside & ~b.inside
    return MaskAlgebra(
        SetMask(grid, a.inside & b.inside),
        SetMask(grid, a.inside | b.inside),
        SetMask(grid, diff),
        SetMask(grid, a.inside ^ b.inside),
        int(diff.sum()),
    )


# analytic shapes ----------------------------------------------------------

def _center(center, dim):
    return np.zeros(dim) if center is None else np.asarray(center, dtype=float)


@dataclass(frozen=True)
class Disk:
    """Open ball of radius ``radius`` (a disk in 2D)."""

    radius: float
    center: tuple[float, ...] | None = None
    kind = "disk"

    def contains(self, grid: GridSpec) -> np.ndarray:
        return grid.radius(_center(self.center, grid.dim)) < self.radius


@dataclass(frozen=True)
class Annulus:
    """Open region ``r_inner < |x - c| < r_outer``."""

    r_inner: float
    r_outer: float
    center: tuple[float, ...] | None = None
    kind = "annulus"

    def contains(self, grid: GridSpec) -> np.ndarray:
        if not 0 <= self.r_inner < self.r_outer:
            raise ValueError("annulus needs 0 <= r_inner < r_outer")
        r = grid.radius(_center(self.center, grid.dim))
        return (r > self.r_inner) & (r < self.r_outer)


@dataclass(frozen=True)
class Torus:
    """Solid torus around the last axis with major radius ``R`` and tube radius ``r_tube``."""

    R: float
    r_tube: float
    center: tuple[float, ...] | None = None
    kind = "torus"

    @property
    def is_mean_convex(self) -> bool:
        return self.R > 2 * self.r_tube

    def contains(self, grid: GridSpec) -> np.ndarray:
        if grid.dim != 3:
            raise ValueError("a torus needs a 3D grid")
        if not 0 < self.r_tube < self.R:
            raise ValueError("torus needs 0 < r_tube < R")
        x, y, z = (c - ci for c, ci in zip(grid.coords(), _center(self.center, 3)))
        rho = np.hypot(x, y)
        return (rho - self.R) ** 2 + z ** 2 < self.r_tube ** 2


@dataclass(frozen=True)
class Box:
    """Open axis-aligned box ``lo < x < hi``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    kind = "box"

    def contains(self, grid: GridSpec) -> np.ndarray:
        if len(self.lo) != grid.dim or len(self.hi) != grid.dim:
            raise ValueError("box corners must match the grid dimension")
        out = np.ones(grid.shape, dtype=bool)
        for x, lo, hi in zip(grid.coords(), self.lo, self.hi):
            out &= (x > lo) & (x < hi)
        return out


@dataclass(frozen=True)
class Union:
    """Union of other shapes; ``UnionOfDisks`` is the common case."""

    parts: tuple
    kind = "union"

    def contains(self, grid: GridSpec) -> np.ndarray:
        out = np.zeros(grid.shape, dtype=bool)
        for p in self.parts:
            out |= p.contains(grid)
        return out


def UnionOfDisks(disks: Sequence[Disk]) -> Union:
    return Union(tuple(disks))


def l_shape(side: float, notch: float, center: Sequence[float] = (0.0, 0.0)) -> Union:
    """Square of edge ``side`` with a ``notch`` x ``notch`` corner removed (2D)."""
    cx, cy = center
    h = side / 2
    return Union((
        Box((cx - h, cy - h), (cx + h, cy + h - notch)),
        Box((cx - h, cy - h), (cx + h - notch, cy + h)),
    ))


def shape_from_dict(desc: dict):
    """Build a shape from its JSON description, e.g. ``{"kind": "disk", "radius": 1.0}``."""
    desc = dict(desc)
    kind = desc.pop("kind", None)
    builders = {
        "disk": lambda s: Disk(float(s.pop("radius")), _opt_tuple(s.pop("center", None))),
        "annulus": lambda s: Annulus(float(s.pop("r_inner")), float(s.pop("r_outer")),
                                     _opt_tuple(s.pop("center", None))),
        "torus": lambda s: Torus(float(s.pop("R")), float(s.pop("r_tube")), _opt_tuple(s.pop("center", None))),
        "box": lambda s: Box(tuple(map(float, s.pop("lo"))), tuple(map(float, s.pop("hi")))),
        "union-of-disks": lambda s: UnionOfDisks(
            [Disk(float(d["radius"]), _opt_tuple(d.get("center"))) for d in s.pop("disks")]),
        "l-shape": lambda s: l_shape(float(s.pop("side")), float(s.pop("notch")),
                                     tuple(s.pop("center", (0.0, 0.0)))),
    }
    if kind not in builders:
        raise ValueError(f"unknown shape kind {kind!r}")
    try:
        shape = builders[kind](desc)
    except KeyError as exc:
        raise ValueError(f"shape {kind!r} is missing field {exc}") from None
    if desc:
        raise ValueError(f"unknown keys for shape {kind!r}: {sorted(desc)}")
    return shape


def _opt_tuple(v):
    return None if v is None else tuple(float(x) for x in v)


def synth_shape(grid: GridSpec, shape, mean_convex: bool = False, padding: int = MIN_PADDING) -> SetMask:
    """Rasterise ``shape``: a cell is inside iff its centre lies in the open shape.

    Raises
    ------
    PaddingError
        The shape does not fit with ``padding`` free cells.
    ValueError
        A torus with ``R <= 2 r_tube`` when ``mean_convex`` is requested.
    """
    if mean_convex and isinstance(shape, Torus) and not shape.is_mean_convex:
        raise ValueError(f"torus R={shape.R}, r_tube={shape.r_tube} is not strictly mean convex")
    return SetMask(grid, shape.contains(grid), max(padding, MIN_PADDING))
