"""Euclidean and signed distance to the phase boundary of a mask.

Two distance kinds are provided. ``"center"`` is the exact distance between
opposite-phase cell centres less half a cell, computed with a separable
lower-envelope transform. ``"subcell"`` measures the distance to a smoothed
reconstruction of the interface (marching squares / cubes) and shifts it so
that the enclosed volume matches the cell count; it removes the systematic
drift that the half-cell rule causes on curved interfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree
from skimage import measure

from .grid import GridSpec, ScalarField, SetMask, mask_padding

DISTANCE_KINDS = ("center", "subcell")
_SIGN_FLOOR = 1e-9  # in cells; keeps the sign of sd tied to the mask


class NoInterfaceError(ValueError):
    """The mask is empty or full, so there is no interface to measure from."""


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Unsigned and signed distance of one mask; ``|sd| == d`` cellwise."""

    grid: GridSpec
    d: ScalarField
    sd: ScalarField
    kind: str = "center"


# exact squared EDT -------------------------------------------------------

@nb.njit(cache=True)
def _envelope_1d(f, out, v, z):
    # lower envelope of parabolas (Felzenszwalb & Huttenlocher)
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = s if k > 0 else -np.inf
        z[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = np.inf
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        p = v[j]
        out[q] = (q - p) * (q - p) + f[p]


@nb.njit(cache=True)
def _edt_pass(a):
    # a: 2D view (lines, n); transforms each line in place
    m, n = a.shape
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for i in range(m):
        _envelope_1d(a[i], out, v, z)
        for q in range(n):
            a[i, q] = out[q]


def squared_edt_cells(sites: np.ndarray) -> np.ndarray:
    """Squared distance, in cells, from every cell to the nearest ``True`` cell.

    Separable exact transform; ``inf`` everywhere if there are no sites.
    """
    f = np.where(sites, 0.0, np.inf)
    for axis in range(f.ndim):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        flat = moved.reshape(-1, moved.shape[-1])
        _edt_pass(flat)
        f = np.moveaxis(flat.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(f)


def _center_unsigned(inside: np.ndarray, dx: float) -> np.ndarray:
    if inside.all() or not inside.any():
        raise NoInterfaceError("no interface: mask is empty or full")
    d_in = np.sqrt(squared_edt_cells(~inside))   # inside cells: to nearest outside centre
    d_out = np.sqrt(squared_edt_cells(inside))
    nearest = np.where(inside, d_in, d_out)
    return np.maximum(nearest - 0.5, 0.0) * dx


def unsigned_edt(mask: SetMask) -> ScalarField:
    """Distance to the nearest opposite-phase cell centre minus ``dx/2``, clamped at 0."""
    return ScalarField(mask.grid, _center_unsigned(mask.inside, mask.grid.spacing))


def signed_distance(mask: SetMask) -> ScalarField:
    """``-d`` on inside cells and ``+d`` outside, with ``d = unsigned_edt(mask)``."""
    d = _center_unsigned(mask.inside, mask.grid.spacing)
    return ScalarField(mask.grid, np.where(mask.inside, -d, d))


# sub-cell distance ---------------------------------------------------------

@nb.njit(cache=True)
def _seg_dist(pts, cand_ptr, cand, a, b, out):
    for i in range(pts.shape[0]):
        best = np.inf
        px = pts[i, 0]
        py = pts[i, 1]
        for c in range(cand_ptr[i], cand_ptr[i + 1]):
            s = cand[c]
            ax = a[s, 0]
            ay = a[s, 1]
            ex = b[s, 0] - ax
            ey = b[s, 1] - ay
            ll = ex * ex + ey * ey
            t = 0.0
            if ll > 0.0:
                t = ((px - ax) * ex + (py - ay) * ey) / ll
                t = min(1.0, max(0.0, t))
            qx = ax + t * ex - px
            qy = ay + t * ey - py
            d2 = qx * qx + qy * qy
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)


@nb.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    # closest point on triangle abc to p (Ericson, Real-Time Collision Detection 5.1.5)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        return a + (d1 / (d1 - d3)) * ab
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        return a + (d2 / (d2 - d6)) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


@nb.njit(cache=True)
def _tri_dist(pts, cand_ptr, cand, verts, faces, out):
    for i in range(pts.shape[0]):
        best = np.inf
        p = pts[i]
        for c in range(cand_ptr[i], cand_ptr[i + 1]):
            f = faces[cand[c]]
            q = _closest_on_triangle(p, verts[f[0]], verts[f[1]], verts[f[2]]) - p
            d2 = q @ q
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)


def _contour_2d(f, grid):
    a_list, b_list = [], []
    area = 0.0
    for c in measure.find_contours(f, 0.5):
        p = c * grid.spacing + np.asarray(grid.origin)
        a_list.append(p[:-1])
        b_list.append(p[1:])
        area += 0.5 * np.sum(p[:-1, 0] * p[1:, 1] - p[1:, 0] * p[:-1, 1])
    if not a_list:
        return None
    a = np.concatenate(a_list)
    b = np.concatenate(b_list)
    length = float(np.linalg.norm(b - a, axis=1).sum())
    return a, b, abs(area), length


def _surface_3d(f, grid):
    if f.max() <= 0.5 or f.min() >= 0.5:
        return None
    verts, faces, _, _ = measure.marching_cubes(f, 0.5, spacing=(grid.spacing,) * 3)
    verts = verts + np.asarray(grid.origin)
    v0, v1, v2 = (verts[faces[:, i]] for i in range(3))
    vol = abs(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum()) / 6.0
    area = float(measure.mesh_surface_area(verts, faces))
    return verts, faces.astype(np.int64), vol, area


def _candidates(tree, pts, radii):
    lists = tree.query_ball_point(pts, radii)
    ptr = np.zeros(len(lists) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(x) for x in lists])
    cand = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=ptr[-1])
    return ptr, cand


def _subcell_unsigned(inside: np.ndarray, grid: GridSpec, smoothing: float, band: float):
    dx = grid.spacing
    f = ndi.gaussian_filter(inside.astype(np.float64), smoothing, mode="nearest")
    pts = grid.points()
    if grid.dim == 2:
        geom = _contour_2d(f, grid)
        if geom is None:
            return None
        a, b, enclosed, size = geom
        anchors = np.concatenate([a, b[-1:]])
        cent = 0.5 * (a + b)
        diam = float(np.linalg.norm(b - a, axis=1).max())
    else:
        geom = _surface_3d(f, grid)
        if geom is None:
            return None
        verts, faces, enclosed, size = geom
        anchors = verts
        tri = verts[faces]
        cent = tri.mean(axis=1)
        diam = float(np.linalg.norm(tri - cent[:, None, :], axis=2).max()) * 2
    d_anchor, _ = cKDTree(anchors).query(pts)
    d = d_anchor.copy()
    near = np.flatnonzero(d_anchor <= band * dx)
    ptr, cand = _candidates(cKDTree(cent), pts[near], d_anchor[near] + diam)
    exact = np.empty(near.size)
    if grid.dim == 2:
        _seg_dist(pts[near], ptr, cand, a, b, exact)
    else:
        _tri_dist(pts[near], ptr, cand, verts, faces, exact)
    d[near] = exact
    # shift so that the reconstructed interface encloses the mask volume
    shift = (enclosed - inside.sum() * grid.cell_volume) / size
    return d.reshape(grid.shape), shift


def subcell_signed_distance_array(inside: np.ndarray, grid: GridSpec, smoothing: float = 1.0,
                                  band: float = 4.0) -> np.ndarray:
    """Sub-cell signed distance of a boolean array on ``grid``.

    Falls back to the centre rule when smoothing leaves no interface (sets
    only a few cells wide). A set touching the box is handled through its
    complement so that ``sd(~m) == -sd(m)``.
    """
    inside = np.asarray(inside, dtype=bool).reshape(grid.shape)
    if inside.all() or not inside.any():
        raise NoInterfaceError("no interface: mask is empty or full")
    if mask_padding(inside) < 1 <= mask_padding(~inside):
        return -subcell_signed_distance_array(~inside, grid, smoothing, band)
    res = _subcell_unsigned(inside, grid, smoothing, band)
    if res is None:
        d = _center_unsigned(inside, grid.spacing)
        return np.where(inside, -d, d)
    d, shift = res
    sd = np.where(inside, -d, d) + shift
    floor = _SIGN_FLOOR * grid.spacing
    return np.where(inside, np.minimum(sd, -floor), np.maximum(sd, floor))


def subcell_signed_distance(mask: SetMask, smoothing: float = 1.0) -> ScalarField:
    """Signed distance to the smoothed, volume-corrected interface of ``mask``."""
    return ScalarField(mask.grid, subcell_signed_distance_array(mask.inside, mask.grid, smoothing))


def signed_distance_array(inside: np.ndarray, grid: GridSpec, kind: str = "center") -> np.ndarray:
    if kind == "center":
        d = _center_unsigned(np.asarray(inside, dtype=bool), grid.spacing)
        return np.where(inside, -d, d)
    if kind == "subcell":
        return subcell_signed_distance_array(inside, grid)
    raise ValueError(f"unknown distance kind {kind!r}; expected one of {DISTANCE_KINDS}")


def distance_field(mask: SetMask, kind: str = "center") -> DistanceField:
    """Both distances of ``mask`` for the chosen ``kind``."""
    sd = signed_distance_array(mask.inside, mask.grid, kind)
    return DistanceField(mask.grid, ScalarField(mask.grid, np.abs(sd)), ScalarField(mask.grid, sd), kind)
