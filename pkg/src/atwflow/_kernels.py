"""Compiled primal-dual iterations and gap evaluation, one per (dimension, stencil).

All kernels work in cell units: the difference operator ``D`` has no
``1/dx`` factor and ``g`` is pre-multiplied by ``dx``.

The sweeps store the dual in a padded array ``P`` of shape
``(dim, *(n + 1 for n in cells))`` so that the adjoint needs no boundary
tests: item ``(i, j)`` lives at ``P[:, i + 1, j + 1]`` and the pad entries
stay zero. :func:`dual_view` gives the unpadded ``(dim, *items)`` view used
everywhere else.

The active region is given as runs along the last axis: for line ``l``
(a row in 2D, an ``(i, j)`` pencil in 3D) the half-open runs are
``lo[ptr[l]:ptr[l+1]]`` to ``hi[...]``. Cells outside the cell runs keep
their value and dual items outside the item runs keep theirs. Inactive
dual components inside a run are written as zero.

Inner loops take row slices that start at the run, so that every index
is a known non-negative offset; this lets LLVM vectorize them.
"""

import numba as nb
import numpy as np

ANISO, VERTEX, FORWARD = 0, 1, 2
MODE_IDS = {"anisotropic": ANISO, "isotropic": VERTEX, "isotropic-forward": FORWARD}


def runs(mask: np.ndarray):
    """Run-length encoding of ``mask`` along its last axis: ``(ptr, lo, hi)``."""
    m = np.asarray(mask, dtype=bool)
    lines = m.reshape(int(np.prod(m.shape[:-1])), m.shape[-1])
    pad = np.zeros((lines.shape[0], lines.shape[1] + 2), dtype=np.int8)
    pad[:, 1:-1] = lines
    edges = np.diff(pad, axis=1)
    starts = np.nonzero(edges == 1)
    stops = np.nonzero(edges == -1)
    counts = np.bincount(starts[0], minlength=lines.shape[0])
    ptr = np.zeros(lines.shape[0] + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(counts)
    return ptr, starts[1].astype(np.int64), stops[1].astype(np.int64)


def padded_dual(p: np.ndarray, mode: str) -> np.ndarray:
    """Padded storage holding a copy of the dual field ``p``.

    For the cell-centred stencils the component along axis ``a`` on the last
    slab of that axis has no difference to pair with and is dropped.
    """
    P = np.zeros((p.shape[0],) + tuple(n + (2 if mode == "isotropic" else 1) for n in p.shape[1:]))
    view = dual_view(P, mode)
    view[...] = p
    if mode != "isotropic":
        for a in range(p.shape[0]):
            view[(a,) + (slice(None),) * a + (-1,)] = 0.0
    return P


def dual_view(P: np.ndarray, mode: str) -> np.ndarray:
    """Unpadded ``(dim, *items)`` view of padded storage."""
    inner = slice(1, -1) if mode == "isotropic" else slice(1, None)
    return P[(slice(None),) + (inner,) * (P.ndim - 1)]


# row helpers ----------------------------------------------------------------

@nb.njit(cache=True)
def _primal_row(u, ub, g, s, m, tau):
    for j in range(m):
        un = u[j] - tau * (s[j] + g[j])
        if un < 0.0:
            un = 0.0
        elif un > 1.0:
            un = 1.0
        ub[j] = 2.0 * un - u[j]
        u[j] = un


@nb.njit(cache=True)
def _project2(px, py, j, qx, qy):
    n = qx * qx + qy * qy
    if n > 1.0:
        n = 1.0 / np.sqrt(n)
        qx *= n
        qy *= n
    px[j] = qx
    py[j] = qy


@nb.njit(cache=True)
def _project3(px, py, pz, j, qx, qy, qz):
    n = qx * qx + qy * qy + qz * qz
    if n > 1.0:
        n = 1.0 / np.sqrt(n)
        qx *= n
        qy *= n
        qz *= n
    px[j] = qx
    py[j] = qy
    pz[j] = qz


@nb.njit(cache=True)
def _clip_step(p, a, d):
    v = p + d
    if v < -1.0:
        v = -1.0
    elif v > 1.0:
        v = 1.0
    return v * a


# 2D sweeps ------------------------------------------------------------------

def _make_sweep2(mode):
    @nb.njit(cache=True)
    def sweep2(u, ub, P, g, iact, cptr, clo, chi, iptr, ilo, ihi, tau, sigma, niter):
        nx, ny = u.shape
        s = np.empty(ny)
        for _ in range(niter):
            for i in range(iptr.shape[0] - 1):
                has_x = i < nx - 1
                u0 = ub[i]
                u1 = ub[i + 1] if has_x else ub[i]
                for r in range(iptr[i], iptr[i + 1]):
                    j0 = ilo[r]
                    m = ihi[r] - j0
                    mi = min(ihi[r], ny - 1) - j0  # items with an upper y neighbour
                    a0 = u0[j0:]
                    a1 = u1[j0:]
                    px = P[0, i + 1, j0 + 1:]
                    py = P[1, i + 1, j0 + 1:]
                    if mode == VERTEX:
                        h = 0.5 * sigma
                        for j in range(m):
                            diag = a1[j + 1] - a0[j]
                            anti = a1[j] - a0[j + 1]
                            _project2(px, py, j, px[j] + h * (diag + anti), py[j] + h * (diag - anti))
                    elif mode == FORWARD:
                        for j in range(mi):
                            gx = a1[j] - a0[j] if has_x else 0.0
                            _project2(px, py, j, px[j] + sigma * gx, py[j] + sigma * (a0[j + 1] - a0[j]))
                        for j in range(mi, m):
                            gx = a1[j] - a0[j] if has_x else 0.0
                            _project2(px, py, j, px[j] + sigma * gx, py[j])
                    else:
                        w0 = iact[0, i, j0:]
                        w1 = iact[1, i, j0:]
                        if has_x:
                            for j in range(m):
                                px[j] = _clip_step(px[j], w0[j], sigma * (a1[j] - a0[j]))
                        for j in range(mi):
                            py[j] = _clip_step(py[j], w1[j], sigma * (a0[j + 1] - a0[j]))
            for i in range(nx):
                for r in range(cptr[i], cptr[i + 1]):
                    j0 = clo[r]
                    m = chi[r] - j0
                    x0 = P[0, i, j0:]
                    x1 = P[0, i + 1, j0:]
                    y0 = P[1, i, j0:]
                    y1 = P[1, i + 1, j0:]
                    if mode == VERTEX:
                        for j in range(m):
                            s[j] = 0.5 * (x0[j] - x1[j] + x0[j + 1] - x1[j + 1]
                                          + y0[j] + y1[j] - y0[j + 1] - y1[j + 1])
                    else:
                        for j in range(m):
                            s[j] = x0[j + 1] - x1[j + 1] + y1[j] - y1[j + 1]
                    _primal_row(u[i, j0:], ub[i, j0:], g[i, j0:], s, m, tau)

    return sweep2


def _make_measure2(mode):
    @nb.njit(cache=True)
    def measure2(u, p, g, iact):
        """Return ``(tv, linear, dual, leak)`` in cell units over the whole grid.

        ``leak`` is the TV carried by frozen dual items.
        """
        nx, ny = u.shape
        tv = 0.0
        lin = 0.0
        leak = 0.0
        kt = np.zeros((nx, ny))
        for i in range(nx):
            for j in range(ny):
                lin += g[i, j] * u[i, j]
                if mode == VERTEX:
                    if i < nx - 1 and j < ny - 1:
                        a = u[i + 1, j + 1]
                        b = u[i, j + 1]
                        c = u[i + 1, j]
                        d = u[i, j]
                        gx = 0.5 * (a - b + c - d)
                        gy = 0.5 * (a - c + b - d)
                        v = np.sqrt(gx * gx + gy * gy)
                        tv += v
                        if not iact[0, i, j]:
                            leak += v
                        px = p[0, i, j]
                        py = p[1, i, j]
                        kt[i + 1, j + 1] += 0.5 * (px + py)
                        kt[i, j + 1] += 0.5 * (-px + py)
                        kt[i + 1, j] += 0.5 * (px - py)
                        kt[i, j] += 0.5 * (-px - py)
                else:
                    gx = u[i + 1, j] - u[i, j] if i < nx - 1 else 0.0
                    gy = u[i, j + 1] - u[i, j] if j < ny - 1 else 0.0
                    if mode == ANISO:
                        tv += abs(gx) + abs(gy)
                        if not iact[0, i, j]:
                            leak += abs(gx)
                        if not iact[1, i, j]:
                            leak += abs(gy)
                    else:
                        v = np.sqrt(gx * gx + gy * gy)
                        tv += v
                        if not iact[0, i, j]:
                            leak += v
                    if i < nx - 1:
                        kt[i, j] -= p[0, i, j]
                        kt[i + 1, j] += p[0, i, j]
                    if j < ny - 1:
                        kt[i, j] -= p[1, i, j]
                        kt[i, j + 1] += p[1, i, j]
        dual = 0.0
        for i in range(nx):
            for j in range(ny):
                v = g[i, j] + kt[i, j]
                if v < 0.0:
                    dual += v
        return tv, lin, dual, leak

    return measure2

# 3D sweeps ------------------------------------------------------------------

def _make_sweep3(mode):
    @nb.njit(cache=True)
    def sweep3(u, ub, P, g, iact, cptr, clo, chi, iptr, ilo, ihi, tau, sigma, niter):
        nx, ny, nz = u.shape
        n1 = iact.shape[2]
        s = np.empty(nz)
        for _ in range(niter):
            for line in range(iptr.shape[0] - 1):
                if iptr[line] == iptr[line + 1]:
                    continue
                i = line // n1
                j = line - i * n1
                has_x = i < nx - 1
                has_y = j < ny - 1
                c00 = ub[i, j]
                c10 = ub[i + 1, j] if has_x else c00
                c01 = ub[i, j + 1] if has_y else c00
                c11 = ub[i + 1, j + 1] if has_x and has_y else c00
                for r in range(iptr[line], iptr[line + 1]):
                    k0 = ilo[r]
                    m = ihi[r] - k0
                    mi = min(ihi[r], nz - 1) - k0
                    a00 = c00[k0:]
                    a10 = c10[k0:]
                    a01 = c01[k0:]
                    a11 = c11[k0:]
                    px = P[0, i + 1, j + 1, k0 + 1:]
                    py = P[1, i + 1, j + 1, k0 + 1:]
                    pz = P[2, i + 1, j + 1, k0 + 1:]
                    if mode == VERTEX:
                        h = 0.25 * sigma
                        for k in range(m):
                            lo00 = a00[k]
                            lo10 = a10[k]
                            lo01 = a01[k]
                            lo11 = a11[k]
                            up00 = a00[k + 1]
                            up10 = a10[k + 1]
                            up01 = a01[k + 1]
                            up11 = a11[k + 1]
                            gx = lo10 + lo11 + up10 + up11 - lo00 - lo01 - up00 - up01
                            gy = lo01 + lo11 + up01 + up11 - lo00 - lo10 - up00 - up10
                            gz = up00 + up10 + up01 + up11 - lo00 - lo10 - lo01 - lo11
                            _project3(px, py, pz, k, px[k] + h * gx, py[k] + h * gy, pz[k] + h * gz)
                    elif mode == FORWARD:
                        for k in range(m):
                            c = a00[k]
                            gx = a10[k] - c if has_x else 0.0
                            gy = a01[k] - c if has_y else 0.0
                            gz = a00[k + 1] - c if k < mi else 0.0
                            _project3(px, py, pz, k, px[k] + sigma * gx, py[k] + sigma * gy, pz[k] + sigma * gz)
                    else:
                        w0 = iact[0, i, j, k0:]
                        w1 = iact[1, i, j, k0:]
                        w2 = iact[2, i, j, k0:]
                        if has_x:
                            for k in range(m):
                                px[k] = _clip_step(px[k], w0[k], sigma * (a10[k] - a00[k]))
                        if has_y:
                            for k in range(m):
                                py[k] = _clip_step(py[k], w1[k], sigma * (a01[k] - a00[k]))
                        for k in range(mi):
                            pz[k] = _clip_step(pz[k], w2[k], sigma * (a00[k + 1] - a00[k]))
            for line in range(cptr.shape[0] - 1):
                if cptr[line] == cptr[line + 1]:
                    continue
                i = line // ny
                j = line - i * ny
                for r in range(cptr[line], cptr[line + 1]):
                    k0 = clo[r]
                    m = chi[r] - k0
                    if mode == VERTEX:
                        x00 = P[0, i, j, k0:]
                        x01 = P[0, i, j + 1, k0:]
                        x10 = P[0, i + 1, j, k0:]
                        x11 = P[0, i + 1, j + 1, k0:]
                        y00 = P[1, i, j, k0:]
                        y01 = P[1, i, j + 1, k0:]
                        y10 = P[1, i + 1, j, k0:]
                        y11 = P[1, i + 1, j + 1, k0:]
                        z00 = P[2, i, j, k0:]
                        z01 = P[2, i, j + 1, k0:]
                        z10 = P[2, i + 1, j, k0:]
                        z11 = P[2, i + 1, j + 1, k0:]
                        for k in range(m):
                            sx = (x00[k] + x00[k + 1] + x01[k] + x01[k + 1]
                                  - x10[k] - x10[k + 1] - x11[k] - x11[k + 1])
                            sy = (y00[k] + y00[k + 1] + y10[k] + y10[k + 1]
                                  - y01[k] - y01[k + 1] - y11[k] - y11[k + 1])
                            sz = (z00[k] + z10[k] + z01[k] + z11[k]
                                  - z00[k + 1] - z10[k + 1] - z01[k + 1] - z11[k + 1])
                            s[k] = 0.25 * (sx + sy + sz)
                    else:
                        x0 = P[0, i, j + 1, k0:]
                        x1 = P[0, i + 1, j + 1, k0:]
                        y0 = P[1, i + 1, j, k0:]
                        y1 = P[1, i + 1, j + 1, k0:]
                        z1 = P[2, i + 1, j + 1, k0:]
                        for k in range(m):
                            s[k] = x0[k + 1] - x1[k + 1] + y0[k + 1] - y1[k + 1] + z1[k] - z1[k + 1]
                    _primal_row(u[i, j, k0:], ub[i, j, k0:], g[i, j, k0:], s, m, tau)

    return sweep3


def _make_measure3(mode):
    @nb.njit(cache=True)
    def measure3(u, p, g, iact):
        nx, ny, nz = u.shape
        tv = 0.0
        lin = 0.0
        leak = 0.0
        kt = np.zeros((nx, ny, nz))
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    lin += g[i, j, k] * u[i, j, k]
                    if mode == VERTEX:
                        if i < nx - 1 and j < ny - 1 and k < nz - 1:
                            c000 = u[i, j, k]
                            c100 = u[i + 1, j, k]
                            c010 = u[i, j + 1, k]
                            c110 = u[i + 1, j + 1, k]
                            c001 = u[i, j, k + 1]
                            c101 = u[i + 1, j, k + 1]
                            c011 = u[i, j + 1, k + 1]
                            c111 = u[i + 1, j + 1, k + 1]
                            gx = 0.25 * (c100 + c110 + c101 + c111 - c000 - c010 - c001 - c011)
                            gy = 0.25 * (c010 + c110 + c011 + c111 - c000 - c100 - c001 - c101)
                            gz = 0.25 * (c001 + c101 + c011 + c111 - c000 - c100 - c010 - c110)
                            v = np.sqrt(gx * gx + gy * gy + gz * gz)
                            tv += v
                            if not iact[0, i, j, k]:
                                leak += v
                            px = 0.25 * p[0, i, j, k]
                            py = 0.25 * p[1, i, j, k]
                            pz = 0.25 * p[2, i, j, k]
                            for a in range(2):
                                sx = px if a == 1 else -px
                                for b in range(2):
                                    sy = py if b == 1 else -py
                                    for c in range(2):
                                        sz = pz if c == 1 else -pz
                                        kt[i + a, j + b, k + c] += sx + sy + sz
                    else:
                        gx = u[i + 1, j, k] - u[i, j, k] if i < nx - 1 else 0.0
                        gy = u[i, j + 1, k] - u[i, j, k] if j < ny - 1 else 0.0
                        gz = u[i, j, k + 1] - u[i, j, k] if k < nz - 1 else 0.0
                        if mode == ANISO:
                            tv += abs(gx) + abs(gy) + abs(gz)
                            if not iact[0, i, j, k]:
                                leak += abs(gx)
                            if not iact[1, i, j, k]:
                                leak += abs(gy)
                            if not iact[2, i, j, k]:
                                leak += abs(gz)
                        else:
                            v = np.sqrt(gx * gx + gy * gy + gz * gz)
                            tv += v
                            if not iact[0, i, j, k]:
                                leak += v
                        if i < nx - 1:
                            kt[i, j, k] -= p[0, i, j, k]
                            kt[i + 1, j, k] += p[0, i, j, k]
                        if j < ny - 1:
                            kt[i, j, k] -= p[1, i, j, k]
                            kt[i, j + 1, k] += p[1, i, j, k]
                        if k < nz - 1:
                            kt[i, j, k] -= p[2, i, j, k]
                            kt[i, j, k + 1] += p[2, i, j, k]
        dual = 0.0
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    v = g[i, j, k] + kt[i, j, k]
                    if v < 0.0:
                        dual += v
        return tv, lin, dual, leak

    return measure3

class Stepper:
    """Binds a grid dimension, stencil and active region to the compiled sweeps.

    ``iterate`` takes the padded dual storage, ``measure`` the unpadded view.
    """

    def __init__(self, mode: str, cact: np.ndarray, iact: np.ndarray):
        self.mode_id = MODE_IDS[mode]
        self.dim = cact.ndim
        self.iact = np.ascontiguousarray(iact, dtype=np.uint8)
        self.cruns = runs(cact)
        # an item is swept if any of its components is active
        self.iruns = runs(self.iact.any(axis=0))
        self._sweep = _SWEEPS[(self.dim, self.mode_id)]
        self._measure = _MEASURES[(self.dim, self.mode_id)]

    def iterate(self, u, ub, P, g, tau, sigma, niter):
        self._sweep(u, ub, P, g, self.iact, *self.cruns, *self.iruns, tau, sigma, niter)

    def measure(self, u, p, g):
        return self._measure(u, p, g, self.iact)


_SWEEPS = {(d, m): (_make_sweep2 if d == 2 else _make_sweep3)(m) for d in (2, 3) for m in (ANISO, VERTEX, FORWARD)}
_MEASURES = {(d, m): (_make_measure2 if d == 2 else _make_measure3)(m)
             for d in (2, 3) for m in (ANISO, VERTEX, FORWARD)}
