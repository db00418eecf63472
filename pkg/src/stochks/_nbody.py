"""Compiled pair loops for the mollified interaction force.

In the parallel loops every particle's drift is accumulated by a single
worker in a fixed loop order; ``drift_pairs`` is serial. Either way the result
does not depend on the number of threads.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _radial(r, tab, coeffs, r_cut):
    # tab = (h, 1/h, n_fine, h_coarse, 1/h_coarse); mirrors KernelTable.radial
    if r >= r_cut:
        return 0.0
    h = tab[0]
    n_fine = int(tab[2])
    r_split = h * n_fine
    if r < r_split:
        k = int(r * tab[1])
        x0 = h * k
    else:
        j = int((r - r_split) * tab[4])
        k = n_fine + j
        x0 = r_split + tab[3] * j
    if k >= coeffs.shape[0]:
        k = coeffs.shape[0] - 1
    dx = r - x0
    return ((coeffs[k, 0] * dx + coeffs[k, 1]) * dx + coeffs[k, 2]) * dx + coeffs[k, 3]


def lookup_params(table):
    return np.array([table.h, 1.0 / table.h, table.n_fine, table.h_coarse, 1.0 / table.h_coarse])


@njit(cache=True, inline="always")
def _min_image(a, box):
    # positions lie in [-L, L), so differences lie in (-2L, 2L)
    if a >= box:
        return a - 2.0 * box
    if a < -box:
        return a + 2.0 * box
    return a


@njit(cache=True, parallel=True)
def drift_brute(pos, box, tab, coeffs, r_cut):
    n, d = pos.shape
    out = np.zeros((n, d))
    for i in prange(n):
        disp = np.empty(d)
        for j in range(n):
            if j == i:
                continue
            r2 = 0.0
            for a in range(d):
                disp[a] = _min_image(pos[i, a] - pos[j, a], box)
                r2 += disp[a] * disp[a]
            if r2 == 0.0:
                continue
            r = np.sqrt(r2)
            f = _radial(r, tab, coeffs, r_cut)
            if f != 0.0:
                s = f / r
                for a in range(d):
                    out[i, a] += s * disp[a]
    return out


@njit(cache=True)
def drift_pairs(pos, box, tab, coeffs, r_cut):
    """Serial all-pairs sum visiting each unordered pair once (uses grad G_eps(-x) = -grad G_eps(x))."""
    n, d = pos.shape
    out = np.zeros((n, d))
    disp = np.empty(d)
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for a in range(d):
                disp[a] = _min_image(pos[i, a] - pos[j, a], box)
                r2 += disp[a] * disp[a]
            if r2 == 0.0:
                continue
            r = np.sqrt(r2)
            f = _radial(r, tab, coeffs, r_cut)
            if f != 0.0:
                s = f / r
                for a in range(d):
                    out[i, a] += s * disp[a]
                    out[j, a] -= s * disp[a]
    return out


@njit(cache=True)
def build_cells(pos, box, ncell):
    """Counting sort of particles into ncell^d cells. Returns (order, start, cell_of)."""
    n, d = pos.shape
    width = 2.0 * box / ncell
    cell_of = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = 0
        for a in range(d):
            k = int(np.floor((pos[i, a] + box) / width))
            if k < 0:
                k = 0
            elif k >= ncell:
                k = ncell - 1
            c = c * ncell + k
        cell_of[i] = c
    total = ncell ** d
    counts = np.zeros(total + 1, dtype=np.int64)
    for i in range(n):
        counts[cell_of[i] + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    order = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = cell_of[i]
        order[fill[c]] = i
        fill[c] += 1
    return order, start, cell_of


@njit(cache=True, parallel=True)
def drift_cells(pos, box, tab, coeffs, r_cut, ncell, neighbors):
    """Pair sum restricted to neighbouring cells; ``neighbors[c]`` lists distinct cells (-1 padded)."""
    n, d = pos.shape
    order, start, cell_of = build_cells(pos, box, ncell)
    out = np.zeros((n, d))
    for i in prange(n):
        disp = np.empty(d)
        ci = cell_of[i]
        for q in range(neighbors.shape[1]):
            c = neighbors[ci, q]
            if c < 0:
                break
            for p in range(start[c], start[c + 1]):
                j = order[p]
                if j == i:
                    continue
                r2 = 0.0
                for a in range(d):
                    disp[a] = _min_image(pos[i, a] - pos[j, a], box)
                    r2 += disp[a] * disp[a]
                if r2 == 0.0:
                    continue
                r = np.sqrt(r2)
                f = _radial(r, tab, coeffs, r_cut)
                if f != 0.0:
                    s = f / r
                    for a in range(d):
                        out[i, a] += s * disp[a]
    return out


@njit(cache=True, parallel=True)
def min_pair_distance(pos, box):
    n, d = pos.shape
    best = np.full(n, np.inf)
    for i in prange(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for a in range(d):
                t = _min_image(pos[i, a] - pos[j, a], box)
                r2 += t * t
            if r2 < best[i]:
                best[i] = r2
    return np.sqrt(best.min())


def neighbor_table(ncell, d):
    """Distinct neighbouring cells (including itself) for every cell of an ncell^d lattice."""
    offsets = np.array(np.meshgrid(*([[-1, 0, 1]] * d), indexing="ij")).reshape(d, -1).T
    total = ncell ** d
    table = np.full((total, 3 ** d), -1, dtype=np.int64)
    for c in range(total):
        idx = np.array(np.unravel_index(c, (ncell,) * d))
        cells = sorted({int(np.ravel_multi_index(tuple((idx + off) % ncell), (ncell,) * d))
                        for off in offsets})
        table[c, : len(cells)] = cells
    return table
