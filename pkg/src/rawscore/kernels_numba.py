"""Compiled kernels for the hot loops (numba backend).

Each public function here mirrors a pure-numpy implementation elsewhere in
the package and must produce bit-identical output. Keep the arithmetic in
lockstep with the numpy twin when editing either side.

Import of this module is deferred until the numba backend is actually
selected, so a missing or broken numba install only affects users who ask
for it.
"""

from __future__ import annotations

import numba
import numpy as np
from numba import njit

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _mix64(z):
    z = z + GAMMA
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def _uniform(key, counter):
    bits = _mix64(key + counter * GAMMA)
    return (np.float64(bits >> np.uint64(11)) + 0.5) * 2.0**-53


@njit(cache=True, inline="always")
def _normal(key, index):
    u1 = _uniform(key, index * np.uint64(2))
    u2 = _uniform(key, index * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@njit(cache=True)
def fill_uniforms(key, counters, out):
    for i in range(counters.size):
        out[i] = _uniform(key, counters[i])


@njit(cache=True)
def fill_normals(key, index, out):
    for i in range(index.size):
        out[i] = _normal(key, index[i])


@njit(cache=True, inline="always")
def _find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]  # path halving
        a = parent[a]
    return a


@njit(cache=True, inline="always")
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra < rb:
        parent[rb] = ra
    elif rb < ra:
        parent[ra] = rb


@njit(cache=True)
def ccl2d(m, labels):
    """Two-pass 8-connected labeling; labels resolved to union-find roots."""
    h, w = m.shape
    parent = np.empty(h * w + 1, np.int32)
    nxt = np.int32(1)
    for y in range(h):
        for x in range(w):
            if m[y, x] == 0:
                continue
            lab = np.int32(0)
            if x > 0 and m[y, x - 1] != 0:
                lab = labels[y, x - 1]
            if y > 0:
                for dx in range(-1, 2):
                    xx = x + dx
                    if 0 <= xx < w and m[y - 1, xx] != 0:
                        nl = labels[y - 1, xx]
                        if lab == 0:
                            lab = nl
                        else:
                            _union(parent, lab, nl)
            if lab == 0:
                lab = nxt
                parent[lab] = lab
                nxt += np.int32(1)
            labels[y, x] = lab
    for y in range(h):
        for x in range(w):
            if labels[y, x] != 0:
                labels[y, x] = _find(parent, labels[y, x])


@njit(cache=True)
def ccl3d(m, labels):
    """Two-pass 26-connected labeling over (depth, height, width)."""
    d, h, w = m.shape
    parent = np.empty(d * h * w + 1, np.int32)
    nxt = np.int32(1)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if m[z, y, x] == 0:
                    continue
                lab = np.int32(0)
                for dz in range(-1, 1):
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            if dz == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                                continue
                            zz, yy, xx = z + dz, y + dy, x + dx
                            if zz < 0 or yy < 0 or yy >= h or xx < 0 or xx >= w:
                                continue
                            if m[zz, yy, xx] == 0:
                                continue
                            nl = labels[zz, yy, xx]
                            if lab == 0:
                                lab = nl
                            else:
                                _union(parent, lab, nl)
                if lab == 0:
                    lab = nxt
                    parent[lab] = lab
                    nxt += np.int32(1)
                labels[z, y, x] = lab
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if labels[z, y, x] != 0:
                    labels[z, y, x] = _find(parent, labels[z, y, x])


@njit(cache=True, parallel=True)
def forest_predict(X, starts, feature, threshold, left, right, probs, out):
    """Average per-tree leaf distributions into out, rows independent.

    Trees are accumulated in index order for every pixel, so the float
    summation order matches the numpy path and is thread-count agnostic.
    """
    n_trees = starts.size
    n_classes = out.shape[1]
    for i in numba.prange(X.shape[0]):
        for t in range(n_trees):
            node = starts[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            for c in range(n_classes):
                out[i, c] += probs[node, c]
        for c in range(n_classes):
            out[i, c] /= n_trees
    return 0


@njit(cache=True, parallel=True)
def synth_replicate(d, lut, key, top, out):
    """One raw-equivalent replicate; returns the out-of-range draw count.

    Writes are disjoint per pixel and the only reduction is an integer
    sum, so the result does not depend on the thread count.
    """
    viol = 0
    for i in numba.prange(d.size):
        z = _normal(key, np.uint64(i))
        val = np.rint(np.float64(d[i]) + lut[np.int64(d[i])] * z)
        if val < 0.0:
            viol += 1
            val = 0.0
        elif val > top:
            viol += 1
            val = top
        out[i] = np.uint16(val)
    return viol
