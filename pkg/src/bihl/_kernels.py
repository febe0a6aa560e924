"""Compiled inner loops.

Everything here works on plain arrays; the public modules wrap them.  All
kernels release the GIL so images can be processed from a thread pool.
"""

import numpy as np
from numba import njit

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_U1 = np.uint64(1)
_U2 = np.uint64(2)
_U4 = np.uint64(4)
_U8 = np.uint64(8)
_U56 = np.uint64(56)
_BIG = 1 << 62


@njit(cache=True, nogil=True, inline="always")
def popcount64(x):
    x = x - ((x >> _U1) & _M1)
    x = (x & _M2) + ((x >> _U2) & _M2)
    x = (x + (x >> _U4)) & _M4
    return np.int64((x * _H01) >> _U56)


@njit(cache=True, nogil=True)
def score_map(fmap, ng, words, lambdas, tmval):
    """Bitwise score of every 8x8 window of ``fmap``.

    Windows whose every value is below ``tmval`` get -inf.  Plane words are
    built incrementally: a rolling byte per row (column ``c`` at bit ``c``)
    and a rolling 64-bit word down the rows (row ``r`` at bits ``8r..8r+7``).
    The extra plane ``ng`` is the predicate ``value >= tmval``.
    """
    h, w = fmap.shape
    rows = h - 7
    cols = w - 7
    if rows <= 0 or cols <= 0:
        return np.empty((max(rows, 0), max(cols, 0)))
    out = np.empty((rows, cols))
    nplanes = ng + 1
    na = lambdas.shape[0]
    shifts = np.empty(ng, np.int64)
    for k in range(ng):
        shifts[k] = 7 - k
    rowbyte = np.zeros(nplanes, np.uint64)
    acc = np.zeros((cols, nplanes), np.uint64)
    counts = np.empty(ng, np.int64)
    for y in range(h):
        for k in range(nplanes):
            rowbyte[k] = 0
        for x in range(w):
            v = fmap[y, x]
            for k in range(ng):
                bit = np.uint64((v >> shifts[k]) & 1)
                rowbyte[k] = (rowbyte[k] >> _U1) | (bit << np.uint64(7))
            pbit = np.uint64(1) if v >= tmval else np.uint64(0)
            rowbyte[ng] = (rowbyte[ng] >> _U1) | (pbit << np.uint64(7))
            if x >= 7:
                cx = x - 7
                for k in range(nplanes):
                    acc[cx, k] = (acc[cx, k] >> _U8) | (rowbyte[k] << _U56)
        if y < 7:
            continue
        cy = y - 7
        for cx in range(cols):
            if acc[cx, ng] == 0:
                out[cy, cx] = -np.inf
                continue
            for k in range(ng):
                counts[k] = popcount64(acc[cx, k])
            total = 0.0
            for i in range(na):
                nu = words[i]
                t = 0
                for k in range(ng):
                    t += (2 * popcount64(nu & acc[cx, k]) - counts[k]) << shifts[k]
                total += lambdas[i] * t
            out[cy, cx] = total
    return out


@njit(cache=True, nogil=True)
def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


@njit(cache=True, nogil=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra < rb:
        parent[rb] = ra
    elif rb < ra:
        parent[ra] = rb


@njit(cache=True, nogil=True)
def seed_merge(x, y, w, h, img_w, img_h, cell, ts1, ts2):
    """Rank-ordered seed growing on a coarse occupancy grid.

    Returns ``(group, owner)``: ``group[i]`` is the lowest rank fused with
    proposal ``i`` or -1 when ``i`` was deleted; ``owner`` is the grid of
    claiming ranks (-1 = free).
    """
    n = x.shape[0]
    gw = (img_w + cell - 1) // cell
    gh = (img_h + cell - 1) // cell
    owner = np.full((gh, gw), -1, np.int64)
    parent = np.arange(n)
    deleted = np.zeros(n, np.bool_)
    for a in range(n):
        cx = (2 * x[a] + w[a]) // (2 * cell)
        cy = (2 * y[a] + h[a]) // (2 * cell)
        cx = min(max(cx, 0), gw - 1)
        cy = min(max(cy, 0), gh - 1)
        b = owner[cy, cx]
        if b >= 0:
            if a - b < ts2:
                _union(parent, a, b)
            else:
                deleted[a] = True
            continue
        owner[cy, cx] = a
        for dy in range(-1, 2):
            ny = cy + dy
            if ny < 0 or ny >= gh:
                continue
            for dx in range(-1, 2):
                nx = cx + dx
                if (dy == 0 and dx == 0) or nx < 0 or nx >= gw:
                    continue
                b = owner[ny, nx]
                if b < 0:
                    owner[ny, nx] = a
                elif a - b < ts1:
                    _union(parent, a, b)
    group = np.empty(n, np.int64)
    for i in range(n):
        group[i] = -1 if deleted[i] else _find(parent, i)
    return group, owner


@njit(cache=True, nogil=True)
def greedy_match(rows, cols, n_rows, n_cols):
    """Count one-to-one matches taking candidate pairs in the given order."""
    used_r = np.zeros(n_rows, np.bool_)
    used_c = np.zeros(n_cols, np.bool_)
    matched = 0
    for t in range(rows.shape[0]):
        r = rows[t]
        c = cols[t]
        if used_r[r] or used_c[c]:
            continue
        used_r[r] = True
        used_c[c] = True
        matched += 1
    return matched


@njit(cache=True, nogil=True)
def group_union(group, x, y, w, h, score):
    """Enclosing box and max score of every group, in ascending root order."""
    n = group.shape[0]
    is_root = np.zeros(n, np.bool_)
    for i in range(n):
        if group[i] == i:
            is_root[i] = True
    slot = np.full(n, -1, np.int64)
    count = 0
    for i in range(n):
        if is_root[i]:
            slot[i] = count
            count += 1
    x1 = np.full(count, _BIG)
    y1 = np.full(count, _BIG)
    x2 = np.full(count, -_BIG)
    y2 = np.full(count, -_BIG)
    best = np.full(count, -np.inf)
    roots = np.empty(count, np.int64)
    for i in range(n):
        g = group[i]
        if g < 0:
            continue
        s = slot[g]
        roots[s] = g
        x1[s] = min(x1[s], x[i])
        y1[s] = min(y1[s], y[i])
        x2[s] = max(x2[s], x[i] + w[i])
        y2[s] = max(y2[s], y[i] + h[i])
        best[s] = max(best[s], score[i])
    return roots, x1, y1, x2, y2, best
