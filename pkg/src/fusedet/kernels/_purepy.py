"""Pure-numpy reference implementations of the hot kernels.

Used when the compiled extension is unavailable, and as the comparison
baseline in benchmarks/kernel_bench.py. Signatures match _fastops exactly.
"""

import numpy as np


def bilinear_gather(fmap, gx, gy, valid):
    """Bilinear interpolation of fmap (H, W, C) at N continuous coords.

    Coordinates are grid coords: gx in [0, W-1], gy in [0, H-1] for valid
    entries. Invalid entries yield zero rows.
    """
    h, w, c = fmap.shape
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    x0 = np.clip(np.floor(gx).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(gy).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    out = (
        ((1 - fx) * (1 - fy))[:, None] * fmap[y0, x0]
        + (fx * (1 - fy))[:, None] * fmap[y0, x1]
        + ((1 - fx) * fy)[:, None] * fmap[y1, x0]
        + (fx * fy)[:, None] * fmap[y1, x1]
    )
    out[~valid] = 0.0
    return out


def bilinear_scatter(gout, gx, gy, valid, h, w):
    """Adjoint of bilinear_gather: scatter-add output grads into a zero map."""
    c = gout.shape[1]
    gmap = np.zeros((h, w, c), dtype=np.float64)
    if not np.any(valid):
        return gmap
    gx = gx[valid]
    gy = gy[valid]
    g = gout[valid]
    x0 = np.clip(np.floor(gx).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(gy).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    np.add.at(gmap, (y0, x0), (1 - fx) * (1 - fy) * g)
    np.add.at(gmap, (y0, x1), fx * (1 - fy) * g)
    np.add.at(gmap, (y1, x0), (1 - fx) * fy * g)
    np.add.at(gmap, (y1, x1), fx * fy * g)
    return gmap


def lsap(cost):
    """Min-cost linear assignment by shortest augmenting paths (JV style).

    Returns (row_ind, col_ind) of the min(n, m) matched pairs, sorted by row.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    transposed = cost.shape[0] > cost.shape[1]
    if transposed:
        cost = np.ascontiguousarray(cost.T)
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.intp)  # match[j] = row occupying col j, 1-based
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    cols = np.nonzero(match[1:])[0]
    rows = match[1:][cols] - 1
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows, kind="stable")
    return rows[order].astype(np.intp), cols[order].astype(np.intp)
