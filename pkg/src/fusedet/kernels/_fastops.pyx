# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: batched bilinear sampling (forward + adjoint) and
the shortest-augmenting-path linear assignment solver.

Signatures mirror _purepy exactly; kernels/__init__ picks one at import.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


def bilinear_gather(double[:, :, ::1] fmap, double[::1] gx, double[::1] gy,
                    cnp.uint8_t[::1] valid):
    cdef Py_ssize_t h = fmap.shape[0]
    cdef Py_ssize_t w = fmap.shape[1]
    cdef Py_ssize_t c = fmap.shape[2]
    cdef Py_ssize_t n = gx.shape[0]
    out_arr = np.zeros((n, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, x0, y0, x1, y1
    cdef double fx, fy, w00, w01, w10, w11
    for i in range(n):
        if not valid[i]:
            continue
        x0 = <Py_ssize_t>floor(gx[i])
        y0 = <Py_ssize_t>floor(gy[i])
        if x0 > w - 2:
            x0 = w - 2
        if x0 < 0:
            x0 = 0
        if y0 > h - 2:
            y0 = h - 2
        if y0 < 0:
            y0 = 0
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fx = gx[i] - x0
        fy = gy[i] - y0
        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy
        for k in range(c):
            out[i, k] = (w00 * fmap[y0, x0, k] + w10 * fmap[y0, x1, k]
                         + w01 * fmap[y1, x0, k] + w11 * fmap[y1, x1, k])
    return out_arr


def bilinear_scatter(double[:, ::1] gout, double[::1] gx, double[::1] gy,
                     cnp.uint8_t[::1] valid, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t c = gout.shape[1]
    cdef Py_ssize_t n = gx.shape[0]
    gmap_arr = np.zeros((h, w, c), dtype=np.float64)
    cdef double[:, :, ::1] gmap = gmap_arr
    cdef Py_ssize_t i, k, x0, y0, x1, y1
    cdef double fx, fy, w00, w01, w10, w11
    for i in range(n):
        if not valid[i]:
            continue
        x0 = <Py_ssize_t>floor(gx[i])
        y0 = <Py_ssize_t>floor(gy[i])
        if x0 > w - 2:
            x0 = w - 2
        if x0 < 0:
            x0 = 0
        if y0 > h - 2:
            y0 = h - 2
        if y0 < 0:
            y0 = 0
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        fx = gx[i] - x0
        fy = gy[i] - y0
        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy
        for k in range(c):
            gmap[y0, x0, k] += w00 * gout[i, k]
            gmap[y0, x1, k] += w10 * gout[i, k]
            gmap[y1, x0, k] += w01 * gout[i, k]
            gmap[y1, x1, k] += w11 * gout[i, k]
    return gmap_arr


def lsap(cost):
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    cdef bint transposed = cost.shape[0] > cost.shape[1]
    if transposed:
        cost = np.ascontiguousarray(cost.T)
    cdef double[:, ::1] cm = cost
    cdef Py_ssize_t n = cm.shape[0]
    cdef Py_ssize_t m = cm.shape[1]
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(m + 1)
    match_arr = np.zeros(m + 1, dtype=np.intp)
    way_arr = np.zeros(m + 1, dtype=np.intp)
    minv_arr = np.empty(m + 1)
    used_arr = np.empty(m + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef Py_ssize_t[::1] match = match_arr
    cdef Py_ssize_t[::1] way = way_arr
    cdef double[::1] minv = minv_arr
    cdef cnp.uint8_t[::1] used = used_arr
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = match[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cm[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    cols = np.nonzero(match_arr[1:])[0]
    rows = match_arr[1:][cols] - 1
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows, kind="stable")
    return rows[order].astype(np.intp), cols[order].astype(np.intp)
