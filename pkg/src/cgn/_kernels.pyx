# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror ``cgn._kernels_py`` one-to-one."""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        i, parent[i] = parent[i], root
    return root


cdef inline void _union(Py_ssize_t[::1] parent, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    a = _find(parent, a)
    b = _find(parent, b)
    if a < b:
        parent[b] = a
    elif b < a:
        parent[a] = b


def label4(mask):
    """4-connected component labels, numbered 1..n by raster order of first pixel."""
    cdef const cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    cdef Py_ssize_t r, c, i
    parent_arr = np.arange(h * w, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    with nogil:
        for r in range(h):
            for c in range(w):
                if not m[r, c]:
                    continue
                i = r * w + c
                if c > 0 and m[r, c - 1]:
                    _union(parent, i, i - 1)
                if r > 0 and m[r - 1, c]:
                    _union(parent, i, i - w)
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] labels = labels_arr
    remap_arr = np.zeros(h * w, dtype=np.int32)
    cdef cnp.int32_t[::1] remap = remap_arr
    cdef cnp.int32_t n = 0
    cdef Py_ssize_t root
    with nogil:
        for r in range(h):
            for c in range(w):
                if not m[r, c]:
                    continue
                root = _find(parent, r * w + c)
                if remap[root] == 0:
                    n += 1
                    remap[root] = n
                labels[r, c] = remap[root]
    sizes = np.bincount(labels_arr.ravel(), minlength=n + 1).astype(np.int64)
    sizes[0] = 0
    return labels_arr, sizes


def histogram256(img):
    cdef const cnp.uint8_t[:, ::1] a = np.ascontiguousarray(img, dtype=np.uint8)
    hist_arr = np.zeros(256, dtype=np.int64)
    cdef cnp.int64_t[::1] hist = hist_arr
    cdef Py_ssize_t r, c
    with nogil:
        for r in range(a.shape[0]):
            for c in range(a.shape[1]):
                hist[a[r, c]] += 1
    return hist_arr


def bilinear_resize(img, Py_ssize_t out_h, Py_ssize_t out_w):
    """Half-pixel-centre bilinear resampling of a 2-D float64 array, edges clamped."""
    cdef const double[:, ::1] a = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t in_h = a.shape[0], in_w = a.shape[1]
    out_arr = np.empty((out_h, out_w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double sy = <double>in_h / out_h
    cdef double sx = <double>in_w / out_w
    cdef double y, x, fy, fx
    cdef Py_ssize_t i, j, y0, x0, y1, x1
    with nogil:
        for i in range(out_h):
            y = (i + 0.5) * sy - 0.5
            if y < 0:
                y = 0
            if y > in_h - 1:
                y = in_h - 1
            y0 = <Py_ssize_t>floor(y)
            y1 = y0 + 1 if y0 + 1 < in_h else y0
            fy = y - y0
            for j in range(out_w):
                x = (j + 0.5) * sx - 0.5
                if x < 0:
                    x = 0
                if x > in_w - 1:
                    x = in_w - 1
                x0 = <Py_ssize_t>floor(x)
                x1 = x0 + 1 if x0 + 1 < in_w else x0
                fx = x - x0
                out[i, j] = ((1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
                             + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1]))
    return out_arr


def auc_midrank(scores, labels):
    """Mann-Whitney AUC with midranks for ties. Returns (u_statistic, n_pos, n_neg)."""
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    order_arr = np.argsort(s, kind="mergesort")
    cdef const double[::1] sv = np.ascontiguousarray(s)
    cdef const cnp.int64_t[::1] lv = np.ascontiguousarray(lab)
    cdef const cnp.intp_t[::1] order = order_arr
    cdef Py_ssize_t n = sv.shape[0], i = 0, j, k
    cdef double rank_sum = 0.0, midrank
    cdef cnp.int64_t n_pos = 0, pos_in_group
    with nogil:
        while i < n:
            j = i
            while j + 1 < n and sv[order[j + 1]] == sv[order[i]]:
                j += 1
            midrank = (i + j + 2) * 0.5
            pos_in_group = 0
            for k in range(i, j + 1):
                if lv[order[k]] == 1:
                    pos_in_group += 1
            rank_sum += midrank * pos_in_group
            n_pos += pos_in_group
            i = j + 1
    return rank_sum - n_pos * (n_pos + 1) * 0.5, int(n_pos), int(n - n_pos)


def chamfer_min_sq(a, b):
    """For each row of ``a`` the minimum squared L2 distance to any row of ``b``."""
    cdef const double[:, ::1] x = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] y = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double best, acc, diff
    with nogil:
        for i in range(n):
            best = 1e308
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = x[i, k] - y[j, k]
                    acc = acc + diff * diff
                if acc < best:
                    best = acc
            out[i] = best
    return out_arr
