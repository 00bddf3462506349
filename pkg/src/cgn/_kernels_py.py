"""Pure-Python/NumPy versions of the compiled kernels in ``_kernels.pyx``.

Each function returns bit-identical results to its compiled counterpart;
``tests/test_kernels.py`` checks that on random inputs.
"""
from collections import deque

import numpy as np


def label4(mask):
    m = np.ascontiguousarray(mask, dtype=bool)
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int32)
    sizes = [0]
    n = 0
    for r0, c0 in zip(*np.nonzero(m)):
        if labels[r0, c0]:
            continue
        n += 1
        labels[r0, c0] = n
        queue = deque([(r0, c0)])
        count = 0
        while queue:
            r, c = queue.popleft()
            count += 1
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= rr < h and 0 <= cc < w and m[rr, cc] and not labels[rr, cc]:
                    labels[rr, cc] = n
                    queue.append((rr, cc))
        sizes.append(count)
    return labels, np.asarray(sizes, dtype=np.int64)


def histogram256(img):
    a = np.asarray(img, dtype=np.uint8)
    return np.bincount(a.ravel(), minlength=256).astype(np.int64)


def bilinear_resize(img, out_h, out_w):
    a = np.asarray(img, dtype=np.float64)
    in_h, in_w = a.shape

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(out_h, in_h)
    x0, x1, fx = axis(out_w, in_w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = (1 - fx) * a[np.ix_(y0, x0)] + fx * a[np.ix_(y0, x1)]
    bottom = (1 - fx) * a[np.ix_(y1, x0)] + fx * a[np.ix_(y1, x1)]
    return (1 - fy) * top + fy * bottom


def auc_midrank(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    order = np.argsort(s, kind="mergesort")
    n = len(s)
    rank_sum = 0.0
    n_pos = 0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[order[j + 1]] == s[order[i]]:
            j += 1
        pos_in_group = int(np.sum(lab[order[i:j + 1]] == 1))
        rank_sum += (i + j + 2) * 0.5 * pos_in_group
        n_pos += pos_in_group
        i = j + 1
    return rank_sum - n_pos * (n_pos + 1) * 0.5, n_pos, n - n_pos


def chamfer_min_sq(a, b):
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    acc = np.zeros((x.shape[0], y.shape[0]))
    for k in range(x.shape[1]):
        diff = x[:, None, k] - y[None, :, k]
        acc = acc + diff * diff
    return acc.min(axis=1)
