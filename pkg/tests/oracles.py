"""Independent reference implementations used to check the library.

Nothing here imports the code under test except plain data types, so a bug
in the library cannot leak into its own oracle.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import qmc


def box_local(xy, box):
    """Points in a box's own frame (no shared code with the library)."""
    cx, cy, _, _, _, _, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = xy[:, 0] - cx, xy[:, 1] - cy
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)


def inside_footprint(xy, box):
    loc = box_local(xy, box)
    return (np.abs(loc[:, 0]) <= box[5] / 2) & (np.abs(loc[:, 1]) <= box[3] / 2)


def _bounds(boxes):
    lo, hi = np.full(2, np.inf), np.full(2, -np.inf)
    for b in boxes:
        r = 0.5 * math.hypot(b[3], b[5])
        lo = np.minimum(lo, [b[0] - r, b[1] - r])
        hi = np.maximum(hi, [b[0] + r, b[1] + r])
    return lo, hi


def mc_bev_iou(a, b, m: int = 20, seed: int = 0) -> float:
    """Area IoU from 2**m scrambled-Sobol samples over the union's bounding square."""
    lo, hi = _bounds([a, b])
    u = qmc.Sobol(2, scramble=True, seed=seed).random_base2(m)
    xy = lo + u * (hi - lo)
    ia, ib = inside_footprint(xy, a), inside_footprint(xy, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def mc_iou_3d(a, b, m: int = 20, seed: int = 0) -> float:
    lo, hi = _bounds([a, b])
    zlo = min(a[2] - a[4] / 2, b[2] - b[4] / 2)
    zhi = max(a[2] + a[4] / 2, b[2] + b[4] / 2)
    u = qmc.Sobol(3, scramble=True, seed=seed).random_base2(m)
    xy = lo + u[:, :2] * (hi - lo)
    z = zlo + u[:, 2] * (zhi - zlo)
    ia = inside_footprint(xy, a) & (np.abs(z - a[2]) <= a[4] / 2)
    ib = inside_footprint(xy, b) & (np.abs(z - b[2]) <= b[4] / 2)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def random_box(rng, spread: float = 2.0):
    return np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(0, 1),
                     rng.uniform(0.5, 3), rng.uniform(0.5, 2), rng.uniform(0.5, 5),
                     rng.uniform(-math.pi, math.pi)])


def brute_dbscan(points, eps: float, min_points: int) -> np.ndarray:
    """Reachability closure over core points, borders to the lowest-index adjacent component.

    Components are numbered by their smallest core index, which is also the
    order a left-to-right scan first expands them.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    adj = d <= eps
    core = adj.sum(1) >= min_points
    comp = np.full(n, -1)
    # union-find over core-core edges
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        if not core[i]:
            continue
        for j in range(i + 1, n):
            if core[j] and adj[i, j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    roots = sorted({find(i) for i in range(n) if core[i]})
    rank = {r: k for k, r in enumerate(roots)}
    for i in range(n):
        if core[i]:
            comp[i] = rank[find(i)]
    labels = comp.copy()
    for i in range(n):
        if core[i]:
            continue
        nbr = [comp[j] for j in range(n) if core[j] and adj[i, j]]
        if nbr:
            labels[i] = min(nbr)
    return labels


def same_partition(a, b) -> bool:
    """Equal labelings up to renaming of cluster ids (noise must coincide)."""
    a, b = np.asarray(a), np.asarray(b)
    if not np.array_equal(a < 0, b < 0):
        return False
    fwd, bwd = {}, {}
    for x, y in zip(a[a >= 0], b[b >= 0]):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


def greedy_nms(boxes, conf, thresh: float, iou_fn) -> list[int]:
    """Textbook O(n^2) greedy suppression with a caller-supplied IoU."""
    n = len(conf)
    alive = [True] * n
    keep = []
    order = sorted(range(n), key=lambda i: (-conf[i], i))
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        for j in order:
            if alive[j] and j != i and j not in keep and iou_fn(boxes[i], boxes[j]) > thresh:
                alive[j] = False
    return keep


def step_integral_ap(tp_sorted, n_gt: int) -> float:
    """All-point interpolated AP by explicit enumeration of recall levels."""
    tp_sorted = list(tp_sorted)
    prec, rec = [], []
    t = f = 0
    for hit in tp_sorted:
        t += hit
        f += not hit
        prec.append(t / (t + f))
        rec.append(t / n_gt)
    area, prev = 0.0, 0.0
    for k in range(len(rec)):
        if rec[k] > prev:
            best = max(prec[k:])
            area += (rec[k] - prev) * best
            prev = rec[k]
    return area


def central_difference(f, x: np.ndarray, idx, h: float = 1e-5) -> float:
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def grad_close(a: float, n: float, rtol: float = 1e-4, atol: float = 1e-9) -> bool:
    return abs(a - n) <= rtol * max(abs(a), abs(n)) + atol


def least_squares_heading(ts, xy) -> float:
    """Heading of the least-squares constant-velocity fit."""
    ts = np.asarray(ts, dtype=float)
    A = np.column_stack([np.ones_like(ts), ts])
    coef, *_ = np.linalg.lstsq(A, np.asarray(xy, dtype=float), rcond=None)
    return math.atan2(coef[1, 1], coef[1, 0])


def layer_gradient_pairs(layer, x: np.ndarray, rng, probes: int = 20, train: bool = True):
    """(analytic, numeric) derivative pairs for random input and parameter entries.

    The probed objective is ``sum(R * layer(x))`` for a fixed random ``R``.
    Batch-norm running buffers are restored around every evaluation so the
    objective is a pure function of the probed value.
    """
    buffers = {k: v.copy() for k, v in layer.buffers.items()}

    def restore():
        for k, v in buffers.items():
            layer.buffers[k] = v.copy()

    out = layer.forward(x, train)
    R = rng.normal(size=out.shape)
    for k in layer.params:
        layer.grads[k] = np.zeros_like(layer.params[k])
    gx = layer.backward(R)
    ga = {k: layer.grads[k].copy() for k in layer.params}
    restore()

    def objective():
        val = float(np.sum(R * layer.forward(x, train)))
        restore()
        return val

    pairs = []
    targets = [("x", x, gx)] + [(k, layer.params[k], ga[k]) for k in layer.params]
    for p in range(probes):
        name, arr, grad = targets[p % len(targets)]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        pairs.append((float(grad[idx]), central_difference(objective, arr, idx)))
    return pairs
