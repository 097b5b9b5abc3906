"""Independent brute-force reference implementations used by the tests.

Deliberately naive (brute force or sampling, no shared code with the package)
so agreement is meaningful.
"""
from __future__ import annotations

import math

import numpy as np


def sq_dist(a, b) -> float:
    return sum((x - y) ** 2 for x, y in zip(a, b))


def fps(points, m, start=0):
    """Greedy farthest point sampling, lowest index on ties, O(N^2 m)."""
    picked = [start]
    while len(picked) < m:
        best, best_d = None, -1.0
        for i, p in enumerate(points):
            if i in picked:
                continue
            d = min(sq_dist(p, points[j]) for j in picked)
            if d > best_d:
                best, best_d = i, d
        picked.append(best)
    return picked


def knn(points, center, k):
    """Full sort by (squared distance, index), the center itself always first."""
    c = points[center]
    order = sorted(range(len(points)), key=lambda i: (i != center, sq_dist(points[i], c), i))
    return order[:k]


def dense_param_count(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def _in_box_bev(x, y, box):
    (cx, cy, _), (l, w, _), h = box
    dx, dy = x - cx, y - cy
    u = dx * math.cos(h) + dy * math.sin(h)
    v = -dx * math.sin(h) + dy * math.cos(h)
    return (abs(u) <= l / 2) & (abs(v) <= w / 2)


def monte_carlo_bev_iou(a, b, n=1_000_000, seed=0) -> float:
    """IoU of two rotated rectangles by uniform sampling of a bounding square.

    Boxes are ((cx, cy, cz), (l, w, h), heading).
    """
    rng = np.random.default_rng(seed)
    r = max(math.hypot(*a[1][:2]), math.hypot(*b[1][:2])) / 2
    x = rng.uniform(min(a[0][0], b[0][0]) - r, max(a[0][0], b[0][0]) + r, n)
    y = rng.uniform(min(a[0][1], b[0][1]) - r, max(a[0][1], b[0][1]) + r, n)
    ia, ib = _in_box_bev(x, y, a), _in_box_bev(x, y, b)
    union = int(np.count_nonzero(ia | ib))
    return np.count_nonzero(ia & ib) / union if union else 0.0
