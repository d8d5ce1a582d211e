"""Density-based clustering for mask outlier rejection.

Classic DBSCAN over 2D points with the Euclidean metric. A point's
eps-neighborhood includes the point itself; points whose neighborhood
reaches min_pts are core points, density-reachable sets form clusters,
everything else is noise (label -1).

Neighbor search buckets points into a uniform grid with cell edge eps,
so only the 3x3 surrounding cells need scanning. Results are identical
to a brute-force scan; iteration order is fixed by point index, so
labels are deterministic.
"""

from __future__ import annotations

import numpy as np


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster (N, 2) points; returns int labels, -1 for noise."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    if eps <= 0 or min_pts < 1:
        raise ValueError(f"need eps > 0 and min_pts >= 1, got {eps}, {min_pts}")

    cells: dict[tuple[int, int], list[int]] = {}
    keys = np.floor(points / eps).astype(np.int64)
    for i in range(n):
        cells.setdefault((int(keys[i, 0]), int(keys[i, 1])), []).append(i)

    eps2 = eps * eps

    def neighbors(i: int) -> np.ndarray:
        ky, kx = int(keys[i, 0]), int(keys[i, 1])
        cand: list[int] = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                cand.extend(cells.get((ky + dy, kx + dx), ()))
        cand_arr = np.array(cand, dtype=np.int64)
        d2 = np.sum((points[cand_arr] - points[i]) ** 2, axis=1)
        hits = cand_arr[d2 <= eps2]
        hits.sort()
        return hits

    cluster = 0
    visited = np.zeros(n, dtype=bool)
    for i in range(n):
        if visited[i]:
            continue
        visited[i] = True
        seed = neighbors(i)
        if seed.shape[0] < min_pts:
            continue  # noise unless a later cluster absorbs it as border
        labels[i] = cluster
        queue = [j for j in seed if j != i]
        while queue:
            j = queue.pop()
            if labels[j] == -1:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            reach = neighbors(j)
            if reach.shape[0] >= min_pts:
                labels[j] = cluster
                queue.extend(r for r in reach if not visited[r]
                             or labels[r] == -1)
        cluster += 1
    return labels
