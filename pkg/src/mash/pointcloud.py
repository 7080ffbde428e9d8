"""Small point-cloud helpers: FPS, spacing statistics, PCA normals."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def farthest_point_sampling(points, n: int, first: int = 0) -> np.ndarray:
    """Indices of ``n`` points chosen greedily by max-min distance.

    Ties go to the lowest index (``argmax`` returns the first maximum).
    """
    points = np.asarray(points, dtype=float)
    if n > len(points):
        raise ValueError(f"cannot pick {n} points from {len(points)}")
    chosen = np.empty(n, dtype=np.intp)
    chosen[0] = first
    dist = np.sum((points - points[first]) ** 2, axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.sum((points - points[chosen[i]]) ** 2, axis=1))
    return chosen


def mean_nn_spacing(points, tree: cKDTree | None = None, workers: int = 1) -> float:
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    tree = tree or cKDTree(points)
    dist, _ = tree.query(points, k=2, workers=workers)
    return float(np.mean(dist[:, 1]))


def estimate_normals(points, query, k: int = 16, workers: int = 1):
    """PCA normals at ``query`` from the k nearest ``points``.

    Returns (normals, local centroids); normals are unsigned.
    """
    points = np.asarray(points, dtype=float)
    query = np.asarray(query, dtype=float).reshape(-1, 3)
    k = min(k, len(points))
    _, nbr = cKDTree(points).query(query, k=k, workers=workers)
    nbr = np.asarray(nbr).reshape(len(query), k)
    local = points[nbr]
    centroid = local.mean(axis=1)
    centered = local - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0], centroid
