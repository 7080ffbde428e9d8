"""Globally consistent normals for MASH samples.

Each patch already has internally consistent normals, so only one sign per
patch has to be chosen.  Signs are propagated over a maximum spanning tree of
the patch-centroid k-NN graph; afterwards normals near patch boundaries are
slerped towards the normal of the nearest reference sample.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree

from .model import MashModel
from .pointcloud import farthest_point_sampling
from .sampler import SampleSet, model_normals, slerp

log = logging.getLogger(__name__)

GRAPH_K = 8
REFERENCE_FRACTION = 0.1
REFERENCE_MIN = 512


@dataclass
class OrientedSamples:
    points: np.ndarray
    normals: np.ndarray
    anchor: np.ndarray
    omega: np.ndarray
    antiparallel: int = 0


def _patch_summary(points, normals, owner, M):
    counts = np.bincount(owner, minlength=M).astype(float)
    present = counts > 0
    safe = np.where(present, counts, 1.0)
    centroid = np.stack([np.bincount(owner, weights=points[:, k], minlength=M) for k in range(3)], 1) / safe[:, None]
    mean_n = np.stack([np.bincount(owner, weights=normals[:, k], minlength=M) for k in range(3)], 1)
    norm = np.linalg.norm(mean_n, axis=1)
    mean_n = mean_n / np.where(norm > 0, norm, 1.0)[:, None]
    return centroid, mean_n, present


def orient_patches(model: MashModel, samples: SampleSet, k: int = GRAPH_K, seed_sign: float = 1.0) -> np.ndarray:
    """One +1/-1 flip per anchor making adjacent patches agree.

    Within each connected component the seed is the patch with the highest
    centroid; it is oriented so its mean normal points up (+z), then multiplied
    by ``seed_sign``.
    """
    if samples.normals is None:
        raise ValueError("samples carry no normals")
    M = model.M
    if M == 1:
        return np.array([seed_sign])
    centroid, mean_n, present = _patch_summary(samples.points, samples.normals, samples.anchor, M)
    nodes = np.flatnonzero(present)
    signs = np.full(M, seed_sign, dtype=float)
    if len(nodes) < 2:
        return signs

    kk = min(k + 1, len(nodes))
    _, nbr = cKDTree(centroid[nodes]).query(centroid[nodes], k=kk)
    rows = np.repeat(np.arange(len(nodes)), kk - 1)
    cols = nbr[:, 1:].ravel()
    agree = np.abs(np.sum(mean_n[nodes][rows] * mean_n[nodes][cols], axis=1))
    # max spanning tree on |cos| == min spanning tree on 2 - |cos| (kept > 0)
    W = coo_matrix((2.0 - agree, (rows, cols)), shape=(len(nodes), len(nodes))).tocsr()
    W = W.maximum(W.T)
    tree = minimum_spanning_tree(W)
    tree = tree + tree.T
    n_comp, labels = connected_components(tree, directed=False)
    if n_comp > 1:
        log.warning("patch graph has %d components; orienting each separately", n_comp)

    tree = tree.tocsr()
    for comp in range(n_comp):
        members = np.flatnonzero(labels == comp)
        seed = members[np.argmax(centroid[nodes[members], 2])]
        s0 = 1.0 if mean_n[nodes[seed], 2] >= 0 else -1.0
        local = {seed: s0}
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            for j in tree.indices[tree.indptr[i]:tree.indptr[i + 1]]:
                if j in local:
                    continue
                dot = float(mean_n[nodes[i]] @ mean_n[nodes[j]])
                local[j] = local[i] * (1.0 if dot >= 0 else -1.0)
                queue.append(j)
        for i, s in local.items():
            signs[nodes[i]] = s * seed_sign
    return signs


def blend_normals(samples: SampleSet, ref_points, ref_normals) -> OrientedSamples:
    """slerp(n_src, n_ref, sqrt(omega)) with n_ref taken from the nearest reference point."""
    n_src = samples.normals
    _, idx = cKDTree(ref_points).query(samples.points, k=1)
    n_ref = np.asarray(ref_normals, dtype=float)[idx]
    t = np.sqrt(np.clip(samples.omega, 0.0, 1.0))
    anti = np.sum(n_src * n_ref, axis=1) < -1.0 + 1e-9
    out = slerp(n_src, n_ref, t)
    out[anti] = n_src[anti]
    return OrientedSamples(samples.points, out, samples.anchor, samples.omega, int(anti.sum()))


def reference_subset(n_points: int, points, rng: np.random.Generator | None = None) -> np.ndarray:
    n = min(n_points, max(REFERENCE_MIN, int(round(REFERENCE_FRACTION * n_points))))
    first = 0 if rng is None else int(rng.integers(n_points))
    return farthest_point_sampling(points, n, first)


def orient_samples(model: MashModel, samples: SampleSet, seed_sign: float = 1.0,
                   rng: np.random.Generator | None = None) -> OrientedSamples:
    """Per-patch normals, global sign consistency and boundary blending."""
    normals = model_normals(model, samples.rays, samples.points)
    samples = SampleSet(samples.points, samples.rays, samples.boundary_points,
                        samples.boundary_anchor, normals, _M=model.M)
    signs = orient_patches(model, samples, seed_sign=seed_sign)
    samples.normals = normals * signs[samples.anchor][:, None]
    ref = reference_subset(len(samples.points), samples.points, rng)
    return blend_normals(samples, samples.points[ref], samples.normals[ref])
