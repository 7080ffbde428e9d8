"""Chamfer-type losses and the per-point loss gradients that feed backprop."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


def _as_points(P) -> np.ndarray:
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("empty point set")
    return P


def nearest(source, target, tree: cKDTree | None = None, workers: int = 1):
    """Distance and index of the nearest ``target`` point for each ``source`` point."""
    source, target = _as_points(source), _as_points(target)
    tree = tree or cKDTree(target)
    return tree.query(source, k=1, workers=workers)


def fitting_loss(P, Q) -> float:
    """Mean distance from each sample in P to its nearest target in Q."""
    return float(np.mean(nearest(P, Q)[0]))


def coverage_loss(P, Q) -> float:
    """Mean distance from each target in Q to its nearest sample in P."""
    return float(np.mean(nearest(Q, P)[0]))


def _boundary_partners(points, owner, workers=1):
    """For each boundary point, the nearest boundary point owned by another anchor."""
    n = len(points)
    tree = cKDTree(points)
    counts = np.bincount(owner)
    k = min(n, int(counts.max()) + 1)
    dist, idx = tree.query(points, k=k, workers=workers)
    dist, idx = dist.reshape(n, k), idx.reshape(n, k)
    other = owner[idx] != owner[:, None]
    first = np.argmax(other, axis=1)
    rows = np.arange(n)
    return dist[rows, first], idx[rows, first]


def boundary_loss(boundary_sets) -> float:
    """Mean over anchors of the mean distance from its boundary ring to the
    union of all other anchors' rings."""
    sets = [_as_points(s) for s in boundary_sets]
    M = len(sets)
    if M < 2:
        log.warning("boundary loss needs at least two anchors; returning 0")
        return 0.0
    points = np.concatenate(sets)
    owner = np.repeat(np.arange(M), [len(s) for s in sets])
    dist, _ = _boundary_partners(points, owner)
    per_anchor = np.bincount(owner, weights=dist, minlength=M) / np.bincount(owner, minlength=M)
    return float(np.mean(per_anchor))


def total_loss(L_f: float, L_c: float, L_b: float, weights) -> float:
    w_f, w_c, w_b = weights
    if min(weights) < 0:
        raise ValueError("loss weights must be non-negative")
    return w_f * L_f + w_c * L_c + w_b * L_b


def coverage_fraction(Q, P, tau: float) -> float:
    return float(np.mean(nearest(Q, P)[0] < tau))


@dataclass
class Assignments:
    """Nearest-neighbour correspondences frozen for one evaluation."""

    fit: np.ndarray        # sample -> target
    cover: np.ndarray      # target -> sample
    boundary: np.ndarray   # boundary point -> other anchor's boundary point


@dataclass
class TermGradients:
    L_f: float
    L_c: float
    L_b: float
    coverage_dist: np.ndarray
    # dL/d(point) for each unweighted term
    fit: np.ndarray
    cover: np.ndarray
    boundary: np.ndarray
    assignments: Assignments


def _unit_diff(a, b):
    diff = a - b
    dist = np.linalg.norm(diff, axis=1)
    safe = np.where(dist > 0.0, dist, 1.0)
    return dist, np.where((dist > 0.0)[:, None], diff / safe[:, None], 0.0)


def term_gradients(P, B, b_owner, M, Q, q_tree: cKDTree | None = None,
                   assignments: Assignments | None = None, workers: int = 1) -> TermGradients:
    """Loss values and per-point gradients for samples P and boundary points B.

    Correspondences are searched unless ``assignments`` is given, in which case
    they are reused unchanged.
    """
    if len(P) == 0:
        raise ValueError("empty point set")
    if assignments is None:
        q_tree = q_tree or cKDTree(Q)
        _, fit_idx = q_tree.query(P, k=1, workers=workers)
        _, cover_idx = cKDTree(P).query(Q, k=1, workers=workers)
        if M >= 2:
            _, b_idx = _boundary_partners(B, b_owner, workers)
        else:
            b_idx = np.zeros(0, dtype=np.intp)
        assignments = Assignments(fit_idx, cover_idx, b_idx)

    d_f, u_f = _unit_diff(P, Q[assignments.fit])
    L_f = float(np.mean(d_f))
    g_fit = u_f / len(P)

    d_c, u_c = _unit_diff(P[assignments.cover], Q)
    L_c = float(np.mean(d_c))
    g_cover = np.zeros_like(P)
    np.add.at(g_cover, assignments.cover, u_c / len(Q))

    g_bd = np.zeros_like(B)
    if M >= 2:
        d_b, u_b = _unit_diff(B, B[assignments.boundary])
        n_per = np.bincount(b_owner, minlength=M).astype(float)
        L_b = float(np.mean(np.bincount(b_owner, weights=d_b, minlength=M) / n_per))
        scale = (1.0 / (M * n_per[b_owner]))[:, None]
        g_bd += scale * u_b
        np.add.at(g_bd, assignments.boundary, -scale * u_b)
    else:
        L_b = 0.0
    return TermGradients(L_f, L_c, L_b, d_c, g_fit, g_cover, g_bd, assignments)
