"""Point-set reconstruction metrics (Chamfer, F-score, Hausdorff, normal cosine)."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_TAU = 0.01


def _points(A) -> np.ndarray:
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    if len(A) == 0:
        raise ValueError("empty point set")
    return A


def _directed(A, B, workers=1):
    A, B = _points(A), _points(B)
    return cKDTree(B).query(A, k=1, workers=workers)


def chamfer_l1(A, B, workers: int = 1) -> float:
    """Average of the two mean nearest-neighbour Euclidean distances."""
    d_ab, _ = _directed(A, B, workers)
    d_ba, _ = _directed(B, A, workers)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def chamfer_l2(A, B, workers: int = 1) -> float:
    d_ab, _ = _directed(A, B, workers)
    d_ba, _ = _directed(B, A, workers)
    return 0.5 * (float(np.mean(d_ab ** 2)) + float(np.mean(d_ba ** 2)))


def fscore(A, B, tau: float = DEFAULT_TAU, workers: int = 1) -> float:
    """Harmonic mean of precision (A near B) and recall (B near A) at radius tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    d_ab, _ = _directed(A, B, workers)
    d_ba, _ = _directed(B, A, workers)
    precision = float(np.mean(d_ab < tau))
    recall = float(np.mean(d_ba < tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def hausdorff(A, B, workers: int = 1) -> float:
    d_ab, _ = _directed(A, B, workers)
    d_ba, _ = _directed(B, A, workers)
    return max(float(np.max(d_ab)), float(np.max(d_ba)))


def normal_cosine(A, nA, B, nB, workers: int = 1) -> float:
    """Mean |cos| between normals of nearest-neighbour pairs, both directions averaged."""
    nA = np.asarray(nA, dtype=float).reshape(-1, 3)
    nB = np.asarray(nB, dtype=float).reshape(-1, 3)
    nA = nA / np.linalg.norm(nA, axis=1, keepdims=True)
    nB = nB / np.linalg.norm(nB, axis=1, keepdims=True)
    _, i_ab = _directed(A, B, workers)
    _, i_ba = _directed(B, A, workers)
    c_ab = np.abs(np.sum(nA * nB[i_ab], axis=1))
    c_ba = np.abs(np.sum(nB * nA[i_ba], axis=1))
    return 0.5 * (float(np.mean(c_ab)) + float(np.mean(c_ba)))


def evaluate(pred, gt, tau: float = DEFAULT_TAU, pred_normals=None, gt_normals=None,
             workers: int = 1) -> dict:
    """All metrics in the reporting units used by ``mash eval``."""
    out = {
        "cd_l1_x1000": 1000.0 * chamfer_l1(pred, gt, workers),
        "cd_l2_x1000": 1000.0 * chamfer_l2(pred, gt, workers),
        "fscore": fscore(pred, gt, tau, workers),
        "hausdorff": hausdorff(pred, gt, workers),
        "tau": tau,
        "n_pred": int(len(_points(pred))),
        "n_gt": int(len(_points(gt))),
    }
    if pred_normals is not None and gt_normals is not None:
        out["s_cos"] = normal_cosine(pred, pred_normals, gt, gt_normals, workers)
    else:
        out["s_cos"] = None
    return out
