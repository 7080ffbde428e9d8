"""Differentiable MASH fitting: initialisation, analytic gradients, two-stage schedule."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import sampler
from .losses import Assignments, term_gradients
from .model import MashModel, canonical_rotvec
from .pointcloud import estimate_normals, farthest_point_sampling, mean_nn_spacing
from .sh import num_coeffs

log = logging.getLogger(__name__)

Y00 = 0.5 / np.sqrt(np.pi)
COVERAGE_THRESHOLD = 0.8
# floor on the nearest-neighbour spacing so degenerate clouds keep a usable scale
MIN_SPACING = 1e-3

REPORT_FIELDS = ("iteration", "L_f", "L_c", "L_b", "L", "wf", "wc", "wb", "coverage", "stage", "ms")


@dataclass
class FitConfig:
    M: int = 400
    L: int = 2
    K: int = 3
    n_dir: int = 400
    n_bd: int = sampler.DEFAULT_N_BD
    max_iters: int = 2000
    d_init: float | None = None         # default: 2x mean NN spacing of the target
    coverage_tau: float | None = None   # default: 2x mean NN spacing of the target
    stage1_ramp: int | None = None      # default: min(500, max_iters / 4)
    stage2_ramp: int | None = None      # default: min(500, remaining / 2)
    lr_pose: float = 2e-3
    lr_sh: float = 5e-3
    lr_mask: float = 5e-3
    lr_final: float = 1.0               # lr multiplier reached at max_iters (exponential); 1 = constant
    conv_window: int = 50
    conv_tol: float = 1e-4
    conv_atol: float = 1e-6             # absolute floor so losses heading to 0 can converge
    normal_k: int = 16
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.max_iters < 1 or self.n_dir < 16 or self.n_bd < 3:
            raise ValueError("max_iters >= 1, n_dir >= 16 and n_bd >= 3 are required")
        for name in ("d_init", "coverage_tau", "lr_pose", "lr_sh", "lr_mask", "lr_final", "conv_tol", "conv_atol"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class IterRecord:
    iteration: int
    L_f: float
    L_c: float
    L_b: float
    L: float
    wf: float
    wc: float
    wb: float
    coverage: float
    stage: int
    ms: float


@dataclass
class FitReport:
    records: list[IterRecord] = field(default_factory=list)
    converged: bool = False
    stage2_start: int | None = None
    mask_reinflations: int = 0

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, stream) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for r in self.records:
            writer.writerow([r.iteration, repr(r.L_f), repr(r.L_c), repr(r.L_b), repr(r.L),
                             r.wf, r.wc, r.wb, repr(r.coverage), r.stage, f"{r.ms:.3f}"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


class Adam:
    """Bias-corrected Adam over a flat parameter vector with per-entry learning rates."""

    def __init__(self, lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = np.asarray(lr, dtype=float)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(self.lr)
        self.v = np.zeros_like(self.lr)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, scale: float = 1.0) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - scale * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def learning_rates(model: MashModel, cfg: FitConfig) -> np.ndarray:
    block = np.concatenate([np.full(6, cfg.lr_pose), np.full(num_coeffs(model.L), cfg.lr_sh),
                            np.full(2 * model.K + 1, cfg.lr_mask)])
    return np.tile(block, model.M)


def rotvec_between(a, b) -> np.ndarray:
    """Rotation vectors turning unit vectors ``a`` onto unit vectors ``b`` (rows)."""
    a = np.broadcast_to(np.asarray(a, dtype=float), np.shape(b))
    b = np.asarray(b, dtype=float)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis, axis=1)
    c = np.sum(a * b, axis=1)
    angle = np.arctan2(s, c)
    out = axis / np.where(s > 1e-12, s, 1.0)[:, None] * angle[:, None]
    # antiparallel: any axis perpendicular to a
    anti = (s <= 1e-12) & (c < 0)
    if np.any(anti):
        perp = np.cross(a[anti], np.array([1.0, 0.0, 0.0]))
        bad = np.linalg.norm(perp, axis=1) < 1e-6
        perp[bad] = np.cross(a[anti][bad], np.array([0.0, 1.0, 0.0]))
        perp /= np.linalg.norm(perp, axis=1, keepdims=True)
        out[anti] = perp * np.pi
    return out


def anchor_standoff(d_init: float) -> float:
    """Anchor-to-surface offset that puts the initial patch centre on its source point.

    With C_0^0 = d_init / Y_0^0 the inversion (centre -C_0^0 z, radius 2 C_0^0)
    sends the constant-distance cap apex to z = C_0^0 (4 / (1 + Y_0^0) - 1).
    """
    c0 = d_init / Y00
    return c0 * (4.0 / (1.0 + Y00) - 1.0)


def target_scale(Q, workers: int = 1) -> float:
    return max(mean_nn_spacing(Q, workers=workers), MIN_SPACING)


def initialize(Q, cfg: FitConfig, rng: np.random.Generator | None = None) -> MashModel:
    """Anchors at FPS points of ``Q``, pushed out along local normals by d_init
    and looking back at their source point."""
    Q = np.asarray(Q, dtype=float)
    if len(Q) < cfg.M:
        raise ValueError(f"target has {len(Q)} points, fewer than M={cfg.M}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    spacing = target_scale(Q, cfg.workers)
    d_init = cfg.d_init if cfg.d_init is not None else 2.0 * spacing

    first = int(rng.integers(len(Q)))
    src = Q[farthest_point_sampling(Q, cfg.M, first)]
    normals, centroid = estimate_normals(Q, src, k=cfg.normal_k, workers=cfg.workers)
    side = np.sum(normals * (src - centroid), axis=1)
    # flat neighbourhoods: the local centroid sits on the point, use the global one
    flat = np.abs(side) < 1e-6 * spacing
    side = np.where(flat, np.sum(normals * (src - Q.mean(axis=0)), axis=1), side)
    normals = np.where((side < 0)[:, None], -normals, normals)

    positions = src + anchor_standoff(d_init) * normals
    rotvecs = rotvec_between(np.array([0.0, 0.0, 1.0]), -normals)
    model = MashModel.zeros(cfg.M, cfg.L, cfg.K, cfg.n_dir)
    model.positions = positions
    model.rotvecs = rotvecs
    model.sh_coeffs[:, 0] = d_init / Y00
    return model


def _stage1_ramp(cfg: FitConfig) -> int:
    return max(1, cfg.stage1_ramp if cfg.stage1_ramp is not None else min(500, cfg.max_iters // 4))


def _stage2_ramp(cfg: FitConfig, start: int) -> int:
    if cfg.stage2_ramp is not None:
        return max(1, cfg.stage2_ramp)
    return max(1, min(500, (cfg.max_iters - start) // 2))


def schedule_weights(it: int, cfg: FitConfig, stage2_start: int | None) -> tuple[float, float, float]:
    """(w_f, w_c, w_b) at iteration ``it``."""
    wc = 0.5 + 0.5 * min(1.0, it / _stage1_ramp(cfg))
    if stage2_start is None:
        return 1.0, wc, 0.0
    wb = min(1.0, (it - stage2_start) / _stage2_ramp(cfg, stage2_start))
    return 1.0, wc, wb


@dataclass
class Evaluation:
    L_f: float
    L_c: float
    L_b: float
    L: float
    grad: np.ndarray          # (M, anchor_size)
    coverage_dist: np.ndarray
    assignments: Assignments
    rays: sampler.RayBatch


def loss_gradients(model: MashModel, Q, weights=(1.0, 1.0, 1.0), rays: sampler.RayBatch | None = None,
                   n_bd: int = sampler.DEFAULT_N_BD, q_tree: cKDTree | None = None,
                   assignments: Assignments | None = None, workers: int = 1,
                   check_finite: bool = True) -> Evaluation:
    """Total loss and its exact gradient for a fixed ray selection.

    Nearest-neighbour correspondences are searched afresh unless
    ``assignments`` is passed.  ``Evaluation.grad.ravel()`` is laid out like
    :meth:`MashModel.flatten`.
    """
    Q = np.asarray(Q, dtype=float)
    if rays is None:
        rays = sampler.select_rays(model)
    if len(rays) == 0:
        raise ValueError("empty point set")
    P, ctx_p = sampler.forward(model, rays.anchor, rays.omega, rays.phi, cache=True)
    b_idx, b_w, b_phi = sampler.boundary_rays(model.M, n_bd)
    B, ctx_b = sampler.forward(model, b_idx, b_w, b_phi, cache=True)
    if check_finite and not (np.all(np.isfinite(P)) and np.all(np.isfinite(B))):
        bad = np.concatenate([rays.anchor[~np.all(np.isfinite(P), axis=1)], b_idx[~np.all(np.isfinite(B), axis=1)]])
        _raise_non_finite(model, anchors=bad)
    terms = term_gradients(P, B, b_idx, model.M, Q, q_tree, assignments, workers)

    w_f, w_c, w_b = weights
    grad = sampler.backward(model, ctx_p, w_f * terms.fit + w_c * terms.cover)
    if w_b > 0.0 and model.M >= 2:
        grad = grad + sampler.backward(model, ctx_b, w_b * terms.boundary)
    if check_finite and not np.all(np.isfinite(grad)):
        _raise_non_finite(model, grad)
    L = w_f * terms.L_f + w_c * terms.L_c + w_b * terms.L_b
    return Evaluation(terms.L_f, terms.L_c, terms.L_b, L, grad, terms.coverage_dist,
                      terms.assignments, rays)


def _raise_non_finite(model: MashModel, grad=None, anchors=None) -> None:
    if grad is not None:
        a, k = np.argwhere(~np.isfinite(grad))[0]
        raise FloatingPointError(f"non-finite gradient at anchor {a}, parameter {k}")
    blocks = model.flatten().reshape(model.M, -1)
    bad = np.argwhere(~np.isfinite(blocks))
    if len(bad):
        a, k = bad[0]
        raise FloatingPointError(f"non-finite gradient at anchor {a}, parameter {k}")
    raise FloatingPointError(f"non-finite samples at anchor {int(np.min(anchors))}")


def _select_nonempty(model: MashModel, presamples, report: FitReport) -> sampler.RayBatch:
    for _ in range(1000):
        rays = sampler.select_rays(model, presamples)
        empty = rays.counts(model.M) == 0
        if not np.any(empty):
            return rays
        model.mask_coeffs[empty, 0] += 0.5
        report.mask_reinflations += int(empty.sum())
        log.info("re-inflated %d empty masks", int(empty.sum()))
    raise RuntimeError("could not recover empty vision masks")


def _converged(L_hist: list[float], w_hist: list[tuple], window: int, tol: float, atol: float = 0.0) -> bool:
    if len(L_hist) < 2 * window:
        return False
    # ramps change L by construction; only judge windows with fixed weights
    if any(w != w_hist[-1] for w in w_hist[-2 * window:]):
        return False
    prev = float(np.mean(L_hist[-2 * window:-window]))
    cur = float(np.mean(L_hist[-window:]))
    return abs(cur - prev) <= max(tol * abs(prev), atol)


def fit(Q, cfg: FitConfig, callback=None) -> tuple[MashModel, FitReport]:
    """Fit a MASH model to the (normalised) target cloud ``Q``."""
    Q = np.asarray(Q, dtype=float)
    rng = np.random.default_rng(cfg.seed)
    model = initialize(Q, cfg, rng)
    q_tree = cKDTree(Q)
    tau = cfg.coverage_tau if cfg.coverage_tau is not None else 2.0 * target_scale(Q, cfg.workers)
    presamples = sampler.fibonacci_presample(cfg.n_dir)
    opt = Adam(learning_rates(model, cfg))
    report = FitReport()
    L_hist: list[float] = []
    w_hist: list[tuple] = []
    stage2_start = None

    for it in range(cfg.max_iters):
        t0 = time.perf_counter()
        rays = _select_nonempty(model, presamples, report)
        P, ctx_p = sampler.forward(model, rays.anchor, rays.omega, rays.phi, cache=True)
        b_idx, b_w, b_phi = sampler.boundary_rays(model.M, cfg.n_bd)
        B, ctx_b = sampler.forward(model, b_idx, b_w, b_phi, cache=True)
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(B))):
            _raise_non_finite(model, anchors=np.concatenate([rays.anchor[~np.all(np.isfinite(P), axis=1)],
                                                             b_idx[~np.all(np.isfinite(B), axis=1)]]))
        terms = term_gradients(P, B, b_idx, model.M, Q, q_tree, workers=cfg.workers)
        coverage = float(np.mean(terms.coverage_dist < tau))
        if stage2_start is None and coverage >= COVERAGE_THRESHOLD:
            stage2_start = it
            report.stage2_start = it
            log.info("stage 2 from iteration %d (coverage %.3f)", it, coverage)
        w_f, w_c, w_b = schedule_weights(it, cfg, stage2_start)

        grad = sampler.backward(model, ctx_p, w_f * terms.fit + w_c * terms.cover)
        if w_b > 0.0 and model.M >= 2:
            grad = grad + sampler.backward(model, ctx_b, w_b * terms.boundary)
        if not np.all(np.isfinite(grad)):
            _raise_non_finite(model, grad)

        L = w_f * terms.L_f + w_c * terms.L_c + w_b * terms.L_b
        flat = opt.step(model.flatten(), grad.ravel(), cfg.lr_final ** (it / cfg.max_iters))
        model = model.with_flat(flat)
        model.rotvecs = canonical_rotvec(model.rotvecs)

        L_hist.append(L)
        w_hist.append((w_f, w_c, w_b))
        rec = IterRecord(it, terms.L_f, terms.L_c, terms.L_b, L, w_f, w_c, w_b, coverage,
                         1 if stage2_start is None else 2, 1e3 * (time.perf_counter() - t0))
        report.records.append(rec)
        if callback is not None:
            callback(rec)
        if _converged(L_hist, w_hist, cfg.conv_window, cfg.conv_tol, cfg.conv_atol):
            report.converged = True
            break
    return model, report
