"""Point sampling on MASH patches.

Rays are pre-sampled once on the unit sphere (Fibonacci lattice), filtered by
each anchor's vision mask, mapped to the patch surface through the spherical
distance, bent by the anchored inverse transformation and finally posed in
world space.  :func:`forward` and :func:`backward` are the vectorised core used
by the optimiser; the per-anchor functions wrap them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Anchor, MashModel, mask_angle, mask_angle_grad, rotation_matrix, rotation_matrix_grad
from .sh import eval_basis_grad

INV_EPS = 1e-8
SLERP_EPS = 1e-7
DEFAULT_N_BD = 36
_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class RayParam:
    omega: float
    phi: float
    theta_pre: float


@dataclass
class RayBatch:
    """Flat batch of rays over several anchors."""

    anchor: np.ndarray
    omega: np.ndarray
    phi: np.ndarray
    theta_pre: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)

    def counts(self, M: int) -> np.ndarray:
        return np.bincount(self.anchor, minlength=M)

    def params(self) -> list[RayParam]:
        return [RayParam(float(w), float(p), float(t))
                for w, p, t in zip(self.omega, self.phi, self.theta_pre)]


@dataclass
class SampleSet:
    """Surface and boundary samples for every anchor, stored flat.

    ``anchor`` / ``boundary_anchor`` hold the owning anchor index of each row.
    """

    points: np.ndarray
    rays: RayBatch
    boundary_points: np.ndarray
    boundary_anchor: np.ndarray
    normals: np.ndarray | None = None
    _M: int = field(default=0, repr=False)

    @property
    def anchor(self) -> np.ndarray:
        return self.rays.anchor

    @property
    def omega(self) -> np.ndarray:
        return self.rays.omega

    def for_anchor(self, i: int) -> dict:
        sel = self.rays.anchor == i
        out = {
            "points": self.points[sel],
            "ray_params": RayBatch(self.rays.anchor[sel], self.rays.omega[sel],
                                   self.rays.phi[sel], self.rays.theta_pre[sel]).params(),
            "boundary_points": self.boundary_points[self.boundary_anchor == i],
        }
        if self.normals is not None:
            out["normals"] = self.normals[sel]
        return out


def fibonacci_presample(n_dir: int) -> tuple[np.ndarray, np.ndarray]:
    """Fibonacci lattice directions as (theta, phi) arrays, phi reduced to [0, 2pi)."""
    if n_dir < 1:
        raise ValueError("n_dir must be positive")
    j = np.arange(1, n_dir + 1, dtype=float)
    theta = np.arccos(1.0 - (2.0 * j - 1.0) / n_dir)
    phi = np.mod((1.0 + np.sqrt(5.0)) * np.pi * (j - 0.5), 2.0 * np.pi)
    return theta, phi


def select_rays(model: MashModel, presamples=None) -> RayBatch:
    """Keep, for every anchor, the pre-sampled rays inside its vision mask.

    Not differentiable; run once per optimisation step.
    """
    theta, phi = presamples if presamples is not None else fibonacci_presample(model.n_dir)
    alpha = mask_angle(model.mask_coeffs[:, None, :], phi[None, :])
    with np.errstate(over="ignore"):   # near-closed masks give inf, i.e. rejected
        omega = theta[None, :] / alpha
    ai, ji = np.nonzero(omega <= 1.0)
    return RayBatch(ai, omega[ai, ji], phi[ji], theta[ji])


def filter_in_mask(anchor: Anchor, presamples) -> list[RayParam]:
    theta, phi = presamples
    with np.errstate(over="ignore"):
        omega = theta / mask_angle(anchor, phi)
    keep = omega <= 1.0
    return [RayParam(float(w), float(p), float(t))
            for w, p, t in zip(omega[keep], phi[keep], theta[keep])]


def slerp(a, b, t):
    """Spherical interpolation of unit vectors, rows broadcast with ``t``.

    Falls back to normalised linear interpolation when the endpoints are
    closer than ``SLERP_EPS`` radians.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = np.asarray(t, dtype=float)[..., None]
    dot = np.clip(np.sum(a * b, axis=-1, keepdims=True), -1.0, 1.0)
    ang = np.arccos(dot)
    near = ang < SLERP_EPS
    s = np.sin(np.where(near, 1.0, ang))
    out = np.where(near, (1.0 - t) * a + t * b,
                   (np.sin((1.0 - t) * ang) * a + np.sin(t * ang) * b) / s)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def ray_direction(anchor: Anchor, ray: RayParam) -> np.ndarray:
    """Anchor-local unit ray slerp(z, r_phi, omega)."""
    alpha = float(mask_angle(anchor, ray.phi))
    r_phi = np.array([np.sin(alpha) * np.cos(ray.phi), np.sin(alpha) * np.sin(ray.phi), np.cos(alpha)])
    return slerp(_Z, r_phi, ray.omega)


def _inversion(q, c0):
    O = np.zeros_like(q)
    O[..., 2] = -c0
    u = q - O
    s2 = np.sum(u * u, axis=-1)
    clamped = s2 < INV_EPS * INV_EPS
    s2 = np.where(clamped, INV_EPS * INV_EPS, s2)
    R2 = 4.0 * c0 * c0
    return O + (R2 / s2)[..., None] * u, u, s2, clamped, R2


def inverse_transform_point(anchor: Anchor, q_local) -> np.ndarray:
    """Sphere inversion about (0, 0, -C_0^0) with radius 2 C_0^0 (anchor-local)."""
    c0 = float(np.asarray(anchor.sh_coeffs)[0])
    return _inversion(np.asarray(q_local, dtype=float), c0)[0]


def forward(model: MashModel, anchor_idx, omega, phi, invert: bool = True, cache: bool = False):
    """World-space points for rays ``(anchor_idx, omega, phi)``.

    With ``cache`` a dict of intermediates for :func:`backward` is returned too.
    """
    anchor_idx = np.asarray(anchor_idx, dtype=np.intp)
    omega = np.asarray(omega, dtype=float)
    phi = np.asarray(phi, dtype=float)
    C = model.sh_coeffs[anchor_idx]
    alpha, dalpha_dV, _ = mask_angle_grad(model.mask_coeffs[anchor_idx], phi)
    theta = omega * alpha
    Y, dYt, _ = eval_basis_grad(model.L, theta, phi)
    d = np.sum(C * Y, axis=1)
    st, ct = np.sin(theta), np.cos(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    r = np.stack([st * cp, st * sp, ct], axis=1)
    q = d[:, None] * r
    if invert:
        f, u, s2, clamped, R2 = _inversion(q, C[:, 0])
    else:
        f = q
    Rm = rotation_matrix(model.rotvecs)[anchor_idx]
    world = model.positions[anchor_idx] + np.einsum("nij,nj->ni", Rm, f)
    if not cache:
        return world
    ctx = dict(idx=anchor_idx, omega=omega, phi=phi, C=C, dalpha_dV=dalpha_dV, theta=theta,
               Y=Y, dYt=dYt, d=d, st=st, ct=ct, cp=cp, sp=sp, r=r, f=f, Rm=Rm, invert=invert)
    if invert:
        ctx.update(u=u, s2=s2, clamped=clamped, R2=R2)
    return world, ctx


def _segment_sum(idx, values, M):
    values = values.reshape(len(idx), -1)
    return np.stack([np.bincount(idx, weights=values[:, k], minlength=M)
                     for k in range(values.shape[1])], axis=1)


def backward(model: MashModel, ctx: dict, grad_world) -> np.ndarray:
    """Pull dLoss/dworld back to parameters; returns an (M, anchor_size) array
    laid out like :meth:`MashModel.flatten` blocks."""
    g = np.asarray(grad_world, dtype=float)
    idx, M = ctx["idx"], model.M
    f, Rm = ctx["f"], ctx["Rm"]

    dR = rotation_matrix_grad(model.rotvecs)[idx]
    gv = np.einsum("nk,nikl,nl->ni", g, dR, f)
    gf = np.einsum("nji,nj->ni", Rm, g)

    if ctx["invert"]:
        u, s2, R2 = ctx["u"], ctx["s2"], ctx["R2"]
        c0 = ctx["C"][:, 0]
        ug = np.sum(u * gf, axis=1)
        gu = (R2 / s2)[:, None] * gf - np.where(ctx["clamped"], 0.0, 2.0 * R2 * ug / (s2 * s2))[:, None] * u
        gc0 = -gf[:, 2] + 8.0 * c0 * ug / s2 + gu[:, 2]
        gq = gu
    else:
        gc0 = 0.0
        gq = gf

    r, d = ctx["r"], ctx["d"]
    gd = np.sum(gq * r, axis=1)
    gC = gd[:, None] * ctx["Y"]
    gC[:, 0] += gc0
    st, ct, cp, sp = ctx["st"], ctx["ct"], ctx["cp"], ctx["sp"]
    dr_dt = np.stack([ct * cp, ct * sp, -st], axis=1)
    dd_dt = np.sum(ctx["C"] * ctx["dYt"], axis=1)
    gtheta = gd * dd_dt + d * np.sum(gq * dr_dt, axis=1)
    gV = (ctx["omega"] * gtheta)[:, None] * ctx["dalpha_dV"]

    per_point = np.concatenate([g, gv, gC, gV], axis=1)
    return _segment_sum(idx, per_point, M)


def sample_surface(model: MashModel, anchor_index: int, rays, invert: bool = True) -> np.ndarray:
    if isinstance(rays, RayBatch):
        omega, phi = rays.omega, rays.phi
    else:
        omega = np.array([r.omega for r in rays], dtype=float)
        phi = np.array([r.phi for r in rays], dtype=float)
    idx = np.full(len(omega), anchor_index, dtype=np.intp)
    return forward(model, idx, omega, phi, invert=invert)


def boundary_rays(M: int, n_bd: int = DEFAULT_N_BD):
    """(anchor, omega, phi) for n_bd evenly spaced omega = 1 rays per anchor."""
    if n_bd < 3:
        raise ValueError("n_bd must be >= 3")
    phi = 2.0 * np.pi * np.arange(n_bd) / n_bd
    return np.repeat(np.arange(M), n_bd), np.ones(M * n_bd), np.tile(phi, M)


def sample_boundary(model: MashModel, anchor_index: int, n_bd: int = DEFAULT_N_BD,
                    invert: bool = True) -> np.ndarray:
    _, omega, phi = boundary_rays(1, n_bd)
    idx = np.full(n_bd, anchor_index, dtype=np.intp)
    return forward(model, idx, omega, phi, invert=invert)


def sample_model(model: MashModel, n_bd: int = DEFAULT_N_BD, rays: RayBatch | None = None,
                 presamples=None) -> SampleSet:
    """Samples for all anchors with the current mask selection."""
    if rays is None:
        rays = select_rays(model, presamples)
    pts = forward(model, rays.anchor, rays.omega, rays.phi)
    bidx, bw, bphi = boundary_rays(model.M, n_bd)
    bpts = forward(model, bidx, bw, bphi)
    return SampleSet(pts, rays, bpts, bidx, _M=model.M)


def _tangents(model: MashModel, anchor_idx, omega, phi, invert: bool = True):
    """World-space d(point)/d(omega) and d(point)/d(phi)."""
    anchor_idx = np.asarray(anchor_idx, dtype=np.intp)
    omega = np.asarray(omega, dtype=float)
    phi = np.asarray(phi, dtype=float)
    C = model.sh_coeffs[anchor_idx]
    alpha, _, dalpha = mask_angle_grad(model.mask_coeffs[anchor_idx], phi)
    theta = omega * alpha
    Y, dYt, dYp = eval_basis_grad(model.L, theta, phi)
    d = np.sum(C * Y, axis=1)
    d_t = np.sum(C * dYt, axis=1)
    d_p = np.sum(C * dYp, axis=1)
    st, ct, cp, sp = np.sin(theta), np.cos(theta), np.cos(phi), np.sin(phi)
    r = np.stack([st * cp, st * sp, ct], axis=1)
    r_t = np.stack([ct * cp, ct * sp, -st], axis=1)
    r_p = np.stack([-st * sp, st * cp, np.zeros_like(st)], axis=1)
    q = d[:, None] * r
    q_t = d_t[:, None] * r + d[:, None] * r_t
    q_p = d_p[:, None] * r + d[:, None] * r_p
    q_w = alpha[:, None] * q_t
    q_phi = (omega * dalpha)[:, None] * q_t + q_p
    if invert:
        _, u, s2, _, R2 = _inversion(q, C[:, 0])

        def jac(v):
            return (R2 / s2)[:, None] * v - (2.0 * R2 * np.sum(u * v, axis=1) / (s2 * s2))[:, None] * u

        q_w, q_phi = jac(q_w), jac(q_phi)
    Rm = rotation_matrix(model.rotvecs)[anchor_idx]
    T_w = np.einsum("nij,nj->ni", Rm, q_w)
    T_p = np.einsum("nij,nj->ni", Rm, q_phi)
    return T_w, T_p, np.einsum("nij,nj->ni", Rm, r)


def raw_normals(model: MashModel, anchor_idx, omega, phi, invert: bool = True) -> np.ndarray:
    """Unit tangent cross products, unsigned per patch."""
    T_w, T_p, world_r = _tangents(model, anchor_idx, omega, phi, invert)
    n = np.cross(T_w, T_p)
    norm = np.linalg.norm(n, axis=1)
    bad = norm < 1e-12
    n = np.where(bad[:, None], -world_r, n / np.where(bad, 1.0, norm)[:, None])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def patch_signs(model: MashModel, anchor_idx, points, normals) -> np.ndarray:
    """+1/-1 per anchor so that normals point away from the anchor on average."""
    anchor_idx = np.asarray(anchor_idx, dtype=np.intp)
    away = np.sum(normals * (points - model.positions[anchor_idx]), axis=1)
    score = np.bincount(anchor_idx, weights=away, minlength=model.M)
    return np.where(score < 0.0, -1.0, 1.0)


def model_normals(model: MashModel, rays: RayBatch, points, invert: bool = True) -> np.ndarray:
    n = raw_normals(model, rays.anchor, rays.omega, rays.phi, invert)
    return n * patch_signs(model, rays.anchor, points, n)[rays.anchor][:, None]


def surface_normal(model: MashModel, anchor_index: int, ray: RayParam, invert: bool = True) -> np.ndarray:
    """Patch normal at one ray, signed consistently with the anchor's other in-mask rays."""
    if ray.omega >= 1.0 - 1e-6:
        raise ValueError("surface_normal needs a ray strictly inside the mask")
    rays = select_rays(model)
    sel = rays.anchor == anchor_index
    idx = np.full(int(sel.sum()) + 1, anchor_index, dtype=np.intp)
    omega = np.append(rays.omega[sel], ray.omega)
    phi = np.append(rays.phi[sel], ray.phi)
    pts = forward(model, idx, omega, phi, invert=invert)
    n = raw_normals(model, idx, omega, phi, invert)
    away = np.sum(n[:-1] * (pts[:-1] - model.positions[anchor_index]))
    sign = -1.0 if away < 0.0 else 1.0
    return sign * n[-1]
