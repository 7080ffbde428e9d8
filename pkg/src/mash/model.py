"""MASH data model: anchors, vision masks, rotations and the flat parameter vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sh import eval_basis, num_coeffs

ROT_EPS = 1e-12
# float64 sigmoid saturates to exactly 0 or 1; keep alpha strictly inside (0, pi)
_ALPHA_LO = np.nextafter(0.0, 1.0)
_ALPHA_HI = np.nextafter(np.pi, 0.0)
# below this angle the rotation derivative uses its series expansion
_ROT_SERIES = 1e-6


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def param_count(M: int, K: int, L: int) -> int:
    """Total scalar parameter count of a model with M anchors."""
    if M < 1 or K < 0 or L < 0:
        raise ValueError("need M >= 1 and K, L >= 0")
    return M * (2 * K + 1 + (L + 1) ** 2 + 6)


@dataclass
class Anchor:
    position: np.ndarray
    rotvec: np.ndarray
    sh_coeffs: np.ndarray
    mask_coeffs: np.ndarray

    @property
    def L(self) -> int:
        return int(round(np.sqrt(len(self.sh_coeffs)))) - 1

    @property
    def K(self) -> int:
        return (len(self.mask_coeffs) - 1) // 2


@dataclass
class MashModel:
    """M anchors stored as stacked arrays.

    Attributes
    ----------
    positions, rotvecs : (M, 3)
    sh_coeffs : (M, (L+1)^2), band-major
    mask_coeffs : (M, 2K+1), ordered a_0, a_1, b_1, ..., a_K, b_K
    """

    positions: np.ndarray
    rotvecs: np.ndarray
    sh_coeffs: np.ndarray
    mask_coeffs: np.ndarray
    L: int
    K: int
    n_dir: int = 400

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.rotvecs = np.asarray(self.rotvecs, dtype=float).reshape(-1, 3)
        M = len(self.positions)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=float).reshape(M, -1)
        self.mask_coeffs = np.asarray(self.mask_coeffs, dtype=float).reshape(M, -1)
        if M < 1:
            raise ValueError("a model needs at least one anchor")
        if self.n_dir < 16:
            raise ValueError(f"n_dir must be >= 16, got {self.n_dir}")
        if self.rotvecs.shape[0] != M:
            raise ValueError("rotvecs do not match positions")
        if self.sh_coeffs.shape[1] != num_coeffs(self.L):
            raise ValueError(f"expected {num_coeffs(self.L)} SH coefficients per anchor")
        if self.mask_coeffs.shape[1] != 2 * self.K + 1:
            raise ValueError(f"expected {2 * self.K + 1} mask coefficients per anchor")

    @classmethod
    def zeros(cls, M: int, L: int, K: int, n_dir: int = 400) -> "MashModel":
        return cls(np.zeros((M, 3)), np.zeros((M, 3)), np.zeros((M, num_coeffs(L))),
                   np.zeros((M, 2 * K + 1)), L, K, n_dir)

    @classmethod
    def from_anchors(cls, anchors, L: int, K: int, n_dir: int = 400) -> "MashModel":
        return cls(np.array([a.position for a in anchors]), np.array([a.rotvec for a in anchors]),
                   np.array([a.sh_coeffs for a in anchors]), np.array([a.mask_coeffs for a in anchors]),
                   L, K, n_dir)

    @property
    def M(self) -> int:
        return len(self.positions)

    @property
    def anchor_size(self) -> int:
        return 6 + self.sh_coeffs.shape[1] + self.mask_coeffs.shape[1]

    @property
    def num_params(self) -> int:
        return param_count(self.M, self.K, self.L)

    def anchor(self, i: int) -> Anchor:
        return Anchor(self.positions[i], self.rotvecs[i], self.sh_coeffs[i], self.mask_coeffs[i])

    @property
    def anchors(self) -> list[Anchor]:
        return [self.anchor(i) for i in range(self.M)]

    def copy(self) -> "MashModel":
        return MashModel(self.positions.copy(), self.rotvecs.copy(), self.sh_coeffs.copy(),
                         self.mask_coeffs.copy(), self.L, self.K, self.n_dir)

    def flatten(self) -> np.ndarray:
        """Per-anchor blocks ``[p(3), v(3), C((L+1)^2), V(2K+1)]``, concatenated."""
        return np.concatenate([self.positions, self.rotvecs, self.sh_coeffs, self.mask_coeffs],
                              axis=1).ravel()

    @classmethod
    def unflatten(cls, flat, M: int, L: int, K: int, n_dir: int = 400) -> "MashModel":
        blocks = np.asarray(flat, dtype=float).reshape(M, 6 + num_coeffs(L) + 2 * K + 1)
        nsh = num_coeffs(L)
        return cls(blocks[:, 0:3].copy(), blocks[:, 3:6].copy(), blocks[:, 6:6 + nsh].copy(),
                   blocks[:, 6 + nsh:].copy(), L, K, n_dir)

    def with_flat(self, flat) -> "MashModel":
        return MashModel.unflatten(flat, self.M, self.L, self.K, self.n_dir)

    def canonicalize(self) -> None:
        self.rotvecs = canonical_rotvec(self.rotvecs)


def _mask_series(mask_coeffs, phi):
    """a_0 + sum a_k cos(k phi) + b_k sin(k phi), plus the trig design rows.

    ``mask_coeffs`` is (..., 2K+1) and broadcasts against ``phi``.
    """
    mask_coeffs = np.asarray(mask_coeffs, dtype=float)
    phi = np.asarray(phi, dtype=float)
    K = (mask_coeffs.shape[-1] - 1) // 2
    design = np.empty(phi.shape + (2 * K + 1,))
    design[..., 0] = 1.0
    for k in range(1, K + 1):
        design[..., 2 * k - 1] = np.cos(k * phi)
        design[..., 2 * k] = np.sin(k * phi)
    return np.sum(mask_coeffs * design, axis=-1), design


def mask_angle(anchor, phi):
    """Vision-cone half angle alpha(phi), strictly inside (0, pi)."""
    coeffs = anchor.mask_coeffs if isinstance(anchor, Anchor) else anchor
    s, _ = _mask_series(coeffs, phi)
    return np.clip(np.pi * sigmoid(s), _ALPHA_LO, _ALPHA_HI)


def mask_angle_grad(mask_coeffs, phi):
    """Return alpha, d(alpha)/d(coeffs) (..., 2K+1) and d(alpha)/d(phi)."""
    mask_coeffs = np.asarray(mask_coeffs, dtype=float)
    phi = np.asarray(phi, dtype=float)
    s, design = _mask_series(mask_coeffs, phi)
    sig = sigmoid(s)
    dsig = np.pi * sig * (1.0 - sig)
    K = (mask_coeffs.shape[-1] - 1) // 2
    ds_dphi = np.zeros(np.broadcast_shapes(s.shape, phi.shape))
    for k in range(1, K + 1):
        ds_dphi = ds_dphi + k * (-mask_coeffs[..., 2 * k - 1] * np.sin(k * phi)
                                 + mask_coeffs[..., 2 * k] * np.cos(k * phi))
    alpha = np.clip(np.pi * sig, _ALPHA_LO, _ALPHA_HI)
    return alpha, dsig[..., None] * design, dsig * ds_dphi


def spherical_distance(anchor, theta, phi):
    """Signed distance sum_lm C_l^m Y_l^m(theta, phi)."""
    coeffs = np.asarray(anchor.sh_coeffs if isinstance(anchor, Anchor) else anchor, dtype=float)
    L = int(round(np.sqrt(coeffs.shape[-1]))) - 1
    return eval_basis(L, theta, phi) @ coeffs


def skew(k):
    k = np.asarray(k, dtype=float)
    out = np.zeros(k.shape[:-1] + (3, 3))
    out[..., 0, 1] = -k[..., 2]
    out[..., 0, 2] = k[..., 1]
    out[..., 1, 0] = k[..., 2]
    out[..., 1, 2] = -k[..., 0]
    out[..., 2, 0] = -k[..., 1]
    out[..., 2, 1] = k[..., 0]
    return out


def rotation_matrix(rotvec) -> np.ndarray:
    """Rodrigues rotation for one (3,) or a stack (..., 3) of rotation vectors."""
    v = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < ROT_EPS
    safe = np.where(small, 1.0, theta)
    k = v / safe[..., None]
    Kx = skew(k)
    c = np.cos(theta)[..., None, None]
    s = np.sin(theta)[..., None, None]
    R = c * np.eye(3) + (1.0 - c) * (k[..., :, None] * k[..., None, :]) + s * Kx
    return np.where(small[..., None, None], np.eye(3), R)


def rotation_matrix_grad(rotvec) -> np.ndarray:
    """dR/dv_i stacked as (..., 3, 3, 3) with the derivative index first."""
    v = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    R = rotation_matrix(v)
    eye = np.eye(3)
    out = np.empty(v.shape[:-1] + (3, 3, 3))
    small = theta < _ROT_SERIES
    t2 = np.where(small, 1.0, theta * theta)
    vx = skew(v)
    for i in range(3):
        e = eye[i]
        # exact form: (v_i [v]x + [v x (I - R) e_i]x) R / |v|^2
        col = e - R[..., :, i]
        exact = (v[..., i, None, None] * vx + skew(np.cross(v, col))) @ R / t2[..., None, None]
        # series: d/dv_i (I + [v]x + [v]x^2 / 2)
        ex = skew(e)
        series = ex + 0.5 * (ex @ vx + vx @ ex)
        out[..., i, :, :] = np.where(small[..., None, None], series, exact)
    return out


def canonical_rotvec(rotvec) -> np.ndarray:
    """Wrap the rotation angle into [0, 2*pi) keeping the axis."""
    v = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    two_pi = 2.0 * np.pi
    over = theta >= two_pi
    if not np.any(over):
        return v.copy()
    wrapped = np.mod(theta, two_pi)
    return np.where(over, v * (wrapped / np.where(theta > 0, theta, 1.0)), v)
