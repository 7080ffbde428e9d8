"""Real orthonormal spherical harmonics and their angular partials.

Coefficients are ordered band-major, ``(l, m)`` = (0,0), (1,-1), (1,0), (1,1),
(2,-2), ... so the flat index of ``(l, m)`` is ``l*l + l + m``.  Positive ``m``
carries ``cos(m*phi)``, negative ``m`` carries ``sin(|m|*phi)``; no
Condon-Shortley phase, so ``Y_1^{-1}, Y_1^0, Y_1^1`` are proportional to
``y, z, x``.
"""
from __future__ import annotations

from math import factorial, pi, sqrt

import numpy as np

MAX_DEGREE = 6


def num_coeffs(L: int) -> int:
    return (L + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * l + l + m


def _norm(l: int, m: int) -> float:
    n = sqrt((2 * l + 1) / (4 * pi) * factorial(l - m) / factorial(l + m))
    return n * sqrt(2.0) if m else n


def _legendre(L, ct, st):
    """Associated Legendre P_l^m(cos t) for 0 <= m <= l <= L, without the
    Condon-Shortley phase. Uses sin(t) directly so it stays analytic in t."""
    P = {}
    pmm = np.ones_like(ct)
    for m in range(L + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * st
        P[m, m] = pmm
        if m + 1 <= L:
            P[m + 1, m] = (2 * m + 1) * ct * pmm
        for l in range(m + 2, L + 1):
            P[l, m] = ((2 * l - 1) * ct * P[l - 1, m] - (l + m - 1) * P[l - 2, m]) / (l - m)
    return P


def _check_degree(L: int) -> None:
    if not 0 <= L <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {L}")


def eval_basis(L: int, theta, phi) -> np.ndarray:
    """Evaluate all (L+1)^2 real harmonics.

    ``theta`` and ``phi`` broadcast together; the basis index is the last axis.
    """
    return eval_basis_grad(L, theta, phi, values_only=True)


def eval_basis_grad(L: int, theta, phi, values_only: bool = False):
    """Return ``(Y, dY/dtheta, dY/dphi)``, each with a trailing basis axis.

    With ``values_only`` only ``Y`` is returned.
    """
    _check_degree(L)
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))
    ct, st = np.cos(theta), np.sin(theta)
    P = _legendre(L, ct, st)

    shape = theta.shape + (num_coeffs(L),)
    Y = np.empty(shape)
    if not values_only:
        dT = np.empty(shape)
        dP = np.empty(shape)
    cos_m = [np.cos(m * phi) for m in range(L + 1)]
    sin_m = [np.sin(m * phi) for m in range(L + 1)]

    for l in range(L + 1):
        for m in range(l + 1):
            plm = P[l, m]
            if not values_only:
                # d/dt P_l^m(cos t), no Condon-Shortley phase
                if m == 0:
                    dplm = -P[l, 1] if l >= 1 else np.zeros_like(ct)
                else:
                    up = P[l, m + 1] if m + 1 <= l else 0.0
                    dplm = 0.5 * ((l + m) * (l - m + 1) * P[l, m - 1] - up)
            n = _norm(l, m)
            if m == 0:
                i = sh_index(l, 0)
                Y[..., i] = n * plm
                if not values_only:
                    dT[..., i] = n * dplm
                    dP[..., i] = 0.0
                continue
            ip, im = sh_index(l, m), sh_index(l, -m)
            Y[..., ip] = n * plm * cos_m[m]
            Y[..., im] = n * plm * sin_m[m]
            if not values_only:
                dT[..., ip] = n * dplm * cos_m[m]
                dT[..., im] = n * dplm * sin_m[m]
                dP[..., ip] = -m * n * plm * sin_m[m]
                dP[..., im] = m * n * plm * cos_m[m]
    if values_only:
        return Y
    return Y, dT, dP
