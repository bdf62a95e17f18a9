"""Rotation-group helpers: hat/vee, exponential and log maps, log-linear
interpolation, tangent-space sampling and geodesic distance.

Rotation vectors are axis-angle 3-vectors (direction = axis, norm = angle).
The canonical representative of a rotation is the vector of norm at most pi.
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-3
ORTHO_TOL = 1e-6


def hat(r: np.ndarray) -> np.ndarray:
    """Cross-product matrix: ``hat(r) @ v == np.cross(r, v)``."""
    x, y, z = np.asarray(r, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(M: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` (reads the antisymmetric part)."""
    M = np.asarray(M, dtype=float)
    return 0.5 * np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])


def exp_map(r: np.ndarray) -> np.ndarray:
    """Rodrigues formula. Accepts a single 3-vector or a stack of shape (..., 3)."""
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != 3:
        raise ValueError(f"rotation vector must have trailing dimension 3, got {r.shape}")
    theta = np.linalg.norm(r, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # (1 - cos) written as 2 sin^2(theta/2) to avoid cancellation
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * np.sin(0.5 * safe) ** 2 / safe**2)

    K = np.zeros(r.shape[:-1] + (3, 3))
    K[..., 0, 1] = -r[..., 2]
    K[..., 0, 2] = r[..., 1]
    K[..., 1, 0] = r[..., 2]
    K[..., 1, 2] = -r[..., 0]
    K[..., 2, 0] = -r[..., 1]
    K[..., 2, 1] = r[..., 0]
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError(f"expected a finite 3x3 matrix, got shape {R.shape}")
    ortho = np.max(np.abs(R.T @ R - np.eye(3)))
    det = np.linalg.det(R)
    if ortho > tol or abs(det - 1.0) > tol:
        raise ValueError(
            f"matrix is not a rotation (max |R^T R - I| = {ortho:.3g}, det = {det:.12g})"
        )


def log_map(R: np.ndarray) -> np.ndarray:
    """Canonical rotation vector of ``R`` (norm in [0, pi]).

    Raises ``ValueError`` when ``R`` is more than 1e-6 away from SO(3).
    """
    R = np.asarray(R, dtype=float)
    check_rotation(R)
    w = vee(R)  # = sin(theta) * axis
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)

    if theta < SMALL_ANGLE:
        return w * (1.0 + theta**2 / 6.0)
    if np.pi - theta > NEAR_PI:
        return w * (theta / s)

    # Near pi the antisymmetric part vanishes; read the axis off the
    # symmetric part B = (1 - cos) n n^T using its largest diagonal entry.
    B = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(B[k, k] * (1.0 - c))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis


def wrap_to_ball(r: np.ndarray) -> np.ndarray:
    """Canonicalize rotation vectors (shape (..., 3)) into the ball of radius pi.

    Equivalent to ``log_map(exp_map(r))``; vectors already in the ball are
    returned unchanged.
    """
    r = np.array(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    over = theta > np.pi
    if not np.any(over):
        return r
    folded = np.mod(theta, 2.0 * np.pi)
    folded = np.where(folded > np.pi, folded - 2.0 * np.pi, folded)
    scale = np.where(over, folded / np.where(over, theta, 1.0), 1.0)
    return r * scale


def interp_log(R0: np.ndarray, R1: np.ndarray, t: float) -> np.ndarray:
    """Blend in log coordinates: ``exp(t log R1 + (1 - t) log R0)``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return exp_map(t * log_map(R1) + (1.0 - t) * log_map(R0))


def sample_tangent_gaussian(rng: np.random.Generator, sigma: float, size=None) -> np.ndarray:
    """Isotropic normal draw in the tangent space, wrapped to the canonical ball.

    ``size`` adds leading dimensions: ``size=(n,)`` returns an ``(n, 3)`` array.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    shape = (3,) if size is None else tuple(np.atleast_1d(size)) + (3,)
    return wrap_to_ball(rng.normal(0.0, sigma, size=shape))


def geodesic_distance(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Rotation angle of ``Ra^T Rb``, in [0, pi]."""
    return float(np.linalg.norm(log_map(np.asarray(Ra).T @ np.asarray(Rb))))


def rotation_angle(r: np.ndarray) -> np.ndarray:
    """Geodesic distance from identity for canonical rotation vectors (..., 3)."""
    return np.linalg.norm(wrap_to_ball(r), axis=-1)
