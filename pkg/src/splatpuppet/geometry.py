"""Quaternion and rotation algebra used throughout the engine.

Quaternions are stored (w, x, y, z) and normalized defensively by every
constructor-like operation; rotation matrices are row-major 3x3.  All
functions accept either plain ndarrays or autodiff Vars and stay
differentiable in the latter case.  Pure-value functions are thread-safe.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value_of


def normalize_quat(q):
    """Return q / ||q||; q is (..., 4) with w first."""
    qv = value_of(q)
    if not np.all(np.isfinite(qv)):
        raise ValueError("quaternion contains non-finite components")
    if np.any(np.sqrt(np.sum(qv * qv, axis=-1)) <= 1e-12):
        raise ValueError("quaternion norm too small to normalize")
    n = ad.safe_norm(q, axis=-1, keepdims=True)
    return ad.div(q, n)


def quat_to_rotmat(q):
    """Proper rotation matrix (..., 3, 3) from quaternion(s) (..., 4).

    The input is normalized internally, so unnormalized quaternions map to
    the same rotation as their normalized form.
    """
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
    xy, xz, yz = ad.mul(x, y), ad.mul(x, z), ad.mul(y, z)
    wx, wy, wz = ad.mul(w, x), ad.mul(w, y), ad.mul(w, z)
    rows = [
        1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
        2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
        2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy),
    ]
    flat = ad.stack(rows, axis=-1)
    shape = value_of(flat).shape[:-1] + (3, 3)
    return ad.reshape(flat, shape)


def build_covariance(s, q):
    """3D covariance R diag(s^2) R^T from positive scales s and quaternion q.

    Accepts (..., 3) scales and (..., 4) quaternions; raises on non-positive
    scales.  Output is symmetric positive-definite by construction.
    """
    sv = value_of(s)
    if np.any(sv <= 0.0):
        raise ValueError("scales must be strictly positive")
    R = quat_to_rotmat(q)
    s2 = ad.mul(s, s)
    # R @ diag(s2) scales R's columns; then multiply by R^T.
    Rs = ad.mul(R, ad.reshape(s2, sv.shape[:-1] + (1, 3)))
    return ad.matmul(Rs, ad.transpose(R, axes=_swap_last_two(value_of(R).ndim)))


def _swap_last_two(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _rot_coeffs(u):
    """sin(t)/t and (1-cos(t))/t^2 as analytic functions of u = t^2.

    Both are entire in u, so a Taylor branch near zero keeps values and
    derivatives finite at u = 0.
    """
    uv = value_of(u)
    small = uv < 1e-8
    t = np.sqrt(np.where(small, 1.0, uv))
    f1 = np.where(small, 1.0 - uv / 6.0 + uv * uv / 120.0, np.sin(t) / t)
    f2 = np.where(small, 0.5 - uv / 24.0 + uv * uv / 720.0,
                  (1.0 - np.cos(t)) / np.where(small, 1.0, uv))
    # d f1/du and d f2/du, same branching
    df1 = np.where(small, -1.0 / 6.0 + uv / 60.0,
                   (np.cos(t) * t - np.sin(t)) / (2.0 * np.where(small, 1.0, uv) * t))
    df2 = np.where(small, -1.0 / 24.0 + uv / 360.0,
                   (np.sin(t) * t - 2.0 * (1.0 - np.cos(t))) /
                   (2.0 * np.where(small, 1.0, uv) * np.where(small, 1.0, uv)))
    if not isinstance(u, Var):
        return f1, f2

    def vjp1(g):
        return [g * df1]

    def vjp2(g):
        return [g * df2]

    return ad.custom_op([u], f1, vjp1), ad.custom_op([u], f2, vjp2)


# Constant map from a 3-vector to its flattened 3x3 cross-product matrix.
_SKEW = np.array([
    #  K = [[0, -z, y], [z, 0, -x], [-y, x, 0]] flattened row-major
    [0, 0, 0, 0, 0, -1, 0, 1, 0],   # x component
    [0, 0, 1, 0, 0, 0, -1, 0, 0],   # y component
    [0, -1, 0, 1, 0, 0, 0, 0, 0],   # z component
], dtype=np.float64)


def axis_angle_to_rotmat(aa):
    """Rodrigues formula, differentiable and stable through zero rotation.

    `aa` is (..., 3); returns (..., 3, 3).
    """
    aav = value_of(aa)
    batch = aav.shape[:-1]
    u = ad.vsum(ad.mul(aa, aa), axis=-1)            # squared angle
    f1, f2 = _rot_coeffs(u)
    K = ad.reshape(ad.matmul(aa, _SKEW), batch + (3, 3))
    K2 = ad.matmul(K, K)
    eye = np.broadcast_to(np.eye(3), batch + (3, 3))
    f1b = ad.reshape(f1, batch + (1, 1))
    f2b = ad.reshape(f2, batch + (1, 1))
    return ad.add(eye, ad.add(ad.mul(f1b, K), ad.mul(f2b, K2)))


def rotmat_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse of axis_angle_to_rotmat for a single plain 3x3 matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    if theta < 1e-10:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near 180 degrees: extract axis from R + I
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs using off-diagonals
        if A[0, 1] < 0:
            axis[1] = -axis[1]
        if A[0, 2] < 0:
            axis[2] = -axis[2]
        n = np.linalg.norm(axis)
        return theta * axis / n
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta * v / (2.0 * np.sin(theta))


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    M = Ra @ Rb.T
    tr = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(tr)))
