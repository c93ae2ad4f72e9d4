"""Continuous 6D rotation parameterization.

A rotation matrix is represented by its first two columns, flattened as
``[R00, R10, R20, R01, R11, R21]``. The inverse map orthonormalizes the two
columns with Gram-Schmidt and completes the frame with a cross product.
"""

import numpy as np
import torch

from .. import _kernels
from ..errors import DegenerateRotationError, ValidationError

ORTHONORMAL_TOL = 1e-4


def matrix_from_rot6d(r6):
    """Map a 6-vector to a proper rotation matrix.

    Raises DegenerateRotationError when the first column is zero or the second
    is parallel to the first.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape != (6,):
        raise ValidationError(f"expected a 6-vector, got shape {r6.shape}")
    if not np.all(np.isfinite(r6)):
        raise ValidationError("6D rotation contains non-finite values")
    mats, bad = _kernels.rot6d_to_matrix(r6[None])
    if bad[0]:
        raise DegenerateRotationError(f"degenerate 6D rotation {r6.tolist()}")
    return mats[0]


def rot6d_from_matrix(R):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValidationError(f"expected a 3x3 matrix, got shape {R.shape}")
    check_rotation_matrices(R[None])
    return R[:, :2].T.reshape(6).copy()


def check_rotation_matrices(R, tol=ORTHONORMAL_TOL):
    R = np.asarray(R, dtype=np.float64)
    if not np.all(np.isfinite(R)):
        raise ValidationError("rotation matrix contains non-finite values")
    eye = np.eye(3)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max(initial=0.0)
    if err > tol:
        raise ValidationError(f"matrix is not orthonormal (max |R^T R - I| = {err:.3g})")
    det = np.linalg.det(R)
    if np.any(det <= 0):
        raise ValidationError("matrix has negative determinant (reflection)")


def rot6d_to_matrix_batch(r6):
    """Vectorized ``matrix_from_rot6d`` over arbitrary leading axes."""
    r6 = np.asarray(r6, dtype=np.float64)
    lead = r6.shape[:-1]
    mats, bad = _kernels.rot6d_to_matrix(r6.reshape(-1, 6))
    if bad.any():
        raise DegenerateRotationError(f"{int(bad.sum())} degenerate 6D rotation(s) in batch")
    return mats.reshape(*lead, 3, 3)


def matrix_to_rot6d_batch(R):
    R = np.asarray(R, dtype=np.float64)
    return np.swapaxes(R[..., :, :2], -1, -2).reshape(*R.shape[:-2], 6)


def renormalize_rot6d(r6):
    """Project arbitrary 6-vectors onto the image of valid rotations.

    Degenerate rows fall back to the identity rotation.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    lead = r6.shape[:-1]
    mats, bad = _kernels.rot6d_to_matrix(r6.reshape(-1, 6))
    mats[bad] = np.eye(3)
    return matrix_to_rot6d_batch(mats).reshape(*lead, 6)


def euler_to_rot6d(angles):
    """Intrinsic XYZ Euler angles (radians, ``(..., 3)``) to 6D."""
    angles = np.asarray(angles, dtype=np.float64)
    mats = _kernels.euler_xyz_to_matrix(angles.reshape(-1, 3))
    return matrix_to_rot6d_batch(mats).reshape(*angles.shape[:-1], 6)


def rot6d_to_matrix_torch(r6, eps=1e-8):
    # differentiable Gram-Schmidt used inside the networks
    a = r6[..., :3]
    b = r6[..., 3:]
    a = a / a.norm(dim=-1, keepdim=True).clamp_min(eps)
    c = b - (a * b).sum(-1, keepdim=True) * a
    c = c / c.norm(dim=-1, keepdim=True).clamp_min(eps)
    return torch.stack([a, c, torch.cross(a, c, dim=-1)], dim=-1)


def random_rotations(n, rng):
    """Uniformly distributed rotation matrices via random unit quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    ], axis=-1).reshape(n, 3, 3)
