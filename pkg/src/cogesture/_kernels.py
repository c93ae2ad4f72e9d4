"""Hot numeric kernels.

Each kernel has two implementations: an explicit-loop version compiled with
numba ``@njit`` and a vectorized pure-numpy version. The compiled path is
used when numba imports cleanly and ``COGESTURE_DISABLE_NUMBA`` is unset (or
"0"). Both paths must agree to floating-point round-off; the test suite
checks them against each other and ``benchmarks/bench_kernels.py`` times them.
"""

import os

import numpy as np

_disabled = os.environ.get("COGESTURE_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by COGESTURE_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


# Relative threshold below which a 6D column (or its orthogonalized
# companion) is treated as degenerate.
DEGENERATE_EPS = 1e-8


# ---------------------------------------------------------------------------
# 6D rotation -> matrix (Gram-Schmidt)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _rot6d_to_matrix_nb(r6):
    n = r6.shape[0]
    out = np.zeros((n, 3, 3))
    bad = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        a0, a1, a2 = r6[i, 0], r6[i, 1], r6[i, 2]
        b0, b1, b2 = r6[i, 3], r6[i, 4], r6[i, 5]
        na = np.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
        nb = np.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
        if na <= DEGENERATE_EPS or nb <= DEGENERATE_EPS:
            bad[i] = True
            continue
        a0 /= na
        a1 /= na
        a2 /= na
        d = a0 * b0 + a1 * b1 + a2 * b2
        c0 = b0 - d * a0
        c1 = b1 - d * a1
        c2 = b2 - d * a2
        nc = np.sqrt(c0 * c0 + c1 * c1 + c2 * c2)
        if nc <= DEGENERATE_EPS * nb:
            bad[i] = True
            continue
        c0 /= nc
        c1 /= nc
        c2 /= nc
        out[i, 0, 0] = a0
        out[i, 1, 0] = a1
        out[i, 2, 0] = a2
        out[i, 0, 1] = c0
        out[i, 1, 1] = c1
        out[i, 2, 1] = c2
        out[i, 0, 2] = a1 * c2 - a2 * c1
        out[i, 1, 2] = a2 * c0 - a0 * c2
        out[i, 2, 2] = a0 * c1 - a1 * c0
    return out, bad


def _rot6d_to_matrix_np(r6):
    a = r6[:, :3]
    b = r6[:, 3:]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    bad = (na <= DEGENERATE_EPS) | (nb <= DEGENERATE_EPS)
    a = a / np.where(bad, 1.0, na)[:, None]
    c = b - np.sum(a * b, axis=1, keepdims=True) * a
    nc = np.linalg.norm(c, axis=1)
    bad |= nc <= DEGENERATE_EPS * nb
    c = c / np.where(bad, 1.0, nc)[:, None]
    out = np.stack([a, c, np.cross(a, c)], axis=-1)
    out[bad] = 0.0
    return out, bad


def rot6d_to_matrix(r6):
    """(n, 6) float64 -> ((n, 3, 3) matrices, (n,) degenerate mask)."""
    r6 = np.ascontiguousarray(r6, dtype=np.float64)
    if HAS_NUMBA:
        return _rot6d_to_matrix_nb(r6)
    return _rot6d_to_matrix_np(r6)


# ---------------------------------------------------------------------------
# Euler (intrinsic XYZ) -> matrix
# ---------------------------------------------------------------------------

@njit(cache=True)
def _euler_xyz_to_matrix_nb(angles):
    n = angles.shape[0]
    out = np.empty((n, 3, 3))
    for i in range(n):
        cx, sx = np.cos(angles[i, 0]), np.sin(angles[i, 0])
        cy, sy = np.cos(angles[i, 1]), np.sin(angles[i, 1])
        cz, sz = np.cos(angles[i, 2]), np.sin(angles[i, 2])
        # R = Rx @ Ry @ Rz
        out[i, 0, 0] = cy * cz
        out[i, 0, 1] = -cy * sz
        out[i, 0, 2] = sy
        out[i, 1, 0] = cx * sz + sx * sy * cz
        out[i, 1, 1] = cx * cz - sx * sy * sz
        out[i, 1, 2] = -sx * cy
        out[i, 2, 0] = sx * sz - cx * sy * cz
        out[i, 2, 1] = sx * cz + cx * sy * sz
        out[i, 2, 2] = cx * cy
    return out


def _euler_xyz_to_matrix_np(angles):
    cx, sx = np.cos(angles[:, 0]), np.sin(angles[:, 0])
    cy, sy = np.cos(angles[:, 1]), np.sin(angles[:, 1])
    cz, sz = np.cos(angles[:, 2]), np.sin(angles[:, 2])
    one, zero = np.ones_like(cx), np.zeros_like(cx)
    rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(-1, 3, 3)
    ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(-1, 3, 3)
    rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(-1, 3, 3)
    return rx @ ry @ rz


def euler_xyz_to_matrix(angles):
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    if HAS_NUMBA:
        return _euler_xyz_to_matrix_nb(angles)
    return _euler_xyz_to_matrix_np(angles)


# ---------------------------------------------------------------------------
# Nearest codebook entry (squared Euclidean, lowest index wins ties)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nearest_code_nb(z, codebook):
    n, c = z.shape
    m = codebook.shape[0]
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        arg = 0
        for j in range(m):
            d = 0.0
            for k in range(c):
                t = z[i, k] - codebook[j, k]
                d += t * t
            if d < best:
                best = d
                arg = j
        idx[i] = arg
    return idx


def _nearest_code_np(z, codebook):
    # explicit differences rather than the |a|^2 - 2ab + |b|^2 expansion so
    # exact codebook members always map to themselves
    out = np.empty(len(z), dtype=np.int64)
    for start in range(0, len(z), 256):
        block = z[start:start + 256]
        d = ((block[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
        out[start:start + 256] = np.argmin(d, axis=1)
    return out


def nearest_code(z, codebook):
    z = np.ascontiguousarray(z, dtype=np.float64)
    codebook = np.ascontiguousarray(codebook, dtype=np.float64)
    if HAS_NUMBA:
        return _nearest_code_nb(z, codebook)
    return _nearest_code_np(z, codebook)


# ---------------------------------------------------------------------------
# Framed energy / RMS of a waveform
# ---------------------------------------------------------------------------

@njit(cache=True)
def _frame_energy_nb(x, hop, n_frames):
    energy = np.zeros(n_frames)
    rms = np.zeros(n_frames)
    n = x.shape[0]
    for f in range(n_frames):
        start = f * hop
        stop = min(start + hop, n)
        acc = 0.0
        for i in range(start, stop):
            acc += x[i] * x[i]
        energy[f] = acc
        if stop > start:
            rms[f] = np.sqrt(acc / (stop - start))
    return energy, rms


def _frame_energy_np(x, hop, n_frames):
    padded = np.zeros(n_frames * hop)
    m = min(len(x), n_frames * hop)
    padded[:m] = x[:m]
    frames = padded.reshape(n_frames, hop)
    energy = (frames ** 2).sum(1)
    counts = np.clip(m - np.arange(n_frames) * hop, 0, hop)
    rms = np.where(counts > 0, np.sqrt(energy / np.maximum(counts, 1)), 0.0)
    return energy, rms


def frame_energy(x, hop, n_frames):
    """Non-overlapping frames of ``hop`` samples -> (energy, rms) per frame."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAS_NUMBA:
        return _frame_energy_nb(x, int(hop), int(n_frames))
    return _frame_energy_np(x, int(hop), int(n_frames))


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

@njit(cache=True)
def _forward_kinematics_nb(local_rot, parents, offsets, root):
    k_frames, n_joints = local_rot.shape[0], local_rot.shape[1]
    pos = np.zeros((k_frames, n_joints, 3))
    glob = np.zeros((k_frames, n_joints, 3, 3))
    for k in range(k_frames):
        for j in range(n_joints):
            p = parents[j]
            if p < 0:
                glob[k, j] = local_rot[k, j]
                for a in range(3):
                    pos[k, j, a] = root[k, a] + offsets[j, a]
            else:
                glob[k, j] = glob[k, p] @ local_rot[k, j]
                for a in range(3):
                    acc = pos[k, p, a]
                    for b in range(3):
                        acc += glob[k, p, a, b] * offsets[j, b]
                    pos[k, j, a] = acc
    return pos


def _forward_kinematics_np(local_rot, parents, offsets, root):
    k_frames, n_joints = local_rot.shape[:2]
    pos = np.zeros((k_frames, n_joints, 3))
    glob = np.zeros((k_frames, n_joints, 3, 3))
    for j in range(n_joints):
        p = parents[j]
        if p < 0:
            glob[:, j] = local_rot[:, j]
            pos[:, j] = root + offsets[j]
        else:
            glob[:, j] = glob[:, p] @ local_rot[:, j]
            pos[:, j] = pos[:, p] + glob[:, p] @ offsets[j]
    return pos


def forward_kinematics(local_rot, parents, offsets, root):
    """Joint world positions (K, J, 3); parents must precede children."""
    local_rot = np.ascontiguousarray(local_rot, dtype=np.float64)
    parents = np.ascontiguousarray(parents, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    root = np.ascontiguousarray(root, dtype=np.float64)
    if HAS_NUMBA:
        return _forward_kinematics_nb(local_rot, parents, offsets, root)
    return _forward_kinematics_np(local_rot, parents, offsets, root)


# exported for the benchmark and the cross-path tests
NUMPY_IMPLS = {
    "rot6d_to_matrix": _rot6d_to_matrix_np,
    "euler_xyz_to_matrix": _euler_xyz_to_matrix_np,
    "nearest_code": _nearest_code_np,
    "frame_energy": _frame_energy_np,
    "forward_kinematics": _forward_kinematics_np,
}
NUMBA_IMPLS = {
    "rot6d_to_matrix": _rot6d_to_matrix_nb,
    "euler_xyz_to_matrix": _euler_xyz_to_matrix_nb,
    "nearest_code": _nearest_code_nb,
    "frame_energy": _frame_energy_nb,
    "forward_kinematics": _forward_kinematics_nb,
}
