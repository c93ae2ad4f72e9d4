"""Binary motion file format (little-endian).

======  =======  ==============================================
offset  type     field
======  =======  ==============================================
0       4s       magic ``b"CGMO"``
4       u32      format version (currently 1)
8       f64      frames per second
16      u32      J, number of joints
20      u32      K, number of frames (including padding)
24      u32      pad_length, trailing padded frames
28      f64[]    K x (3 + 6J) pose array, row-major
======  =======  ==============================================
"""

import csv
import json
import struct

import numpy as np

from ..errors import MotionParseError, UnsupportedVersionError, ValidationError
from .types import Motion, pose_dim

MAGIC = b"CGMO"
VERSION = 1
_HEADER = struct.Struct("<4sIdIII")


def motion_to_bytes(motion):
    header = _HEADER.pack(MAGIC, VERSION, float(motion.fps), motion.num_joints,
                          motion.num_frames, motion.pad_length)
    return header + motion.poses.astype("<f8").tobytes(order="C")


def motion_from_bytes(data):
    if len(data) < _HEADER.size:
        raise MotionParseError(f"truncated header: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, version, fps, n_joints, n_frames, pad = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MotionParseError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported motion file version {version} (expected {VERSION})")
    if n_joints < 1 or n_frames < 1:
        raise MotionParseError("J and K must be positive", 16)
    if pad >= n_frames:
        raise MotionParseError("pad_length must be smaller than K", 24)
    expected = n_frames * pose_dim(n_joints) * 8
    body = len(data) - _HEADER.size
    if body < expected:
        # report where the first missing byte would have been
        raise MotionParseError(f"truncated pose array: {body} of {expected} bytes", len(data))
    if body > expected:
        raise MotionParseError("trailing bytes after pose array", _HEADER.size + expected)
    poses = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(n_frames, pose_dim(n_joints))
    return Motion(poses.astype(np.float64), fps, pad)


def save_motion(motion, path):
    with open(path, "wb") as fh:
        fh.write(motion_to_bytes(motion))


def load_motion(path):
    with open(path, "rb") as fh:
        return motion_from_bytes(fh.read())


def export_motion(motion, path, fmt):
    """Write a trimmed motion as CSV (one row per frame) or JSON for external viewers."""
    motion = motion.trimmed()
    if fmt == "csv":
        header = ["root_x", "root_y", "root_z"] + [
            f"j{j}_r{c}" for j in range(motion.num_joints) for c in range(6)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(motion.poses.tolist())
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump({"version": VERSION, "fps": motion.fps, "num_joints": motion.num_joints,
                       "poses": motion.poses.tolist()}, fh)
    else:
        raise ValidationError(f"unknown export format {fmt!r}")
