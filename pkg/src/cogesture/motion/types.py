from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError


def pose_dim(num_joints):
    return 3 + 6 * num_joints


@dataclass
class Pose:
    root_displacement: np.ndarray  # (3,) meters
    joint_rotations: np.ndarray  # (J, 6)

    def to_vector(self):
        return np.concatenate([self.root_displacement, self.joint_rotations.reshape(-1)])

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or (len(vec) - 3) % 6 or len(vec) < 9:
            raise ValidationError(f"pose vector length {vec.shape} is not 3 + 6J")
        return cls(vec[:3].copy(), vec[3:].reshape(-1, 6).copy())


@dataclass
class Motion:
    """A pose sequence stored as a ``(K, 3 + 6J)`` float64 array.

    ``pad_length`` counts trailing frames that were appended by
    :meth:`padded` and must be dropped by :meth:`trimmed`.
    """

    poses: np.ndarray
    fps: float = 60.0
    pad_length: int = 0

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 2 or self.poses.shape[1] < 9 or (self.poses.shape[1] - 3) % 6:
            raise ValidationError(f"poses must be (K, 3 + 6J), got {self.poses.shape}")
        if len(self.poses) < 1:
            raise ValidationError("motion must contain at least one pose")
        if not 0 <= self.pad_length < len(self.poses):
            raise ValidationError(f"pad_length {self.pad_length} out of range for K={len(self.poses)}")

    @property
    def num_frames(self):
        return self.poses.shape[0]

    @property
    def num_joints(self):
        return (self.poses.shape[1] - 3) // 6

    @property
    def root_displacement(self):
        return self.poses[:, :3]

    @property
    def joint_rotations(self):
        return self.poses[:, 3:].reshape(self.num_frames, self.num_joints, 6)

    def pose(self, k):
        return Pose.from_vector(self.poses[k])

    def padded(self, multiple):
        """Right-pad by repeating the last pose up to a multiple of ``multiple``."""
        extra = (-self.num_frames) % multiple
        if extra == 0:
            return self
        tail = np.repeat(self.poses[-1:], extra, axis=0)
        return Motion(np.concatenate([self.poses, tail]), self.fps, self.pad_length + extra)

    def trimmed(self):
        if self.pad_length == 0:
            return self
        return Motion(self.poses[: self.num_frames - self.pad_length].copy(), self.fps, 0)

    def __eq__(self, other):
        if not isinstance(other, Motion):
            return NotImplemented
        return (self.fps == other.fps and self.pad_length == other.pad_length
                and self.poses.shape == other.poses.shape and np.array_equal(self.poses, other.poses))


@dataclass
class AudioFeatures:
    """Latent-rate audio channels: column 0 onset strength, column 1 envelope."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != 2:
            raise ValidationError(f"audio features must be (L, 2), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError("audio features contain non-finite values")

    def __len__(self):
        return len(self.frames)

    @property
    def onset(self):
        return self.frames[:, 0]

    @property
    def envelope(self):
        return self.frames[:, 1]


@dataclass
class Transcript:
    tokens: np.ndarray
    word_spans: np.ndarray = field(default=None)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.word_spans is None:
            self.word_spans = np.stack([np.arange(len(self.tokens)), np.arange(1, len(self.tokens) + 1)], 1)
        self.word_spans = np.asarray(self.word_spans, dtype=np.int64).reshape(-1, 2)
        if len(self.word_spans) != len(self.tokens):
            raise ValidationError("one word span is required per token")
        if np.any(self.tokens < 0):
            raise ValidationError("token ids must be non-negative")
        spans = self.word_spans
        if np.any(spans[:, 1] <= spans[:, 0]):
            raise ValidationError("word spans must have end > start")
        if len(spans) > 1 and np.any(spans[1:, 0] < spans[:-1, 1]):
            raise ValidationError("word spans must be non-overlapping and increasing")

    def __len__(self):
        return len(self.tokens)

    def check_vocabulary(self, vocab_size):
        if len(self.tokens) and self.tokens.max() >= vocab_size:
            raise ValidationError(f"token id {int(self.tokens.max())} >= vocabulary size {vocab_size}")
