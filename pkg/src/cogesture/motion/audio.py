import numpy as np

from .. import _kernels
from ..errors import ValidationError
from .types import AudioFeatures


def _resample(x, length):
    if len(x) == length:
        return x.copy()
    src = (np.arange(len(x)) + 0.5) / len(x)
    dst = (np.arange(length) + 0.5) / length
    return np.interp(dst, src, x)


def extract_audio_features(waveform, target_length, hop=None):
    """Onset strength and amplitude envelope, resampled to ``target_length``.

    The waveform is cut into non-overlapping frames of ``hop`` samples
    (default: ``len(waveform) // target_length``). The envelope is the frame
    RMS; the onset strength is the half-wave rectified first difference of
    frame energy, with the energy before the first frame taken as zero.
    """
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ValidationError("waveform is empty")
    if target_length < 1:
        raise ValidationError("target_length must be >= 1")
    if not np.all(np.isfinite(x)):
        raise ValidationError("waveform contains non-finite samples")
    if hop is None:
        hop = max(1, len(x) // target_length)
    n_frames = max(1, -(-len(x) // hop))
    energy, rms = _kernels.frame_energy(x, hop, n_frames)
    onset = np.maximum(np.diff(energy, prepend=0.0), 0.0)
    frames = np.stack([_resample(onset, target_length), _resample(rms, target_length)], axis=1)
    return AudioFeatures(frames)


def envelope_from_word_spans(word_spans, stresses, num_frames):
    """Frame-rate speech envelope: a raised-cosine bump per spoken word."""
    env = np.zeros(num_frames)
    for (start, end), stress in zip(word_spans, stresses):
        n = end - start
        bump = np.sin(np.pi * (np.arange(n) + 0.5) / n) ** 2
        env[start:end] = np.maximum(env[start:end], stress * bump)
    return env


def features_from_envelope(envelope, downsample):
    """Latent-rate AudioFeatures from a frame-rate envelope (length multiple of ``downsample``)."""
    env = np.asarray(envelope, dtype=np.float64)
    if len(env) % downsample:
        env = np.concatenate([env, np.zeros((-len(env)) % downsample)])
    level = env.reshape(-1, downsample).mean(1)
    onset = np.maximum(np.diff(level, prepend=0.0), 0.0)
    return AudioFeatures(np.stack([onset, level], axis=1))
