"""Driving speech: per-sentence transcript tokens and latent-rate audio features.

Speech files are JSON::

    {"version": 1, "fps": 60.0, "downsample": 8,
     "sentences": [{"tokens": [3, 17, ...],
                    "audio": [[onset, envelope], ...],      # one row per latent step
                    "num_frames": 131}, ...]}

Instead of ``audio`` a sentence may give ``word_spans`` (frame ranges, one
per token) and optional ``stress`` values; the audio channels are then
synthesized from a per-word envelope the same way the corpus does it.
``tokens`` may hold vocabulary words instead of ids when a vocabulary is
supplied to :func:`load_speech`.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import OutOfVocabularyError, UnsupportedVersionError, ValidationError
from .motion.audio import envelope_from_word_spans, features_from_envelope

SPEECH_VERSION = 1


@dataclass
class Sentence:
    """One sentence of driving speech: transcript token ids and latent-rate audio."""

    tokens: np.ndarray
    audio: np.ndarray  # (L, 2)
    num_frames: int = None  # output length in frames; defaults to L * d

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        if len(self.tokens) == 0:
            raise ValidationError("sentence has no tokens")
        if self.audio.ndim != 2 or self.audio.shape[1] != 2 or len(self.audio) == 0:
            raise ValidationError(f"audio must be (L, 2) with L >= 1, got {self.audio.shape}")
        if not np.all(np.isfinite(self.audio)):
            raise ValidationError("audio contains non-finite values")

    @classmethod
    def from_item(cls, item):
        return cls(np.asarray(item.transcript.tokens), np.asarray(item.audio.frames), item.motion.num_frames)


def _token_ids(raw, vocabulary):
    ids = []
    for t in raw:
        if isinstance(t, str):
            if vocabulary is None or t not in vocabulary:
                raise OutOfVocabularyError(f"unknown word {t!r}")
            ids.append(vocabulary.index(t))
        else:
            ids.append(int(t))
    return ids


def sentence_from_dict(d, downsample=8, vocabulary=None):
    if "tokens" not in d:
        raise ValidationError("sentence is missing 'tokens'")
    tokens = _token_ids(d["tokens"], vocabulary)
    n = d.get("num_frames")
    if "audio" in d:
        audio = np.asarray(d["audio"], dtype=np.float64)
    elif "word_spans" in d:
        spans = np.asarray(d["word_spans"], dtype=np.int64)
        if spans.shape != (len(tokens), 2):
            raise ValidationError("word_spans needs one [start, end) pair per token")
        stress = d.get("stress", [1.0] * len(tokens))
        n = n or int(spans[:, 1].max())
        audio = features_from_envelope(envelope_from_word_spans(spans, stress, n), downsample).frames
    else:
        raise ValidationError("sentence needs 'audio' or 'word_spans'")
    if n is not None and not (len(audio) - 1) * downsample < n <= len(audio) * downsample:
        raise ValidationError(f"num_frames={n} does not match {len(audio)} audio steps at d={downsample}")
    return Sentence(tokens, audio, n)


def load_speech(path, downsample=8, vocabulary=None):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"speech file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if data.get("version") != SPEECH_VERSION:
        raise UnsupportedVersionError(f"{path}: speech file version {data.get('version')} (expected {SPEECH_VERSION})")
    if data.get("downsample", downsample) != downsample:
        raise ValidationError(f"{path}: audio at d={data['downsample']} but the codec uses d={downsample}")
    sentences = data.get("sentences") or []
    if not sentences:
        raise ValidationError(f"{path}: no sentences")
    return [sentence_from_dict(s, downsample, vocabulary) for s in sentences]


def save_speech(sentences, path, downsample=8, fps=60.0):
    data = {"version": SPEECH_VERSION, "fps": fps, "downsample": downsample, "sentences": [
        {"tokens": s.tokens.tolist(), "audio": s.audio.tolist(),
         **({"num_frames": int(s.num_frames)} if s.num_frames else {})} for s in sentences]}
    Path(path).write_text(json.dumps(data))
