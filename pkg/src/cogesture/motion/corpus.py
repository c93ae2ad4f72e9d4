"""Procedural speech-gesture corpus.

Stands in for a motion-capture dataset. Speech is organized in sessions: one
speaker style per session, several consecutive sentences whose motion is a
single continuous take cut at sentence boundaries. Every semantic token
belongs to a motif family that triggers a fixed arm/torso gesture near the
word onset (with random misalignment); filler tokens trigger nothing. The
session style reshapes the whole take (amplitude, tempo, left/right balance).
"""

import zlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .audio import envelope_from_word_spans, features_from_envelope
from .rotation import euler_to_rot6d
from .skeleton import LEFT_ARM, RIGHT_ARM, toy_skeleton
from .types import AudioFeatures, Motion, Transcript

MOTIF_LIBRARY_SEED = 91_337


@dataclass(frozen=True)
class StyleTransform:
    scale: float = 1.0
    tempo: float = 1.0
    left: float = 1.0
    right: float = 1.0


KNOWN_STYLES = {
    "neutral": StyleTransform(),
    "large": StyleTransform(scale=1.7),
    "small": StyleTransform(scale=0.45),
    "fast": StyleTransform(tempo=1.8),
    "lefty": StyleTransform(left=1.5, right=0.35),
    "righty": StyleTransform(left=0.35, right=1.5),
    "slow": StyleTransform(tempo=0.6),
}


def style_transform(tag):
    if tag in KNOWN_STYLES:
        return KNOWN_STYLES[tag]
    h = zlib.crc32(tag.encode())
    r = np.random.default_rng(h)
    return StyleTransform(scale=float(r.uniform(0.5, 1.8)), tempo=float(r.uniform(0.7, 1.6)),
                          left=float(r.uniform(0.4, 1.5)), right=float(r.uniform(0.4, 1.5)))


@dataclass
class CorpusConfig:
    num_items: int = 512
    num_joints: int = 8
    k_range: tuple = (96, 160)
    vocab_size: int = 24
    num_motifs: int = 6
    style_tags: tuple = ("large", "small", "fast", "lefty")
    sentences_per_session: int = 8
    jitter: int = 10
    motif_frames: int = 32
    fps: float = 60.0
    downsample: int = 8

    def validate(self):
        if not self.style_tags:
            raise ValidationError("style_tags must not be empty")
        if len(set(self.style_tags)) != len(self.style_tags):
            raise ValidationError("style_tags must be unique")
        transforms = [style_transform(t) for t in self.style_tags]
        if len(set(transforms)) != len(transforms):
            raise ValidationError("every style tag needs a distinct motion transform")
        if self.vocab_size < 8:
            raise ValidationError("vocab_size must be >= 8")
        if self.num_items < 1 or self.num_joints < 2:
            raise ValidationError("num_items >= 1 and num_joints >= 2 required")
        lo, hi = self.k_range
        if not 24 <= lo <= hi:
            raise ValidationError("k_range must satisfy 24 <= lo <= hi")
        if not 1 <= self.num_motifs <= self.num_semantic_tokens:
            raise ValidationError("num_motifs must be between 1 and the number of semantic tokens")

    @property
    def num_semantic_tokens(self):
        return (2 * self.vocab_size) // 3

    def token_family(self, token):
        """Motif family of a token, or -1 for filler words."""
        return token % self.num_motifs if token < self.num_semantic_tokens else -1


@dataclass
class CorpusItem:
    motion: Motion
    audio: AudioFeatures
    transcript: Transcript
    style: str
    session: int
    position: int  # sentence index inside the session
    motif_onsets: np.ndarray  # frame of each word's gesture onset, -1 for fillers
    neutral_angles: np.ndarray  # (K, J, 3) joint-angle deviations before the style transform


@dataclass
class SyntheticCorpus:
    items: list
    config: CorpusConfig
    seed: int
    vocabulary: tuple = field(default=())

    @property
    def style_tags(self):
        return tuple(self.config.style_tags)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def split(self, holdout_fraction=0.15):
        """Deterministic session-level split into (train, held-out) item lists."""
        sessions = sorted({it.session for it in self.items})
        n_hold = max(1, int(round(len(sessions) * holdout_fraction)))
        # keep every style represented on both sides by holding out the last sessions
        held = set(sessions[-n_hold:])
        train = [it for it in self.items if it.session not in held]
        test = [it for it in self.items if it.session in held]
        return train, test

    def previous(self, item):
        """The sentence preceding ``item`` in its session, or None."""
        if item.position == 0:
            return None
        idx = self.items.index(item)
        prev = self.items[idx - 1]
        return prev if prev.session == item.session else None


def vocabulary(config):
    sem = [f"gesture{t}" for t in range(config.num_semantic_tokens)]
    fill = [f"filler{t}" for t in range(config.vocab_size - config.num_semantic_tokens)]
    return tuple(sem + fill)


def _rest_angles(skel):
    rest = np.zeros((skel.num_joints, 3))
    if "l_shoulder" in skel.names:
        rest[skel.index("l_shoulder"), 2] = -1.2
        rest[skel.index("r_shoulder"), 2] = 1.2
        rest[skel.index("l_elbow"), 1] = 0.3
        rest[skel.index("r_elbow"), 1] = -0.3
    return rest


def _active_joints(skel):
    if "l_shoulder" in skel.names:
        return [skel.index(n) for n in ("spine",) + LEFT_ARM + RIGHT_ARM]
    return list(range(1, skel.num_joints))


def motif_library(config):
    """Per-family motif parameters: amplitude (J, 3), cycles, phase (J, 3)."""
    skel = toy_skeleton(config.num_joints)
    active = _active_joints(skel)
    lib = []
    for f in range(config.num_motifs):
        r = np.random.default_rng([MOTIF_LIBRARY_SEED, f])
        amp = np.zeros((skel.num_joints, 3))
        amp[active] = r.uniform(-0.8, 0.8, (len(active), 3))
        # the torso sways much less than the arms
        if "spine" in skel.names:
            amp[skel.index("spine")] *= 0.25
        cycles = 0.5 + 0.5 * (f % 3) + r.uniform(0.0, 0.25)
        phase = r.uniform(0, 2 * np.pi, (skel.num_joints, 3))
        lib.append((amp, cycles, phase))
    return lib


def motif_trajectory(motif, duration):
    """Angle deviations ``(duration, J, 3)`` of one motif played over ``duration`` frames."""
    amp, cycles, phase = motif
    u = (np.arange(duration) + 0.5) / duration
    window = np.sin(np.pi * u) ** 2
    return amp[None] * window[:, None, None] * np.cos(2 * np.pi * cycles * u[:, None, None] + phase[None])


def _render_take(total, onsets_families, lib, config, transform, idle_phase):
    skel = toy_skeleton(config.num_joints)
    t = np.arange(total) / config.fps
    dev = np.zeros((total, skel.num_joints, 3))
    # idle breathing, sped up by tempo like everything else
    idle = 0.04 * np.sin(2 * np.pi * 0.3 * transform.tempo * t + idle_phase)
    active = _active_joints(skel)
    dev[:, active, 0] += idle[:, None]
    duration = max(8, int(round(config.motif_frames / transform.tempo)))
    for onset, fam in onsets_families:
        traj = motif_trajectory(lib[fam], duration)
        end = min(total, onset + duration)
        dev[onset:end] += traj[: end - onset]
    dev *= transform.scale
    if "l_shoulder" in skel.names:
        for name in LEFT_ARM:
            dev[:, skel.index(name)] *= transform.left
        for name in RIGHT_ARM:
            dev[:, skel.index(name)] *= transform.right
    root = np.zeros((total, 3))
    root[:, 0] = 0.02 * transform.scale * np.sin(2 * np.pi * 0.2 * transform.tempo * t + idle_phase)
    root[:, 2] = 0.01 * np.cos(2 * np.pi * 0.13 * t + idle_phase)
    return dev, root


def _session(seed, session, style, config, lib, n_sentences):
    rng = np.random.default_rng([seed, session])
    lo, hi = config.k_range
    lengths = rng.integers(lo, hi + 1, size=n_sentences)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    total = int(lengths.sum())

    sentences = []
    onsets_families = []
    for s in range(n_sentences):
        k = int(lengths[s])
        n_words = max(1, int(round(k / 36)))
        cuts = np.sort(rng.choice(np.arange(20, k - 19), size=n_words - 1, replace=False)) if n_words > 1 else []
        bounds = np.concatenate([[0], cuts, [k]]).astype(int)
        # keep words at least 16 frames long
        while n_words > 1 and np.min(np.diff(bounds)) < 16:
            n_words -= 1
            cuts = np.sort(rng.choice(np.arange(20, k - 19), size=n_words - 1, replace=False)) if n_words > 1 else []
            bounds = np.concatenate([[0], cuts, [k]]).astype(int)
        spans = []
        for w in range(n_words):
            a, b = bounds[w], bounds[w + 1]
            spans.append((a, a + max(4, int(0.8 * (b - a)))))
        spans = np.array(spans)
        semantic = rng.random(n_words) < 0.6
        if not semantic.any():
            semantic[rng.integers(n_words)] = True
        tokens = np.where(
            semantic,
            rng.integers(0, config.num_semantic_tokens, n_words),
            rng.integers(config.num_semantic_tokens, config.vocab_size, n_words),
        )
        jitter = rng.integers(-config.jitter, config.jitter + 1, n_words)
        stress = rng.uniform(0.6, 1.0, n_words)
        onsets = np.full(n_words, -1)
        for w in range(n_words):
            fam = config.token_family(int(tokens[w]))
            if fam >= 0:
                onsets[w] = max(0, starts[s] + spans[w, 0] + jitter[w])
                onsets_families.append((int(onsets[w]), fam))
        sentences.append((k, tokens, spans, stress, onsets))

    idle_phase = rng.uniform(0, 2 * np.pi)
    dev, root = _render_take(total, onsets_families, lib, config, style_transform(style), idle_phase)
    neutral, _ = _render_take(total, onsets_families, lib, config, StyleTransform(), idle_phase)
    skel = toy_skeleton(config.num_joints)
    angles = dev + _rest_angles(skel)[None]
    rot6d = euler_to_rot6d(angles)
    poses = np.concatenate([root, rot6d.reshape(total, -1)], axis=1)

    items = []
    for s, (k, tokens, spans, stress, onsets) in enumerate(sentences):
        a = int(starts[s])
        env = envelope_from_word_spans(spans, stress, k)
        audio = features_from_envelope(env, config.downsample)
        rel_onsets = np.where(onsets >= 0, onsets - a, -1)
        items.append(CorpusItem(
            motion=Motion(poses[a:a + k].copy(), config.fps),
            audio=audio,
            transcript=Transcript(tokens, spans),
            style=style,
            session=session,
            position=s,
            motif_onsets=rel_onsets,
            neutral_angles=neutral[a:a + k].copy(),
        ))
    return items


def generate_corpus(seed, config=None):
    """Build a SyntheticCorpus; a pure function of ``(seed, config)``."""
    config = config or CorpusConfig()
    config.validate()
    lib = motif_library(config)
    per = config.sentences_per_session
    n_sessions = -(-config.num_items // per)
    items = []
    for session in range(n_sessions):
        style = config.style_tags[session % len(config.style_tags)]
        n = min(per, config.num_items - session * per)
        items.extend(_session(seed, session, style, config, lib, n))
    return SyntheticCorpus(items=items, config=config, seed=seed, vocabulary=vocabulary(config))


def render_item(tokens, word_spans, style, config, seed=0, onset_jitter=None):
    """Render one sentence for explicit tokens and spans.

    Used for controlled comparisons (same words, different styles): with the
    same ``seed`` the misalignment and idle phase are shared across styles.
    """
    config = config or CorpusConfig()
    lib = motif_library(config)
    rng = np.random.default_rng([seed, 7])
    tokens = np.asarray(tokens)
    spans = np.asarray(word_spans)
    k = int(spans[-1, 1]) + 8
    if onset_jitter is None:
        onset_jitter = rng.integers(-config.jitter, config.jitter + 1, len(tokens))
    ons = []
    for w, tok in enumerate(tokens):
        fam = config.token_family(int(tok))
        if fam >= 0:
            ons.append((max(0, int(spans[w, 0] + onset_jitter[w])), fam))
    idle_phase = rng.uniform(0, 2 * np.pi)
    dev, root = _render_take(k, ons, lib, config, style_transform(style), idle_phase)
    skel = toy_skeleton(config.num_joints)
    rot6d = euler_to_rot6d(dev + _rest_angles(skel)[None])
    motion = Motion(np.concatenate([root, rot6d.reshape(k, -1)], axis=1), config.fps)
    return motion, dev
