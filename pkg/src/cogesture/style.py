"""Shared style space with motion, text and video prompt encoders.

The three encoders emit unit vectors of one common width. Motion and text
towers are trained together with a CLIP-style loss over (style phrase,
motion clip) pairs; the video tower is then distilled onto the frozen motion
tower from synthetic renderings. Once frozen, any attempt to update the
space raises :class:`~cogesture.errors.FrozenModelError`.
"""

import logging
import re
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FrozenModelError, NumericalError, OutOfVocabularyError, ValidationError
from .motion.skeleton import toy_skeleton
from .motion.types import Motion, pose_dim
from .utils import pad_sequences, seed_everything

log = logging.getLogger(__name__)

PROMPT_TEMPLATES = ("the person is {}", "{}", "a {} speaker", "{} gestures", "gesturing in a {} style")
BASE_WORDS = ("the", "person", "is", "a", "an", "speaker", "gestures", "gesturing", "in", "style")


@dataclass
class StyleConfig:
    num_joints: int = 8
    width: int = 768  # C_CLIP
    hidden: int = 64
    style_tags: tuple = ("large", "small", "fast", "lefty")
    frame_feature_dim: int = 64
    video_layers: int = 6
    video_heads: int = 4
    video_patch: int = 8
    azimuths: int = 8
    elevation: float = 0.2618  # 15 degrees
    camera_distance: float = 4.0
    focal: float = 1.5
    projection_seed: int = 2024
    tau: float = 0.07
    clip_range: tuple = (60, 240)
    style_steps: int = 800
    video_steps: int = 800
    batch_size: int = 32
    lr: float = 1e-3
    video_lr: float = 2e-3
    seed: int = 0

    @property
    def vocabulary(self):
        return tuple(BASE_WORDS) + tuple(self.style_tags)


@dataclass
class StyleEmbedding:
    z_s: np.ndarray

    def __post_init__(self):
        self.z_s = np.asarray(self.z_s, dtype=np.float64)
        if not np.all(np.isfinite(self.z_s)):
            raise ValidationError("style embedding is not finite")


@dataclass
class FrameFeatureSequence:
    features: np.ndarray  # (F, feature_dim)
    camera: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValidationError("frame features must be a 2D array")

    def __len__(self):
        return len(self.features)


# ---------------------------------------------------------------------------
# synthetic renderer
# ---------------------------------------------------------------------------

def camera_ring(cfg):
    """The fixed set of camera parameters used for training renders."""
    return [dict(azimuth=2 * np.pi * i / cfg.azimuths, elevation=cfg.elevation,
                 distance=cfg.camera_distance, focal=cfg.focal) for i in range(cfg.azimuths)]


def _frame_projection(cfg):
    rng = np.random.default_rng(cfg.projection_seed)
    n_in = 2 * cfg.num_joints
    return rng.standard_normal((n_in, cfg.frame_feature_dim)) / np.sqrt(n_in)


def render_synthetic(motion, camera, cfg):
    """Project joint positions through a pinhole camera, then embed each frame.

    The per-frame embedder is a fixed random projection followed by tanh; it
    plays the role of a frozen image encoder.
    """
    az = float(camera.get("azimuth", 0.0))
    el = float(camera.get("elevation", cfg.elevation))
    dist = float(camera.get("distance", cfg.camera_distance))
    focal = float(camera.get("focal", cfg.focal))
    if not all(np.isfinite([az, el, dist, focal])) or dist <= 0 or focal <= 0 or abs(el) >= np.pi / 2:
        raise ValidationError(f"degenerate camera parameters {camera}")
    skel = toy_skeleton(motion.num_joints)
    pos = skel.joint_positions(motion)  # (K, J, 3)
    target = np.array([0.0, 1.2, 0.0])
    fwd = -np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    eye = target - dist * fwd
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    rel = pos - eye
    xc, yc, zc = rel @ right, rel @ up, rel @ fwd
    if np.any(zc <= 1e-3):
        raise ValidationError("skeleton passes behind the camera")
    uv = np.stack([focal * xc / zc, focal * yc / zc], axis=-1).reshape(len(pos), -1)
    feats = np.tanh(uv @ _frame_projection(cfg) * 3.0)
    return FrameFeatureSequence(feats, dict(azimuth=az, elevation=el, distance=dist, focal=focal))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class MotionStyleEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = pose_dim(cfg.num_joints)
        h = cfg.hidden
        self.register_buffer("mean", torch.zeros(d))
        self.register_buffer("std", torch.ones(d))
        self.convs = nn.ModuleList([
            nn.Conv1d(d, h, 5, padding=2),
            nn.Conv1d(h, h, 5, padding=4, dilation=2),
            nn.Conv1d(h, h, 5, padding=8, dilation=4),
        ])
        self.head = nn.Sequential(nn.Linear(3 * h, h), nn.ReLU(), nn.Linear(h, cfg.width))

    def forward(self, poses, mask):
        """poses (B, K, D), mask (B, K) -> unit vectors (B, width)."""
        x = ((poses - self.mean) / self.std).transpose(1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        x = x.transpose(1, 2)
        m = mask[..., None].to(x.dtype)
        mean = (x * m).sum(1) / m.sum(1)
        var = ((x - mean[:, None]) ** 2 * m).sum(1) / m.sum(1)
        mx = x.masked_fill(~mask[..., None], float("-inf")).max(1).values
        return F.normalize(self.head(torch.cat([mean, (var + 1e-6).sqrt(), mx], -1)), dim=-1)


class TextStyleEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.vocab = {w: i for i, w in enumerate(cfg.vocabulary)}
        self.embed = nn.EmbeddingBag(len(self.vocab), cfg.hidden, mode="mean")
        self.head = nn.Sequential(nn.Linear(cfg.hidden, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, cfg.width))

    def tokenize(self, text):
        words = [w for w in re.split(r"[^a-z0-9]+", text.lower()) if w]
        if not words:
            raise ValidationError("empty style prompt")
        missing = [w for w in words if w not in self.vocab]
        if missing:
            raise OutOfVocabularyError(f"unknown prompt word(s): {', '.join(missing)}")
        return [self.vocab[w] for w in words]

    def forward(self, token_lists):
        flat = torch.as_tensor([t for ts in token_lists for t in ts], dtype=torch.long)
        offsets = torch.as_tensor(np.cumsum([0] + [len(ts) for ts in token_lists[:-1]]), dtype=torch.long)
        return F.normalize(self.head(self.embed(flat, offsets)), dim=-1)


class VideoStyleEncoder(nn.Module):
    """Per-frame features -> strided temporal conv patches -> transformer -> pooled unit vector."""

    def __init__(self, cfg):
        super().__init__()
        h = cfg.hidden
        self.patch = cfg.video_patch
        self.frame = nn.Conv1d(cfg.frame_feature_dim, h, 5, padding=2)
        self.merge = nn.Conv1d(h, h, self.patch, stride=self.patch)
        self.pos = nn.Embedding(1024, h)
        layer = nn.TransformerEncoderLayer(h, cfg.video_heads, 2 * h, dropout=0.0, batch_first=True, norm_first=True)
        self.body = nn.TransformerEncoder(layer, cfg.video_layers, enable_nested_tensor=False)
        self.head = nn.Linear(3 * h, cfg.width)

    def forward(self, frames, mask):
        if frames.shape[1] == 0 or mask.sum(1).min() < 1:
            raise ValidationError("video has no frames")
        pad = (-frames.shape[1]) % self.patch
        frames = F.pad(frames * mask[..., None], (0, 0, 0, pad))
        mask = F.pad(mask, (0, pad))
        x = F.gelu(self.frame(frames.transpose(1, 2)))
        x = self.merge(x * mask[:, None].to(x.dtype)).transpose(1, 2)
        tmask = mask.reshape(mask.shape[0], -1, self.patch).any(-1)
        pos = torch.arange(x.shape[1]).clamp_max(self.pos.num_embeddings - 1)
        x = self.body(x + self.pos(pos)[None], src_key_padding_mask=~tmask)
        m = tmask[..., None].to(x.dtype)
        mean = (x * m).sum(1) / m.sum(1)
        std = ((((x - mean[:, None]) ** 2) * m).sum(1) / m.sum(1) + 1e-6).sqrt()
        mx = x.masked_fill(~tmask[..., None], float("-inf")).max(1).values
        return F.normalize(self.head(torch.cat([mean, std, mx], -1)), dim=-1)


class StyleSpace(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.motion = MotionStyleEncoder(cfg)
        self.text = TextStyleEncoder(cfg)
        self.video = VideoStyleEncoder(cfg)
        self._frozen = False

    @property
    def frozen(self):
        return self._frozen

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self._frozen = True
        self.eval()
        return self

    def trainable(self, *parts):
        """Parameters of the named towers; refuses once the space is frozen."""
        if self._frozen:
            raise FrozenModelError("style space is frozen; its parameters cannot be updated")
        return [p for part in parts for p in getattr(self, part).parameters()]

    @torch.no_grad()
    def encode_style_motion(self, motion):
        if motion.num_frames < 1:
            raise ValidationError("empty motion prompt")
        x = torch.as_tensor(motion.trimmed().poses, dtype=torch.float32)[None]
        return StyleEmbedding(self.motion(x, torch.ones(x.shape[:2], dtype=torch.bool))[0].double().numpy())

    @torch.no_grad()
    def encode_style_text(self, text):
        return StyleEmbedding(self.text([self.text.tokenize(text)])[0].double().numpy())

    @torch.no_grad()
    def encode_style_video(self, frames):
        feats = frames.features if isinstance(frames, FrameFeatureSequence) else np.asarray(frames)
        if len(feats) == 0:
            raise ValidationError("video has no frames")
        f = torch.as_tensor(feats, dtype=torch.float32)[None]
        return StyleEmbedding(self.video(f, torch.ones(f.shape[:2], dtype=torch.bool))[0].double().numpy())

    def render(self, motion, camera):
        return render_synthetic(motion, camera, self.cfg)


def video_encoder_loss(space, poses, pmask, frames, fmask):
    """1 - cos(sg(motion embedding), video embedding), averaged over the batch."""
    with torch.no_grad():
        target = space.motion(poses, pmask)
    pred = space.video(frames, fmask)
    return (1.0 - (target.detach() * pred).sum(-1)).mean()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _random_clips(sessions, n, cfg, rng):
    """Sample ``n`` motion clips (and their tags) from per-session pose arrays."""
    clips, tags = [], []
    lo, hi = cfg.clip_range
    for _ in range(n):
        poses, tag = sessions[rng.integers(len(sessions))]
        length = int(min(len(poses), rng.integers(lo, hi + 1)))
        start = int(rng.integers(0, len(poses) - length + 1))
        clips.append(poses[start:start + length])
        tags.append(tag)
    return clips, tags


def session_takes(items):
    """Concatenate consecutive sentences of each session into one pose array."""
    takes = {}
    for it in items:
        takes.setdefault(it.session, ([], it.style))[0].append(it.motion.poses)
    return [(np.concatenate(parts), tag) for parts, tag in takes.values()]


def _soft_targets(tags):
    same = np.array([[a == b for b in tags] for a in tags], dtype=np.float64)
    return torch.as_tensor(same / same.sum(1, keepdims=True), dtype=torch.float32)


def train_style_space(train_items, cfg, heldout_items=None, progress=None):
    """Train the motion/text towers, then distill the video tower; returns (space, report)."""
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    space = StyleSpace(cfg)
    takes = session_takes(train_items)
    allf = np.concatenate([t[0] for t in takes])
    space.motion.mean.copy_(torch.as_tensor(allf.mean(0)))
    space.motion.std.copy_(torch.as_tensor(np.maximum(allf.std(0), 1e-3)))
    report = {}

    opt = torch.optim.Adam(space.trainable("motion", "text"), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, cfg.style_steps), cfg.lr * 0.05)
    for step in range(cfg.style_steps):
        clips, tags = _random_clips(takes, cfg.batch_size, cfg, rng)
        x, m = pad_sequences(clips)
        z_m = space.motion(torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(m))
        prompts = [PROMPT_TEMPLATES[rng.integers(len(PROMPT_TEMPLATES))].format(t) for t in tags]
        z_t = space.text([space.text.tokenize(p) for p in prompts])
        logits = z_m @ z_t.T / cfg.tau
        target = _soft_targets(tags)
        loss = 0.5 * (-(target * F.log_softmax(logits, 1)).sum(1).mean()
                      - (target * F.log_softmax(logits.T, 1)).sum(1).mean())
        if not torch.isfinite(loss):
            raise NumericalError(f"style loss became non-finite at step {step}", step=step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if progress and step % 100 == 0:
            progress({"phase": "style", "step": step, "loss": loss.item()})
    report["style_final_loss"] = loss.item() if cfg.style_steps else None

    cams = camera_ring(cfg)
    opt = torch.optim.Adam(space.trainable("video"), lr=cfg.video_lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, cfg.video_lr, total_steps=max(2, cfg.video_steps),
                                                pct_start=max(0.1, 2.0 / max(2, cfg.video_steps)))
    for step in range(cfg.video_steps):
        clips, _ = _random_clips(takes, cfg.batch_size, cfg, rng)
        renders = [render_synthetic(Motion(c, 60.0), cams[rng.integers(len(cams))], cfg).features for c in clips]
        x, m = pad_sequences(clips)
        f, fm = pad_sequences(renders)
        loss = video_encoder_loss(space, torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(m),
                                  torch.as_tensor(f, dtype=torch.float32), torch.as_tensor(fm))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if progress and step % 100 == 0:
            progress({"phase": "video", "step": step, "loss": loss.item()})
    report["video_final_loss"] = loss.item() if cfg.video_steps else None

    space.eval()
    if heldout_items:
        report.update(evaluate_style_space(space, heldout_items))
    return space, report


@torch.no_grad()
def evaluate_style_space(space, items, seed=99):
    """Tag retrieval accuracy, same/cross-tag cosine margin and video agreement on ``items``."""
    cfg = space.cfg
    rng = np.random.default_rng(seed)
    tags = list(cfg.style_tags)
    text = np.stack([space.encode_style_text(f"the person is {t}").z_s for t in tags])
    mot = np.stack([space.encode_style_motion(it.motion).z_s for it in items])
    labels = np.array([tags.index(it.style) for it in items])
    sims = mot @ text.T
    m2t = float((sims.argmax(1) == labels).mean())
    t2m = float(np.mean([labels[sims[:, j].argmax()] == j for j in range(len(tags))]))
    cos = mot @ mot.T
    same = labels[:, None] == labels[None]
    off = ~np.eye(len(items), dtype=bool)
    cams = camera_ring(cfg)
    vid = []
    for it, z in zip(items, mot):
        r = render_synthetic(it.motion, cams[rng.integers(len(cams))], cfg)
        vid.append(float(space.encode_style_video(r).z_s @ z))
    return {
        "motion_to_text_top1": m2t,
        "text_to_motion_top1": t2m,
        "same_tag_cosine": float(cos[same & off].mean()) if (same & off).any() else None,
        "cross_tag_cosine": float(cos[~same].mean()) if (~same).any() else None,
        "video_motion_cosine": float(np.mean(vid)),
    }


def save_style_space(space, path, meta=None):
    cfg = asdict(space.cfg)
    return save_checkpoint(path, "style", cfg, {"model": space.state_dict(), "frozen": space.frozen}, meta)


def load_style_space(path):
    blob = load_checkpoint(path, "style")
    cfg = blob["config"]
    cfg["style_tags"] = tuple(cfg["style_tags"])
    cfg["clip_range"] = tuple(cfg["clip_range"])
    space = StyleSpace(StyleConfig(**cfg))
    space.load_state_dict(blob["state"]["model"])
    space.freeze()
    space.checkpoint_sha256 = blob["sha256"]
    return space
