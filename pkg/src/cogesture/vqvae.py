"""Vector-quantized motion codec.

A 1D-convolutional encoder downsamples a pose sequence by ``d = 2**levels``
into ``C``-dim latents, a codebook quantizes each latent to its nearest entry,
and a mirrored decoder maps quantized latents back to poses. Training uses the
usual reconstruction + codebook + commitment objective with a straight-through
gradient copy across the quantizer.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import _kernels
from .checkpoint import load_checkpoint, require_match, save_checkpoint
from .errors import NumericalError, ShapeError, StateError, ValidationError
from .motion.rotation import renormalize_rot6d
from .motion.types import Motion, pose_dim
from .utils import seed_everything

log = logging.getLogger(__name__)


@dataclass
class VQVAEConfig:
    input_dim: int = pose_dim(8)
    latent_dim: int = 512  # C
    codebook_size: int = 512
    width: int = 64
    levels: int = 3  # d = 2**levels = 8
    res_blocks: int = 2
    kind: str = "conv"  # "conv" (residual stack) or "pool" (average pool + linear toy)
    beta: float = 0.25
    rot6d_offset: int = 3  # first 6D channel; -1 when the input carries no rotations
    lr: float = 2e-3
    epochs: int = 40
    batch_size: int = 32
    clip_frames: int = 240  # 4 s at 60 fps
    reseed_dead: bool = True
    codebook_update: str = "ema"  # "ema" (k-means style running averages) or "gradient"
    ema_decay: float = 0.99
    seed: int = 0

    @property
    def downsample(self):
        return 2 ** self.levels

    def validate(self):
        if self.codebook_size < 2:
            raise ValidationError("codebook_size must be >= 2")
        if self.codebook_update not in ("ema", "gradient"):
            raise ValidationError(f"unknown codebook update {self.codebook_update!r}")
        if self.kind not in ("conv", "pool"):
            raise ValidationError(f"unknown codec kind {self.kind!r}")
        if self.clip_frames % self.downsample:
            raise ValidationError("clip_frames must be a multiple of the downsampling rate")


@dataclass
class LatentSequence:
    codes: np.ndarray  # (L, C)
    indices: np.ndarray = None  # (L,) codebook ids when quantized
    downsample_rate: int = 8
    pad_length: int = 0
    fps: float = 60.0

    def __len__(self):
        return len(self.codes)

    @property
    def quantized(self):
        return self.indices is not None


@dataclass
class Codebook:
    vectors: np.ndarray
    usage_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.usage_counts is None:
            self.usage_counts = np.zeros(len(self.vectors), dtype=np.int64)


class ResBlock1d(nn.Module):
    def __init__(self, width, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


def _conv_encoder(cfg):
    layers = [nn.Conv1d(cfg.input_dim, cfg.width, 3, padding=1)]
    for _ in range(cfg.levels):
        layers.append(nn.Conv1d(cfg.width, cfg.width, 4, stride=2, padding=1))
        layers.extend(ResBlock1d(cfg.width, 3 ** i) for i in range(cfg.res_blocks))
    layers += [nn.ReLU(), nn.Conv1d(cfg.width, cfg.latent_dim, 3, padding=1)]
    return nn.Sequential(*layers)


def _conv_decoder(cfg):
    layers = [nn.Conv1d(cfg.latent_dim, cfg.width, 3, padding=1)]
    for _ in range(cfg.levels):
        layers.extend(ResBlock1d(cfg.width, 3 ** i) for i in reversed(range(cfg.res_blocks)))
        layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv1d(cfg.width, cfg.width, 3, padding=1)]
    layers += [nn.ReLU(), nn.Conv1d(cfg.width, cfg.input_dim, 3, padding=1)]
    return nn.Sequential(*layers)


class _PoolEncoder(nn.Module):
    # toy encoder: mean over each block of d frames, then a linear map
    def __init__(self, cfg):
        super().__init__()
        self.d = cfg.downsample
        self.proj = nn.Linear(cfg.input_dim, cfg.latent_dim)

    def forward(self, x):
        return self.proj(F.avg_pool1d(x, self.d).transpose(1, 2)).transpose(1, 2)


class _PoolDecoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.d = cfg.downsample
        self.proj = nn.Linear(cfg.latent_dim, cfg.input_dim)

    def forward(self, z):
        return self.proj(z.transpose(1, 2)).transpose(1, 2).repeat_interleave(self.d, dim=2)


class MotionCodec(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.kind == "conv":
            self.encoder, self.decoder = _conv_encoder(cfg), _conv_decoder(cfg)
        else:
            self.encoder, self.decoder = _PoolEncoder(cfg), _PoolDecoder(cfg)
        self.codebook = nn.Parameter(torch.randn(cfg.codebook_size, cfg.latent_dim) / math.sqrt(cfg.latent_dim))
        self.register_buffer("mean", torch.zeros(cfg.input_dim))
        self.register_buffer("std", torch.ones(cfg.input_dim))
        self.register_buffer("usage", torch.zeros(cfg.codebook_size, dtype=torch.long))
        self.register_buffer("ema_size", torch.ones(cfg.codebook_size))
        self.register_buffer("ema_sum", self.codebook.detach().clone())
        if cfg.codebook_update == "ema":
            self.codebook.requires_grad_(False)

    @torch.no_grad()
    def ema_step(self, z, idx):
        """Move each codebook entry towards the running mean of its assigned latents."""
        flat = z.detach().reshape(-1, z.shape[-1])
        onehot = F.one_hot(idx.reshape(-1), self.cfg.codebook_size).to(flat.dtype)
        decay = self.cfg.ema_decay
        self.ema_size.mul_(decay).add_(onehot.sum(0), alpha=1 - decay)
        self.ema_sum.mul_(decay).add_(onehot.T @ flat, alpha=1 - decay)
        n = self.ema_size.sum()
        size = (self.ema_size + 1e-5) / (n + self.cfg.codebook_size * 1e-5) * n
        self.codebook.copy_(self.ema_sum / size[:, None])

    @torch.no_grad()
    def reset_codes(self, which, vectors):
        self.codebook[which] = vectors
        self.ema_sum[which] = vectors
        self.ema_size[which] = 1.0

    @property
    def downsample(self):
        return self.cfg.downsample

    # -- tensor API (batch-first, time-second) ---------------------------------

    def encode_tensor(self, x):
        """(B, K, D) poses -> (B, L, C) continuous latents."""
        if x.shape[-1] != self.cfg.input_dim:
            raise ShapeError(f"codec expects pose width {self.cfg.input_dim}, got {x.shape[-1]}")
        if x.shape[1] % self.downsample:
            raise ShapeError(f"K={x.shape[1]} is not a multiple of d={self.downsample}")
        h = ((x - self.mean) / self.std).transpose(1, 2)
        return self.encoder(h).transpose(1, 2)

    def decode_tensor(self, z):
        """(B, L, C) latents -> (B, L*d, D) poses (no rotation renormalization)."""
        out = self.decoder(z.transpose(1, 2)).transpose(1, 2)
        return out * self.std + self.mean

    def nearest_indices(self, z):
        flat = z.detach().reshape(-1, z.shape[-1]).double()
        cb = self.codebook.detach().double()
        # explicit differences keep exact members exact; argmin returns the first minimum
        idx = [((blk[:, None, :] - cb[None]) ** 2).sum(-1).argmin(dim=1) for blk in flat.split(1024)]
        return torch.cat(idx).reshape(z.shape[:-1])

    def quantize_tensor(self, z):
        """Nearest-entry quantization with a straight-through gradient.

        Returns ``(z_q, z_q_raw, indices)`` where ``z_q`` carries the
        straight-through gradient to ``z`` and ``z_q_raw`` is attached to
        the codebook.
        """
        idx = self.nearest_indices(z)
        zq_raw = self.codebook[idx]
        zq = z + (zq_raw - z).detach()
        return zq, zq_raw, idx

    def losses(self, x, mask=None):
        """Reconstruction, codebook and commitment terms for a pose batch."""
        z = self.encode_tensor(x)
        zq, zq_raw, idx = self.quantize_tensor(z)
        # reconstruction is scored in per-channel standardized pose units so
        # that low-variance channels are not drowned by the latent-space terms
        recon = self.decoder(zq.transpose(1, 2)).transpose(1, 2)
        x = (x - self.mean) / self.std
        if mask is None:
            rec = F.mse_loss(recon, x)
            cb = F.mse_loss(zq_raw, z.detach())
            commit = self.cfg.beta * F.mse_loss(z, zq_raw.detach())
        else:
            m = mask[..., None].to(x.dtype)
            rec = ((recon - x) ** 2 * m).sum() / (m.sum() * x.shape[-1])
            lm = mask[:, :: self.downsample][..., None].to(x.dtype)
            denom = lm.sum() * z.shape[-1]
            cb = ((zq_raw - z.detach()) ** 2 * lm).sum() / denom
            commit = self.cfg.beta * ((z - zq_raw.detach()) ** 2 * lm).sum() / denom
        return {"reconstruction": rec, "codebook": cb, "commitment": commit,
                "total": rec + cb + commit, "indices": idx, "latents": z}

    # -- numpy / Motion API ----------------------------------------------------

    def _check_motion(self, motion):
        if motion.poses.shape[1] != self.cfg.input_dim:
            raise ShapeError(f"motion has pose width {motion.poses.shape[1]} (J={motion.num_joints}); "
                             f"codec was trained for width {self.cfg.input_dim}")

    @torch.no_grad()
    def encode(self, motion):
        """Continuous latents of a Motion, padded to a multiple of ``d`` first."""
        self._check_motion(motion)
        padded = motion.padded(self.downsample)
        x = torch.as_tensor(padded.poses, dtype=self.codebook.dtype)[None]
        z = self.encode_tensor(x)[0].double().numpy()
        return LatentSequence(z, None, self.downsample, padded.pad_length, motion.fps)

    def codebook_array(self):
        return self.codebook.detach().double().numpy()

    def get_codebook(self):
        return Codebook(self.codebook_array(), self.usage.numpy().copy())

    def quantize(self, latents):
        codes = latents.codes if isinstance(latents, LatentSequence) else np.asarray(latents)
        idx, zq = quantize(codes, self.codebook_array())
        if isinstance(latents, LatentSequence):
            return LatentSequence(zq, idx, latents.downsample_rate, latents.pad_length, latents.fps)
        return LatentSequence(zq, idx, self.downsample)

    @torch.no_grad()
    def decode(self, latents, renormalize=True):
        codes = latents.codes if isinstance(latents, LatentSequence) else np.asarray(latents)
        z = torch.as_tensor(codes, dtype=self.codebook.dtype)[None]
        poses = self.decode_tensor(z)[0].double().numpy()
        if renormalize and self.cfg.rot6d_offset >= 0:
            poses = renormalize_poses(poses, self.cfg.rot6d_offset)
        pad = latents.pad_length if isinstance(latents, LatentSequence) else 0
        fps = latents.fps if isinstance(latents, LatentSequence) else 60.0
        return Motion(poses, fps, pad)

    def reconstruct(self, motion):
        return self.decode(self.quantize(self.encode(motion))).trimmed()


def renormalize_poses(poses, offset=3):
    """Project every 6D block of a pose array onto valid rotations."""
    poses = np.array(poses, dtype=np.float64)
    rot = poses[..., offset:]
    n = rot.shape[-1] // 6
    rot = renormalize_rot6d(rot.reshape(*rot.shape[:-1], n, 6))
    poses[..., offset:] = rot.reshape(*poses.shape[:-1], n * 6)
    return poses


def quantize(codes, codebook):
    """Quantize ``(L, C)`` codes against a ``(N, C)`` codebook.

    Returns ``(indices, quantized)``; ties resolve to the lowest index.
    """
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.ndim != 2 or len(codebook) == 0:
        raise StateError("codebook is empty")
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if codes.shape[1] != codebook.shape[1]:
        raise ShapeError(f"latent width {codes.shape[1]} != codebook width {codebook.shape[1]}")
    idx = _kernels.nearest_code(codes, codebook)
    return idx, codebook[idx].copy()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _clip_batch(arrays, clip, rng):
    out = np.empty((len(arrays), clip, arrays[0].shape[1]))
    for i, a in enumerate(arrays):
        if len(a) < clip:
            a = np.concatenate([a, np.repeat(a[-1:], clip - len(a), 0)])
        start = rng.integers(0, len(a) - clip + 1)
        out[i] = a[start:start + clip]
    return out


def feature_arrays(items, select=None):
    arrays = [it.motion.poses for it in items]
    if select is not None:
        arrays = [a[:, select] for a in arrays]
    return arrays


@torch.no_grad()
def evaluate_reconstruction(codec, arrays):
    """Mean per-frame MSE on raw poses and the mean per-dimension variance of ``arrays``."""
    errs, count = 0.0, 0
    for a in arrays:
        k = len(a)
        pad = (-k) % codec.downsample
        x = np.concatenate([a, np.repeat(a[-1:], pad, 0)]) if pad else a
        xt = torch.as_tensor(x, dtype=torch.float32)[None]
        zq, _, _ = codec.quantize_tensor(codec.encode_tensor(xt))
        rec = codec.decode_tensor(zq)[0, :k].double().numpy()
        if codec.cfg.rot6d_offset >= 0:
            rec = renormalize_poses(rec, codec.cfg.rot6d_offset)
        errs += ((rec - a) ** 2).sum()
        count += a.size
    var = np.concatenate(arrays).var(axis=0).mean()
    return errs / count, float(var)


@torch.no_grad()
def codebook_usage(codec, arrays):
    used = torch.zeros(codec.cfg.codebook_size, dtype=torch.long)
    for a in arrays:
        pad = (-len(a)) % codec.downsample
        x = np.concatenate([a, np.repeat(a[-1:], pad, 0)]) if pad else a
        idx = codec.nearest_indices(codec.encode_tensor(torch.as_tensor(x, dtype=torch.float32)[None]))
        used += torch.bincount(idx.reshape(-1), minlength=codec.cfg.codebook_size)
    return used


def train_vqvae(train_arrays, cfg, held_out=None, progress=None):
    """Fit a MotionCodec on a list of ``(K_i, D)`` pose arrays.

    Returns ``(codec, report)``; the report holds per-epoch losses, dead-code
    fractions and held-out reconstruction numbers.
    """
    if not train_arrays:
        raise ValidationError("training corpus is empty")
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    codec = MotionCodec(cfg)
    allf = np.concatenate(train_arrays)
    codec.mean.copy_(torch.as_tensor(allf.mean(0)))
    codec.std.copy_(torch.as_tensor(np.maximum(allf.std(0), 1e-3)))
    clip = min(cfg.clip_frames, max(cfg.downsample, (min(len(a) for a in train_arrays) // cfg.downsample) * cfg.downsample))

    # codebook starts from random encoder outputs
    with torch.no_grad():
        x0 = torch.as_tensor(_clip_batch(train_arrays[: min(len(train_arrays), 256)], clip, rng), dtype=torch.float32)
        z0 = codec.encode_tensor(x0).reshape(-1, cfg.latent_dim)
        pick = torch.as_tensor(rng.integers(0, len(z0), cfg.codebook_size))
        codec.reset_codes(torch.ones(cfg.codebook_size, dtype=torch.bool), z0[pick] + 1e-3 * torch.randn_like(z0[pick]))

    opt = torch.optim.Adam([p for p in codec.parameters() if p.requires_grad], lr=cfg.lr)
    steps_per_epoch = max(1, len(train_arrays) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch, eta_min=cfg.lr * 0.05)
    report = {"epochs": [], "initial_heldout": None}
    if held_out:
        report["initial_heldout"] = evaluate_reconstruction(codec, held_out)[0]

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_arrays))
        usage = torch.zeros(cfg.codebook_size, dtype=torch.long)
        recent = []
        totals = []
        for s in range(steps_per_epoch):
            batch = [train_arrays[i] for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            x = torch.as_tensor(_clip_batch(batch, clip, rng), dtype=torch.float32)
            out = codec.losses(x)
            loss = out["total"]
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"VQ-VAE loss diverged in epoch {epoch}: reconstruction={out['reconstruction'].item()}, "
                    f"codebook={out['codebook'].item()}, commitment={out['commitment'].item()}", step=s)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            if cfg.codebook_update == "ema":
                codec.ema_step(out["latents"], out["indices"])
            usage += torch.bincount(out["indices"].reshape(-1), minlength=cfg.codebook_size)
            recent.append(out["latents"].detach().reshape(-1, cfg.latent_dim))
            recent = recent[-8:]
            totals.append(loss.item())
        dead = usage == 0
        entry = {"epoch": epoch, "loss": float(np.mean(totals)), "dead_fraction": float(dead.float().mean())}
        if cfg.reseed_dead and dead.any() and epoch < cfg.epochs - 1:
            pool = torch.cat(recent)
            pick = torch.as_tensor(rng.integers(0, len(pool), int(dead.sum())))
            codec.reset_codes(dead, pool[pick])
            entry["reseeded"] = int(dead.sum())
        report["epochs"].append(entry)
        if progress:
            progress(entry)
        log.info("vqvae epoch %d loss %.5f dead %.3f", epoch, entry["loss"], entry["dead_fraction"])

    final_usage = codebook_usage(codec, train_arrays)
    codec.usage.copy_(final_usage)
    report["final_dead_fraction"] = float((final_usage == 0).float().mean())
    if held_out:
        mse, var = evaluate_reconstruction(codec, held_out)
        report["heldout_mse"] = mse
        report["heldout_variance"] = var
        # a channel block that never moves (e.g. static legs) has no variance to compare with
        report["heldout_ratio"] = mse / var if var > 0 else None
    report["final_loss"] = report["epochs"][-1]["loss"] if report["epochs"] else None
    codec.eval()
    return codec, report


def save_codec(codec, path, meta=None):
    return save_checkpoint(path, "vqvae", asdict(codec.cfg), {"model": codec.state_dict()}, meta)


def load_codec(path, expect_input_dim=None):
    blob = load_checkpoint(path, "vqvae")
    cfg = VQVAEConfig(**blob["config"])
    if expect_input_dim is not None:
        require_match("vqvae.input_dim", expect_input_dim, cfg.input_dim)
    codec = MotionCodec(cfg)
    codec.load_state_dict(blob["state"]["model"])
    codec.eval()
    codec.checkpoint_sha256 = blob["sha256"]
    return codec
