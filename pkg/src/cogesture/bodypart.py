"""Per-body-part codecs and noise combination for part-wise style control.

Each part of a joint partition gets its own codec; the per-part latents are
stacked along channels (``O * C`` wide tokens) so one denoiser models all
parts jointly. At sampling time every part is denoised under its own style
prompt, the noise estimates are stitched with channel masks and nudged by
the gradient of a pairwise disagreement term.
"""

import itertools
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import cfg_mix, ddpm_step
from .errors import NumericalError, ShapeError, ValidationError
from .motion.skeleton import DEFAULT_PARTITION, toy_skeleton
from .motion.types import Motion, pose_dim
from .vqvae import renormalize_poses


@dataclass(frozen=True)
class BodyPartition:
    """Named disjoint joint sets covering the skeleton; ``root_part`` also owns the root displacement."""

    parts: tuple  # ((name, (joint indices...)), ...)
    num_joints: int
    root_part: str = "torso"

    def __post_init__(self):
        names = [n for n, _ in self.parts]
        if len(set(names)) != len(names) or not names:
            raise ValidationError("part names must be unique and non-empty")
        if self.root_part not in names:
            raise ValidationError(f"root part {self.root_part!r} is not one of {names}")
        seen = [j for _, js in self.parts for j in js]
        if len(seen) != len(set(seen)):
            raise ValidationError("body parts overlap")
        if sorted(seen) != list(range(self.num_joints)):
            raise ValidationError(f"body parts must cover joints 0..{self.num_joints - 1} exactly")

    @classmethod
    def from_names(cls, mapping=None, skeleton=None, root_part="torso"):
        skeleton = skeleton or toy_skeleton(8)
        mapping = mapping or DEFAULT_PARTITION
        parts = tuple((name, tuple(skeleton.index(j) for j in joints)) for name, joints in mapping.items())
        return cls(parts, skeleton.num_joints, root_part)

    @property
    def names(self):
        return tuple(n for n, _ in self.parts)

    def __len__(self):
        return len(self.parts)

    def columns(self, name):
        """Pose-vector columns owned by part ``name``."""
        joints = dict(self.parts)[name]
        cols = list(range(3)) if name == self.root_part else []
        for j in sorted(joints):
            cols.extend(range(3 + 6 * j, 9 + 6 * j))
        return np.array(cols)

    def rot6d_offset(self, name):
        return 3 if name == self.root_part else 0

    def split(self, poses):
        poses = np.asarray(poses)
        if poses.shape[-1] != pose_dim(self.num_joints):
            raise ShapeError(f"pose width {poses.shape[-1]} does not match J={self.num_joints}")
        return {n: poses[..., self.columns(n)] for n in self.names}

    def assemble(self, part_poses):
        first = next(iter(part_poses.values()))
        out = np.zeros(first.shape[:-1] + (pose_dim(self.num_joints),))
        for n in self.names:
            out[..., self.columns(n)] = part_poses[n]
        return out

    def assemble_torch(self, part_poses):
        first = next(iter(part_poses.values()))
        out = first.new_zeros(first.shape[:-1] + (pose_dim(self.num_joints),))
        for n in self.names:
            out[..., torch.as_tensor(self.columns(n))] = part_poses[n]
        return out


def channel_masks(num_parts, latent_dim):
    """Binary masks ``M_o`` of shape (O, O*C) selecting each part's channel block."""
    m = np.zeros((num_parts, num_parts * latent_dim))
    for o in range(num_parts):
        m[o, o * latent_dim:(o + 1) * latent_dim] = 1.0
    return m


def check_masks(masks):
    m = masks.detach().numpy() if torch.is_tensor(masks) else np.asarray(masks)
    if not np.all((m == 0) | (m == 1)):
        raise ValidationError("masks must be binary")
    total = m.sum(0)
    if np.any(total > 1):
        raise ValidationError("part masks overlap")
    if np.any(total < 1):
        raise ValidationError("part masks do not cover every channel")


@dataclass
class StackedCodes:
    codes: np.ndarray  # (O, L, C)
    names: tuple
    pad_length: int = 0
    fps: float = 60.0

    def flat(self):
        """(L, O*C) channel-stacked layout used by the denoiser."""
        O, L, C = self.codes.shape
        return self.codes.transpose(1, 0, 2).reshape(L, O * C)

    @classmethod
    def from_flat(cls, flat, names, **kw):
        L, W = flat.shape
        O = len(names)
        return cls(flat.reshape(L, O, W // O).transpose(1, 0, 2), tuple(names), **kw)


def split_and_encode(motion, partition, codecs, quantized=True):
    """Encode each part of ``motion`` with its own codec into stacked codes."""
    if motion.num_joints != partition.num_joints:
        raise ShapeError(f"motion has J={motion.num_joints}, partition expects {partition.num_joints}")
    padded = motion.padded(next(iter(codecs.values())).downsample)
    parts = partition.split(padded.poses)
    slabs = []
    for name in partition.names:
        codec = codecs[name]
        # a part slice is not a full pose vector, so go through the tensor API
        with torch.no_grad():
            z = codec.encode_tensor(torch.as_tensor(parts[name], dtype=torch.float32)[None])[0].double().numpy()
        slabs.append(codec.quantize(z).codes if quantized else z)
    lengths = {len(s) for s in slabs}
    if len(lengths) != 1:
        raise ShapeError("part codecs disagree on the latent length")
    return StackedCodes(np.stack(slabs), partition.names, padded.pad_length, motion.fps)


def decode_stacked(stacked, partition, codecs, quantize=True):
    """Decode every slab with its part codec and reassemble the full pose."""
    parts = {}
    for o, name in enumerate(stacked.names):
        codec = codecs[name]
        z = stacked.codes[o]
        if quantize:
            z = codec.quantize(z).codes
        with torch.no_grad():
            parts[name] = codec.decode_tensor(torch.as_tensor(z, dtype=torch.float32)[None])[0].double().numpy()
    poses = partition.assemble(parts)
    return Motion(renormalize_poses(poses, 3), stacked.fps, stacked.pad_length)


def decode_stacked_tensor(latents, partition, codecs):
    """Differentiable (B, L, O*C) -> (B, K, 3+6J) decode used by training losses."""
    O = len(partition)
    chunks = latents.chunk(O, dim=-1)
    parts = {name: codecs[name].decode_tensor(chunks[o]) for o, name in enumerate(partition.names)}
    return partition.assemble_torch(parts)


def _safe_norm(x):
    """L2 norm over all but the batch axis, with gradient 0 at the origin."""
    sq = (x * x).reshape(x.shape[0], -1).sum(-1)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def smoothness_term(eps_list):
    """``sum_{i != j} ||eps_i - eps_j||`` over ordered pairs, summed over the batch."""
    total = eps_list[0].new_zeros(())
    for i, j in itertools.permutations(range(len(eps_list)), 2):
        total = total + _safe_norm(eps_list[i] - eps_list[j]).sum()
    return total


def combine_noises(eps_list, masks, w_body, z_n=None):
    """Masked stitch of per-part noises plus ``w_body`` times the smoothness gradient.

    ``eps_list`` are (B, L, O*C) tensors; when ``w_body`` is non-zero they
    must be differentiable functions of ``z_n``.
    """
    masks = torch.as_tensor(masks, dtype=eps_list[0].dtype)
    check_masks(masks)
    if len(eps_list) != masks.shape[0]:
        raise ValidationError(f"{len(eps_list)} noise estimates for {masks.shape[0]} masks")
    out = eps_list[0] * masks[0]
    for e, m in zip(eps_list[1:], masks[1:]):
        out = out + e * m
    same = all(torch.equal(eps_list[0], e) for e in eps_list[1:])
    if w_body == 0 or same:
        return out.detach()
    if z_n is None or not z_n.requires_grad:
        raise ValidationError("the smoothness gradient needs z_n with requires_grad")
    (grad,) = torch.autograd.grad(smoothness_term(eps_list), z_n)
    return (out + w_body * grad).detach()


def sample_bodypart(model, batch, part_styles, s, rng, schedule, masks, w_body=0.01, callback=None):
    """Ancestral sampling where each part follows its own style prompt.

    ``part_styles`` is a list (one per part) of (B, C_CLIP) arrays or None.
    Returns standardized stacked latents (B, L, O*C).
    """
    cfg = model.cfg
    B, L = batch.audio.shape[:2]
    masks = torch.as_tensor(masks, dtype=torch.float64)
    check_masks(masks)
    if len(part_styles) != masks.shape[0]:
        raise ValidationError("need one style prompt per body part")
    styles = [None if p is None else torch.as_tensor(p, dtype=torch.float32) for p in part_styles]
    z = rng.standard_normal((B, L, cfg.latent_dim))
    for n in range(schedule.N, 0, -1):
        zt = torch.as_tensor(z, dtype=torch.float32).requires_grad_(w_body != 0)
        steps = torch.full((B,), n)
        with torch.set_grad_enabled(w_body != 0):
            # float64 mixing matches the single-prompt sampler operation for operation
            call = lambda st: model(zt, steps, batch.audio, batch.text, batch.tmask, batch.saliency, st).double()  # noqa: E731
            uncond = call(None) if any(st is not None for st in styles) and s != 1 else None
            cache = {}
            eps_list = []
            for st in styles:
                key = None if st is None else st.numpy().tobytes()
                if key not in cache:
                    e = call(st) if st is not None else (uncond if uncond is not None else call(None))
                    if st is not None and uncond is not None:
                        e = cfg_mix(e, uncond, s)
                    cache[key] = e
                eps_list.append(cache[key])
            eps = combine_noises(eps_list, masks, w_body, zt)
        z = ddpm_step(z, n, eps.numpy(), schedule, rng)
        if not np.all(np.isfinite(z)):
            raise NumericalError("non-finite latents during body-part sampling", step=n)
        if callback is not None:
            callback(n, z)
    return z
