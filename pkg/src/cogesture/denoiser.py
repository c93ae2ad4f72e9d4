"""Causal transformer noise predictor with audio, transcript and style conditioning.

Each token is a noisy latent concatenated with a window of audio features
reaching ``lookahead`` latent frames into the future. Layers stack causal
self-attention, saliency-weighted cross-attention over transcript features
and an AdaIN branch driven by the style embedding. Position ``l`` of the
output depends only on latents ``1..l`` and audio ``1..l+lookahead``.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bodypart import decode_stacked_tensor, split_and_encode
from .checkpoint import load_checkpoint, require_match, save_checkpoint
from .diffusion import estimate_z0, make_schedule, q_sample, sample
from .embedding import semantic_saliency
from .errors import NumericalError, ShapeError, StateError, ValidationError
from .utils import pad_sequences, seed_everything, sinusoidal_embedding

log = logging.getLogger(__name__)

ADAIN_EPS = 1e-5


@dataclass
class DenoiserConfig:
    latent_dim: int = 512  # C
    width: int = 768  # also C_ada
    layers: int = 12
    heads: int = 12
    audio_dim: int = 2
    lookahead: int = 8  # delta^a
    text_dim: int = 768  # C_s of the joint embedding
    style_dim: int = 768  # C_CLIP
    adain_hidden: int = 256
    use_transcript: bool = True
    adain_causal: bool = True
    diffusion_steps: int = 1000
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "beta"
    w_noise: float = 1.0
    w_semantic: float = 0.1
    w_style: float = 0.07
    p_uncond: float = 0.1
    p_prefix: float = 0.5
    z0_mode: str = "fast"
    gaussian_skip: bool = True  # add sqrt(1 - alpha_bar_n) * z_n to the output
    faithful_k: int = 10
    guidance_scale: float = 1.5
    train_steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    seed: int = 0

    def make_schedule(self):
        return make_schedule(self.diffusion_steps, self.schedule, self.beta_start, self.beta_end, self.variance)


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------

def semantics_attention(q, k, v, s_t, key_mask=None):
    """``softmax((q k^T / sqrt(d)) * S) v`` with ``S`` the saliency broadcast over queries.

    ``q`` (..., L, d), ``k`` (..., L_t, d), ``v`` (..., L_t, d_v), ``s_t``
    (..., L_t). Returns ``(output, weights)``.
    """
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    logits = logits * s_t[..., None, :]
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[..., None, :], float("-inf"))
    w = torch.softmax(logits, dim=-1)
    return w @ v, w


def adain(x, params, mask=None, causal=False, eps=ADAIN_EPS):
    """Re-standardize each channel of ``x`` (B, T, C) and apply predicted statistics.

    ``params`` is ``(gamma, mu)`` with shapes (B, C), or None for the
    identity. Statistics are taken over time; with ``causal`` they are
    running statistics over frames ``1..t`` so no future frame leaks in.
    Variances are floored at ``eps``.
    """
    if params is None:
        return x
    gamma, mu = params
    if causal:
        count = torch.arange(1, x.shape[1] + 1, dtype=x.dtype)[None, :, None]
        mean = x.cumsum(1) / count
        var = (x * x).cumsum(1) / count - mean * mean
    elif mask is None:
        mean = x.mean(1, keepdim=True)
        var = ((x - mean) ** 2).mean(1, keepdim=True)
    else:
        m = mask[..., None].to(x.dtype)
        cnt = m.sum(1, keepdim=True).clamp_min(1)
        mean = (x * m).sum(1, keepdim=True) / cnt
        var = (((x - mean) ** 2) * m).sum(1, keepdim=True) / cnt
    var = var.clamp_min(eps)
    return gamma[:, None, :] * (x - mean) / var.sqrt() + mu[:, None, :]


def audio_windows(audio, lookahead):
    """(B, L, A) -> (B, L, (lookahead + 1) * A): frames l..l+lookahead, zero past the end."""
    B, L, A = audio.shape
    padded = F.pad(audio, (0, 0, 0, lookahead))
    return torch.cat([padded[:, i:i + L] for i in range(lookahead + 1)], dim=-1)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class CausalSelfAttention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        if width % heads:
            raise ValidationError("width must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x):
        B, L, W = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, W // self.heads).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(W // self.heads)
        future = torch.ones(L, L, dtype=torch.bool).triu(1)
        logits = logits.masked_fill(future, float("-inf"))
        y = torch.softmax(logits, -1) @ v
        return self.out(y.transpose(1, 2).reshape(B, L, W))


class SemanticsAttention(nn.Module):
    def __init__(self, width, text_dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(text_dim, 2 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, text, tmask, s_t):
        B, L, W = x.shape
        h, d = self.heads, W // self.heads
        q = self.q(x).reshape(B, L, h, d).transpose(1, 2)
        k, v = self.kv(text).reshape(B, text.shape[1], 2, h, d).permute(2, 0, 3, 1, 4)
        y, _ = semantics_attention(q, k, v, s_t[:, None], tmask[:, None])
        return self.out(y.transpose(1, 2).reshape(B, L, W))


class DenoiserLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        w = cfg.width
        self.causal = cfg.adain_causal
        self.ln_attn = nn.LayerNorm(w)
        self.attn = CausalSelfAttention(w, cfg.heads)
        self.ln_sem = nn.LayerNorm(w) if cfg.use_transcript else None
        self.sem = SemanticsAttention(w, cfg.text_dim, cfg.heads) if cfg.use_transcript else None
        self.ln_ada = nn.LayerNorm(w)
        self.ada_proj = nn.Linear(w, w)
        self.ln_ffn = nn.LayerNorm(w)
        self.ffn = nn.Sequential(nn.Linear(w, 2 * w), nn.GELU(), nn.Linear(2 * w, w))

    def forward(self, h, text, tmask, s_t, style_params, has_style):
        h = h + self.attn(self.ln_attn(h))
        if self.sem is not None:
            h = h + self.sem(self.ln_sem(h), text, tmask, s_t)
        a = self.ln_ada(h)
        if style_params is not None:
            styled = adain(a, style_params, causal=self.causal)
            a = torch.where(has_style[:, None, None], styled, a)
        h = h + self.ada_proj(a)
        return h + self.ffn(self.ln_ffn(h))


class Denoiser(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.inp = nn.Linear(cfg.latent_dim + (cfg.lookahead + 1) * cfg.audio_dim, w)
        self.step_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.clean_embed = nn.Parameter(torch.zeros(w))
        self.style_mlp = nn.Sequential(nn.Linear(cfg.style_dim, cfg.adain_hidden), nn.SiLU(),
                                       nn.Linear(cfg.adain_hidden, 2 * w * cfg.layers))
        # start from the neutral statistics gamma = 1, mu = 0
        nn.init.zeros_(self.style_mlp[-1].weight)
        nn.init.zeros_(self.style_mlp[-1].bias)
        self.layers = nn.ModuleList(DenoiserLayer(cfg) for _ in range(cfg.layers))
        self.ln_out = nn.LayerNorm(w)
        self.head = nn.Linear(w, cfg.latent_dim)
        # E[eps | z_n] for standardized N(0, I) latents; the network learns the residual.
        # It keeps the output on the scale of z_n, which the final LayerNorm cannot see.
        skip = np.sqrt(1.0 - cfg.make_schedule().alpha_bars) if cfg.gaussian_skip else np.zeros(cfg.diffusion_steps + 1)
        self.register_buffer("skip", torch.as_tensor(skip, dtype=torch.float32), persistent=False)

    def style_params(self, style):
        raw = self.style_mlp(style).reshape(style.shape[0], self.cfg.layers, 2, self.cfg.width)
        return [(1.0 + raw[:, i, 0], raw[:, i, 1]) for i in range(self.cfg.layers)]

    def forward(self, z_n, n, audio, text=None, tmask=None, s_t=None, style=None, has_style=None, prefix_mask=None):
        """Noise estimate for ``z_n`` (B, L, C) at integer steps ``n`` (B,).

        ``style`` None means no style prompt for the whole batch; otherwise
        ``has_style`` (B,) selects which items use it.
        """
        cfg = self.cfg
        B, L, C = z_n.shape
        if C != cfg.latent_dim:
            raise ShapeError(f"denoiser expects latent width {cfg.latent_dim}, got {C}")
        if audio.shape[:2] != (B, L) or audio.shape[-1] != cfg.audio_dim:
            raise ShapeError(f"audio shape {tuple(audio.shape)} does not match latents ({B}, {L}, {cfg.audio_dim})")
        if cfg.use_transcript:
            if text is None or s_t is None:
                raise ValidationError("this denoiser needs transcript features and saliency")
            if tmask is None:
                tmask = torch.ones(text.shape[:2], dtype=torch.bool)
        n = torch.as_tensor(n).reshape(-1).expand(B)
        x = torch.cat([z_n, audio_windows(audio, cfg.lookahead)], dim=-1)
        h = self.inp(x)
        h = h + sinusoidal_embedding(torch.arange(L, dtype=h.dtype), cfg.width)[None]
        h = h + self.step_mlp(sinusoidal_embedding(n.to(h.dtype), cfg.width))[:, None]
        if prefix_mask is not None:
            h = h + prefix_mask[..., None].to(h.dtype) * self.clean_embed
        params = [None] * cfg.layers
        if style is not None:
            params = self.style_params(style)
            has_style = torch.ones(B, dtype=torch.bool) if has_style is None else has_style
        for layer, p in zip(self.layers, params):
            h = layer(h, text, tmask, s_t, p, has_style)
        return self.head(self.ln_out(h)) + self.skip.to(z_n.dtype)[n][:, None, None] * z_n


# ---------------------------------------------------------------------------
# training data and losses
# ---------------------------------------------------------------------------

@dataclass
class DiffusionData:
    z0: list  # standardized quantized latents per item (L, C)
    audio: list  # (L, A)
    text: list  # transcript features (L_t, C_s)
    saliency: list  # (L_t,)
    zg0: np.ndarray  # (n_items, C_s) pooled gesture embedding of the ground truth
    prompts: list  # (S, C_CLIP) style prompt embeddings per item
    styles: list
    latent_mean: np.ndarray
    latent_std: np.ndarray

    def __len__(self):
        return len(self.z0)


@dataclass
class Batch:
    z0: torch.Tensor
    lmask: torch.Tensor
    audio: torch.Tensor
    text: torch.Tensor
    tmask: torch.Tensor
    saliency: torch.Tensor
    zg0: torch.Tensor
    style: torch.Tensor

    def to(self, dtype):
        return Batch(**{k: (v.to(dtype) if v.is_floating_point() else v) for k, v in vars(self).items()})


def _session_layout(items):
    """Per item: (take poses, first frame, last frame) within its session take."""
    by_session = {}
    for i, it in enumerate(items):
        by_session.setdefault(it.session, []).append(i)
    layout = [None] * len(items)
    for ids in by_session.values():
        ids.sort(key=lambda i: items[i].position)
        take = np.concatenate([items[i].motion.trimmed().poses for i in ids])
        start = 0
        for i in ids:
            k = items[i].motion.trimmed().num_frames
            layout[i] = (take, start, start + k)
            start += k
    return layout


@torch.no_grad()
def build_diffusion_data(items, codec, embedding, style_space, prompts_per_item=4, max_extra=120, seed=0,
                         latent_stats=None, partition=None, part_codecs=None):
    """Precompute everything the denoiser trains on.

    Style prompts are motion clips from the item's session take that contain
    the item's own frames plus a random amount of context on each side.
    With ``partition``/``part_codecs`` the diffusion latents are the
    channel-stacked per-part codes; the gesture target still comes from
    the full-body codec.
    """
    rng = np.random.default_rng(seed)
    codes, audio, text, sal, zg0, prompts = [], [], [], [], [], []
    for it in items:
        q = codec.quantize(codec.encode(it.motion))
        z = q.codes if partition is None else split_and_encode(it.motion, partition, part_codecs).flat()
        L = len(z)
        a = it.audio.frames
        if len(a) != L:
            raise ShapeError(f"audio has {len(a)} frames but the motion has {L} latents")
        codes.append(z)
        audio.append(a)
        Zt, zt = embedding.encode_transcript(it.transcript.tokens)
        text.append(Zt)
        sal.append(semantic_saliency(Zt, zt))
        _, zg = embedding.encode_gesture(q.codes)
        zg0.append(zg)
    for (take, a, b) in _session_layout(items):
        bank = []
        for _ in range(prompts_per_item):
            lo = max(0, a - int(rng.integers(0, max_extra + 1)))
            hi = min(len(take), b + int(rng.integers(0, max_extra + 1)))
            clip = torch.as_tensor(take[lo:hi], dtype=torch.float32)[None]
            bank.append(style_space.motion(clip, torch.ones(clip.shape[:2], dtype=torch.bool))[0].double().numpy())
        prompts.append(np.stack(bank))
    if latent_stats is None:
        allc = np.concatenate(codes)
        latent_stats = (allc.mean(0), np.maximum(allc.std(0), 1e-6))
    mean, std = latent_stats
    z0 = [(c - mean) / std for c in codes]
    return DiffusionData(z0, audio, text, sal, np.stack(zg0), prompts, [it.style for it in items], mean, std)


def make_batch(data, ids, prompt_choice=None, style=None):
    """Collate items; ``prompt_choice[i]`` picks a row of each item's prompt bank."""
    z0, lmask = pad_sequences([data.z0[i] for i in ids])
    audio, _ = pad_sequences([data.audio[i] for i in ids])
    text, tmask = pad_sequences([data.text[i] for i in ids])
    sal, _ = pad_sequences([data.saliency[i][:, None] for i in ids])
    if style is None:
        choice = prompt_choice if prompt_choice is not None else [0] * len(ids)
        style = np.stack([data.prompts[i][c] for i, c in zip(ids, choice)])
    f = lambda a: torch.as_tensor(a, dtype=torch.float32)  # noqa: E731
    return Batch(f(z0), torch.as_tensor(lmask), f(audio), f(text), torch.as_tensor(tmask),
                 f(sal[..., 0]), f(data.zg0[list(ids)]), f(style))


@dataclass
class TrainingContext:
    """Frozen models the losses look through."""

    codec: object
    embedding: object
    style_space: object
    latent_mean: torch.Tensor
    latent_std: torch.Tensor
    schedule: object
    partition: object = None  # set for channel-stacked body-part latents
    part_codecs: dict = None

    def decode(self, latents):
        if self.partition is None:
            return self.codec.decode_tensor(latents)
        return decode_stacked_tensor(latents, self.partition, self.part_codecs)

    def modules(self):
        return [self.codec, self.embedding, self.style_space, *(self.part_codecs or {}).values()]

    def check_frozen(self):
        if not getattr(self.style_space, "frozen", False):
            raise StateError("the style space must be frozen before denoiser training")

    def to(self, dtype):
        for m in self.modules():
            m.to(dtype)
        self.latent_mean = self.latent_mean.to(dtype)
        self.latent_std = self.latent_std.to(dtype)
        return self


def draw_training_noise(batch, cfg, rng):
    """All random choices of one training step, drawn up front."""
    B, L, C = batch.z0.shape
    lengths = batch.lmask.sum(1).numpy()
    prefix = np.zeros(B, dtype=np.int64)
    for i in range(B):
        if lengths[i] > 1 and rng.random() < cfg.p_prefix:
            prefix[i] = rng.integers(1, lengths[i])
    return {
        "n": torch.as_tensor(rng.integers(1, cfg.diffusion_steps + 1, size=B)),
        "eps": torch.as_tensor(rng.standard_normal((B, L, C)), dtype=batch.z0.dtype),
        "keep_style": torch.as_tensor(rng.random(B) >= cfg.p_uncond),
        "prefix": torch.as_tensor(prefix),
    }


def _masked_mean(x, mask):
    m = mask[..., None].to(x.dtype)
    return (x * m).sum() / (m.sum() * x.shape[-1]).clamp_min(1)


def _cos_loss(a, b):
    return 1.0 - F.cosine_similarity(a, b, dim=-1)


def training_losses(model, batch, ctx, cfg, draws, rng=None):
    """``L_noise``, ``L_semantic``, ``L_style`` and their weighted sum ``L_net``."""
    z0, lmask = batch.z0, batch.lmask
    B, L, _ = z0.shape
    pos = torch.arange(L)[None]
    prefix_mask = (pos < draws["prefix"][:, None]) & lmask
    target_mask = lmask & ~prefix_mask
    eps = draws["eps"]
    z_n = q_sample(z0, draws["n"], eps, ctx.schedule)
    z_in = torch.where(prefix_mask[..., None], z0, z_n)
    keep = draws["keep_style"]
    eps_hat = model(z_in, draws["n"], batch.audio, batch.text, batch.tmask, batch.saliency,
                    batch.style, keep, prefix_mask)
    l_noise = _masked_mean((eps_hat - eps) ** 2, target_mask)

    if cfg.z0_mode == "fast":
        z0_hat = estimate_z0(z_n, draws["n"], eps_hat, ctx.schedule)
    else:
        # iterate per item, each at its own step
        outs = []
        for i in range(B):
            def den(z, n, _c, _s, i=i):
                return model(z, torch.tensor([n]), batch.audio[i:i + 1], batch.text[i:i + 1], batch.tmask[i:i + 1],
                             batch.saliency[i:i + 1], batch.style[i:i + 1], keep[i:i + 1], prefix_mask[i:i + 1])
            outs.append(estimate_z0(z_n[i:i + 1], int(draws["n"][i]), eps_hat[i:i + 1], ctx.schedule,
                                    mode="faithful", denoiser=den, k=cfg.faithful_k, rng=rng))
        z0_hat = torch.cat(outs)
    z0_hat = torch.where(prefix_mask[..., None], z0, z0_hat)

    # score the estimate in data space through the frozen models
    latents = z0_hat * ctx.latent_std + ctx.latent_mean
    poses = None
    if ctx.partition is None:
        g_latents = latents
    else:
        # stacked part codes: re-encode the assembled pose with the full-body codec
        poses = ctx.decode(latents)
        g_latents = ctx.codec.encode_tensor(poses)
    _, zg_hat = ctx.embedding.gesture(g_latents, lmask)
    l_sem = _cos_loss(zg_hat, batch.zg0).mean()
    if keep.any():
        poses = ctx.decode(latents) if poses is None else poses
        fmask = lmask.repeat_interleave(ctx.codec.downsample, dim=1)
        zs_hat = ctx.style_space.motion(poses, fmask)
        l_style = _cos_loss(zs_hat[keep], batch.style[keep]).mean()
    else:
        l_style = torch.zeros((), dtype=z0.dtype)
    total = cfg.w_noise * l_noise + cfg.w_semantic * l_sem + cfg.w_style * l_style
    return {"L_noise": l_noise, "L_semantic": l_sem, "L_style": l_style, "L_net": total}


def freeze_module(m):
    for p in m.parameters():
        p.requires_grad_(False)
    m.eval()
    return m


def train_denoiser(data, ctx, cfg, train_ids, progress=None):
    """Fit a denoiser on ``train_ids``; returns ``(model, report)``."""
    ctx.check_frozen()
    for m in ctx.modules():
        freeze_module(m)
    seed_everything(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = Denoiser(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=max(2, cfg.train_steps),
                                                pct_start=max(0.05, 2.0 / max(2, cfg.train_steps)), anneal_strategy="cos")
    ids = np.asarray(train_ids)
    history = []
    for step in range(cfg.train_steps):
        batch_ids = rng.choice(ids, size=min(cfg.batch_size, len(ids)), replace=False)
        choice = [rng.integers(len(data.prompts[i])) for i in batch_ids]
        batch = make_batch(data, batch_ids, choice)
        draws = draw_training_noise(batch, cfg, rng)
        losses = training_losses(model, batch, ctx, cfg, draws, rng)
        if not torch.isfinite(losses["L_net"]):
            raise NumericalError(f"denoiser loss became non-finite at step {step}", step=step)
        opt.zero_grad()
        losses["L_net"].backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        history.append({k: v.item() for k, v in losses.items()})
        if progress and step % 100 == 0:
            progress({"step": step, **history[-1]})
    model.eval()
    tail = history[-50:]
    report = {k: float(np.mean([h[k] for h in tail])) for k in ("L_noise", "L_semantic", "L_style", "L_net")} if tail else {}
    report["steps"] = cfg.train_steps
    return model, report


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def denoise_fn(model, batch, prefix_len=0):
    """Adapt ``model`` to the numpy ``denoiser(z, n, conditions, style)`` protocol."""
    B = batch.audio.shape[0]

    @torch.no_grad()
    def fn(z, n, _conditions, style):
        zt = torch.as_tensor(z, dtype=torch.float32)
        L = zt.shape[1]
        pm = (torch.arange(L)[None] < prefix_len).expand(B, L) if prefix_len else None
        st = None if style is None else torch.as_tensor(style, dtype=torch.float32)
        out = model(zt, torch.full((B,), n), batch.audio[:, :L], batch.text, batch.tmask, batch.saliency,
                    st, None, pm)
        return out.double().numpy()

    return fn


def generate_latents(model, batch, rng, s=None, use_style=True, prefix=None, schedule=None):
    """Sample standardized latents for every item in ``batch``.

    ``prefix`` (B, L_p, C) are earlier clean latents kept as frozen context;
    ``batch.audio`` must then cover prefix and new frames.
    """
    cfg = model.cfg
    schedule = schedule or cfg.make_schedule()
    s = cfg.guidance_scale if s is None else s
    B = batch.audio.shape[0]
    n_prefix = 0 if prefix is None else prefix.shape[1]
    L = batch.audio.shape[1] - n_prefix
    if L < 1:
        raise ValidationError("nothing to generate after the prefix")
    cond = {"style": batch.style.double().numpy() if use_style else None}
    fn = denoise_fn(model, batch, n_prefix)
    return sample(fn, cond, s, rng, schedule, (B, L, cfg.latent_dim), prefix=prefix)


def save_denoiser(model, path, latent_mean, latent_std, meta=None):
    state = {"model": model.state_dict(), "latent_mean": np.asarray(latent_mean), "latent_std": np.asarray(latent_std)}
    return save_checkpoint(path, "denoiser", asdict(model.cfg), state, meta)


def load_denoiser(path, expect=None):
    """Load a denoiser; ``expect`` maps config keys to required values."""
    blob = load_checkpoint(path, "denoiser")
    cfg = DenoiserConfig(**blob["config"])
    for key, value in (expect or {}).items():
        require_match(key, value, getattr(cfg, key))
    model = Denoiser(cfg)
    model.load_state_dict(blob["state"]["model"])
    model.eval()
    model.checkpoint_sha256 = blob["sha256"]
    return model, blob["state"]["latent_mean"], blob["state"]["latent_std"]
