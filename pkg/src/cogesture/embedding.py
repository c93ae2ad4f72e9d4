"""Gesture-transcript joint embedding.

Two transformer encoders map a token sequence and a quantized latent gesture
sequence to feature sequences of a shared width; element-wise max pooling
turns each sequence into one embedding. The encoders are trained with a
symmetric InfoNCE loss plus momentum distillation against EMA copies of
themselves. The gesture encoder is first pretrained by masked code
prediction.
"""

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import OutOfVocabularyError, ValidationError
from .motion.types import Motion
from .utils import masked_max, pad_sequences, seed_everything

log = logging.getLogger(__name__)


@dataclass
class EmbeddingConfig:
    vocab_size: int = 24
    latent_dim: int = 512  # codec C
    codebook_size: int = 512
    width: int = 768  # C_s
    heads: int = 4
    text_layers: int = 2
    gesture_layers: int = 12
    max_len: int = 256
    text_positions: bool = False
    tau: float = 0.07
    learn_tau: bool = False
    normalize: bool = True
    momentum: float = 0.995
    w_contrast: float = 0.4
    mask_ratio: float = 0.15
    pretrain_steps: int = 600
    contrast_steps: int = 1500
    batch_size: int = 32
    lr: float = 5e-4
    dropout: float = 0.1
    augment_shifts: tuple = (0, 2, 4, 6)
    seed: int = 0


def _transformer(width, heads, layers, dropout=0.0):
    layer = nn.TransformerEncoderLayer(width, heads, dim_feedforward=2 * width, dropout=dropout,
                                       batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class TranscriptEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.embed = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos = nn.Embedding(cfg.max_len, cfg.width) if cfg.text_positions else None
        self.body = _transformer(cfg.width, cfg.heads, cfg.text_layers, cfg.dropout)
        self.out = nn.Linear(cfg.width, cfg.width)

    def forward(self, tokens, mask):
        """tokens (B, L_t) long, mask (B, L_t) bool -> (Z_t (B, L_t, C_s), z_t (B, C_s))."""
        if mask.sum(1).min() < 1:
            raise ValidationError("transcript is empty")
        h = self.embed(tokens)
        if self.pos is not None:
            h = h + self.pos(torch.arange(tokens.shape[1]))[None]
        feats = self.out(self.body(h, src_key_padding_mask=~mask))
        return feats, masked_max(feats, mask)


class GestureEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.inp = nn.Linear(cfg.latent_dim, cfg.width)
        self.pos = nn.Embedding(cfg.max_len, cfg.width)
        self.mask_token = nn.Parameter(torch.zeros(cfg.width))
        self.body = _transformer(cfg.width, cfg.heads, cfg.gesture_layers, cfg.dropout)
        self.out = nn.Linear(cfg.width, cfg.width)
        self.max_len = cfg.max_len

    def hidden(self, codes, mask, masked_positions=None):
        if codes.shape[1] > self.max_len:
            raise ValidationError(f"gesture length {codes.shape[1]} exceeds max_len {self.max_len}")
        h = self.inp(codes)
        if masked_positions is not None:
            h = torch.where(masked_positions[..., None], self.mask_token.expand_as(h), h)
        h = h + self.pos(torch.arange(codes.shape[1]))[None]
        return self.body(h, src_key_padding_mask=~mask)

    def forward(self, codes, mask):
        """codes (B, L_g, C) quantized latents -> (Z_g (B, L_g, C_s), z_g (B, C_s))."""
        if codes.shape[1] == 0 or mask.sum(1).min() < 1:
            raise ValidationError("gesture sequence is empty")
        feats = self.out(self.hidden(codes, mask))
        return feats, masked_max(feats, mask)


class JointEmbedding(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.text = TranscriptEncoder(cfg)
        self.gesture = GestureEncoder(cfg)
        self.mlm_head = nn.Linear(cfg.width, cfg.codebook_size)
        nn.init.zeros_(self.mlm_head.weight)
        nn.init.zeros_(self.mlm_head.bias)
        self.log_tau = nn.Parameter(torch.tensor(float(np.log(cfg.tau))), requires_grad=cfg.learn_tau)
        self.momentum_text = None
        self.momentum_gesture = None

    @property
    def tau(self):
        return self.log_tau.exp()

    def init_momentum(self):
        self.momentum_text = copy.deepcopy(self.text)
        self.momentum_gesture = copy.deepcopy(self.gesture)
        for p in list(self.momentum_text.parameters()) + list(self.momentum_gesture.parameters()):
            p.requires_grad_(False)

    def momentum_update(self, m=None):
        m = self.cfg.momentum if m is None else m
        ema_update(self.text, self.momentum_text, m)
        ema_update(self.gesture, self.momentum_gesture, m)

    # -- convenience wrappers over single sequences ----------------------------

    @torch.no_grad()
    def encode_transcript(self, tokens):
        tokens = np.asarray(getattr(tokens, "tokens", tokens), dtype=np.int64).reshape(-1)
        if len(tokens) == 0:
            raise ValidationError("transcript is empty")
        if tokens.max() >= self.cfg.vocab_size or tokens.min() < 0:
            raise OutOfVocabularyError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        t = torch.as_tensor(tokens)[None]
        feats, pooled = self.text(t, torch.ones_like(t, dtype=torch.bool))
        return feats[0].double().numpy(), pooled[0].double().numpy()

    @torch.no_grad()
    def encode_gesture(self, codes):
        codes = np.asarray(getattr(codes, "codes", codes), dtype=np.float64)
        if codes.ndim != 2 or len(codes) == 0:
            raise ValidationError("gesture sequence is empty")
        c = torch.as_tensor(codes, dtype=torch.float32)[None]
        feats, pooled = self.gesture(c, torch.ones(c.shape[:2], dtype=torch.bool))
        return feats[0].double().numpy(), pooled[0].double().numpy()


@torch.no_grad()
def ema_update(online, target, m):
    """target <- m * target + (1 - m) * online, parameter by parameter."""
    for p, q in zip(online.parameters(), target.parameters()):
        q.mul_(m).add_(p.detach(), alpha=1.0 - m)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def similarity_logits(z_t, z_g, tau, normalize=True):
    """(B, B) matrix of z_g_i . z_t_j / tau (row = gesture, column = transcript)."""
    if float(tau) <= 0:
        raise ValidationError("temperature must be positive")
    if normalize:
        z_t = F.normalize(z_t, dim=-1)
        z_g = F.normalize(z_g, dim=-1)
    return z_g @ z_t.T / tau


def contrastive_loss(z_t, z_g, tau, normalize=True):
    """Gesture-to-text plus text-to-gesture cross entropy, each averaged over the batch."""
    logits = similarity_logits(z_t, z_g, tau, normalize)
    target = torch.arange(len(logits))
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def mod_contrastive_loss(z_t, z_g, zt_momentum, zg_momentum, tau, w_contrast=0.4, normalize=True):
    """Contrastive loss blended with KL towards momentum-model soft targets."""
    if not 0.0 <= w_contrast <= 1.0:
        raise ValidationError("w_contrast must lie in [0, 1]")
    logits = similarity_logits(z_t, z_g, tau, normalize)
    target = torch.arange(len(logits))
    plain = F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)
    with torch.no_grad():
        m_logits = similarity_logits(zt_momentum, zg_momentum, tau, normalize)
        q_g2t = F.softmax(m_logits, dim=1)
        q_t2g = F.softmax(m_logits.T, dim=1)
    kl_g2t = F.kl_div(F.log_softmax(logits, dim=1), q_g2t, reduction="batchmean")
    kl_t2g = F.kl_div(F.log_softmax(logits.T, dim=1), q_t2g, reduction="batchmean")
    return (1.0 - w_contrast) * plain + w_contrast * (kl_g2t + kl_t2g)


def semantic_saliency(Z_t, z_t, mask=None):
    """softmax over words of Z_t . z_t; works on numpy arrays or torch tensors."""
    if isinstance(Z_t, np.ndarray):
        logits = np.asarray(Z_t, dtype=np.float64) @ np.asarray(z_t, dtype=np.float64)
        logits = logits - logits.max()
        e = np.exp(logits)
        return e / e.sum()
    logits = torch.einsum("...lc,...c->...l", Z_t, z_t)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1)


def retrieve(query, corpus, k=1):
    """Top-``k`` corpus rows by cosine similarity; ties go to the lower index.

    Returns ``(indices, similarities)``.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    corpus = np.atleast_2d(np.asarray(corpus, dtype=np.float64))
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(corpus) == 0:
        raise ValidationError("retrieval corpus is empty")
    qn = np.linalg.norm(query)
    cn = np.linalg.norm(corpus, axis=1)
    if qn == 0 or np.any(cn == 0):
        raise ValidationError("cannot rank zero-norm embeddings")
    sims = corpus @ query / (cn * qn)
    order = np.lexsort((np.arange(len(sims)), -sims))[:k]
    return order, sims[order]


# ---------------------------------------------------------------------------
# data + training
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingData:
    """Per-item quantized gesture codes, code ids and transcript tokens.

    ``variants[i]`` holds extra ``(codes, indices)`` encodings of item ``i``
    taken at shifted start frames; training draws among them at random while
    evaluation always uses the unshifted encoding.
    """

    codes: list
    indices: list
    tokens: list
    families: list  # set of motif families per item (for evaluation)
    variants: list = None

    def batch(self, ids, rng=None):
        picks = []
        for i in ids:
            if rng is not None and self.variants and self.variants[i]:
                v = rng.integers(len(self.variants[i]) + 1)
                picks.append((self.codes[i], self.indices[i]) if v == 0 else self.variants[i][v - 1])
            else:
                picks.append((self.codes[i], self.indices[i]))
        codes, gmask = pad_sequences([c for c, _ in picks])
        idx, _ = pad_sequences([x[:, None] for _, x in picks], value=0)
        toks, tmask = pad_sequences([self.tokens[i][:, None] for i in ids], value=0)
        return (torch.as_tensor(codes, dtype=torch.float32), torch.as_tensor(gmask),
                torch.as_tensor(idx[..., 0], dtype=torch.long),
                torch.as_tensor(toks[..., 0], dtype=torch.long), torch.as_tensor(tmask))


def build_embedding_data(items, codec, family_of=None, shifts=(0,)):
    codes, indices, tokens, fams, variants = [], [], [], [], []
    for it in items:
        q = codec.quantize(codec.encode(it.motion))
        codes.append(q.codes)
        indices.append(q.indices)
        extra = []
        for sh in shifts:
            if sh <= 0 or sh >= it.motion.num_frames:
                continue
            m = Motion(it.motion.trimmed().poses[sh:], it.motion.fps)
            qs = codec.quantize(codec.encode(m))
            extra.append((qs.codes, qs.indices))
        variants.append(extra)
        tokens.append(np.asarray(it.transcript.tokens, dtype=np.int64))
        fams.append({family_of(int(t)) for t in it.transcript.tokens} - {-1} if family_of else set())
    return EmbeddingData(codes, indices, tokens, fams, variants)


def masked_code_loss(model, codes, gmask, idx, ratio, gen):
    """Cross entropy of predicting original code ids at randomly masked positions.

    Returns ``(loss, accuracy, n_masked)``; with nothing masked the loss is 0.
    """
    if not 0.0 < ratio < 1.0:
        raise ValidationError("mask ratio must lie in (0, 1)")
    chosen = (torch.rand(gmask.shape, generator=gen) < ratio) & gmask
    return masked_code_loss_at(model, codes, gmask, idx, chosen)


def masked_code_loss_at(model, codes, gmask, idx, chosen):
    n = int(chosen.sum())
    if n == 0:
        return torch.zeros(()), 0.0, 0
    h = model.gesture.hidden(codes, gmask, masked_positions=chosen)
    logits = model.mlm_head(h[chosen])
    target = idx[chosen]
    loss = F.cross_entropy(logits, target)
    acc = (logits.argmax(-1) == target).float().mean().item()
    return loss, acc, n


def pretrain_gesture_encoder(model, data, cfg, ids=None):
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 1)
    ids = np.arange(len(data.codes)) if ids is None else np.asarray(ids)
    params = list(model.gesture.parameters()) + list(model.mlm_head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    history = []
    for step in range(cfg.pretrain_steps):
        batch = data.batch(rng.choice(ids, size=min(cfg.batch_size, len(ids)), replace=False), rng)
        codes, gmask, idx, _, _ = batch
        loss, acc, n = masked_code_loss(model, codes, gmask, idx, cfg.mask_ratio, gen)
        if n == 0:
            continue
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((loss.item(), acc))
    return history


class _evaluating:
    """Temporarily switch a module to eval mode (dropout off)."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()

    def __exit__(self, *exc):
        self.model.train(self.was_training)


@torch.no_grad()
def masked_accuracy(model, data, ids, ratio, seed=123):
    gen = torch.Generator().manual_seed(seed)
    codes, gmask, idx, _, _ = data.batch(ids)
    with _evaluating(model):
        loss, acc, _ = masked_code_loss(model, codes, gmask, idx, ratio, gen)
    return float(loss), acc


def train_contrastive(model, data, cfg, ids=None, progress=None):
    gen_rng = np.random.default_rng(cfg.seed + 2)
    ids = np.arange(len(data.codes)) if ids is None else np.asarray(ids)
    model.init_momentum()
    params = [p for n, p in model.named_parameters()
              if p.requires_grad and not n.startswith("mlm_head") and not n.startswith("momentum_")]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.contrast_steps), eta_min=cfg.lr * 0.05)
    history = []
    for step in range(cfg.contrast_steps):
        batch_ids = gen_rng.choice(ids, size=min(cfg.batch_size, len(ids)), replace=False)
        codes, gmask, _, toks, tmask = data.batch(batch_ids, gen_rng)
        _, z_t = model.text(toks, tmask)
        _, z_g = model.gesture(codes, gmask)
        with torch.no_grad():
            _, zt_m = model.momentum_text(toks, tmask)
            _, zg_m = model.momentum_gesture(codes, gmask)
        loss = mod_contrastive_loss(z_t, z_g, zt_m, zg_m, model.tau, cfg.w_contrast, cfg.normalize)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        model.momentum_update()
        history.append(loss.item())
        if progress and step % 100 == 0:
            progress({"step": step, "loss": loss.item()})
    return history


@torch.no_grad()
def embed_all(model, data, ids):
    codes, gmask, _, toks, tmask = data.batch(ids)
    with _evaluating(model):
        _, z_t = model.text(toks, tmask)
        _, z_g = model.gesture(codes, gmask)
    return z_t.double().numpy(), z_g.double().numpy()


def retrieval_accuracy(model, data, ids):
    """Gesture -> transcript top-1 over ``ids``.

    Returns ``(shared_motif_rate, exact_pair_rate)``: the fraction of queries
    whose top-1 transcript shares at least one motif family with the query's
    own transcript, and the fraction retrieving exactly the paired transcript.
    """
    z_t, z_g = embed_all(model, data, ids)
    shared = exact = 0
    for qi in range(len(ids)):
        top, _ = retrieve(z_g[qi], z_t, k=1)
        j = int(top[0])
        exact += j == qi
        shared += bool(data.families[ids[qi]] & data.families[ids[j]])
    return shared / len(ids), exact / len(ids)


def train_joint_embedding(data, cfg, train_ids, heldout_ids=None, progress=None):
    seed_everything(cfg.seed)
    model = JointEmbedding(cfg)
    report = {}
    probe = np.asarray(heldout_ids if heldout_ids is not None else train_ids)[:64]
    report["mlm_initial_loss"], report["mlm_initial_acc"] = masked_accuracy(model, data, probe, cfg.mask_ratio)
    model.train()
    hist = pretrain_gesture_encoder(model, data, cfg, train_ids)
    report["mlm_final_loss"], report["mlm_final_acc"] = masked_accuracy(model, data, probe, cfg.mask_ratio)
    report["mlm_chance"] = 1.0 / cfg.codebook_size
    report["mlm_train_tail"] = float(np.mean([h[0] for h in hist[-20:]])) if hist else None
    log.info("masked pretraining: loss %.3f -> %.3f, acc %.4f", report["mlm_initial_loss"],
             report["mlm_final_loss"], report["mlm_final_acc"])
    chist = train_contrastive(model, data, cfg, train_ids, progress)
    report["contrastive_first"] = chist[0] if chist else None
    report["contrastive_last"] = float(np.mean(chist[-20:])) if chist else None
    if heldout_ids is not None and len(heldout_ids) >= 2:
        shared, exact = retrieval_accuracy(model, data, np.asarray(heldout_ids)[:32])
        report["heldout_top1_shared_motif"] = shared
        report["heldout_top1_exact"] = exact
    model.eval()
    return model, report


def save_embedding(model, path, meta=None):
    state = {"model": {k: v for k, v in model.state_dict().items()}}
    return save_checkpoint(path, "embedding", asdict(model.cfg), state, meta)


def load_embedding(path):
    blob = load_checkpoint(path, "embedding")
    cfg = EmbeddingConfig(**blob["config"])
    model = JointEmbedding(cfg)
    state = blob["state"]["model"]
    if any(k.startswith("momentum_") for k in state):
        model.init_momentum()
    model.load_state_dict(state)
    model.eval()
    model.checkpoint_sha256 = blob["sha256"]
    return model
