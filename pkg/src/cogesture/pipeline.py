"""Staged training, generation and evaluation on top of the model modules.

A run lives in a workspace directory holding one checkpoint per stage plus
``manifest.json``, which records for every stage the SHA-256 of the file it
wrote and of every checkpoint it consumed. Downstream stages refuse to run
on top of a checkpoint whose hash no longer matches the one its consumer
was trained against.
"""

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .bodypart import BodyPartition, StackedCodes, channel_masks, decode_stacked, sample_bodypart
from .checkpoint import file_hash, require_match
from .denoiser import (Batch, TrainingContext, build_diffusion_data, generate_latents, load_denoiser, make_batch,
                       save_denoiser, train_denoiser)
from .embedding import (build_embedding_data, load_embedding, save_embedding, semantic_saliency,
                        train_joint_embedding)
from .errors import CheckpointMismatchError, StateError, ValidationError
from .evaluation import (fgd, gesture_features, load_style_classifier, save_style_classifier, semantic_scores,
                         sra, summarize, train_style_classifier, write_report)
from .motion.corpus import generate_corpus
from .motion.skeleton import toy_skeleton
from .motion.types import Motion, pose_dim
from .speech import Sentence
from .style import load_style_space, save_style_space, session_takes, train_style_space
from .utils import pad_sequences, seed_everything
from .vqvae import VQVAEConfig, feature_arrays, load_codec, save_codec, train_vqvae

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_FORMAT = "cogesture-manifest"
OUTPUTS = {
    "vqvae": "codec.pt",
    "embedding": "embedding.pt",
    "style": "style.pt",
    "classifier": "classifier.pt",
    "diffusion": "denoiser.pt",
    "bodypart": "bodypart_denoiser.pt",
}


# ---------------------------------------------------------------------------
# workspace and manifest
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return self.root / name

    def part_codec_path(self, part):
        return self.root / "parts" / f"{part}.pt"

    def manifest(self):
        p = self.path(MANIFEST)
        if not p.exists():
            return {"format": MANIFEST_FORMAT, "version": 1, "stages": {}}
        data = json.loads(p.read_text())
        if data.get("format") != MANIFEST_FORMAT:
            raise ValidationError(f"{p} is not a workspace manifest")
        return data

    def record(self, stage, outputs, consumed, config=None, report=None):
        """Write the hashes of a stage's outputs and of the checkpoints it read."""
        m = self.manifest()
        m["stages"][stage] = {
            "outputs": {str(Path(p).relative_to(self.root)): file_hash(p) for p in outputs},
            "consumed": {str(Path(p).relative_to(self.root)): file_hash(p) for p in consumed},
            "config": _plain(config or {}),
            "report": _plain(report or {}),
        }
        self.path(MANIFEST).write_text(json.dumps(m, indent=2, sort_keys=True))
        return m["stages"][stage]

    def is_current(self, stage, config):
        """True when ``stage`` was run with ``config`` and none of its files changed since."""
        entry = self.manifest()["stages"].get(stage)
        if entry is None or entry["config"] != _plain(config):
            return False
        for rel, sha in {**entry["outputs"], **entry["consumed"]}.items():
            p = self.path(rel)
            if not p.exists() or file_hash(p) != sha:
                return False
        return True

    def cached_report(self, stage):
        return self.manifest()["stages"][stage]["report"]

    def require(self, name):
        p = self.path(name)
        if not p.exists():
            raise StateError(f"{p} is missing; run the stage that produces it first")
        return p

    def check_lineage(self, stage):
        """Each checkpoint ``stage`` consumed must still be the file it was trained against."""
        entry = self.manifest()["stages"].get(stage)
        if entry is None:
            return
        for rel, sha in entry["consumed"].items():
            p = self.path(rel)
            if not p.exists():
                raise StateError(f"{p} (consumed by {stage}) is missing")
            found = file_hash(p)
            if found != sha:
                raise CheckpointMismatchError(f"{rel} sha256 (as consumed by {stage})", sha, found)


def corpus_split(cfg):
    corpus = generate_corpus(cfg.seed, cfg.corpus)
    train, test = corpus.split(cfg.holdout_fraction)
    return corpus, train, test


# ---------------------------------------------------------------------------
# loading with compatibility checks
# ---------------------------------------------------------------------------

def load_codec_checked(ws, cfg):
    codec = load_codec(ws.require(OUTPUTS["vqvae"]), expect_input_dim=pose_dim(cfg.corpus.num_joints))
    require_match("vqvae.downsample", cfg.corpus.downsample, codec.downsample)
    return codec


def load_embedding_checked(ws, codec):
    emb = load_embedding(ws.require(OUTPUTS["embedding"]))
    require_match("embedding.latent_dim", codec.cfg.latent_dim, emb.cfg.latent_dim)
    require_match("embedding.codebook_size", codec.cfg.codebook_size, emb.cfg.codebook_size)
    return emb


def load_style_checked(ws, cfg):
    space = load_style_space(ws.require(OUTPUTS["style"]))
    require_match("style.num_joints", cfg.corpus.num_joints, space.cfg.num_joints)
    return space


def partition_of(cfg):
    bp = cfg.bodypart
    return BodyPartition.from_names(bp.parts, toy_skeleton(cfg.corpus.num_joints), bp.root_part)


def load_part_codecs(ws, partition):
    codecs = {}
    for name in partition.names:
        c = load_codec(ws.part_codec_path(name), expect_input_dim=len(partition.columns(name)))
        codecs[name] = c
    dims = {c.cfg.latent_dim for c in codecs.values()}
    if len(dims) != 1:
        raise CheckpointMismatchError("part codec latent_dim", "equal across parts", sorted(dims))
    return codecs


@dataclass
class Models:
    """Everything generation needs."""

    codec: object
    embedding: object
    style_space: object
    denoiser: object
    latent_mean: np.ndarray
    latent_std: np.ndarray
    partition: object = None
    part_codecs: dict = None

    @property
    def tags(self):
        return tuple(self.style_space.cfg.style_tags)


def load_models(ws, cfg, bodypart=False, denoiser_name=None):
    stage = "bodypart" if bodypart else "diffusion"
    ws.check_lineage(Path(denoiser_name).stem if denoiser_name else stage)
    codec = load_codec_checked(ws, cfg)
    emb = load_embedding_checked(ws, codec)
    space = load_style_checked(ws, cfg)
    partition = part_codecs = None
    if bodypart:
        partition = partition_of(cfg)
        part_codecs = load_part_codecs(ws, partition)
        width = len(partition) * next(iter(part_codecs.values())).cfg.latent_dim
    else:
        width = codec.cfg.latent_dim
    expect = {"latent_dim": width, "text_dim": emb.cfg.width, "style_dim": space.cfg.width}
    model, mean, std = load_denoiser(ws.require(denoiser_name or OUTPUTS[stage]), expect)
    return Models(codec, emb, space, model, mean, std, partition, part_codecs)


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------

def _key(cfg, **blocks):
    """What a stage's result depends on besides its input checkpoints."""
    return {"seed": cfg.seed, "holdout_fraction": cfg.holdout_fraction, "corpus": asdict(cfg.corpus),
            **{k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in blocks.items()}}


def stage_vqvae(cfg, ws, progress=None, resume=False):
    key = _key(cfg, vqvae=cfg.vqvae)
    if resume and ws.is_current("vqvae", key):
        return ws.cached_report("vqvae")
    _, train, test = corpus_split(cfg)
    codec, report = train_vqvae(feature_arrays(train), cfg.vqvae, held_out=feature_arrays(test), progress=progress)
    out = ws.path(OUTPUTS["vqvae"])
    save_codec(codec, out, meta={"report": report})
    ws.record("vqvae", [out], [], key, report)
    return report


def stage_embedding(cfg, ws, progress=None, resume=False):
    key = _key(cfg, embedding=cfg.embedding)
    if resume and ws.is_current("embedding", key):
        return ws.cached_report("embedding")
    corpus, train, test = corpus_split(cfg)
    codec = load_codec_checked(ws, cfg)
    data = build_embedding_data(train + test, codec, corpus.config.token_family, shifts=cfg.embedding.augment_shifts)
    train_ids = np.arange(len(train))
    held_ids = np.arange(len(train), len(train) + len(test))
    model, report = train_joint_embedding(data, cfg.embedding, train_ids, held_ids, progress)
    out = ws.path(OUTPUTS["embedding"])
    save_embedding(model, out, meta={"report": report})
    ws.record("embedding", [out], [ws.path(OUTPUTS["vqvae"])], key, report)
    return report


def stage_style(cfg, ws, progress=None, resume=False):
    key = _key(cfg, style=cfg.style)
    if resume and ws.is_current("style", key):
        return ws.cached_report("style")
    _, train, test = corpus_split(cfg)
    space, report = train_style_space(train, cfg.style, test, progress)
    space.freeze()
    out = ws.path(OUTPUTS["style"])
    save_style_space(space, out, meta={"report": report})
    ws.record("style", [out], [], key, report)
    return report


def stage_classifier(cfg, ws, progress=None, resume=False):
    ev = cfg.evaluation
    key = _key(cfg, classifier_steps=ev.classifier_steps)
    if resume and ws.is_current("classifier", key):
        return ws.cached_report("classifier")
    _, train, test = corpus_split(cfg)
    clf = train_style_classifier(train, test, cfg.corpus.style_tags, steps=ev.classifier_steps, seed=cfg.seed)
    out = ws.path(OUTPUTS["classifier"])
    save_style_classifier(clf, out)
    report = {"heldout_accuracy": clf.heldout_accuracy}
    ws.record("classifier", [out], [], key, report)
    return report


def _context(codec, emb, space, data, den_cfg, partition=None, part_codecs=None):
    f = lambda a: torch.as_tensor(a, dtype=torch.float32)  # noqa: E731
    return TrainingContext(codec, emb, space, f(data.latent_mean), f(data.latent_std), den_cfg.make_schedule(),
                           partition, part_codecs)


def stage_diffusion(cfg, ws, progress=None, den_cfg=None, output=None, resume=False):
    """Train a denoiser; ``den_cfg``/``output`` allow ablation variants beside the main model."""
    den_cfg = den_cfg or cfg.denoiser
    name = "diffusion" if output is None else Path(output).stem
    key = _key(cfg, denoiser=den_cfg)
    if resume and ws.is_current(name, key):
        return ws.cached_report(name)
    _, train, _ = corpus_split(cfg)
    codec = load_codec_checked(ws, cfg)
    emb = load_embedding_checked(ws, codec)
    space = load_style_checked(ws, cfg)
    require_match("denoiser.latent_dim", codec.cfg.latent_dim, den_cfg.latent_dim)
    require_match("denoiser.text_dim", emb.cfg.width, den_cfg.text_dim)
    require_match("denoiser.style_dim", space.cfg.width, den_cfg.style_dim)
    data = build_diffusion_data(train, codec, emb, space, seed=cfg.seed)
    ctx = _context(codec, emb, space, data, den_cfg)
    model, report = train_denoiser(data, ctx, den_cfg, np.arange(len(data)), progress)
    out = ws.path(output or OUTPUTS["diffusion"])
    save_denoiser(model, out, data.latent_mean, data.latent_std, meta={"report": report})
    consumed = [ws.path(OUTPUTS[k]) for k in ("vqvae", "embedding", "style")]
    ws.record(name, [out], consumed, key, report)
    return report


# denoiser variants trained next to the main model for ablation comparisons
ABLATIONS = {
    "no_transcript": {"use_transcript": False},
    "no_style_loss": {"w_style": 0.0},
}


def ablation_output(name):
    return f"denoiser_{name}.pt"


def stage_ablation(cfg, ws, name, progress=None, resume=False):
    if name not in ABLATIONS:
        raise ValidationError(f"unknown ablation {name!r}; known: {sorted(ABLATIONS)}")
    den_cfg = replace(cfg.denoiser, **ABLATIONS[name])
    return stage_diffusion(cfg, ws, progress, den_cfg, ablation_output(name), resume)


def part_codec_config(cfg, partition, name):
    return replace(cfg.vqvae, input_dim=len(partition.columns(name)), rot6d_offset=partition.rot6d_offset(name),
                   epochs=cfg.bodypart.codec_epochs)


def stage_bodypart(cfg, ws, progress=None, resume=False):
    """Per-part codecs plus a denoiser over their channel-stacked codes."""
    partition = partition_of(cfg)
    den_cfg = replace(cfg.denoiser, latent_dim=len(partition) * cfg.vqvae.latent_dim,
                      train_steps=cfg.bodypart.train_steps)
    key = _key(cfg, vqvae=cfg.vqvae, bodypart=cfg.bodypart, denoiser=den_cfg)
    if resume and ws.is_current("bodypart", key):
        return ws.cached_report("bodypart")
    _, train, test = corpus_split(cfg)
    report = {"codecs": {}}
    outs = []
    for name in partition.names:
        cols = partition.columns(name)
        pcfg = part_codec_config(cfg, partition, name)
        codec, rep = train_vqvae(feature_arrays(train, cols), pcfg, held_out=feature_arrays(test, cols))
        path = ws.part_codec_path(name)
        save_codec(codec, path, meta={"report": rep})
        outs.append(path)
        report["codecs"][name] = rep.get("heldout_ratio")
    part_codecs = load_part_codecs(ws, partition)
    codec = load_codec_checked(ws, cfg)
    emb = load_embedding_checked(ws, codec)
    space = load_style_checked(ws, cfg)
    data = build_diffusion_data(train, codec, emb, space, seed=cfg.seed, partition=partition, part_codecs=part_codecs)
    ctx = _context(codec, emb, space, data, den_cfg, partition, part_codecs)
    model, report["denoiser"] = train_denoiser(data, ctx, den_cfg, np.arange(len(data)), progress)
    out = ws.path(OUTPUTS["bodypart"])
    save_denoiser(model, out, data.latent_mean, data.latent_std, meta={"partition": [list(p) for p in partition.parts]})
    consumed = [ws.path(OUTPUTS[k]) for k in ("vqvae", "embedding", "style")] + outs
    ws.record("bodypart", [out] + outs, consumed, key, report)
    return report


# ---------------------------------------------------------------------------
# conditions, decoding, generation
# ---------------------------------------------------------------------------

def condition_batch(models, sentences, styles=None):
    """Collate denoiser conditions for a list of sentences.

    ``styles`` is None or an array of per-sentence style embeddings (B, C_CLIP).
    """
    if not sentences:
        raise ValidationError("no sentences to condition on")
    texts, sal = [], []
    for s in sentences:
        Zt, zt = models.embedding.encode_transcript(s.tokens)
        texts.append(Zt)
        sal.append(semantic_saliency(Zt, zt)[:, None])
    audio, lmask = pad_sequences([s.audio for s in sentences])
    text, tmask = pad_sequences(texts)
    saliency, _ = pad_sequences(sal)
    B, L = lmask.shape
    width = models.denoiser.cfg.style_dim
    style = np.zeros((B, width)) if styles is None else np.asarray(styles)
    f = lambda a: torch.as_tensor(a, dtype=torch.float32)  # noqa: E731
    return Batch(torch.zeros(B, L, models.denoiser.cfg.latent_dim), torch.as_tensor(lmask), f(audio), f(text),
                 torch.as_tensor(tmask), f(saliency[..., 0]), torch.zeros(B, models.embedding.cfg.width), f(style))


def decode_latents(models, z, num_frames=None, fps=60.0):
    """Standardized (L, W) latents -> Motion via quantization and the codec(s)."""
    raw = z * models.latent_std + models.latent_mean
    if models.partition is None:
        poses = models.codec.decode(models.codec.quantize(raw)).poses
    else:
        stacked = StackedCodes.from_flat(raw, models.partition.names, fps=fps)
        poses = decode_stacked(stacked, models.partition, models.part_codecs).poses
    if num_frames is not None:
        if not 0 < num_frames <= len(poses):
            raise ValidationError(f"num_frames {num_frames} does not fit {len(z)} latents")
        poses = poses[:num_frames]
    return Motion(poses, fps)


def synthesize(models, sentences, styles, rng, s=None):
    """One motion per sentence; ``styles`` None generates without a style prompt."""
    batch = condition_batch(models, sentences, styles)
    z = generate_latents(models.denoiser, batch, rng, s=s, use_style=styles is not None)
    return [decode_latents(models, z[i, :len(sent.audio)], sent.num_frames) for i, sent in enumerate(sentences)]


def synthesize_parts(models, sentence, part_styles, rng, s=None, w_body=0.01):
    """Body-part generation: ``part_styles`` maps part name -> style embedding or None."""
    if models.partition is None:
        raise StateError("body-part generation needs the body-part denoiser")
    unknown = set(part_styles) - set(models.partition.names)
    if unknown:
        raise ValidationError(f"unknown body parts {sorted(unknown)}; known: {list(models.partition.names)}")
    batch = condition_batch(models, [sentence])
    styles = [None if part_styles.get(n) is None else np.asarray(part_styles[n])[None]
              for n in models.partition.names]
    O = len(models.partition)
    masks = channel_masks(O, models.denoiser.cfg.latent_dim // O)
    s = models.denoiser.cfg.guidance_scale if s is None else s
    z = sample_bodypart(models.denoiser, batch, styles, s, rng, models.denoiser.cfg.make_schedule(), masks, w_body)
    return decode_latents(models, z[0], sentence.num_frames)


def style_schedule(models, sentences, prompts, rng, s=None, context_sentences=1):
    """Generate consecutive sentences, each under its own style prompt, as one motion.

    Each sentence is sampled with the latents of the preceding
    ``context_sentences`` sentences held fixed as a clean prefix. An empty
    ``prompts`` list generates every sentence without a style prompt.
    """
    if prompts and len(prompts) != len(sentences):
        raise ValidationError(f"{len(prompts)} prompts for {len(sentences)} sentences")
    done = []  # standardized latents per sentence
    for i, sent in enumerate(sentences):
        ctx = done[max(0, i - context_sentences):i]
        prefix = np.concatenate(ctx)[None] if ctx else None
        audio = np.concatenate([sentences[j].audio for j in range(max(0, i - context_sentences), i)] + [sent.audio])
        style = None if not prompts or prompts[i] is None else np.asarray(prompts[i])[None]
        batch = condition_batch(models, [Sentence(sent.tokens, audio)], style)
        z = generate_latents(models.denoiser, batch, rng, s=s, use_style=style is not None, prefix=prefix)
        done.append(z[0, -len(sent.audio):])
    z = np.concatenate(done)
    if all(st.num_frames is None for st in sentences):
        return decode_latents(models, z)
    # keep each sentence's own length inside the continuous take
    d = models.codec.downsample
    poses = decode_latents(models, z).poses
    pieces, start = [], 0
    for st in sentences:
        n = len(st.audio) * d
        pieces.append(poses[start:start + (st.num_frames or n)])
        start += n
    return Motion(np.concatenate(pieces))


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

def prompt_bank(style_space, items, per_tag, frame_range, rng):
    """Style prompt embeddings per tag from random crops of session takes."""
    takes = session_takes(items)
    bank = {}
    for tag in style_space.cfg.style_tags:
        pool = [p for p, t in takes if t == tag]
        if not pool:
            raise ValidationError(f"no motion with style {tag!r} to draw prompts from")
        rows = []
        for _ in range(per_tag):
            poses = pool[rng.integers(len(pool))]
            n = int(min(len(poses), rng.integers(frame_range[0], frame_range[1] + 1)))
            a = int(rng.integers(0, len(poses) - n + 1))
            rows.append(style_space.encode_style_motion(Motion(poses[a:a + n])).z_s)
        bank[tag] = np.stack(rows)
    return bank


def evaluate_synthesis(models, items, classifier, repeats, seed, bank_items, s=None, prompt_frames=(96, 240),
                       min_classifier_accuracy=0.9, progress=None):
    """SC, SRA and FGD of generated motions over ``repeats`` synthesis rounds.

    Every round assigns each held-out sentence a random style tag and a
    prompt of that tag drawn from ``bank_items``; SC compares the sentence
    transcript with the generated motion, SRA checks the classifier
    recovers the prompted tag, FGD compares against the real motions.
    """
    tags = models.tags
    bank = prompt_bank(models.style_space, bank_items, 8, prompt_frames, np.random.default_rng([seed, 7]))
    sentences = [Sentence.from_item(it) for it in items]
    real = [it.motion for it in items]
    extract = gesture_features(models.codec, models.embedding)
    real_feats = extract(real)
    out = {"SC": [], "SRA": [], "FGD": []}
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        chosen = [tags[i] for i in rng.integers(len(tags), size=len(items))]
        styles = np.stack([bank[t][rng.integers(len(bank[t]))] for t in chosen])
        motions = synthesize(models, sentences, styles, rng, s)
        out["SC"].append(float(np.mean(semantic_scores(models.embedding, models.codec,
                                                       [st.tokens for st in sentences], motions))))
        out["SRA"].append(sra(classifier, motions, chosen, min_classifier_accuracy))
        out["FGD"].append(fgd(real_feats, extract(motions)))
        if progress:
            progress({"repeat": r, **{k: v[-1] for k, v in out.items()}})
    return {k: summarize(v) for k, v in out.items()}


def train_all(cfg, ws, progress=None, resume=False):
    """Run the training stages in order; with ``resume`` unchanged stages are skipped."""
    seed_everything(cfg.seed)
    out = {}
    for name, fn in (("vqvae", stage_vqvae), ("embedding", stage_embedding), ("style", stage_style),
                     ("classifier", stage_classifier), ("diffusion", stage_diffusion)):
        out[name] = fn(cfg, ws, progress, resume=resume)
    return out


def run_pipeline(cfg, ws, progress=None, report_path=None, resume=False):
    """Train every stage, then evaluate on the held-out split; returns the metric report."""
    stages = train_all(cfg, ws, progress, resume)
    metrics = evaluate_workspace(cfg, ws, progress)
    summary = {"stages": {k: _plain(v) for k, v in stages.items()}, "metrics": metrics}
    write_report(report_path or ws.path("report.json"), metrics, {"seed": cfg.seed})
    return summary


def evaluate_workspace(cfg, ws, progress=None, denoiser_name=None):
    _, train, test = corpus_split(cfg)
    ev = cfg.evaluation
    if ev.max_items:
        test = test[:ev.max_items]
    models = load_models(ws, cfg, denoiser_name=denoiser_name)
    clf = load_style_classifier(ws.require(OUTPUTS["classifier"]))
    return evaluate_synthesis(models, test, clf, ev.repeats, cfg.seed, train, ev.guidance_scale, ev.prompt_frames,
                              ev.min_classifier_accuracy, progress)


def _plain(obj):
    """Reports may contain numpy scalars; make them JSON-friendly."""
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))
