"""Command-line entry point: ``cogesture <command> ...``.

Exit status: 0 success, 2 invalid input or state, 3 checkpoint mismatch,
4 numerical failure, 1 anything else.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import file_hash, home_dir
from .config import dump_config, load_config
from .embedding import retrieve
from .errors import CogestureError, StateError, ValidationError
from .evaluation import (fgd, gesture_features, load_style_classifier, read_report, semantic_scores, sra,
                         summarize, write_report)
from .motion.corpus import generate_corpus
from .motion.corpus import vocabulary as corpus_vocabulary
from .motion.io import export_motion, load_motion, save_motion
from .pipeline import (ABLATIONS, OUTPUTS, Workspace, ablation_output, stage_ablation, evaluate_workspace, load_codec_checked, load_embedding_checked,
                       load_models, load_style_checked, run_pipeline,
                       stage_bodypart, stage_classifier, stage_diffusion, stage_embedding, stage_style,
                       stage_vqvae, style_schedule, synthesize, synthesize_parts)
from .speech import Sentence, load_speech, save_speech
from .style import PROMPT_TEMPLATES
from .utils import seed_everything

log = logging.getLogger("cogesture")
CONFIG_NAME = "config.json"


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _workspace(args):
    return Workspace(args.workspace or home_dir() / "workspace")


def _config(args, ws):
    """Explicit --config/--preset/--set win; otherwise reuse the workspace's config."""
    stored = ws.path(CONFIG_NAME)
    explicit = args.config or args.preset or args.set
    if not explicit and stored.exists():
        cfg = load_config(stored, (), "reference")
    else:
        cfg = load_config(args.config, args.set or (), args.preset)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _save_config(cfg, ws):
    dump_config(cfg, ws.path(CONFIG_NAME))


def _progress(args):
    if not args.verbose:
        return None
    return lambda d: print(json.dumps(d, default=float), file=sys.stderr, flush=True)


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


def parse_prompt(text):
    """``KIND:VALUE`` with KIND in text, tag, motion, video, none."""
    if text in ("none", "none:"):
        return ("none", "")
    kind, sep, value = text.partition(":")
    if not sep or kind not in ("text", "tag", "motion", "video", "none"):
        raise ValidationError(f"prompt {text!r} must look like text:..., tag:..., motion:FILE, video:FILE or none")
    if kind != "none" and not value:
        raise ValidationError(f"prompt {text!r} has an empty value")
    return (kind, value)


def encode_prompt(space, prompt):
    """Returns ``(embedding or None, style tag or None)``."""
    kind, value = prompt
    tags = tuple(space.cfg.style_tags)
    if kind == "none":
        return None, None
    if kind == "tag":
        if value not in tags:
            raise ValidationError(f"unknown style tag {value!r}; known: {list(tags)}")
        return space.encode_style_text(PROMPT_TEMPLATES[0].format(value)).z_s, value
    if kind == "text":
        named = [t for t in tags if t in value.lower().split()]
        return space.encode_style_text(value).z_s, (named[0] if len(named) == 1 else None)
    if kind == "motion":
        return space.encode_style_motion(load_motion(value)).z_s, None
    path = Path(value)
    if not path.exists():
        raise ValidationError(f"video feature file not found: {path}")
    return space.encode_style_video(np.load(path)).z_s, None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_corpus(args):
    ws = _workspace(args)
    cfg = _config(args, ws)
    corpus = generate_corpus(cfg.seed, cfg.corpus)
    train, test = corpus.split(cfg.holdout_fraction)
    held = {id(it) for it in test}
    out = Path(args.out)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, it in enumerate(corpus.items):
        name = f"motions/item_{i:05d}.cgm"
        save_motion(it.motion, out / name)
        entries.append({"file": name, "tokens": it.transcript.tokens.tolist(), "style": it.style,
                        "session": it.session, "position": it.position,
                        "split": "heldout" if id(it) in held else "train"})
    save_speech([Sentence.from_item(it) for it in corpus.items], out / "speech.json", cfg.corpus.downsample)
    index = {"format": "cogesture-corpus", "version": 1, "seed": cfg.seed, "vocabulary": list(corpus.vocabulary),
             "style_tags": list(corpus.style_tags), "items": entries}
    (out / "index.json").write_text(json.dumps(index, indent=1))
    _print({"items": len(entries), "train": len(train), "heldout": len(test), "out": str(out)})
    return 0


def _train(stage):
    def run(args):
        ws = _workspace(args)
        cfg = _config(args, ws)
        _save_config(cfg, ws)
        seed_everything(cfg.seed)
        if stage is stage_diffusion and args.ablation:
            report = stage_ablation(cfg, ws, args.ablation, _progress(args), resume=args.resume)
        else:
            report = stage(cfg, ws, _progress(args), resume=args.resume)
        _print(report)
        return 0
    return run


def cmd_pipeline(args):
    ws = _workspace(args)
    cfg = _config(args, ws)
    _save_config(cfg, ws)
    summary = run_pipeline(cfg, ws, _progress(args), args.report, resume=args.resume)
    _print(summary["metrics"])
    return 0


def _read_corpus_dir(path):
    path = Path(path)
    index_path = path / "index.json"
    if not index_path.exists():
        raise ValidationError(f"{path} has no index.json (write one with 'cogesture corpus generate')")
    return json.loads(index_path.read_text())


def cmd_generate(args):
    ws = _workspace(args)
    cfg = _config(args, ws)
    seed_everything(cfg.seed)
    bodypart = bool(args.part)
    models = load_models(ws, cfg, bodypart=bodypart)
    vocab = corpus_vocabulary(cfg.corpus)
    sentences = load_speech(args.speech, models.codec.downsample, list(vocab))
    prompts = [encode_prompt(models.style_space, parse_prompt(p)) for p in args.prompt or []]
    if len(prompts) not in (0, 1, len(sentences)):
        raise ValidationError(f"give 0, 1 or {len(sentences)} prompts; got {len(prompts)}")
    if len(prompts) == 1:
        prompts = prompts * len(sentences)
    rng = np.random.default_rng(cfg.seed)
    s = cfg.evaluation.guidance_scale if args.guidance is None else args.guidance
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []

    def entry(name, sent, prompt):
        return {"file": name, "tokens": sent.tokens.tolist(), "tag": prompt[1] if prompt else None}

    if bodypart:
        part_prompts = {}
        for spec in args.part:
            name, sep, p = spec.partition("=")
            if not sep:
                raise ValidationError(f"--part {spec!r} must look like NAME=KIND:VALUE")
            part_prompts[name] = encode_prompt(models.style_space, parse_prompt(p))[0]
        for i, sent in enumerate(sentences):
            m = synthesize_parts(models, sent, part_prompts, rng, s, cfg.bodypart.w_body)
            name = f"sentence_{i:03d}.cgm"
            save_motion(m, out / name)
            entries.append(entry(name, sent, None))
    elif args.schedule:
        m = style_schedule(models, sentences, [p[0] for p in prompts], rng, s)
        save_motion(m, out / "take.cgm")
        entries.append({"file": "take.cgm", "tokens": [t for st in sentences for t in st.tokens.tolist()],
                        "tag": None})
    else:
        styles = None
        if prompts and any(p[0] is not None for p in prompts):
            if any(p[0] is None for p in prompts):
                raise ValidationError("mixing 'none' with style prompts needs --schedule")
            styles = np.stack([p[0] for p in prompts])
        motions = synthesize(models, sentences, styles, rng, s)
        for i, (sent, m) in enumerate(zip(sentences, motions)):
            name = f"sentence_{i:03d}.cgm"
            save_motion(m, out / name)
            entries.append(entry(name, sent, prompts[i] if prompts else None))
    record = {
        "format": "cogesture-generation", "version": 1, "seed": cfg.seed, "guidance_scale": s,
        "speech": str(args.speech), "speech_sha256": file_hash(args.speech), "prompts": args.prompt or [],
        "parts": args.part or [], "schedule": bool(args.schedule),
        "denoiser_sha256": models.denoiser.checkpoint_sha256, "manifest": ws.manifest()["stages"],
        "items": entries,
    }
    (out / "generation.json").write_text(json.dumps(record, indent=1, default=list))
    _print({"written": [e["file"] for e in entries], "out": str(out)})
    return 0


def _generated_set(path):
    path = Path(path)
    rec_path = path / "generation.json"
    if not rec_path.exists():
        raise ValidationError(f"{path} has no generation.json")
    rec = json.loads(rec_path.read_text())
    return [(load_motion(path / e["file"]), e) for e in rec["items"]]


def cmd_evaluate(args):
    ws = _workspace(args)
    cfg = _config(args, ws)
    seed_everything(cfg.seed)
    metrics_wanted = [m.strip().lower() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics_wanted) - {"fgd", "sc", "sra"}
    if unknown:
        raise ValidationError(f"unknown metrics {sorted(unknown)}")
    if not args.generated:
        # full protocol: fresh synthesis rounds on the held-out split
        name = ablation_output(args.ablation) if args.ablation else None
        metrics = evaluate_workspace(cfg, ws, _progress(args), denoiser_name=name)
        metrics = {k: v for k, v in metrics.items() if k.lower() in metrics_wanted}
    else:
        models = load_models(ws, cfg, denoiser_name=ablation_output(args.ablation) if args.ablation else None)
        extract = gesture_features(models.codec, models.embedding)
        clf = None
        if "sra" in metrics_wanted:
            clf = load_style_classifier(ws.require(OUTPUTS["classifier"]))
        real_feats = None
        if "fgd" in metrics_wanted:
            if not args.real:
                raise ValidationError("FGD needs --real")
            index = _read_corpus_dir(args.real)
            items = [e for e in index["items"] if args.real_split == "all" or e["split"] == args.real_split]
            real_feats = extract([load_motion(Path(args.real) / e["file"]) for e in items])
        per_run = {m.upper(): [] for m in metrics_wanted}
        for gen_dir in args.generated:
            pairs = _generated_set(gen_dir)
            motions = [m for m, _ in pairs]
            if "fgd" in metrics_wanted:
                per_run["FGD"].append(fgd(real_feats, extract(motions)))
            if "sc" in metrics_wanted:
                per_run["SC"].append(float(np.mean(semantic_scores(
                    models.embedding, models.codec, [e["tokens"] for _, e in pairs], motions))))
            if "sra" in metrics_wanted:
                tagged = [(m, e["tag"]) for m, e in pairs if e.get("tag")]
                if not tagged:
                    raise StateError(f"{gen_dir}: no generated motion records a style tag; SRA is undefined")
                per_run["SRA"].append(sra(clf, [m for m, _ in tagged], [t for _, t in tagged],
                                          cfg.evaluation.min_classifier_accuracy))
        metrics = {k: summarize(v) for k, v in per_run.items()}
    report = write_report(args.report, metrics, {"seed": cfg.seed}) if args.report else {"metrics": metrics}
    _print(report["metrics"])
    return 0


def cmd_retrieve(args):
    ws = _workspace(args)
    cfg = _config(args, ws)
    index = _read_corpus_dir(args.corpus)
    codec = load_codec_checked(ws, cfg)
    emb = load_embedding_checked(ws, codec)
    vocab = index["vocabulary"]
    if args.text is not None:
        words = args.text.split()
        tokens = []
        for w in words:
            if w.isdigit():
                tokens.append(int(w))
            elif w in vocab:
                tokens.append(vocab.index(w))
            else:
                raise ValidationError(f"unknown word {w!r}")
        query = emb.encode_transcript(tokens)[1]
        bank = np.stack([emb.encode_gesture(codec.quantize(codec.encode(load_motion(Path(args.corpus) / e["file"]))))[1]
                         for e in index["items"]])
    else:
        motion = load_motion(args.motion)
        query = emb.encode_gesture(codec.quantize(codec.encode(motion)))[1]
        bank = np.stack([emb.encode_transcript(e["tokens"])[1] for e in index["items"]])
    idx, sims = retrieve(query, bank, args.k)
    hits = [{"rank": r + 1, "file": index["items"][i]["file"], "similarity": float(sim),
             "tokens": [vocab[t] for t in index["items"][i]["tokens"]]} for r, (i, sim) in enumerate(zip(idx, sims))]
    _print(hits)
    return 0


def cmd_embed_style(args):
    ws = _workspace(args)
    cfg = _config(args, ws)
    space = load_style_checked(ws, cfg)
    z, tag = encode_prompt(space, parse_prompt(args.prompt))
    if z is None:
        raise ValidationError("'none' has no style embedding")
    if args.out:
        np.save(args.out, z)
    _print({"embedding": z.tolist(), "tag": tag, "norm": float(np.linalg.norm(z))})
    return 0


def cmd_export(args):
    export_motion(load_motion(args.motion), args.out, args.format)
    _print({"out": str(args.out), "format": args.format})
    return 0


def cmd_report(args):
    _print(read_report(args.path))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workspace", help="run directory (default: $COGESTURE_HOME/workspace)")
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--preset", choices=("reference", "desk", "tiny"), help="base settings")
    common.add_argument("--set", action="append", metavar="BLOCK.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("-v", "--verbose", action="store_true", help="print training progress to stderr")
    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--resume", action="store_true",
                            help="skip stages whose checkpoint matches the config and upstream hashes")

    p = argparse.ArgumentParser(prog="cogesture", description="Stylized co-speech gesture synthesis.")
    p.add_argument("--version", action="version", version=f"cogesture {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", parents=[common], help="synthetic speech-gesture corpus")
    c.add_argument("action", choices=("generate",))
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corpus)

    for name, stage, text in (("train-vqvae", stage_vqvae, "motion codec"),
                              ("train-embed", stage_embedding, "transcript/gesture joint embedding"),
                              ("train-style", stage_style, "style space (motion, text and video towers)"),
                              ("train-classifier", stage_classifier, "style classifier used by SRA"),
                              ("train-diffusion", stage_diffusion, "latent denoiser"),
                              ("train-bodypart", stage_bodypart, "per-part codecs and stacked denoiser")):
        t = sub.add_parser(name, parents=[common, train_opts], help=f"train the {text}")
        if stage is stage_diffusion:
            t.add_argument("--ablation", choices=sorted(ABLATIONS), help="train an ablated variant beside the main model")
        t.set_defaults(func=_train(stage))

    r = sub.add_parser("pipeline", parents=[common, train_opts], help="train every stage and evaluate")
    r.add_argument("--report", help="metric report path (default: WORKSPACE/report.json)")
    r.set_defaults(func=cmd_pipeline)

    g = sub.add_parser("generate", parents=[common], help="synthesize gestures for a speech file")
    g.add_argument("--speech", required=True, help="speech JSON file")
    g.add_argument("--prompt", action="append", help="KIND:VALUE style prompt, once or once per sentence")
    g.add_argument("--part", action="append", metavar="NAME=KIND:VALUE", help="per-body-part prompt")
    g.add_argument("--schedule", action="store_true", help="one continuous take, prompt per sentence")
    g.add_argument("--guidance", type=float, help="classifier-free guidance scale")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", parents=[common], help="FGD / SC / SRA")
    e.add_argument("--real", help="corpus directory written by 'corpus generate'")
    e.add_argument("--real-split", default="heldout", choices=("heldout", "train", "all"))
    e.add_argument("--generated", nargs="+", help="generation directories (one per repeat)")
    e.add_argument("--metrics", default="fgd,sc,sra")
    e.add_argument("--report", help="write a versioned JSON report here")
    e.add_argument("--ablation", choices=sorted(ABLATIONS), help="evaluate an ablated denoiser")
    e.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("retrieve", parents=[common], help="cross-modal retrieval in a corpus directory")
    q.add_argument("--corpus", required=True)
    grp = q.add_mutually_exclusive_group(required=True)
    grp.add_argument("--text", help="transcript words or token ids")
    grp.add_argument("--motion", help="motion file")
    q.add_argument("--k", type=int, default=5)
    q.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("embed-style", parents=[common], help="embed a style prompt")
    s.add_argument("prompt", help="KIND:VALUE")
    s.add_argument("--out", help="save the embedding as .npy")
    s.set_defaults(func=cmd_embed_style)

    x = sub.add_parser("export", help="convert a motion file for external viewers")
    x.add_argument("--motion", required=True)
    x.add_argument("--format", choices=("csv", "json"), required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)

    rp = sub.add_parser("report", help="print a metric report after checking its version")
    rp.add_argument("path")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CogestureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
