"""Pipeline configuration: one validated tree of per-stage blocks.

``PipelineConfig()`` carries the reference settings of the method (latent
width 512, model width 768, 1000 diffusion steps, ...). ``desk_config()``
and ``tiny_config()`` shrink widths, depths and step counts so the whole
pipeline trains on one CPU core; every override is listed in
``DESK_OVERRIDES`` / ``TINY_OVERRIDES`` next to the value it replaces.

Widths that must agree across stages (latent width, code count, transcript
feature width, style width, pose width, vocabulary, style tags) are owned by
one block and copied into the others on validation.
"""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, model_validator

from .denoiser import DenoiserConfig
from .embedding import EmbeddingConfig
from .errors import ValidationError
from .motion.corpus import CorpusConfig
from .motion.skeleton import DEFAULT_PARTITION
from .motion.types import pose_dim
from .style import StyleConfig
from .vqvae import VQVAEConfig


@dataclass
class BodypartConfig:
    parts: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_PARTITION.items()})
    root_part: str = "torso"
    w_body: float = 0.01
    codec_epochs: int = 40
    train_steps: int = 3000


@dataclass
class EvaluationConfig:
    repeats: int = 10
    guidance_scale: float = 1.5
    classifier_steps: int = 600
    min_classifier_accuracy: float = 0.9
    max_items: int = 0  # 0 = every held-out item
    prompt_frames: tuple = (96, 240)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=False)

    seed: int = 0
    holdout_fraction: float = 0.15
    corpus: CorpusConfig = CorpusConfig()
    vqvae: VQVAEConfig = VQVAEConfig()
    embedding: EmbeddingConfig = EmbeddingConfig()
    style: StyleConfig = StyleConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    bodypart: BodypartConfig = BodypartConfig()
    evaluation: EvaluationConfig = EvaluationConfig()

    @model_validator(mode="after")
    def _derive(self):
        c = self.corpus
        self.vqvae.input_dim = pose_dim(c.num_joints)
        self.embedding.vocab_size = c.vocab_size
        self.embedding.latent_dim = self.vqvae.latent_dim
        self.embedding.codebook_size = self.vqvae.codebook_size
        self.style.num_joints = c.num_joints
        self.style.style_tags = tuple(c.style_tags)
        self.denoiser.latent_dim = self.vqvae.latent_dim
        self.denoiser.text_dim = self.embedding.width
        self.denoiser.style_dim = self.style.width
        if c.downsample != self.vqvae.downsample:
            raise ValueError(f"corpus.downsample={c.downsample} but the codec downsamples by {self.vqvae.downsample}")
        return self

    def to_dict(self):
        return {name: (asdict(v) if hasattr(v, "__dataclass_fields__") else v)
                for name, v in ((n, getattr(self, n)) for n in type(self).model_fields)}


# reference value -> desk value, per block
DESK_OVERRIDES = {
    "vqvae": {"latent_dim": 32, "epochs": 100, "clip_frames": 96},
    "embedding": {"width": 64, "gesture_layers": 4},
    "style": {"width": 64, "hidden": 64, "video_layers": 2, "style_steps": 600, "video_steps": 2500},
    "denoiser": {"width": 64, "layers": 4, "heads": 4, "adain_hidden": 64, "diffusion_steps": 250,
                 "beta_start": 4e-4, "beta_end": 0.08, "train_steps": 6000},
    "bodypart": {"codec_epochs": 40, "train_steps": 2000},
    "evaluation": {"guidance_scale": 3.0},
}

TINY_OVERRIDES = {
    "corpus": {"num_items": 64, "sentences_per_session": 4},
    "vqvae": {"latent_dim": 16, "codebook_size": 64, "width": 32, "epochs": 4, "clip_frames": 96},
    "embedding": {"width": 32, "heads": 2, "text_layers": 1, "gesture_layers": 1, "pretrain_steps": 20,
                  "contrast_steps": 30, "batch_size": 16},
    "style": {"width": 32, "hidden": 32, "video_layers": 1, "video_heads": 2, "style_steps": 30,
              "video_steps": 30, "batch_size": 16},
    "denoiser": {"width": 32, "layers": 2, "heads": 2, "adain_hidden": 32, "diffusion_steps": 20,
                 "beta_start": 5e-3, "beta_end": 0.5, "train_steps": 30, "batch_size": 16},
    "bodypart": {"codec_epochs": 2, "train_steps": 20},
    "evaluation": {"repeats": 2, "classifier_steps": 40, "min_classifier_accuracy": 0.0, "max_items": 8},
}


def _merge(base, overrides):
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "parts":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _tuples(d):
    """JSON/YAML give lists where the dataclasses hold tuples."""
    for block, keys in (("corpus", ("k_range", "style_tags")), ("style", ("clip_range", "style_tags")),
                        ("embedding", ("augment_shifts",)), ("evaluation", ("prompt_frames",))):
        for k in keys:
            if k in d.get(block, {}) and isinstance(d[block][k], list):
                d[block][k] = tuple(d[block][k])
    return d


def build_config(data=None, preset="reference"):
    """Validate a (possibly partial) nested dict on top of a preset."""
    base = PipelineConfig().to_dict()
    if preset in ("desk", "tiny"):
        base = _merge(base, DESK_OVERRIDES)
    if preset == "tiny":
        base = _merge(base, TINY_OVERRIDES)
    elif preset not in ("reference", "desk"):
        raise ValidationError(f"unknown preset {preset!r}")
    merged = _tuples(_merge(base, data or {}))
    try:
        return PipelineConfig.model_validate(merged)
    except pydantic.ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            lines.append(f"{loc}: {err['msg']}")
        raise ValidationError("invalid configuration:\n  " + "\n  ".join(lines)) from None


def desk_config(**overrides):
    return build_config(overrides, "desk")


def tiny_config(**overrides):
    return build_config(overrides, "tiny")


def read_config_data(path):
    """Raw nested dict from a JSON or YAML file."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ValidationError(f"cannot parse {path}: {exc}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    return data


def parse_override(text):
    """``block.key=value`` -> nested dict; the value is read as a YAML scalar or list."""
    if "=" not in text:
        raise ValidationError(f"override {text!r} is not of the form block.key=value")
    dotted, raw = text.split("=", 1)
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ValidationError(f"bad override key {dotted!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"bad override value {raw!r}: {exc}") from None
    out = value
    for k in reversed(keys):
        out = {k: out}
    return out


def load_config(path, overrides=(), preset=None):
    """Read a JSON or YAML config file; a top-level ``preset`` key selects the base."""
    data = read_config_data(path) if path else {}
    chosen = data.pop("preset", "reference")
    for o in overrides:
        data = _merge(data, parse_override(o))
    return build_config(data, preset or chosen)


def dump_config(cfg, path):
    path = Path(path)
    data = json.loads(json.dumps(cfg.to_dict(), default=list))
    text = json.dumps(data, indent=2) if path.suffix == ".json" else yaml.safe_dump(data, sort_keys=False)
    path.write_text(text)
