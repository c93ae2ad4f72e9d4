"""Fréchet gesture distance, semantic score, style recognition accuracy and reports."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ShapeError, StateError, ValidationError
from .motion.types import pose_dim
from .utils import pad_sequences, seed_everything

REPORT_FORMAT = "cogesture-report"
REPORT_VERSION = 1
SHRINKAGE = 1e-6


@dataclass
class FeatureDistribution:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def fit(cls, features, shrinkage=SHRINKAGE):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ValidationError("need at least 2 feature vectors to fit a distribution")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        cov = 0.5 * (cov + cov.T) + shrinkage * np.eye(x.shape[1])
        return cls(x.mean(0), cov, len(x))


def _psd_sqrt(a):
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(d1, d2):
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` for two Gaussian fits.

    The trace of ``(S1 S2)^(1/2)`` equals that of ``(R S2 R)^(1/2)`` with
    ``R = S1^(1/2)``, which is symmetric and so safe for an eigen-based root.
    """
    if d1.mean.shape != d2.mean.shape:
        raise ShapeError(f"feature dimensions differ: {d1.mean.shape} vs {d2.mean.shape}")
    root = _psd_sqrt(d1.cov)
    cross = np.trace(_psd_sqrt(root @ d2.cov @ root))
    diff = d1.mean - d2.mean
    return float(max(diff @ diff + np.trace(d1.cov) + np.trace(d2.cov) - 2.0 * cross, 0.0))


def fgd(real, generated, extractor=None):
    """Fréchet distance between extracted features of two motion sets.

    ``extractor`` maps a list of motions to an ``(n, d)`` array; without one
    the inputs are taken to be feature arrays already.
    """
    fr = extractor(real) if extractor else np.asarray(real)
    fg = extractor(generated) if extractor else np.asarray(generated)
    if len(fr) < 2 or len(fg) < 2:
        raise ValidationError("FGD needs at least 2 samples per side")
    return frechet_distance(FeatureDistribution.fit(fr), FeatureDistribution.fit(fg))


def gesture_features(codec, embedding):
    """Extractor: pooled gesture-encoder embedding of each motion's quantized codes."""

    def extract(motions):
        return np.stack([embedding.encode_gesture(codec.quantize(codec.encode(m)).codes)[1] for m in motions])

    return extract


def semantic_score(z_t, z_g):
    """Cosine between transcript and gesture embeddings (row-wise for 2-D inputs)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    z_g = np.asarray(z_g, dtype=np.float64)
    num = (z_t * z_g).sum(-1)
    den = np.linalg.norm(z_t, axis=-1) * np.linalg.norm(z_g, axis=-1)
    if np.any(den == 0):
        raise ValidationError("zero-norm embedding")
    return np.clip(num / den, -1.0, 1.0)


def semantic_scores(embedding, codec, transcripts, motions):
    """Per-pair SC for transcripts and (generated) motions."""
    zt = np.stack([embedding.encode_transcript(t)[1] for t in transcripts])
    zg = gesture_features(codec, embedding)(motions)
    return semantic_score(zt, zg)


# ---------------------------------------------------------------------------
# style classifier and SRA
# ---------------------------------------------------------------------------

class StyleClassifier(nn.Module):
    def __init__(self, num_joints, labels, hidden=64):
        super().__init__()
        self.labels = tuple(labels)
        d = pose_dim(num_joints)
        self.register_buffer("mean", torch.zeros(d))
        self.register_buffer("std", torch.ones(d))
        self.convs = nn.ModuleList([nn.Conv1d(d, hidden, 5, padding=2),
                                    nn.Conv1d(hidden, hidden, 5, padding=4, dilation=2)])
        self.head = nn.Linear(3 * hidden, len(self.labels))
        self.heldout_accuracy = None

    def forward(self, poses, mask):
        x = ((poses - self.mean) / self.std).transpose(1, 2)
        for conv in self.convs:
            x = F.relu(conv(x))
        x = x.transpose(1, 2)
        m = mask[..., None].to(x.dtype)
        mean = (x * m).sum(1) / m.sum(1)
        std = ((((x - mean[:, None]) ** 2) * m).sum(1) / m.sum(1) + 1e-6).sqrt()
        mx = x.masked_fill(~mask[..., None], float("-inf")).max(1).values
        return self.head(torch.cat([mean, std, mx], -1))

    @torch.no_grad()
    def predict(self, motions):
        x, m = pad_sequences([mo.trimmed().poses for mo in motions])
        logits = self(torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(m))
        return [self.labels[i] for i in logits.argmax(-1).tolist()]


def train_style_classifier(train_items, heldout_items, labels=None, steps=600, batch_size=32, lr=2e-3, seed=0):
    """Fit a classifier from sentence motions to style tags; records held-out accuracy."""
    seed_everything(seed)
    rng = np.random.default_rng(seed)
    labels = tuple(labels or sorted({it.style for it in train_items}))
    clf = StyleClassifier(train_items[0].motion.num_joints, labels)
    allp = np.concatenate([it.motion.poses for it in train_items])
    clf.mean.copy_(torch.as_tensor(allp.mean(0)))
    clf.std.copy_(torch.as_tensor(np.maximum(allp.std(0), 1e-3)))
    y_all = np.array([labels.index(it.style) for it in train_items])
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for _ in range(steps):
        ids = rng.choice(len(train_items), size=min(batch_size, len(train_items)), replace=False)
        x, m = pad_sequences([train_items[i].motion.poses for i in ids])
        loss = F.cross_entropy(clf(torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(m)),
                               torch.as_tensor(y_all[ids]))
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.eval()
    pred = clf.predict([it.motion for it in heldout_items])
    clf.heldout_accuracy = float(np.mean([p == it.style for p, it in zip(pred, heldout_items)]))
    return clf


def save_style_classifier(clf, path, meta=None):
    config = {"num_joints": (clf.mean.shape[0] - 3) // 6, "labels": list(clf.labels),
              "hidden": clf.head.in_features // 3}
    state = {"model": clf.state_dict(), "heldout_accuracy": clf.heldout_accuracy}
    return save_checkpoint(path, "style-classifier", config, state, meta)


def load_style_classifier(path):
    blob = load_checkpoint(path, "style-classifier")
    clf = StyleClassifier(**blob["config"])
    clf.load_state_dict(blob["state"]["model"])
    clf.heldout_accuracy = blob["state"]["heldout_accuracy"]
    clf.eval()
    clf.checkpoint_sha256 = blob["sha256"]
    return clf


def sra(classifier, motions, prompt_tags, min_accuracy=0.9):
    """Fraction of motions classified as the style they were prompted with."""
    if classifier.heldout_accuracy is None or classifier.heldout_accuracy < min_accuracy:
        raise StateError(f"style classifier held-out accuracy {classifier.heldout_accuracy} is below "
                         f"{min_accuracy}; refusing to score SRA with an untrustworthy judge")
    if len(motions) != len(prompt_tags) or not motions:
        raise ValidationError("need one prompt tag per generated motion")
    pred = classifier.predict(motions)
    return float(np.mean([p == t for p, t in zip(pred, prompt_tags)]))


# ---------------------------------------------------------------------------
# repeats and reports
# ---------------------------------------------------------------------------

def summarize(values):
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "values": [float(x) for x in v]}


def intervals_disjoint(a, b):
    """True when ``mean +- std`` of two summaries do not overlap and ``a`` is above ``b``."""
    return a["mean"] - a["std"] > b["mean"] + b["std"]


def write_report(path, metrics, meta=None):
    report = {"format": REPORT_FORMAT, "version": REPORT_VERSION, "metrics": metrics, "meta": meta or {}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def read_report(path):
    report = json.loads(Path(path).read_text())
    if report.get("format") != REPORT_FORMAT or report.get("version") != REPORT_VERSION:
        raise ValidationError(f"{path} is not a version-{REPORT_VERSION} metric report")
    return report
