"""Versioned checkpoint container shared by every trained component.

A checkpoint is a ``torch.save`` dict::

    {"format": "cogesture-ckpt", "version": 1, "kind": <component>,
     "config": <plain dict echo>, "state": <state dicts / arrays>,
     "meta": <free-form dict>}
"""

import hashlib
import os
from pathlib import Path

import torch

from .errors import CheckpointMismatchError, ValidationError

FORMAT = "cogesture-ckpt"
VERSION = 1
HOME_ENV = "COGESTURE_HOME"


def home_dir():
    """Root for checkpoints and caches (``$COGESTURE_HOME`` or ``~/.cache/cogesture``)."""
    root = os.environ.get(HOME_ENV) or os.path.join(os.path.expanduser("~"), ".cache", "cogesture")
    return Path(root)


def resolve(path):
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return home_dir() / p


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, kind, config, state, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": FORMAT, "version": VERSION, "kind": kind, "config": config,
                "state": state, "meta": meta or {}}, path)
    return file_hash(path)


def load_checkpoint(path, kind):
    path = resolve(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise CheckpointMismatchError("format", FORMAT, blob.get("format") if isinstance(blob, dict) else None)
    if blob.get("version") != VERSION:
        raise CheckpointMismatchError("version", VERSION, blob.get("version"))
    if blob.get("kind") != kind:
        raise CheckpointMismatchError("kind", kind, blob.get("kind"))
    blob["sha256"] = file_hash(path)
    blob["path"] = str(path)
    return blob


def require_match(key, expected, found):
    if expected != found:
        raise CheckpointMismatchError(key, expected, found)
