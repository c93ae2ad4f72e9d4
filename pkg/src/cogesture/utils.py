import math
import random

import numpy as np
import torch


def seed_everything(seed, single_thread=True):
    """Seed python, numpy and torch; optionally pin torch to one thread."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if single_thread:
        torch.set_num_threads(1)


def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def sinusoidal_embedding(positions, dim):
    """Transformer-style sin/cos features for integer (or real) positions."""
    positions = positions.to(torch.float64) if positions.dtype == torch.float64 else positions.float()
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=positions.dtype) / max(half, 1))
    args = positions[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


def pad_sequences(arrays, multiple=1, value=0.0):
    """Stack variable-length ``(T_i, D)`` arrays into ``(B, T, D)`` plus a validity mask."""
    t_max = max(len(a) for a in arrays)
    t_max = -(-t_max // multiple) * multiple
    dim = arrays[0].shape[1:]
    out = np.full((len(arrays), t_max) + dim, value, dtype=np.float64)
    mask = np.zeros((len(arrays), t_max), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
        mask[i, : len(a)] = True
    return out, mask


def masked_max(x, mask):
    """Max over axis 1 ignoring positions where ``mask`` is False."""
    return x.masked_fill(~mask[..., None], float("-inf")).max(dim=1).values


def cosine(a, b, eps=1e-8):
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(eps)
