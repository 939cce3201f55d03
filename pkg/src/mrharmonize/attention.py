"""Attention over source contrasts: weights, dropout and anatomy fusion.

Contrast axes are ordered T1w, T2w, PDw, FLAIR. Sets of contrasts passed to
:func:`attention_dropout` use :class:`ContrastKind` codes (1..4).
"""
from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np
import torch

from .imaging import CONTRASTS, ContrastKind

N_SOURCES = len(CONTRASTS)


def _as_mask(mask) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask, dtype=torch.bool)
    if m.shape[-1] != N_SOURCES:
        raise ValueError(f"mask must have {N_SOURCES} entries on the last axis")
    return m


def compute_attention(keys: torch.Tensor, query: torch.Tensor, mask, scale: bool = True) -> torch.Tensor:
    """Scaled dot-product attention weights over the four sources.

    Parameters
    ----------
    keys : (..., 4, d)
    query : (..., d)
    mask : (..., 4) bool, True where the source is available

    Unavailable sources are removed from the softmax, so their weight is
    exactly zero.
    """
    mask = _as_mask(mask)
    if not bool(mask.any(-1).all()):
        raise ValueError("availability mask has no available source")
    logits = (keys * query.unsqueeze(-2)).sum(-1)
    if scale:
        logits = logits / math.sqrt(keys.shape[-1])
    logits = logits.masked_fill(~mask, float("-inf"))
    alpha = torch.softmax(logits, dim=-1)
    return alpha.masked_fill(~mask, 0.0)


def _drop_mask(drop, like: torch.Tensor) -> torch.Tensor:
    if isinstance(drop, torch.Tensor) and drop.dtype == torch.bool:
        return drop
    out = torch.zeros(like.shape[-1], dtype=torch.bool)
    for c in drop:
        out[ContrastKind.parse(c).index] = True
    return out


def attention_dropout(alpha: torch.Tensor, drop) -> torch.Tensor:
    """Zero the entries in ``drop`` and renormalize the survivors to sum to one."""
    dmask = _drop_mask(drop, alpha)
    if not bool(dmask.any()):
        return alpha
    kept = alpha.masked_fill(dmask, 0.0)
    total = kept.sum(-1, keepdim=True)
    if bool((total <= 0).any()):
        raise ValueError("dropout would remove every nonzero attention weight")
    return kept / total


def proper_subsets(available: Sequence[int]) -> list[tuple[int, ...]]:
    """Nonempty proper subsets of ``available`` (indices), in a fixed order."""
    out = []
    for r in range(1, len(available)):
        out += list(itertools.combinations(available, r))
    return out


def sample_dropout(mask, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Random drop sets for training.

    With probability ``p`` per row (and only when two or more sources are
    available) a nonempty proper subset of the available sources, chosen
    uniformly, is dropped. Returns a bool tensor shaped like ``mask``.
    """
    mask = _as_mask(mask)
    flat = mask.reshape(-1, N_SOURCES)
    drop = torch.zeros_like(flat)
    for row in range(flat.shape[0]):
        avail = [i for i in range(N_SOURCES) if flat[row, i]]
        coin = torch.rand((), generator=generator).item()
        if len(avail) < 2 or coin >= p:
            continue
        subsets = proper_subsets(avail)
        pick = int(torch.randint(len(subsets), (), generator=generator))
        drop[row, list(subsets[pick])] = True
    return drop.reshape(mask.shape)


def fuse_anatomy(betas, alpha: torch.Tensor) -> torch.Tensor:
    """Attention-weighted average of per-source anatomy maps.

    ``betas`` is either a tensor (B, 4, 5, H, W) or a sequence of four maps
    (B, 5, H, W) (entries for unavailable sources may be ``None`` when their
    weight is zero).
    """
    if not isinstance(betas, torch.Tensor):
        betas = list(betas)
        if len(betas) != N_SOURCES:
            raise ValueError(f"need {N_SOURCES} anatomy maps (None for missing)")
        ref = next(b for b in betas if b is not None)
        shapes = {tuple(b.shape) for b in betas if b is not None}
        if len(shapes) != 1:
            raise ValueError(f"anatomy maps differ in shape: {sorted(shapes)}")
        betas = torch.stack([torch.zeros_like(ref) if b is None else b for b in betas], dim=-4)
    if betas.dim() < 4 or betas.shape[-4] != N_SOURCES:
        raise ValueError(f"betas must have {N_SOURCES} sources on axis -4, got {tuple(betas.shape)}")
    if alpha.shape[-1] != N_SOURCES or alpha.shape[:-1] != betas.shape[:-4]:
        raise ValueError(f"alpha shape {tuple(alpha.shape)} inconsistent with betas {tuple(betas.shape)}")
    return (alpha[..., None, None, None] * betas).sum(-4)

