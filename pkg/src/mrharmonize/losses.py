"""Training objectives and contrastive samplers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import CLIP_MAX
from .phantom import degrade


@dataclass(frozen=True)
class LossWeights:
    kl: float = 1e-5
    anatomy: float = 0.1
    artifact: float = 0.1
    cycle: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


PART_NAMES = ("recon", "kl", "contr_anat", "contr_artifact", "cycle")


def contrastive_loss(q: torch.Tensor, pos: torch.Tensor, negs: torch.Tensor, reduction: str = "mean"):
    """-log[e^{q.p} / (e^{q.p} + (1/N) sum_n e^{q.n_n})].

    Parameters
    ----------
    q, pos : (..., L)
    negs : (..., N, L)

    Vectors are used as given; samplers normalize them beforehand.
    """
    if negs.dim() < 2 or negs.shape[-2] == 0:
        raise ValueError("need at least one negative")
    n = negs.shape[-2]
    s_pos = (q * pos).sum(-1)
    s_neg = (negs * q.unsqueeze(-2)).sum(-1)
    log_mean_neg = torch.logsumexp(s_neg, dim=-1) - math.log(n)
    loss = torch.logaddexp(s_pos, log_mean_neg) - s_pos
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag e^logvar) || N(0, I)), summed over code dims, averaged over batch."""
    kl = 0.5 * (mu ** 2 + logvar.exp() - logvar - 1.0).sum(-1)
    return kl.mean()


def code_l1(theta_rec, eta_rec, theta_t, eta_t) -> torch.Tensor:
    l1 = (theta_rec - theta_t).abs().sum(-1) + (eta_rec - eta_t).abs().sum(-1)
    return l1.mean()


def cycle_loss(x_hat: torch.Tensor, theta_t: torch.Tensor, eta_t: torch.Tensor, encoders) -> torch.Tensor:
    """Re-encode ``x_hat``; L1 to the target codes. theta uses the posterior mean."""
    mu, _ = encoders.contrast_encode(x_hat)
    eta = encoders.artifact_encode(x_hat)
    return code_l1(mu, eta, theta_t, eta_t)


def recon_loss(x_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return (x_hat - y).abs().mean()


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    return (parts["recon"] + weights.kl * parts["kl"] + weights.anatomy * parts["contr_anat"]
            + weights.artifact * parts["contr_artifact"] + weights.cycle * parts["cycle"])


# ---------------------------------------------------------------------------
# anatomy patches

@dataclass
class PatchTriple:
    query: torch.Tensor      # (Q, L)
    positive: torch.Tensor   # (Q, L)
    negatives: torch.Tensor  # (Q, N, L)
    locations: torch.Tensor  # (Q, 3) batch, row, col of the patch's top-left corner
    n_image: int             # leading negatives drawn from images, the rest from beta


def soft_levels(x: torch.Tensor, n_levels: int = 5, vmax: float = CLIP_MAX) -> torch.Tensor:
    """Hat-function binning of intensities onto ``n_levels`` evenly spaced levels.

    Maps (B, 1, H, W) images onto the same simplex as anatomy maps so image
    patches can serve as negatives for anatomy patches.
    """
    step = vmax / (n_levels - 1)
    centers = torch.arange(n_levels, dtype=x.dtype) * step
    return (1.0 - (x.clamp(0, vmax) - centers.view(1, -1, 1, 1)).abs() / step).clamp_min(0.0)


def _unfold(t: torch.Tensor, patch: int) -> torch.Tensor:
    # (B, C, H, W) -> (B, Lpos, C*p*p)
    return F.unfold(t, patch).transpose(1, 2)


def sample_anatomy_patches(beta_i, beta_j, x_i, patch: int = 3, n_neg: int = 8, n_query: int = 64,
                           generator: torch.Generator | None = None, image_mask=None,
                           foreground: bool = True) -> PatchTriple:
    """Query/positive/negative patches for the anatomy contrastive loss.

    Parameters
    ----------
    beta_i, beta_j : (B, 5, H, W) anatomy maps of two contrasts of one subject
    x_i : (B, K, H, W) candidate images (K >= 1) for image negatives
    image_mask : (B, K) bool, which candidates exist (default all)

    Query from ``beta_i`` and positive from ``beta_j`` share a location.
    The first ``n_neg // 2`` negatives are image patches at that location,
    the rest are patches of ``beta_i``/``beta_j`` at random locations.
    Locations are drawn uniformly over foreground patches of ``x_i``
    when ``foreground`` is set and any exist.
    """
    if beta_i.shape != beta_j.shape:
        raise ValueError("beta_i and beta_j differ in shape")
    b, c, h, w = beta_i.shape
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than grid {h}x{w}")
    if n_neg < 1:
        raise ValueError("need at least one negative")
    if x_i.dim() == 3:
        x_i = x_i.unsqueeze(1)
    k = x_i.shape[1]
    if image_mask is None:
        image_mask = torch.ones(b, k, dtype=torch.bool)
    image_mask = torch.as_tensor(image_mask, dtype=torch.bool)

    n_img = n_neg // 2
    n_loc = n_neg - n_img
    pw = w - patch + 1
    n_pos = (h - patch + 1) * pw

    ui = _unfold(beta_i, patch)
    uj = _unfold(beta_j, patch)

    # query locations
    if foreground:
        centre = x_i.amax(1, keepdim=True)[:, :, patch // 2:h - patch + 1 + patch // 2,
                                           patch // 2:w - patch + 1 + patch // 2]
        weights = (centre.reshape(b, -1) > 1e-3).to(torch.float64)
        empty = weights.sum(1) == 0
        weights[empty] = 1.0
    else:
        weights = torch.ones(b, n_pos, dtype=torch.float64)
    bidx = torch.randint(b, (n_query,), generator=generator)
    pidx = torch.multinomial(weights[bidx], 1, generator=generator)[:, 0]

    query = ui[bidx, pidx]
    positive = uj[bidx, pidx]

    negs = []
    if n_img:
        ux = _unfold(soft_levels(x_i.reshape(b * k, 1, h, w), c).reshape(b, k * c, h, w), patch)
        ux = ux.reshape(b, n_pos, k, c * patch * patch)
        probs = image_mask[bidx].to(torch.float64)
        kk = torch.multinomial(probs, n_img, replacement=True, generator=generator)  # (Q, n_img)
        sel = ux[bidx, pidx]  # (Q, k, c*p*p)
        negs.append(torch.gather(sel, 1, kk[..., None].expand(-1, -1, sel.shape[-1])))
    if n_loc:
        src = torch.randint(2, (n_query, n_loc), generator=generator)
        if n_pos > 1:
            other = torch.randint(n_pos - 1, (n_query, n_loc), generator=generator)
            other = other + (other >= pidx[:, None]).long()  # never the query location
        else:
            other = torch.zeros(n_query, n_loc, dtype=torch.long)
        bb = bidx[:, None].expand(-1, n_loc)
        from_i = ui[bb, other]
        from_j = uj[bb, other]
        negs.append(torch.where(src[..., None] == 0, from_i, from_j))
    negatives = torch.cat(negs, 1)

    locs = torch.stack([bidx, pidx // pw, pidx % pw], 1)
    return PatchTriple(F.normalize(query, dim=-1), F.normalize(positive, dim=-1),
                       F.normalize(negatives, dim=-1), locs, n_img)


# ---------------------------------------------------------------------------
# artifact triplets

@dataclass
class ArtifactTriple:
    query: np.ndarray          # (H, W)
    positive: np.ndarray       # (H, W)
    negatives: np.ndarray      # (M, H, W)
    volume: int                # pool index of query and positive
    negative_source: list      # pool index per negative, -1 for augmented copies of the query
    severities: list


def _as_voxels(v) -> np.ndarray:
    return np.asarray(getattr(v, "voxels", v), dtype=np.float32)


def sample_artifact_triplets(pool: Sequence, m: int = 4, severity_range=(0.2, 0.8), seed=None,
                             rng: np.random.Generator | None = None, axis: int = 2) -> ArtifactTriple:
    """Draw query/positive slices from one volume and ``m`` negatives.

    Half of the negatives (rounded up) are the query degraded by simulated
    motion and noise at a severity drawn from ``severity_range``; the rest
    are slices of other pool volumes.
    """
    if len(pool) < 2:
        raise ValueError("artifact triplets need a pool of at least two volumes")
    if m < 2:
        raise ValueError("need at least two negatives")
    rng = rng if rng is not None else np.random.default_rng(seed)
    lo, hi = severity_range
    if not 0 <= lo <= hi <= 1:
        raise ValueError("severity range must satisfy 0 <= lo <= hi <= 1")

    vi = int(rng.integers(len(pool)))
    vol = _as_voxels(pool[vi])
    n = vol.shape[axis]
    if n < 2:
        raise ValueError("volume needs at least two slices")
    qi, pi = rng.choice(n, size=2, replace=False)
    query = np.take(vol, qi, axis=axis)
    positive = np.take(vol, pi, axis=axis)

    n_aug = (m + 1) // 2
    negs, sources, sev = [], [], []
    for _ in range(n_aug):
        s = float(rng.uniform(lo, hi))
        negs.append(degrade(query, s, seed=rng.integers(2 ** 63)))
        sources.append(-1)
        sev.append(s)
    others = [i for i in range(len(pool)) if i != vi]
    for _ in range(m - n_aug):
        oi = int(rng.choice(others))
        other = _as_voxels(pool[oi])
        negs.append(np.take(other, int(rng.integers(other.shape[axis])), axis=axis))
        sources.append(oi)
        sev.append(0.0)
    return ArtifactTriple(query, positive, np.stack(negs), vi, sources, sev)
