"""Inference: encode sources and target, fuse anatomy with attention, decode.

Inference never samples: anatomy maps are hard one-hot, theta is the
posterior mean and there is no attention dropout.
"""
from __future__ import annotations

import logging
import time
from typing import Mapping

import numpy as np
import torch

from . import attention as att
from .imaging import (CONTRASTS, ContrastKind, Slice, Volume, center_window, extract_slices,
                      Provenance, fit_to_grid, stack_slices)
from .networks import HarmonizationModel
from .training import encode_sources, load_model

logger = logging.getLogger(__name__)

MODES = ("axial", "median3")


class RegistrationError(ValueError):
    pass


def _to_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def _slice_stack(y, window: int = 20) -> np.ndarray:
    """(N, H, W) stack of target slices: a single slice or the center axial window."""
    if isinstance(y, Slice):
        return y.pixels[None]
    if isinstance(y, Volume):
        return np.stack([s.pixels for s in extract_slices(y, "axial", center_window(y.shape[2], window))])
    arr = np.asarray(y, dtype=np.float32)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3:
        return np.moveaxis(arr[..., list(center_window(arr.shape[2], window))], 2, 0)
    raise ValueError(f"target must be 2D or 3D, got shape {arr.shape}")


class Harmonizer:
    def __init__(self, model: HarmonizationModel, default_eta=None, digest: str = ""):
        self.model = model.eval()
        self.default_eta = np.zeros(2) if default_eta is None else np.asarray(default_eta, dtype=np.float64)
        self.digest = digest

    @classmethod
    def from_checkpoint(cls, path, expected_digest=None, force=False) -> "Harmonizer":
        model, ckpt = load_model(path, expected_digest, force)
        return cls(model, ckpt.extra.get("eta_clean_mean"), ckpt.digest)

    # -- codes -------------------------------------------------------------
    @torch.no_grad()
    def encode_target(self, y, window: int = 20) -> tuple[np.ndarray, np.ndarray]:
        """Posterior-mean theta and eta of a target slice or volume.

        For volumes, codes are averaged over the center ``window`` axial
        slices (all slices, with a warning, when the volume is thinner).
        """
        x = _to_tensor(_slice_stack(y, window)).unsqueeze(1)
        mu, _ = self.model.contrast_encode(x)
        eta = self.model.artifact_encode(x)
        return mu.mean(0).numpy().astype(np.float64), eta.mean(0).numpy().astype(np.float64)

    @torch.no_grad()
    def encode_slices(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Per-slice posterior means and artifact codes for (N, H, W) input."""
        t = _to_tensor(x).unsqueeze(1)
        mu, _ = self.model.contrast_encode(t)
        return mu.numpy(), self.model.artifact_encode(t).numpy()

    def target_codes(self, target) -> tuple[np.ndarray, np.ndarray]:
        """Accept (theta, eta), a bare theta (default eta) or a target image."""
        if isinstance(target, tuple) and len(target) == 2 and np.ndim(target[0]) == 1:
            return np.asarray(target[0], float), np.asarray(target[1], float)
        if np.ndim(target) == 1 and len(target) == 2:
            return np.asarray(target, float), self.default_eta
        return self.encode_target(target)

    # -- slices ------------------------------------------------------------
    @torch.no_grad()
    def harmonize_batch(self, images, mask, theta, eta, return_beta=False):
        """Harmonize (B, 4, H, W) source stacks.

        Returns images (B, H, W) and attention (B, 4); ``mask`` is (4,) or (B, 4).
        """
        images = _to_tensor(images)
        b = images.shape[0]
        mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
        if mask.dim() == 1:
            mask = mask.expand(b, -1)
        if not bool(mask.any(-1).all()):
            raise ValueError("empty source bundle")
        beta, mu, _, eta_s = encode_sources(self.model, images, mask, mode="hard")
        theta_t = _to_tensor(theta).expand(b, -1)
        eta_t = _to_tensor(eta).expand(b, -1)
        alpha = att.compute_attention(self.model.keys(mu, eta_s), self.model.query(theta_t, eta_t), mask)
        beta_star = att.fuse_anatomy(beta, alpha)
        out = self.model.decode(beta_star, theta_t)[:, 0]
        if return_beta:
            return out.numpy(), alpha.numpy(), beta_star
        return out.numpy(), alpha.numpy()

    def harmonize_slice(self, bundle: Mapping, target) -> tuple[Slice, np.ndarray]:
        """Harmonize one bundle ``{contrast: Slice or 2D array}``; returns (Slice, alpha).

        Arrays off the 16-pixel grid are zero padded; the output keeps the
        padded grid and records the padding in its provenance.
        """
        if not bundle:
            raise ValueError("empty source bundle")
        images, mask = _stack_bundle({ContrastKind.parse(k): getattr(v, "pixels", v) for k, v in bundle.items()})
        shape = images.shape[1:]
        fitted = [fit_to_grid(im) for im in images]
        pad = fitted[0][1]
        theta, eta = self.target_codes(target)
        out, alpha = self.harmonize_batch(np.stack([f for f, _ in fitted])[None], mask, theta, eta)
        prov = Provenance("", "axial", 0, pad, tuple(shape))
        return Slice(out[0], None, prov), alpha[0]

    @torch.no_grad()
    def theta_grid_sample(self, beta_star: torch.Tensor, xs, ys) -> list[np.ndarray]:
        """Decode one fused anatomy map at every (x, y) of a theta grid, row-major in ``xs``."""
        if beta_star.dim() == 3:
            beta_star = beta_star.unsqueeze(0)
        thetas = torch.tensor([[x, y] for x in xs for y in ys], dtype=beta_star.dtype)
        out = self.model.decode(beta_star.expand(len(thetas), -1, -1, -1), thetas)
        return [o[0].numpy() for o in out]

    # -- volumes -----------------------------------------------------------
    def harmonize_volume(self, volumes: Mapping, target, mode: str = "axial", batch: int = 32,
                         report: dict | None = None) -> Volume:
        """Harmonize co-registered source volumes ``{contrast: Volume}``.

        ``axial`` runs slice by slice; ``median3`` also runs the coronal and
        sagittal stacks and takes the voxel-wise median. Per-slice attention
        goes into ``report`` when one is passed.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        vols = {ContrastKind.parse(k): v for k, v in volumes.items()}
        if not vols:
            raise ValueError("empty source bundle")
        shapes = {v.shape for v in vols.values()}
        if len(shapes) != 1:
            raise RegistrationError(f"source volumes are not on one grid: {sorted(shapes)}")
        shape = shapes.pop()
        theta, eta = self.target_codes(target)
        t0 = time.time()
        orientations = ("axial",) if mode == "axial" else ("axial", "coronal", "sagittal")
        stacks, alphas = [], {}
        mask = np.array([c in vols for c in CONTRASTS])
        for orient in orientations:
            per_c = {c: extract_slices(v, orient) for c, v in vols.items()}
            ref = next(iter(per_c.values()))
            n = len(ref)
            h, w = ref[0].shape
            images = np.zeros((n, len(CONTRASTS), h, w), dtype=np.float32)
            for c, sl in per_c.items():
                images[:, c.index] = np.stack([s.pixels for s in sl])
            outs, al = [], []
            for i in range(0, n, batch):
                o, a = self.harmonize_batch(images[i:i + batch], mask, theta, eta)
                outs.append(o)
                al.append(a)
            alpha = np.concatenate(al)
            alphas[orient] = alpha
            stacks.append(stack_slices(np.concatenate(outs), orient, shape, [s.provenance for s in ref]))
        vox = stacks[0] if len(stacks) == 1 else np.median(np.stack(stacks), axis=0).astype(np.float32)
        src = next(iter(vols.values()))
        meta = {"mode": mode, "theta": theta.tolist(), "eta": eta.tolist(), "digest": self.digest}
        if report is not None:
            report.update(meta)
            report["alpha"] = {o: a.tolist() for o, a in alphas.items()}
            report["seconds"] = time.time() - t0
        return Volume(vox, src.spacing, src.affine, None, "", "harmonized", meta)


def _stack_bundle(bundle: Mapping) -> tuple[np.ndarray, np.ndarray]:
    shapes = {np.shape(v) for v in bundle.values()}
    if len(shapes) != 1:
        raise RegistrationError(f"source slices differ in shape: {sorted(shapes)}")
    h, w = shapes.pop()
    images = np.zeros((len(CONTRASTS), h, w), dtype=np.float32)
    mask = np.zeros(len(CONTRASTS), dtype=bool)
    for c, v in bundle.items():
        images[c.index] = v
        mask[c.index] = True
    return images, mask
