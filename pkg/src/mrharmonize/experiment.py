"""Phantom evaluations: cross-site harmonization, source subsets, artifact attention, theta clusters."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .harmonize import Harmonizer
from .imaging import CONTRASTS, ContrastKind, DatasetManifest, Volume, load_entry
from .metrics import psnr, ssim
from .phantom import SiteProfile, default_sites, degrade, phantom_subject


@dataclass
class PairResult:
    subject: str
    source_site: str
    target_site: str
    contrast: ContrastKind
    sources: tuple
    ssim_harmonized: float
    ssim_baseline: float
    psnr_harmonized: float
    psnr_baseline: float


def traveling_subjects(manifest: DatasetManifest) -> dict[str, dict[str, dict[ContrastKind, Volume]]]:
    out: dict = {}
    for e in manifest.split("travel"):
        out.setdefault(e.subject_id, {})[e.site_id] = load_entry(manifest, e)
    return dict(sorted(out.items()))


def reference_volumes(manifest: DatasetManifest, site: str, split: str = "val") -> dict[ContrastKind, Volume]:
    """Target-site volumes of a subject outside the evaluation set (first match in ``split``)."""
    for e in manifest.split(split):
        if e.site_id == site:
            return load_entry(manifest, e)
    raise ValueError(f"no {split} subject at site {site}")


def evaluate_pairs(harm: Harmonizer, manifest: DatasetManifest, source_site: str, target_site: str,
                   sources=None, contrasts=CONTRASTS, mode: str = "axial") -> list[PairResult]:
    """Harmonize each traveling subject from ``source_site`` toward every target contrast.

    Target codes come from a validation subject at ``target_site``; the
    ground truth is the traveling subject's own ``target_site`` scan.
    """
    refs = reference_volumes(manifest, target_site)
    codes = {c: harm.encode_target(refs[c]) for c in contrasts if c in refs}
    rows = []
    for subject, sites in traveling_subjects(manifest).items():
        src = sites[source_site]
        if sources is not None:
            src = {c: v for c, v in src.items() if c in sources}
        for c, (theta, eta) in codes.items():
            if c not in sites[target_site] or c not in sites[source_site]:
                continue
            truth = sites[target_site][c]
            out = harm.harmonize_volume(src, (theta, eta), mode=mode)
            base = sites[source_site][c]
            rows.append(PairResult(subject, source_site, target_site, c, tuple(sorted(src)),
                                   ssim(out, truth), ssim(base, truth), psnr(out, truth), psnr(base, truth)))
    return rows


def per_subject(rows: list[PairResult]) -> dict[str, tuple[float, float]]:
    """Mean (harmonized, baseline) SSIM per subject over target contrasts."""
    acc: dict = {}
    for r in rows:
        acc.setdefault(r.subject, []).append((r.ssim_harmonized, r.ssim_baseline))
    return {s: tuple(np.mean(v, axis=0)) for s, v in acc.items()}


def subset_ablation(harm: Harmonizer, manifest: DatasetManifest, source_site: str, target_site: str):
    """Mean harmonized SSIM for each of the 15 nonempty source subsets."""
    out = {}
    for r in range(1, len(CONTRASTS) + 1):
        for subset in itertools.combinations(CONTRASTS, r):
            rows = evaluate_pairs(harm, manifest, source_site, target_site, sources=set(subset))
            out[subset] = float(np.mean([x.ssim_harmonized for x in rows]))
    return out


def artifact_attention(harm: Harmonizer, target_codes, degraded: ContrastKind = ContrastKind.FLAIR,
                       n_subjects: int = 20, severity: float = 0.5, seed: int = 10_000,
                       site: SiteProfile | None = None, grid=(32, 32, 24)):
    """Mean attention on ``degraded`` for clean and degraded bundles, per fresh subject.

    The degraded copy gets motion at ``severity`` and noise with sigma
    ``0.1 * severity`` on every slice of that one contrast.
    """
    site = site or default_sites()[0]
    theta, eta = target_codes
    clean_alpha, bad_alpha = [], []
    for k in range(n_subjects):
        vols = phantom_subject(seed + k, [site], grid)[site.site_id]
        images = np.stack([np.moveaxis(vols[c].voxels, 2, 0) for c in CONTRASTS], axis=1)
        mask = np.ones(len(CONTRASTS), dtype=bool)
        _, a_clean = harm.harmonize_batch(images, mask, theta, eta)
        bad = images.copy()
        rng = np.random.default_rng([seed, k])
        for z in range(bad.shape[0]):
            bad[z, degraded.index] = degrade(bad[z, degraded.index], severity, seed=rng.integers(2 ** 63))
        _, a_bad = harm.harmonize_batch(bad, mask, theta, eta)
        clean_alpha.append(float(a_clean[:, degraded.index].mean()))
        bad_alpha.append(float(a_bad[:, degraded.index].mean()))
    return np.array(clean_alpha), np.array(bad_alpha)


def theta_separation(harm: Harmonizer, manifest: DatasetManifest, split: str = "val"):
    """(mean inter-contrast distance, mean intra-contrast distance) between volume theta codes."""
    codes = []
    for e in manifest.split(split):
        for c, v in load_entry(manifest, e).items():
            codes.append((c, harm.encode_target(v)[0]))
    intra, inter = [], []
    for (c1, t1), (c2, t2) in itertools.combinations(codes, 2):
        (intra if c1 == c2 else inter).append(float(np.linalg.norm(t1 - t2)))
    return float(np.mean(inter)), float(np.mean(intra))
