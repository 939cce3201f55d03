"""Synthetic multi-site, multi-contrast phantoms with simulated artifacts.

Every subject is a labelled tissue map (background, CSF, GM, WM, lesion).
A contrast is rendered from canonical tissue levels, then passed through a
site-specific monotone transfer function, so two sites imaging one subject
share geometry exactly and differ only in intensities and noise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .imaging import (CLIP_MAX, CONTRASTS, ContrastKind, DatasetManifest, ManifestEntry, Slice,
                      Volume, save_nifti)

logger = logging.getLogger(__name__)

BACKGROUND, CSF, GM, WM, LESION = range(5)
TISSUES = ("background", "CSF", "GM", "WM", "lesion")


class ProfileError(ValueError):
    pass


@dataclass
class TissueMap:
    labels: np.ndarray
    smooth_field: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.smooth_field = np.asarray(self.smooth_field, dtype=np.float32)
        if self.labels.shape != self.smooth_field.shape:
            raise ValueError("labels and smooth_field must share a shape")


@dataclass(frozen=True)
class ContrastRule:
    """Canonical appearance of one contrast before any site transfer."""
    levels: tuple[float, float, float, float]  # CSF, GM, WM, lesion
    lesion_blur: float  # Gaussian sigma (pixels) applied to the lesion boundary


CANONICAL = {
    # T1w: best GM/WM/CSF contrast, lesions nearly iso-intense with blurred edges
    ContrastKind.T1w: ContrastRule((0.25, 0.60, 1.00, 0.95), 1.0),
    ContrastKind.T2w: ContrastRule((1.30, 0.80, 0.60, 1.05), 0.6),
    ContrastKind.PDw: ContrastRule((0.95, 0.90, 0.75, 1.00), 0.6),
    # FLAIR: dark CSF, crisp bright lesions, weak GM/WM contrast
    ContrastKind.FLAIR: ContrastRule((0.10, 0.85, 0.70, 1.35), 0.0),
}


@dataclass
class SiteProfile:
    """Site appearance: per-contrast tissue levels plus acquisition noise.

    ``levels[c]`` gives the site's (CSF, GM, WM, lesion) intensities for
    contrast ``c``. The transfer function maps canonical tissue levels onto
    these and interpolates linearly in between.
    """
    site_id: str
    levels: dict[ContrastKind, tuple[float, float, float, float]]
    noise_sigma: float = 0.01
    motion_severity: float = 0.0

    def __post_init__(self):
        self.levels = {ContrastKind.parse(k): tuple(float(x) for x in v) for k, v in self.levels.items()}
        if self.noise_sigma < 0:
            raise ProfileError("noise_sigma must be >= 0")
        for c, lv in self.levels.items():
            canon = np.array(CANONICAL[c].levels)
            order = np.argsort(canon)
            if np.any(np.diff(np.asarray(lv)[order]) <= 0):
                raise ProfileError(f"site {self.site_id} {c.name}: levels not monotone in tissue order")

    def transfer(self, contrast) -> tuple[np.ndarray, np.ndarray]:
        """Knots ``(x, y)`` of the piecewise-linear canonical-to-site map."""
        c = ContrastKind.parse(contrast)
        if c not in self.levels:
            raise ProfileError(f"site {self.site_id} does not define {c.name}")
        canon = np.array(CANONICAL[c].levels)
        site = np.array(self.levels[c])
        order = np.argsort(canon)
        return np.concatenate([[0.0], canon[order]]), np.concatenate([[0.0], site[order]])

    def apply(self, contrast, image: np.ndarray) -> np.ndarray:
        xs, ys = self.transfer(contrast)
        out = np.interp(image, xs, ys)
        # linear extrapolation above the brightest tissue
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        above = image > xs[-1]
        out[above] = ys[-1] + slope * (image[above] - xs[-1])
        return out


def default_sites() -> list[SiteProfile]:
    site_a = SiteProfile("A", {c: CANONICAL[c].levels for c in CONTRASTS}, noise_sigma=0.01)
    # a different protocol: flatter T1w, darker T2w, brighter PDw CSF, grey FLAIR CSF
    site_b = SiteProfile("B", {
        ContrastKind.T1w: (0.55, 0.85, 1.00, 0.98),
        ContrastKind.T2w: (1.00, 0.70, 0.45, 0.90),
        ContrastKind.PDw: (1.20, 0.90, 0.60, 1.30),
        ContrastKind.FLAIR: (0.35, 0.95, 0.60, 1.20),
    }, noise_sigma=0.01)
    return [site_a, site_b]


# ---------------------------------------------------------------------------
# anatomy

def _as_grid(grid) -> tuple[int, int, int]:
    if np.isscalar(grid):
        return int(grid), int(grid), 1
    grid = tuple(int(g) for g in grid)
    return grid if len(grid) == 3 else (grid[0], grid[1], 1)


def _contour(rng, phi, w, n_terms, k0, amp):
    """Smooth closed radial perturbation, varying slowly along the slice axis."""
    out = np.zeros(np.broadcast(phi, w).shape)
    for k in range(k0, k0 + n_terms):
        a, b = rng.uniform(-amp, amp, size=2)
        ph, tilt = rng.uniform(0, 2 * np.pi, size=2)
        out += (a + b * np.sin(np.pi * w + tilt)) * np.cos(k * phi + ph)
    return out


def generate_anatomy(seed: int, grid=32) -> TissueMap:
    """Random head-like tissue map of shape ``grid`` (int, 2-tuple or 3-tuple).

    Nested smooth contours give CSF, GM and WM shells with two ventricles; one
    to five disk (or ball) lesions are placed inside WM.
    """
    h, w, d = _as_grid(grid)
    if min(h, w) < 32:
        raise ValueError("grid must be at least 32 pixels in-plane")
    rng = np.random.default_rng(seed)

    u, v = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    zs = np.linspace(-0.8, 0.8, d) if d > 1 else np.zeros(1)
    u = np.repeat(u[..., None], d, axis=2)
    v = np.repeat(v[..., None], d, axis=2)
    z = np.broadcast_to(zs, u.shape)

    ex, ey = rng.uniform(0.82, 0.95, size=2)
    r = np.sqrt((u / ex) ** 2 + (v / ey) ** 2)
    phi = np.arctan2(v, u)
    taper = 1.0 - 0.25 * z ** 2

    outer = 0.92 * taper * (1 + _contour(rng, phi, z, 4, 2, 0.035))
    gm_in = outer * (rng.uniform(0.84, 0.88) + _contour(rng, phi, z, 4, 6, 0.02))
    wm_in = outer * (rng.uniform(0.62, 0.68) + _contour(rng, phi, z, 3, 3, 0.03))

    labels = np.zeros(u.shape, dtype=np.int8)
    labels[r < outer] = CSF
    labels[r < gm_in] = GM
    labels[r < wm_in] = WM

    # ventricles
    vx = rng.uniform(0.10, 0.15)
    vy0 = rng.uniform(-0.05, 0.08)
    vr = rng.uniform(0.08, 0.11) * np.sqrt(np.clip(1 - 0.6 * z ** 2, 0.05, None))
    vl = rng.uniform(0.20, 0.28) * np.sqrt(np.clip(1 - 0.6 * z ** 2, 0.05, None))
    for sign in (-1, 1):
        inside = ((u - sign * vx) / vr) ** 2 + ((v - vy0) / vl) ** 2 < 1
        labels[inside & (labels == WM)] = CSF

    # lesions: at least one so every label is present
    n_lesions = int(rng.integers(1, 6))
    wm_idx = np.argwhere(labels == WM)
    ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(d), indexing="ij")
    for _ in range(n_lesions):
        ci, cj, ck = wm_idx[rng.integers(len(wm_idx))]
        rad = rng.uniform(1.2, 2.6)
        ball = (ii - ci) ** 2 + (jj - cj) ** 2 + ((kk - ck) * 1.5) ** 2 <= rad ** 2
        labels[ball & (labels == WM)] = LESION
        labels[ci, cj, ck] = LESION

    field_ = np.zeros(u.shape)
    for _ in range(3):
        fx, fy, fz = rng.uniform(0.3, 1.2, size=3)
        ph = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(np.pi * (fx * u + fy * v + fz * z) + ph)
    field_ = 1.0 + 0.04 * field_ / 3.0
    field_ = np.clip(field_, 0.9, 1.1)

    if np.isscalar(grid) or len(tuple(grid)) == 2:
        labels, field_ = labels[..., 0], field_[..., 0]
    return TissueMap(labels, field_)


# ---------------------------------------------------------------------------
# rendering

def _render_canonical(tmap: TissueMap, contrast: ContrastKind) -> np.ndarray:
    rule = CANONICAL[contrast]
    levels = np.array((0.0,) + rule.levels)
    labels = tmap.labels
    base = levels[labels.astype(np.int64)]
    lesion = (labels == LESION).astype(np.float64)
    if rule.lesion_blur > 0 and lesion.any():
        sigma = rule.lesion_blur if labels.ndim == 2 else (rule.lesion_blur, rule.lesion_blur, 0.0)
        soft = ndimage.gaussian_filter(lesion, sigma)
        # blur the lesion edge into surrounding WM only
        region = (labels == WM) | (labels == LESION)
        wm_level, lesion_level = rule.levels[2], rule.levels[3]
        base = np.where(region, wm_level + (lesion_level - wm_level) * soft, base)
    return base * tmap.smooth_field


def render_array(tmap: TissueMap, site: SiteProfile, contrast) -> np.ndarray:
    c = ContrastKind.parse(contrast)
    if c not in site.levels:
        raise ProfileError(f"site {site.site_id} does not define {c.name}")
    img = site.apply(c, _render_canonical(tmap, c))
    return np.clip(img, 0.0, CLIP_MAX).astype(np.float32)


def render_contrast(tmap: TissueMap, site: SiteProfile, contrast) -> Slice:
    """Noise-free 2D rendering of ``tmap`` as ``contrast`` at ``site``."""
    if tmap.labels.ndim != 2:
        raise ValueError("render_contrast expects a 2D tissue map; use render_volume")
    return Slice(render_array(tmap, site, contrast), ContrastKind.parse(contrast))


def render_volume(tmap: TissueMap, site: SiteProfile, contrast, seed=None,
                  volume_id: str = "") -> Volume:
    """Render a 3D map, adding the site's noise (and motion) per axial slice."""
    c = ContrastKind.parse(contrast)
    vox = render_array(tmap, site, c)
    if seed is not None:
        rng = np.random.default_rng(seed)
        for k in range(vox.shape[2]):
            plane = vox[..., k]
            if site.motion_severity > 0:
                plane = _motion(plane, site.motion_severity, rng)
            if site.noise_sigma > 0:
                plane = _noise(plane, site.noise_sigma, rng)
            vox[..., k] = plane
    return Volume(vox, contrast=c, site_id=site.site_id, volume_id=volume_id)


# ---------------------------------------------------------------------------
# artifacts

def _noise(pixels: np.ndarray, sigma: float, rng) -> np.ndarray:
    noisy = pixels + rng.normal(0.0, sigma, size=pixels.shape)
    return np.clip(noisy, 0.0, CLIP_MAX).astype(np.float32)


def _motion_complex(pixels: np.ndarray, severity: float, rng, max_shift: float = 3.0) -> np.ndarray:
    h, w = pixels.shape
    k = np.fft.fft2(pixels.astype(np.float64))
    n_lines = int(round(severity * h))
    if n_lines:
        lines = rng.choice(h, size=n_lines, replace=False)
        shifts = rng.uniform(-max_shift, max_shift, size=(n_lines, 2))
        ky = np.fft.fftfreq(h)[lines]
        kx = np.fft.fftfreq(w)
        # each corrupted phase-encode line sees the object at a translated position
        ramp = np.exp(-2j * np.pi * (kx[None, :] * shifts[:, 1:2] + ky[:, None] * shifts[:, 0:1]))
        k[lines] = k[lines] * ramp
    return np.fft.ifft2(k)


def _motion(pixels: np.ndarray, severity: float, rng) -> np.ndarray:
    return np.clip(np.abs(_motion_complex(pixels, severity, rng)), 0.0, CLIP_MAX).astype(np.float32)


def _pixels(x) -> np.ndarray:
    return x.pixels if isinstance(x, Slice) else np.asarray(x, dtype=np.float32)


def _wrap(x, pixels):
    return x.replace(pixels) if isinstance(x, Slice) else pixels


def add_noise(x, sigma: float, seed=None):
    """Additive Gaussian noise, clipped to ``[0, CLIP_MAX]``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return _wrap(x, _pixels(x).copy())
    return _wrap(x, _noise(_pixels(x), sigma, np.random.default_rng(seed)))


def add_motion(x, severity: float, seed=None):
    """Rigid-motion ghosting.

    A fraction ``severity`` of k-space phase-encode lines gets a random
    translation phase ramp; the magnitude of the inverse transform is
    returned.
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    return _wrap(x, _motion(_pixels(x), severity, np.random.default_rng(seed)))


def degrade(x, severity: float, seed=None, noise_scale: float = 0.1):
    """Motion at ``severity`` followed by noise with sigma ``noise_scale * severity``."""
    rng = np.random.default_rng(seed)
    pixels = _motion(_pixels(x), severity, rng)
    if severity > 0:
        pixels = _noise(pixels, noise_scale * severity, rng)
    return _wrap(x, pixels)


# ---------------------------------------------------------------------------
# datasets

@dataclass
class MissingPolicy:
    """Contrasts absent per site, in the spirit of protocol-dependent availability."""
    drop: dict[str, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        self.drop = {s: frozenset(ContrastKind.parse(c) for c in cs) for s, cs in self.drop.items()}

    def available(self, site_id: str) -> list[ContrastKind]:
        gone = self.drop.get(site_id, frozenset())
        return [c for c in CONTRASTS if c not in gone]

    @classmethod
    def parse(cls, text: str | None) -> "MissingPolicy":
        """Parse ``"A:FLAIR+PDw,B:PDw"``; empty or ``none`` drops nothing."""
        if not text or text.strip().lower() == "none":
            return cls()
        drop = {}
        for part in text.split(","):
            site, _, names = part.partition(":")
            drop[site.strip()] = [n for n in names.split("+") if n.strip()]
        return cls(drop)


def make_dataset(out_dir, n_subjects: int, sites: Sequence[SiteProfile] | None = None,
                 missing_policy: MissingPolicy | Mapping | None = None, seed: int = 0,
                 n_val: int = 0, n_travel: int = 0, grid=(32, 32, 24)) -> DatasetManifest:
    """Write phantom volumes and a manifest under ``out_dir``.

    Each site gets ``n_subjects`` training and ``n_val`` validation subjects of
    its own. ``n_travel`` traveling subjects are imaged at every site and
    tagged ``travel`` so training never sees them.
    """
    sites = list(default_sites() if sites is None else sites)
    if len(sites) < 2:
        raise ValueError("need at least two sites")
    if missing_policy is None:
        missing_policy = MissingPolicy()
    elif not isinstance(missing_policy, MissingPolicy):
        missing_policy = MissingPolicy(dict(missing_policy))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    anat_seeds, noise_seeds = root.spawn(2)

    subjects: list[tuple[str, str, list[SiteProfile]]] = []
    for s in sites:
        subjects += [(f"{s.site_id}-sub{k:03d}", "train", [s]) for k in range(n_subjects)]
        subjects += [(f"{s.site_id}-val{k:03d}", "val", [s]) for k in range(n_val)]
    subjects += [(f"travel{k:03d}", "travel", sites) for k in range(n_travel)]

    entries = []
    for si, (subject_id, split, subject_sites) in enumerate(subjects):
        anat_seed = np.random.SeedSequence(anat_seeds.entropy, spawn_key=(si,))
        tmap = generate_anatomy(anat_seed.generate_state(1)[0], grid)
        for site in subject_sites:
            vols = {}
            for c in missing_policy.available(site.site_id):
                if c not in site.levels:
                    continue
                key = (si, sites.index(site), int(c))
                nseed = np.random.SeedSequence(noise_seeds.entropy, spawn_key=key)
                vol = render_volume(tmap, site, c, seed=nseed, volume_id=f"{subject_id}_{site.site_id}_{c.name}")
                rel = Path(site.site_id) / f"{subject_id}_{c.name}.nii.gz"
                save_nifti(vol, out_dir / rel)
                vols[c] = rel.as_posix()
            entries.append(ManifestEntry(subject_id, site.site_id, vols, split))
    manifest = DatasetManifest(entries, out_dir, meta={
        "generator": "phantom",
        "seed": int(seed),
        "grid": list(_as_grid(grid)),
        "sites": [s.site_id for s in sites],
        "missing": {k: sorted(c.name for c in v) for k, v in missing_policy.drop.items()},
    })
    manifest.save(out_dir / "manifest.json")
    return manifest


def phantom_subject(seed: int, sites: Sequence[SiteProfile], grid=(32, 32, 24),
                    contrasts: Sequence = CONTRASTS) -> dict[str, dict[ContrastKind, Volume]]:
    """In-memory traveling subject: ``{site_id: {contrast: Volume}}``."""
    ss = np.random.SeedSequence(seed)
    a, n = ss.spawn(2)
    tmap = generate_anatomy(a.generate_state(1)[0], grid)
    out = {}
    for si, site in enumerate(sites):
        out[site.site_id] = {
            ContrastKind.parse(c): render_volume(
                tmap, site, c, seed=np.random.SeedSequence(n.entropy, spawn_key=(si, int(c))),
                volume_id=f"mem{seed}_{site.site_id}_{ContrastKind.parse(c).name}")
            for c in contrasts
        }
    return out
