"""Volumes, slices, NIfTI-1 I/O, WM-peak normalization and dataset manifests."""
from __future__ import annotations

import enum
import gzip
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import nibabel as nib
import numpy as np

logger = logging.getLogger(__name__)

CLIP_MAX = 1.5
GRID_MULTIPLE = 16
MIN_GRID = 32
MANIFEST_SCHEMA_VERSION = 1
SPLITS = ("train", "val", "travel")

# axis index of each orientation in RAS voxel order
ORIENTATION_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}

# raw NIfTI datatypes that widen to float32 without loss
_LOSSLESS_DTYPES = {
    np.dtype(np.uint8),
    np.dtype(np.int8),
    np.dtype(np.int16),
    np.dtype(np.uint16),
    np.dtype(np.float32),
}


class NiftiFormatError(ValueError):
    pass


class UnsupportedDatatypeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class ContrastKind(enum.IntEnum):
    T1w = 1
    T2w = 2
    PDw = 3
    FLAIR = 4

    @property
    def index(self) -> int:
        """Zero-based position used for attention weights and keys."""
        return int(self) - 1

    @classmethod
    def parse(cls, name: "str | int | ContrastKind") -> "ContrastKind":
        if isinstance(name, ContrastKind):
            return name
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        key = str(name).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "t1": cls.T1w, "t1w": cls.T1w,
            "t2": cls.T2w, "t2w": cls.T2w,
            "pd": cls.PDw, "pdw": cls.PDw,
            "flair": cls.FLAIR,
        }
        if key not in aliases:
            raise ValueError(f"unknown contrast {name!r}")
        return aliases[key]


CONTRASTS = tuple(ContrastKind)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    contrast: ContrastKind | None = None
    site_id: str = ""
    volume_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains non-finite voxels")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4) or abs(np.linalg.det(self.affine)) < 1e-12:
            raise ValueError("affine must be an invertible 4x4 matrix")
        if self.contrast is not None:
            self.contrast = ContrastKind.parse(self.contrast)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return Volume(voxels, self.spacing, self.affine.copy(), self.contrast,
                      self.site_id, self.volume_id, dict(self.meta))


@dataclass(frozen=True)
class Provenance:
    volume_id: str
    orientation: str
    index: int
    # ((before, after), (before, after)); negative values mean cropping
    pad: tuple[tuple[int, int], tuple[int, int]] = ((0, 0), (0, 0))
    original_shape: tuple[int, int] | None = None


@dataclass
class Slice:
    pixels: np.ndarray
    contrast: ContrastKind | None = None
    provenance: Provenance | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError(f"slice must be 2D, got shape {self.pixels.shape}")
        h, w = self.pixels.shape
        if h < MIN_GRID or w < MIN_GRID or h % GRID_MULTIPLE or w % GRID_MULTIPLE:
            raise ValueError(
                f"slice dims must be >= {MIN_GRID} and divisible by {GRID_MULTIPLE}, got {h}x{w}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("slice contains non-finite pixels")
        if self.contrast is not None:
            self.contrast = ContrastKind.parse(self.contrast)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def replace(self, pixels: np.ndarray) -> "Slice":
        return Slice(pixels, self.contrast, self.provenance)


# ---------------------------------------------------------------------------
# NIfTI-1

def _read_header_bytes(path: Path) -> bytes:
    opener = gzip.open if path.name.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            return f.read(348)
    except (OSError, EOFError) as err:
        raise NiftiFormatError(f"{path}: cannot read header ({err})") from err


def _check_magic(path: Path) -> None:
    hdr = _read_header_bytes(path)
    if len(hdr) < 348:
        raise NiftiFormatError(f"{path}: truncated header")
    little = struct.unpack("<i", hdr[:4])[0]
    big = struct.unpack(">i", hdr[:4])[0]
    if 348 not in (little, big):
        raise NiftiFormatError(f"{path}: sizeof_hdr is not 348")
    if hdr[344:348] != b"n+1\x00":
        raise NiftiFormatError(f"{path}: bad magic {hdr[344:348]!r}, expected single-file NIfTI-1")


def _parse_descrip(descrip: str) -> dict[str, str]:
    out = {}
    for item in descrip.split(";"):
        if "=" in item:
            k, v = item.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_nifti(path: "str | os.PathLike", contrast=None, site_id: str | None = None) -> Volume:
    """Read a single-file NIfTI-1 volume, widening voxel data to float32.

    Contrast and site default to the ``contrast=...;site=...`` tags that
    :func:`save_nifti` writes into the header description field.
    """
    path = Path(path)
    _check_magic(path)
    img = nib.Nifti1Image.from_filename(str(path))
    hdr = img.header
    raw_dtype = hdr.get_data_dtype()
    if raw_dtype.newbyteorder("=") not in _LOSSLESS_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype {raw_dtype} is not supported")
    raw = np.asarray(img.dataobj.get_unscaled())
    if raw.ndim == 4 and raw.shape[3] == 1:
        raw = raw[..., 0]
    if raw.ndim != 3:
        raise NiftiFormatError(f"{path}: expected a single 3D image, got shape {raw.shape}")
    data = raw.astype(np.float32)
    # nibabel moves scl_slope/scl_inter onto the array proxy at load time
    slope, inter = float(img.dataobj.slope), float(img.dataobj.inter)
    if slope != 1.0 or inter != 0.0:
        data = data * np.float32(slope) + np.float32(inter)

    tags = _parse_descrip(hdr["descrip"].tobytes().rstrip(b"\x00").decode("ascii", "ignore"))
    if contrast is None and "contrast" in tags:
        contrast = ContrastKind.parse(tags["contrast"])
    if site_id is None:
        site_id = tags.get("site", "")
    spacing = tuple(float(z) for z in hdr.get_zooms()[:3])
    return Volume(data, spacing, img.affine, contrast, site_id, volume_id=path.name)


def save_nifti(volume: Volume, path: "str | os.PathLike") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(np.asarray(volume.voxels, dtype=np.float32), volume.affine)
    img.header.set_zooms(volume.spacing)
    img.header.set_xyzt_units("mm")
    tags = []
    if volume.contrast is not None:
        tags.append(f"contrast={volume.contrast.name}")
    if volume.site_id:
        tags.append(f"site={volume.site_id}")
    img.header["descrip"] = ";".join(tags)[:79].encode("ascii")
    nib.save(img, str(path))
    return path


# ---------------------------------------------------------------------------
# intensity normalization

def _silverman_bandwidth(values: np.ndarray) -> float:
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    q75, q25 = np.percentile(values, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * values.size ** (-0.2)


def _binned_kde(values: np.ndarray, bandwidth: float, n_grid: int = 2048):
    lo, hi = float(values.min()), float(values.max())
    pad = 4 * bandwidth
    grid = np.linspace(lo - pad, hi + pad, n_grid)
    step = grid[1] - grid[0]
    # linear binning keeps the estimate continuous in the data
    pos = (values - grid[0]) / step
    left = np.clip(np.floor(pos).astype(np.int64), 0, n_grid - 2)
    frac = pos - left
    counts = np.zeros(n_grid)
    np.add.at(counts, left, 1.0 - frac)
    np.add.at(counts, left + 1, frac)
    half = int(np.ceil(4 * bandwidth / step))
    offsets = np.arange(-half, half + 1) * step
    kernel = np.exp(-0.5 * (offsets / bandwidth) ** 2)
    density = np.convolve(counts, kernel, mode="same")
    density /= density.sum() * step
    return grid, density


def estimate_wm_peak(values: np.ndarray, min_mass: float = 0.10) -> float:
    """Intensity of the highest local histogram mode holding >= ``min_mass``.

    The histogram is a Gaussian KDE with Silverman's rule-of-thumb bandwidth.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DegenerateInputError("no foreground voxels")
    if values.max() - values.min() <= 1e-12 * max(abs(values.max()), 1.0):
        return float(values.mean())
    bw = _silverman_bandwidth(values)
    if bw <= 0:
        bw = (values.max() - values.min()) / 100.0
    grid, density = _binned_kde(values, bw)
    step = grid[1] - grid[0]

    interior = np.arange(1, len(grid) - 1)
    is_peak = (density[interior] > density[interior - 1]) & (density[interior] >= density[interior + 1])
    peaks = interior[is_peak]
    is_valley = (density[interior] <= density[interior - 1]) & (density[interior] < density[interior + 1])
    valleys = np.concatenate([[0], interior[is_valley], [len(grid) - 1]])

    best = None
    for p in peaks:
        lo = valleys[valleys < p].max()
        hi = valleys[valleys > p].min()
        mass = density[lo:hi + 1].sum() * step
        if mass >= min_mass and (best is None or p > best):
            best = p
    if best is None:
        best = int(np.argmax(density))
    # parabolic refinement of the discrete maximum
    if 0 < best < len(grid) - 1:
        y0, y1, y2 = density[best - 1], density[best], density[best + 1]
        denom = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        return float(grid[best] + shift * step)
    return float(grid[best])


def wm_peak_normalize(volume: Volume, target: float = 1.0, foreground_frac: float = 0.05,
                      clip_max: float = CLIP_MAX) -> Volume:
    """Scale ``volume`` so its white-matter histogram peak lands on ``target``.

    Foreground is every voxel above ``foreground_frac`` of the maximum. The
    result is clipped to ``[0, clip_max]``.
    """
    vox = np.asarray(volume.voxels, dtype=np.float64)
    vmax = vox.max()
    if vmax <= 0:
        raise DegenerateInputError("volume has no positive foreground")
    fg = vox[vox > foreground_frac * vmax]
    peak = estimate_wm_peak(fg)
    if peak <= 0:
        raise DegenerateInputError("estimated WM peak is not positive")
    out = np.clip(vox * (target / peak), 0.0, clip_max).astype(np.float32)
    return volume.with_voxels(out)


# ---------------------------------------------------------------------------
# slicing

def center_window(n: int, width: int = 20) -> range:
    """Indices of the ``width`` central slices of an ``n``-slice stack."""
    if n <= 0:
        raise ValueError("empty stack")
    if n < width:
        logger.warning("stack has %d slices, fewer than window %d; using all", n, width)
        return range(0, n)
    start = (n - width) // 2
    return range(start, start + width)


def padded_size(n: int) -> int:
    return max(MIN_GRID, -(-n // GRID_MULTIPLE) * GRID_MULTIPLE)


def _fit_axis(arr: np.ndarray, axis: int, size: int) -> tuple[np.ndarray, tuple[int, int]]:
    n = arr.shape[axis]
    if n <= size:
        before = (size - n) // 2
        widths = [(0, 0)] * arr.ndim
        widths[axis] = (before, size - n - before)
        return np.pad(arr, widths), (before, size - n - before)
    before = (n - size) // 2
    idx = [slice(None)] * arr.ndim
    idx[axis] = slice(before, before + size)
    return arr[tuple(idx)], (-before, -(n - size - before))


def fit_to_grid(image: np.ndarray, grid: tuple[int, int] | None = None):
    """Center-pad (or crop) a 2D array; returns the array and the pad record."""
    if grid is None:
        grid = (padded_size(image.shape[0]), padded_size(image.shape[1]))
    out, p0 = _fit_axis(image, 0, grid[0])
    out, p1 = _fit_axis(out, 1, grid[1])
    return out, (p0, p1)


def unfit_from_grid(image: np.ndarray, pad, original_shape: tuple[int, int]) -> np.ndarray:
    """Invert :func:`fit_to_grid`; cropped margins come back as zeros."""
    out = image
    for axis, (before, after) in enumerate(pad):
        n = original_shape[axis]
        if before >= 0:
            idx = [slice(None)] * 2
            idx[axis] = slice(before, before + n)
            out = out[tuple(idx)]
        else:
            widths = [(0, 0), (0, 0)]
            widths[axis] = (-before, -after)
            out = np.pad(out, widths)
    return out


def extract_slices(volume: Volume, orientation: str = "axial", window: Iterable[int] | None = None,
                   grid: tuple[int, int] | None = None) -> list[Slice]:
    """Cut 2D slices along ``orientation`` and fit them to a training grid.

    ``window`` defaults to every index. ``grid`` defaults to the in-plane size
    rounded up to a multiple of 16 (at least 32); pixels are zero padded or
    center cropped and the operation is recorded in each slice's provenance.
    """
    if orientation not in ORIENTATION_AXIS:
        raise ValueError(f"orientation must be one of {sorted(ORIENTATION_AXIS)}")
    axis = ORIENTATION_AXIS[orientation]
    n = volume.shape[axis]
    indices = list(range(n) if window is None else window)
    if not indices:
        raise ValueError("empty slice window")
    if min(indices) < 0 or max(indices) >= n:
        raise IndexError(f"window {indices[0]}..{indices[-1]} out of bounds for {n} slices")
    out = []
    for k in indices:
        plane = np.take(volume.voxels, k, axis=axis)
        fitted, pad = fit_to_grid(plane, grid)
        prov = Provenance(volume.volume_id, orientation, int(k), pad, tuple(plane.shape))
        out.append(Slice(fitted, volume.contrast, prov))
    return out


def stack_slices(planes: Sequence[np.ndarray], orientation: str, shape: tuple[int, int, int],
                 provenance: Sequence[Provenance]) -> np.ndarray:
    """Reassemble slice arrays produced from :func:`extract_slices` into a volume."""
    axis = ORIENTATION_AXIS[orientation]
    vol = np.zeros(shape, dtype=np.float32)
    for plane, prov in zip(planes, provenance):
        restored = unfit_from_grid(np.asarray(plane), prov.pad, prov.original_shape)
        idx = [slice(None)] * 3
        idx[axis] = prov.index
        vol[tuple(idx)] = restored
    return vol


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ManifestEntry:
    subject_id: str
    site_id: str
    volumes: dict[ContrastKind, str]
    split: str = "train"

    def __post_init__(self):
        self.volumes = {ContrastKind.parse(k): str(v) for k, v in self.volumes.items()}
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")

    @property
    def contrasts(self) -> list[ContrastKind]:
        return sorted(self.volumes)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def path(self, entry: ManifestEntry, contrast) -> Path:
        return self.root / entry.volumes[ContrastKind.parse(contrast)]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def sites(self) -> list[str]:
        return sorted({e.site_id for e in self.entries})

    def validate(self) -> None:
        for e in self.entries:
            for c in e.volumes:
                if not self.path(e, c).exists():
                    raise ManifestError(f"missing volume {self.path(e, c)}")
            if e.split == "train" and len(e.volumes) < 2:
                raise ManifestError(
                    f"training subject {e.subject_id}@{e.site_id} has fewer than 2 contrasts")
        train_ids = {e.subject_id for e in self.split("train")}
        leaked = train_ids & {e.subject_id for e in self.split("travel")}
        if leaked:
            raise ManifestError(f"traveling subjects in training split: {sorted(leaked)}")

    def to_dict(self) -> dict:
        return {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "meta": self.meta,
            "entries": [
                {
                    "subject_id": e.subject_id,
                    "site_id": e.site_id,
                    "split": e.split,
                    "volumes": {c.name: p for c, p in sorted(e.volumes.items())},
                }
                for e in self.entries
            ],
        }

    def save(self, path: "str | os.PathLike") -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: "str | os.PathLike", validate: bool = True) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        version = data.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise ManifestError(f"unsupported manifest schema version {version!r}")
        entries = [ManifestEntry(d["subject_id"], d["site_id"], d["volumes"], d.get("split", "train"))
                   for d in data["entries"]]
        manifest = cls(entries, path.parent, data.get("meta", {}))
        if validate:
            manifest.validate()
        return manifest


def load_entry(manifest: DatasetManifest, entry: ManifestEntry,
               contrasts: Sequence | None = None) -> dict[ContrastKind, Volume]:
    wanted = entry.contrasts if contrasts is None else [ContrastKind.parse(c) for c in contrasts]
    return {c: load_nifti(manifest.path(entry, c), contrast=c, site_id=entry.site_id)
            for c in wanted if c in entry.volumes}


def availability(contrasts: Iterable) -> np.ndarray:
    """Boolean mask of length 4 in ContrastKind order."""
    mask = np.zeros(len(CONTRASTS), dtype=bool)
    for c in contrasts:
        mask[ContrastKind.parse(c).index] = True
    return mask


def as_mapping(volumes: Mapping) -> dict[ContrastKind, Volume]:
    return {ContrastKind.parse(k): v for k, v in volumes.items()}
