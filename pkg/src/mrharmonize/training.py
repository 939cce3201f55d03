"""Training driver: intra-site and inter-site steps, validation, checkpoints.

Every source of randomness in step ``k`` is derived from ``(seed, k)``, so a
run resumed from a step-``k`` checkpoint replays exactly the same batches.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import attention as att
from .imaging import (CONTRASTS, ContrastKind, DatasetManifest, ManifestEntry, fit_to_grid, load_entry)
from .losses import (PART_NAMES, LossWeights, code_l1, contrastive_loss, kl_to_standard_normal,
                     recon_loss, sample_anatomy_patches, total_loss)
from .networks import (Checkpoint, HarmonizationModel, ModelConfig, N_LEVELS, config_digest,
                       load_checkpoint, model_tensors, optimizer_tensors, restore_model,
                       restore_optimizer, sample_theta, save_checkpoint, stable_seed)
from .phantom import degrade

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
LOG_COLUMNS = ("step",) + PART_NAMES + ("total", "kind", "temperature")


class TrainingError(RuntimeError):
    pass


LR_SCHEDULES = ("constant", "step", "cosine")


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    # "constant"; "step": cut to lr * lr_final_factor at lr_drop_at * steps;
    # "cosine": half-cosine from lr down to lr * lr_final_factor at the last step
    lr_schedule: str = "constant"
    lr_drop_at: float = 0.8
    lr_final_factor: float = 0.1
    steps: int = 5000
    batch_size: int = 8
    tau_start: float = 1.0
    tau_end: float = 0.5
    tau_anneal_steps: int | None = None  # default: half of ``steps``
    dropout_p: float = 0.2
    seed: int = 0
    inter_site_step_ratio: float = 0.25
    freeze_inter: bool = False
    # source degradation so attention learns to avoid corrupted inputs
    degrade_p: float = 0.3
    degrade_range: tuple[float, float] = (0.2, 0.8)
    patch: int = 3
    n_neg: int = 8
    n_query: int = 64
    artifact_m: int = 4
    artifact_batch: int = 4
    artifact_range: tuple[float, float] = (0.2, 0.8)
    val_every: int = 100
    ckpt_every: int = 1000
    val_batches: int = 4

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.degrade_range = tuple(self.degrade_range)
        self.artifact_range = tuple(self.artifact_range)
        for name in ("lr", "steps", "batch_size", "tau_start", "tau_end", "val_every", "ckpt_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0.0 < self.lr_drop_at < 1.0:
            raise ValueError("lr_drop_at must lie in (0, 1)")
        if not 0.0 < self.lr_final_factor <= 1.0:
            raise ValueError("lr_final_factor must lie in (0, 1]")
        if not 0.0 <= self.inter_site_step_ratio <= 1.0:
            raise ValueError("inter_site_step_ratio must lie in [0, 1]")
        if not 0.0 <= self.dropout_p <= 1.0 or not 0.0 <= self.degrade_p <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def anneal_steps(self) -> int:
        return self.tau_anneal_steps or max(1, self.steps // 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = CONFIG_VERSION
        d["degrade_range"] = list(self.degrade_range)
        d["artifact_range"] = list(self.artifact_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return config_digest(self.to_dict())


def learning_rate(config: TrainConfig, step: int) -> float:
    """Learning rate at ``step``; a pure function of the step so resuming is exact."""
    final = config.lr * config.lr_final_factor
    if config.lr_schedule == "step":
        return final if step >= config.lr_drop_at * config.steps else config.lr
    if config.lr_schedule == "cosine":
        frac = min(step / max(config.steps - 1, 1), 1.0)
        return final + 0.5 * (config.lr - final) * (1 + math.cos(math.pi * frac))
    return config.lr


def temperature(config: TrainConfig, step: int) -> float:
    """Linear anneal from ``tau_start`` to ``tau_end``, then constant."""
    frac = min(step / config.anneal_steps, 1.0)
    return config.tau_start + (config.tau_end - config.tau_start) * frac


def is_inter_step(config: TrainConfig, step: int) -> bool:
    r = config.inter_site_step_ratio
    return int((step + 1) * r) > int(step * r)


# ---------------------------------------------------------------------------
# data

@dataclass
class SubjectStack:
    """All axial slices of one subject at one site: images (D, 4, H, W), zeros where missing."""
    subject_id: str
    site_id: str
    split: str
    images: np.ndarray
    mask: np.ndarray
    valid: np.ndarray  # slice indices with enough foreground

    @property
    def n_available(self) -> int:
        return int(self.mask.sum())


def stack_entry(manifest: DatasetManifest, entry: ManifestEntry, grid=None) -> SubjectStack:
    vols = load_entry(manifest, entry)
    shapes = {v.shape for v in vols.values()}
    if len(shapes) != 1:
        raise TrainingError(f"{entry.subject_id}@{entry.site_id}: contrasts are not co-registered")
    shape = shapes.pop()
    probe, _ = fit_to_grid(np.zeros(shape[:2]), grid)
    images = np.zeros((shape[2], len(CONTRASTS)) + probe.shape, dtype=np.float32)
    mask = np.zeros(len(CONTRASTS), dtype=bool)
    for c, v in vols.items():
        mask[c.index] = True
        for z in range(shape[2]):
            images[z, c.index], _ = fit_to_grid(v.voxels[..., z], grid)
    fg = (images.max(1) > 0.05).mean(axis=(1, 2))
    valid = np.flatnonzero(fg > 0.05)
    if valid.size == 0:
        valid = np.arange(shape[2])
    return SubjectStack(entry.subject_id, entry.site_id, entry.split, images, mask, valid)


class TrainingData:
    """In-memory slice stacks for the train and val splits of a manifest.

    Traveling subjects are never loaded.
    """

    def __init__(self, manifest: DatasetManifest, grid=None):
        self.train: list[SubjectStack] = []
        self.val: list[SubjectStack] = []
        for e in manifest.entries:
            if e.split == "travel":
                continue
            s = stack_entry(manifest, e, grid)
            if e.split == "train" and s.n_available < 2:
                logger.warning("skipping %s@%s: fewer than two contrasts", e.subject_id, e.site_id)
                continue
            (self.train if e.split == "train" else self.val).append(s)
        if not self.train:
            raise TrainingError("no usable training subjects")
        self.sites = sorted({s.site_id for s in self.train})

    @classmethod
    def from_stacks(cls, train, val=()):
        obj = cls.__new__(cls)
        obj.train, obj.val = list(train), list(val)
        obj.sites = sorted({s.site_id for s in obj.train})
        return obj


@dataclass
class Batch:
    images: torch.Tensor        # (B, 4, H, W) sources, possibly degraded
    clean: torch.Tensor         # (B, 4, H, W)
    mask: torch.Tensor          # (B, 4) bool
    target: torch.Tensor        # (B, 1, H, W)
    target_index: torch.Tensor  # (B,) contrast index of the target
    subjects: list
    sites: list


def _pick_slices(pool, n, rng):
    out = []
    for _ in range(n):
        s = pool[int(rng.integers(len(pool)))]
        out.append((s, int(rng.choice(s.valid))))
    return out


def draw_intra_batch(data_pool, config: TrainConfig, rng: np.random.Generator, degrade_sources=True) -> Batch:
    picks = _pick_slices(data_pool, config.batch_size, rng)
    clean = np.stack([s.images[z] for s, z in picks])
    mask = np.stack([s.mask for s, _ in picks])
    images = clean.copy()
    tidx = np.empty(len(picks), dtype=np.int64)
    for b, (s, _) in enumerate(picks):
        avail = np.flatnonzero(s.mask)
        tidx[b] = rng.choice(avail)
        if degrade_sources and rng.uniform() < config.degrade_p:
            k = rng.choice(avail)
            sev = rng.uniform(*config.degrade_range)
            images[b, k] = degrade(images[b, k], sev, seed=rng.integers(2 ** 63))
    target = clean[np.arange(len(picks)), tidx][:, None]
    return Batch(torch.from_numpy(images), torch.from_numpy(clean), torch.from_numpy(mask),
                 torch.from_numpy(np.ascontiguousarray(target)), torch.from_numpy(tidx),
                 [s.subject_id for s, _ in picks], [s.site_id for s, _ in picks])


def draw_inter_targets(data_pool, source_sites, rng) -> torch.Tensor:
    """One clean target slice per source, each from a different site than its source."""
    out = []
    for site in source_sites:
        pool = [s for s in data_pool if s.site_id != site]
        if not pool:
            raise ValueError(f"no target site differs from source site {site}")
        s = pool[int(rng.integers(len(pool)))]
        c = int(rng.choice(np.flatnonzero(s.mask)))
        out.append(s.images[int(rng.choice(s.valid)), c])
    return torch.from_numpy(np.stack(out)[:, None])


# ---------------------------------------------------------------------------
# forward pass

def encode_sources(model: HarmonizationModel, images, mask, temperature=1.0, mode="gumbel", generator=None):
    """Encode available sources; returns beta (B,4,5,H,W), mu, logvar, eta (B,4,2).

    Slots of unavailable sources are zero.
    """
    b, k, h, w = images.shape
    flat = images[mask].unsqueeze(1)
    beta_f = model.anatomy_encode(flat, temperature, mode=mode, generator=generator)
    mu_f, lv_f = model.contrast_encode(flat)
    eta_f = model.artifact_encode(flat)

    def scatter(vals, shape):
        out = vals.new_zeros((b, k) + shape)
        out[mask] = vals
        return out

    return (scatter(beta_f, (N_LEVELS, h, w)), scatter(mu_f, mu_f.shape[1:]),
            scatter(lv_f, lv_f.shape[1:]), scatter(eta_f, eta_f.shape[1:]))


def attend(model, mu, eta, theta_t, eta_t, mask):
    keys = model.keys(mu, eta)
    query = model.query(theta_t, eta_t)
    return att.compute_attention(keys, query, mask)


def _pick_pair(mask: torch.Tensor, generator) -> tuple[torch.Tensor, torch.Tensor]:
    ii, jj = [], []
    for row in mask:
        avail = torch.nonzero(row).flatten()
        perm = avail[torch.randperm(len(avail), generator=generator)]
        ii.append(perm[0])
        jj.append(perm[1 % len(perm)])
    return torch.stack(ii), torch.stack(jj)


def anatomy_contrastive(beta, batch: Batch, config: TrainConfig, generator):
    i, j = _pick_pair(batch.mask, generator)
    rows = torch.arange(beta.shape[0])
    triple = sample_anatomy_patches(beta[rows, i], beta[rows, j], batch.images, config.patch, config.n_neg,
                                    config.n_query, generator=generator, image_mask=batch.mask)
    return contrastive_loss(triple.query, triple.positive, triple.negatives)


def artifact_contrastive(model, data_pool, config: TrainConfig, rng):
    """Triplet contrastive loss on L2-normalized artifact codes."""
    from .losses import sample_artifact_triplets

    pool = [s.images[s.valid][:, int(rng.choice(np.flatnonzero(s.mask)))].transpose(1, 2, 0)
            for s in data_pool]
    triples = [sample_artifact_triplets(pool, config.artifact_m, config.artifact_range, rng=rng)
               for _ in range(config.artifact_batch)]
    x = np.stack([np.concatenate([t.query[None], t.positive[None], t.negatives]) for t in triples])
    n, m2, h, w = x.shape
    eta = model.artifact_encode(torch.from_numpy(x.reshape(n * m2, 1, h, w)))
    eta = torch.nn.functional.normalize(eta, dim=-1).reshape(n, m2, -1)
    return contrastive_loss(eta[:, 0], eta[:, 1], eta[:, 2:])


class _Frozen:
    """Temporarily disable gradients for the non-attention networks."""

    def __init__(self, model, active):
        self.params = list(model.non_attention_parameters()) if active else []

    def __enter__(self):
        for p in self.params:
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad_(True)


def compute_step(model, data: TrainingData, config: TrainConfig, step: int, inter: bool | None = None,
                 pool=None, dropout=True, degrade_sources=True):
    """Loss parts and the applied loss for ``step`` (no optimizer update)."""
    pool = data.train if pool is None else pool
    rng = np.random.default_rng([config.seed, step, 1])
    gen = torch.Generator().manual_seed(stable_seed(config.seed, step, "torch"))
    if inter is None:
        inter = is_inter_step(config, step) and len({s.site_id for s in pool}) > 1
    tau = temperature(config, step)
    batch = draw_intra_batch(pool, config, rng, degrade_sources)

    with _Frozen(model, inter and config.freeze_inter):
        beta, mu, logvar, eta = encode_sources(model, batch.images, batch.mask, tau, "gumbel", gen)
        if inter:
            target = draw_inter_targets(pool, batch.sites, rng)
        else:
            target = batch.target
        mu_t, logvar_t = model.contrast_encode(target)
        eta_t = model.artifact_encode(target)
        theta_t = mu_t if inter else sample_theta(mu_t, logvar_t, generator=gen)

        avail = batch.mask
        if dropout:
            avail = avail & ~att.sample_dropout(batch.mask, config.dropout_p, gen)
        alpha = attend(model, mu, eta, theta_t, eta_t, avail)
        beta_star = att.fuse_anatomy(beta, alpha)
        x_hat = model.decode(beta_star, theta_t)

        mu_r, _ = model.contrast_encode(x_hat)
        eta_r = model.artifact_encode(x_hat)
        parts = {"cycle": code_l1(mu_r, eta_r, theta_t, eta_t)}
        if inter:
            with torch.no_grad():
                # diagnostics only: distance to the same-contrast source when present
                ref = batch.clean[torch.arange(len(batch.subjects)), batch.target_index][:, None]
                parts["recon"] = recon_loss(x_hat, ref)
                parts["kl"] = kl_to_standard_normal(mu_t, logvar_t)
                parts["contr_anat"] = anatomy_contrastive(beta, batch, config, gen)
                parts["contr_artifact"] = torch.zeros(())
            applied = config.weights.cycle * parts["cycle"]
        else:
            parts["recon"] = recon_loss(x_hat, batch.target)
            parts["kl"] = kl_to_standard_normal(mu_t, logvar_t)
            parts["contr_anat"] = anatomy_contrastive(beta, batch, config, gen)
            parts["contr_artifact"] = artifact_contrastive(model, pool, config, rng)
            applied = total_loss(parts, config.weights)
    return parts, applied, {"batch": batch, "inter": inter, "temperature": tau, "alpha": alpha.detach()}


# ---------------------------------------------------------------------------
# driver

class Trainer:
    def __init__(self, data: TrainingData, config: TrainConfig, out_dir=None, model=None):
        self.data = data
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(stable_seed(config.seed, "init"))
        self.model = model or HarmonizationModel(config.model)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.lr)
        self.step = 0
        self.history: list[dict] = []

    @property
    def checkpoint_config(self) -> dict:
        return self.config.to_dict()

    def train_step(self) -> dict:
        self.model.train()
        parts, applied, info = compute_step(self.model, self.data, self.config, self.step)
        if not torch.isfinite(applied):
            self._dump_nan(parts, info)
        self.optimizer.zero_grad(set_to_none=True)
        applied.backward()
        for group in self.optimizer.param_groups:
            group["lr"] = learning_rate(self.config, self.step)
        self.optimizer.step()
        row = {"step": self.step, **{k: float(parts[k].detach()) for k in PART_NAMES}, "total": float(applied.detach()),
               "kind": "inter" if info["inter"] else "intra", "temperature": info["temperature"]}
        self.history.append(row)
        self.step += 1
        return row

    def _dump_nan(self, parts, info):
        msg = {k: float(v.detach()) for k, v in parts.items()}
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            b = info["batch"]
            dump = self.out_dir / f"nan_dump_step{self.step}.npz"
            np.savez(dump, images=b.images.numpy(), target=b.target.numpy(), mask=b.mask.numpy(),
                     parts=json.dumps(msg), subjects=np.array(b.subjects))
            raise TrainingError(f"non-finite loss at step {self.step}: {msg}; batch dumped to {dump}")
        raise TrainingError(f"non-finite loss at step {self.step}: {msg}")

    @torch.no_grad()
    def validate(self) -> dict:
        pool = self.data.val or self.data.train
        self.model.eval()
        sums = {k: 0.0 for k in PART_NAMES + ("total",)}
        n = self.config.val_batches
        for i in range(n):
            cfg = replace(self.config, seed=stable_seed(self.config.seed, "val"))
            parts, _, _ = compute_step(self.model, self.data, cfg, i, inter=False, pool=pool,
                                       dropout=False, degrade_sources=False)
            parts["total"] = total_loss(parts, self.config.weights)
            for k in sums:
                sums[k] += float(parts[k]) / n
        row = {"step": self.step, **sums, "kind": "val", "temperature": temperature(self.config, self.step)}
        self.history.append(row)
        return row

    def checkpoint(self) -> Checkpoint:
        tensors = model_tensors(self.model)
        tensors.update(optimizer_tensors(self.model, self.optimizer))
        extra = {"eta_clean_mean": self.clean_eta_mean()}
        return Checkpoint(tensors, self.checkpoint_config, self.step, self.config.seed, extra)

    @torch.no_grad()
    def clean_eta_mean(self) -> list[float]:
        pool = self.data.val or self.data.train
        x = np.concatenate([s.images[s.valid][:, s.mask] for s in pool], axis=1)
        x = x.reshape(-1, 1, *x.shape[-2:])
        self.model.eval()
        eta = self.model.artifact_encode(torch.from_numpy(np.ascontiguousarray(x)))
        return [float(v) for v in eta.mean(0)]

    def save(self, path) -> Path:
        return save_checkpoint(path, self.checkpoint())

    def resume(self, path, force=False) -> None:
        ckpt = load_checkpoint(path, config_digest(self.checkpoint_config), force=force)
        restore_model(self.model, ckpt.tensors)
        restore_optimizer(self.model, self.optimizer, ckpt.tensors)
        self.step = ckpt.step

    def _write_log(self, rows, append: bool):
        path = self.out_dir / "train_log.csv"
        new = not (append and path.exists())
        with path.open("w" if new else "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            if new:
                w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})

    def fit(self, steps: int | None = None, progress_every: int = 500) -> Path | None:
        total = self.config.steps if steps is None else steps
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True))
        t0 = time.time()
        pending = []
        append = self.step > 0
        while self.step < total:
            pending.append(self.train_step())
            if self.step % self.config.val_every == 0 or self.step == total:
                pending.append(self.validate())
            if self.step % progress_every == 0:
                last = [r for r in self.history if r["kind"] != "val"][-progress_every:]
                logger.info("step %d  loss %.4f  (%.1fs)", self.step,
                            float(np.mean([r["total"] for r in last])), time.time() - t0)
            if self.out_dir is not None and (self.step % self.config.ckpt_every == 0 or self.step == total):
                self._write_log(pending, append)
                append, pending = True, []
                self.save(self.out_dir / f"ckpt_step{self.step:06d}.ckpt")
        if self.out_dir is None:
            return None
        if pending:
            self._write_log(pending, append)
        return self.save(self.out_dir / "model.ckpt")


def fit(manifest: DatasetManifest, config: TrainConfig, out_dir=None, resume=None, force=False) -> Trainer:
    """Train on the manifest's train split; validation uses its val split."""
    data = TrainingData(manifest)
    trainer = Trainer(data, config, out_dir)
    if resume is not None:
        trainer.resume(resume, force=force)
    trainer.fit()
    return trainer


def load_model(path, expected_digest=None, force=False):
    """Model in eval mode plus its checkpoint (config, extras)."""
    ckpt = load_checkpoint(path, expected_digest, force)
    cfg = TrainConfig.from_dict(ckpt.config)
    model = HarmonizationModel(cfg.model)
    restore_model(model, ckpt.tensors)
    model.eval()
    return model, ckpt
