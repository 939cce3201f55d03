"""Encoders, decoder, key/query heads and the Gumbel-softmax anatomy bottleneck.

Tensors are channels-first: slices are ``(B, 1, H, W)`` and anatomy maps
``(B, 5, H, W)``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import CLIP_MAX, GRID_MULTIPLE

N_LEVELS = 5
THETA_DIM = 2
ETA_DIM = 2
LOGVAR_CLAMP = 10.0


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16          # base width C; decoder uses 2C
    key_dim: int = 16        # d
    depth: int = 4           # U-Net downsamplings
    contrast_kernel: int = 9
    artifact_growth: int = 4
    leak: float = 0.2

    def to_dict(self) -> dict:
        return asdict(self)


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Gumbel softmax

def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log((-torch.log(u.clamp_min(tiny))).clamp_min(tiny))


def gumbel_softmax(logits: torch.Tensor, temperature: float, seed: int | None = None,
                   generator: torch.Generator | None = None, noise: torch.Tensor | None = None,
                   dim: int = 1) -> torch.Tensor:
    """softmax((logits + g) / temperature) with g ~ Gumbel(0, 1) along ``dim``.

    ``noise`` overrides the draw (useful for gradient checks); ``seed``
    builds a private generator when none is supplied.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if noise is None:
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    return torch.softmax((logits + noise) / temperature, dim=dim)


def hard_onehot(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    idx = logits.argmax(dim=dim, keepdim=True)
    return torch.zeros_like(logits).scatter_(dim, idx, 1.0)


def collapse_beta(beta: torch.Tensor) -> torch.Tensor:
    """Single-channel view of an anatomy map: level k shows as k/4."""
    levels = torch.arange(beta.shape[1], dtype=beta.dtype) / (beta.shape[1] - 1)
    return (beta * levels.view(1, -1, 1, 1)).sum(1, keepdim=True)


# ---------------------------------------------------------------------------
# building blocks

class ConvBlock(nn.Module):
    def __init__(self, cin, cout, leak=0.2, norm=False):
        super().__init__()
        layers = []
        for c in (cin, cout):
            layers.append(nn.Conv2d(c, cout, 3, padding=1))
            if norm:
                layers.append(nn.InstanceNorm2d(cout))
            layers.append(nn.LeakyReLU(leak))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class UNet(nn.Module):
    """U-Net: ``depth`` max-pool downsamplings, transposed-conv upsampling, optional InstanceNorm.

    With ``cond_dim > 0`` a conditioning vector is broadcast and concatenated
    at the bottleneck (the caller concatenates it at the input too).
    """

    def __init__(self, cin, cout, width, depth=4, cond_dim=0, leak=0.2, norm=False):
        super().__init__()
        self.depth = depth
        self.cond_dim = cond_dim
        chans = [width * min(2 ** i, 4) for i in range(depth + 1)]
        self.down = nn.ModuleList()
        c = cin
        for ch in chans[:-1]:
            self.down.append(ConvBlock(c, ch, leak, norm))
            c = ch
        # no norm at the bottleneck: it is 1x1 for 16x16 inputs
        self.bottom = ConvBlock(c + cond_dim, chans[-1], leak)
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        c = chans[-1]
        for ch in reversed(chans[:-1]):
            self.up.append(nn.ConvTranspose2d(c, ch, 2, stride=2))
            self.merge.append(ConvBlock(2 * ch, ch, leak, norm))
            c = ch
        self.head = nn.Conv2d(c, cout, 1)

    def forward(self, x, cond=None):
        h, w = x.shape[-2:]
        m = 2 ** self.depth
        if h % m or w % m:
            raise ShapeError(f"spatial dims {h}x{w} must be divisible by {m}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        if self.cond_dim:
            x = torch.cat([x, cond[:, :, None, None].expand(-1, -1, *x.shape[-2:])], 1)
        x = self.bottom(x)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips)):
            x = merge(torch.cat([up(x), skip], 1))
        return self.head(x)


class ContrastEncoder(nn.Module):
    """Conv-BatchNorm-LeakyReLU stack with a large first kernel, pooled to (mu, logvar).

    Batch norm rather than instance norm: per-image statistics would discard
    the global intensity scale, which is much of what separates one site's
    contrast from another's.
    """

    def __init__(self, width, kernel=9, leak=0.2):
        super().__init__()
        layers = []
        spec = [(1, width, kernel, 2), (width, 2 * width, 3, 2), (2 * width, 4 * width, 3, 2),
                (4 * width, 4 * width, 3, 1)]
        for cin, cout, k, s in spec:
            layers += [nn.Conv2d(cin, cout, k, stride=s, padding=k // 2), nn.BatchNorm2d(cout),
                       nn.LeakyReLU(leak)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(4 * width, 2 * THETA_DIM, 1)

    def forward(self, x):
        out = self.head(self.features(x)).mean(dim=(2, 3))
        mu, logvar = out[:, :THETA_DIM], out[:, THETA_DIM:]
        return mu, logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)


class ArtifactEncoder(nn.Module):
    """Four densely connected 3x3 conv layers, pooled to a 2-vector."""

    def __init__(self, growth=8, n_layers=4, leak=0.2):
        super().__init__()
        self.layers = nn.ModuleList()
        c = 1
        for _ in range(n_layers):
            self.layers.append(nn.Sequential(nn.Conv2d(c, growth, 3, padding=1), nn.LeakyReLU(leak)))
            c += growth
        self.head = nn.Conv2d(c, ETA_DIM, 1)

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, 1)))
        return self.head(torch.cat(feats, 1)).mean(dim=(2, 3))


class CodeHead(nn.Module):
    """FC map (theta, eta) -> d, used for both keys and queries."""

    def __init__(self, d=16, leak=0.2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(THETA_DIM + ETA_DIM, d), nn.LeakyReLU(leak), nn.Linear(d, d))

    def forward(self, theta, eta):
        return self.net(torch.cat([theta, eta], -1))


# ---------------------------------------------------------------------------
# full model

def _he_init(module: nn.Module, leak: float) -> None:
    # torch's default conv init shrinks activations by ~3x per layer, which
    # leaves the unnormalized decoder's output nearly independent of its input
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        mode = "fan_out" if isinstance(module, nn.ConvTranspose2d) else "fan_in"
        nn.init.kaiming_normal_(module.weight, a=leak, mode=mode, nonlinearity="leaky_relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class HarmonizationModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.anatomy_net = UNet(1, N_LEVELS, c.width, c.depth, leak=c.leak, norm=True)
        self.contrast_net = ContrastEncoder(c.width, c.contrast_kernel, c.leak)
        self.artifact_net = ArtifactEncoder(c.artifact_growth, 4, c.leak)
        self.decoder = UNet(N_LEVELS + THETA_DIM, 1, 2 * c.width, c.depth, cond_dim=THETA_DIM, leak=c.leak)
        self.key_head = CodeHead(c.key_dim, c.leak)
        self.query_head = CodeHead(c.key_dim, c.leak)
        self.apply(lambda mod: _he_init(mod, c.leak))

    @staticmethod
    def _check(x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % GRID_MULTIPLE or w % GRID_MULTIPLE:
            raise ShapeError(f"slice dims {h}x{w} must be divisible by {GRID_MULTIPLE}")

    def anatomy_logits(self, x):
        self._check(x)
        return self.anatomy_net(x)

    def anatomy_encode(self, x, temperature=1.0, mode="gumbel", generator=None, noise=None):
        """Anatomy map. ``mode``: 'gumbel' (noisy soft sample), 'soft' (no noise), 'hard' (argmax)."""
        logits = self.anatomy_logits(x)
        if mode == "gumbel":
            return gumbel_softmax(logits, temperature, generator=generator, noise=noise)
        if mode == "soft":
            return torch.softmax(logits / temperature, 1)
        if mode == "hard":
            return hard_onehot(logits)
        raise ValueError(f"unknown anatomy mode {mode!r}")

    def contrast_encode(self, x):
        self._check(x)
        return self.contrast_net(x)

    def artifact_encode(self, x):
        self._check(x)
        return self.artifact_net(x)

    def decode(self, beta, theta):
        if beta.dim() != 4 or beta.shape[1] != N_LEVELS:
            raise ShapeError(f"beta must be (B, {N_LEVELS}, H, W), got {tuple(beta.shape)}")
        if theta.shape != (beta.shape[0], THETA_DIM):
            raise ShapeError(f"theta must be (B, {THETA_DIM}), got {tuple(theta.shape)}")
        tmap = theta[:, :, None, None].expand(-1, -1, *beta.shape[-2:])
        out = self.decoder(torch.cat([beta, tmap], 1), theta)
        return CLIP_MAX * torch.sigmoid(out)

    def keys(self, theta, eta):
        return self.key_head(theta, eta)

    def query(self, theta, eta):
        return self.query_head(theta, eta)

    def non_attention_parameters(self):
        for name in ("anatomy_net", "contrast_net", "artifact_net", "decoder"):
            yield from getattr(self, name).parameters()


def sample_theta(mu: torch.Tensor, logvar: torch.Tensor, seed: int | None = None,
                 generator: torch.Generator | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Reparameterized draw ``mu + exp(logvar / 2) * eps``."""
    if eps is None:
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (all little-endian):
#   8 bytes  magic b"MRHCKPT\0"
#   uint32   format version
#   uint64   header length L
#   L bytes  UTF-8 JSON header, sorted keys, compact separators
#   blob     float32 row-major tensor data, concatenated in header order
# header: {"config", "config_digest", "extra", "seed", "step",
#          "tensors": [{"name", "shape", "offset"}]}  (offset in bytes into blob)

CKPT_MAGIC = b"MRHCKPT\0"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int
    seed: int
    extra: dict

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        src = ckpt.tensors[name]
        # ascontiguousarray promotes 0-d input to 1-d, so restore the shape
        arr = np.ascontiguousarray(src, dtype="<f4").reshape(np.shape(src))
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": ckpt.config,
        "config_digest": ckpt.digest,
        "extra": ckpt.extra,
        "seed": int(ckpt.seed),
        "step": int(ckpt.step),
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode())
    blob = memoryview(data)[20 + hlen:]
    tensors = {}
    for item in header["tensors"]:
        n = int(np.prod(item["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=item["offset"])
        tensors[item["name"]] = arr.reshape(item["shape"]).astype(np.float32)
    if config_digest(header["config"]) != header["config_digest"]:
        raise CheckpointError("stored config does not match its digest (corrupt file)")
    return Checkpoint(tensors, header["config"], header["step"], header["seed"], header["extra"])


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_digest: str | None = None, force: bool = False) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_digest is not None and ckpt.digest != expected_digest:
        if not force:
            raise CheckpointError(
                f"config digest mismatch: checkpoint {ckpt.digest[:12]} vs expected {expected_digest[:12]}")
    return ckpt


def model_tensors(model: nn.Module) -> dict[str, np.ndarray]:
    return {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def optimizer_tensors(model: nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            for key, val in state.items():
                val = torch.as_tensor(val)
                out[f"optim/{names[id(p)]}/{key}"] = val.detach().cpu().numpy().astype(np.float32)
    return out


def restore_model(model: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)


def restore_optimizer(model: nn.Module, optimizer: torch.optim.Optimizer, tensors: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for key, arr in tensors.items():
        if not key.startswith("optim/"):
            continue
        pname, _, skey = key[len("optim/"):].rpartition("/")
        p = params[pname]
        val = torch.from_numpy(arr.copy())
        optimizer.state[p][skey] = val if val.dim() else val.reshape(())


def build_model(config: dict | ModelConfig | None = None) -> HarmonizationModel:
    if isinstance(config, dict):
        config = ModelConfig(**config)
    return HarmonizationModel(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def init_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def stable_seed(*parts) -> int:
    """63-bit seed derived from arbitrary hashable parts."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & (2 ** 63 - 1)

