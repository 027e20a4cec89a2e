"""3D U-Net backbone with a voxel projection head, plus checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    """U-Net hyperparameters.

    ``projection_tap`` selects the decoder stage feeding the projection
    head, counting the bottleneck as stage 1 of the upsampling path; its
    output stride is ``2 ** (depth - projection_tap)``. The default
    (stage 2 at depth 4) gives stride 4.
    """

    in_channels: int = 1
    num_classes: int = 3
    base_channels: int = 8
    depth: int = 4
    embedding_dim: int = 64
    projection_tap: int = 2

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError("depth must be >= 3")
        if self.embedding_dim < 8:
            raise ValueError("embedding_dim must be >= 8")
        if not 1 <= self.projection_tap <= self.depth:
            raise ValueError(f"projection_tap must lie in [1, {self.depth}]")
        if self.num_classes < 2 or self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("num_classes >= 2, in_channels >= 1, base_channels >= 1 required")

    @property
    def embedding_stride(self) -> int:
        return 2 ** (self.depth - self.projection_tap)

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class SegOutput(NamedTuple):
    logits: torch.Tensor
    probs: torch.Tensor
    embeddings: Optional[torch.Tensor]


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1, bias=False),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1, bias=False),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


class ProjectionHead(nn.Module):
    def __init__(self, cin, dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(cin, cin, 1, bias=False),
            nn.InstanceNorm3d(cin, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(cin, dim, 1),
        )

    def forward(self, x):
        return F.normalize(self.net(x), dim=1, eps=1e-12)


class UNet3D(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList(
            _conv_block(cfg.in_channels if i == 0 else chans[i - 1], chans[i]) for i in range(cfg.depth)
        )
        # decoders[j] lifts level depth-1-j to level depth-2-j
        self.decoders = nn.ModuleList(
            _conv_block(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(cfg.depth - 1))
        )
        self.head = nn.Conv3d(chans[0], cfg.num_classes, 1)
        tap_level = cfg.depth - cfg.projection_tap
        self.projector = ProjectionHead(chans[tap_level], cfg.embedding_dim)

    def check_shape(self, x: torch.Tensor):
        if x.ndim != 5:
            raise ShapeError(f"expected input (B, C, H, W, D), got {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        k = self.cfg.divisor
        for axis, n in enumerate(x.shape[2:]):
            if n % k:
                raise ShapeError(f"spatial axis {axis} has size {n}, not divisible by {k}")

    def forward(self, x: torch.Tensor, with_embeddings: bool = True) -> SegOutput:
        self.check_shape(x)
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool3d(x, 2)
            x = enc(x)
            skips.append(x)
        tap_stage = self.cfg.projection_tap - 1  # 0 == bottleneck output
        feats = x if tap_stage == 0 else None
        for j, dec in enumerate(self.decoders):
            skip = skips[-2 - j]
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
            if j + 1 == tap_stage:
                feats = x
        logits = self.head(x)
        emb = self.projector(feats) if with_embeddings else None
        return SegOutput(logits, torch.softmax(logits, dim=1), emb)

    @torch.no_grad()
    def predict_probs(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x, with_embeddings=False).probs


def build_model(cfg: NetworkConfig, seed: int = 0) -> UNet3D:
    """Instantiate with weights drawn from a private generator seeded by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet3D(cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints: a directory with weights.pt and manifest.json
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: UNet3D, step: int, seeds: dict, optimizer=None,
                    extra: Optional[dict] = None) -> Path:
    """Atomically write a checkpoint directory (temp dir then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    state = {"model": model.state_dict()}
    if optimizer is not None:
        state["optimizer"] = optimizer.state_dict()
    torch.save(state, tmp / "weights.pt")
    manifest = {
        "format": "rcps-checkpoint/1",
        "network": model.cfg.to_dict(),
        "step": int(step),
        "seeds": seeds,
        "parameter_hash": parameter_hash(model),
    }
    if extra:
        manifest.update(extra)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def read_checkpoint_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mpath}")
    return json.loads(mpath.read_text())


def load_checkpoint(path, expected: Optional[NetworkConfig] = None):
    """Return ``(model, manifest, state)``; ``state`` may carry optimizer state.

    If ``expected`` is given the stored network config must equal it.
    """
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    cfg = NetworkConfig(**manifest["network"])
    if expected is not None and cfg != expected:
        diff = {k: (v, getattr(expected, k)) for k, v in cfg.to_dict().items() if getattr(expected, k) != v}
        raise CheckpointMismatchError(f"checkpoint network config differs: {diff}")
    state = torch.load(path / "weights.pt", map_location="cpu", weights_only=True)
    model = UNet3D(cfg)
    model.load_state_dict(state["model"])
    return model, manifest, state
