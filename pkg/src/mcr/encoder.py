"""Visual encoder, chunk projector, actor head, preprocessing and checkpoints.

Every backbone exposes ``features(x) -> (N, C, h, w)`` and
``head(fmap) -> (N, feature_dim)``; ``forward`` is their composition.  The
split is what Grad-CAM hooks into.
"""

from __future__ import annotations

import contextlib
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torchvision
from torchvision.ops import roi_align

from mcr.errors import FormatError, InputError, SpecError
from mcr.trajectory_data import ChunkSpec

CHECKPOINT_FORMAT = "mcr-ckpt-v1"
RESNET_FEATURE_DIMS = {18: 512, 34: 512, 50: 2048}
TINY_CHANNELS = (16, 32, 32, 32)
TINY_STRIDES = (2, 2, 1, 1)
TINY_KERNELS = (3, 3, 1, 1)


@dataclass(frozen=True)
class EncoderConfig:
    """``backbone`` is 18, 34, 50, ``"tiny"`` or ``"mask-oracle"``.

    ``feature_dim=None`` picks the backbone's native width (512/2048 for the
    residual nets, 64 for tiny).  ``mask-oracle`` is a parameter-free colour
    detector for the synthetic benchmark whose Grad-CAM equals the
    ground-truth mask; it exists to test the centricity pipeline.
    """

    backbone: int | str = 50
    feature_dim: int | None = None
    input_size: int = 224
    # subtracted from the [0, 1] pixels inside the encoder; None = no shift
    pixel_mean: float | None = None

    def __post_init__(self) -> None:
        if self.backbone not in (18, 34, 50, "tiny", "mask-oracle"):
            raise SpecError(f"unknown backbone {self.backbone!r}")
        if self.feature_dim is not None and self.feature_dim <= 0:
            raise SpecError("feature_dim must be positive")
        if self.input_size <= 0 or self.input_size % self.total_stride:
            raise SpecError(
                f"input_size {self.input_size} not divisible by stride {self.total_stride}"
            )

    @property
    def total_stride(self) -> int:
        if self.backbone == "tiny":
            return math.prod(TINY_STRIDES)
        if self.backbone == "mask-oracle":
            return 1
        return 32

    @property
    def resolved_feature_dim(self) -> int:
        if self.backbone == "mask-oracle":
            return 1
        if self.feature_dim is not None:
            return self.feature_dim
        if self.backbone == "tiny":
            return 64
        return RESNET_FEATURE_DIMS[int(self.backbone)]


class TinyConvNet(nn.Module):
    """Conv-BN-ReLU blocks, average-pooled into a linear projection.

    Global pooling keeps the linear head from keying on absolute pixel
    positions, so the gradient a Grad-CAM sees is spread by channel rather
    than by location.
    """

    def __init__(self, input_size: int, feature_dim: int):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for c_out, stride, k in zip(TINY_CHANNELS, TINY_STRIDES, TINY_KERNELS):
            layers += [nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, bias=False),
                       nn.BatchNorm2d(c_out), nn.ReLU()]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in, feature_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.fc(fmap.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class ResNetBackbone(nn.Module):
    def __init__(self, depth: int, feature_dim: int):
        super().__init__()
        net = getattr(torchvision.models, f"resnet{depth}")(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.Sequential(net.layer1, net.layer2, net.layer3, net.layer4)
        native = RESNET_FEATURE_DIMS[depth]
        self.proj = nn.Identity() if feature_dim == native else nn.Linear(native, feature_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(self.stem(x))

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.proj(fmap.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class MaskOracleEncoder(nn.Module):
    """Detects the synthetic effector (red) and object (blue) colours.

    Feature map channels are ``relu(R - G - 0.3)`` and ``relu(B - G - 0.3)``;
    the embedding is their spatial sum, so the CAM is positive exactly on the
    rendered foreground.
    """

    def __init__(self) -> None:
        super().__init__()
        conv = nn.Conv2d(3, 2, 1)
        with torch.no_grad():
            conv.weight.copy_(torch.tensor([[1.0, -1.0, 0.0], [0.0, -1.0, 1.0]]).view(2, 3, 1, 1))
            conv.bias.fill_(-0.3)
        conv.requires_grad_(False)
        self.conv = conv

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.conv(x))

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        return fmap.sum(dim=(1, 2, 3)).unsqueeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class Encoder(nn.Module):
    """Backbone wrapper carrying its config."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        if config.backbone == "tiny":
            self.backbone = TinyConvNet(config.input_size, config.resolved_feature_dim)
        elif config.backbone == "mask-oracle":
            self.backbone = MaskOracleEncoder()
        else:
            self.backbone = ResNetBackbone(int(config.backbone), config.resolved_feature_dim)

    @property
    def feature_dim(self) -> int:
        return self.config.resolved_feature_dim

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.pixel_mean is not None:
            x = x - self.config.pixel_mean
        return self.backbone.features(x)

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        return self.backbone.head(fmap)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class ChunkProjector(nn.Module):
    """chunk_dim -> 1024 -> ReLU -> feature_dim."""

    def __init__(self, chunk_dim: int, feature_dim: int, hidden: int = 1024, zero_init_last: bool = False):
        super().__init__()
        self.in_dim = chunk_dim
        self.net = nn.Sequential(nn.Linear(chunk_dim, hidden), nn.ReLU(), nn.Linear(hidden, feature_dim))
        if zero_init_last:
            nn.init.zeros_(self.net[2].weight)
            nn.init.zeros_(self.net[2].bias)

    def forward(self, chunks: torch.Tensor) -> torch.Tensor:
        return self.net(chunks)


class ActorHead(nn.Module):
    def __init__(self, feature_dim: int, action_dim: int):
        super().__init__()
        self.in_dim = feature_dim
        self.trunk = nn.Sequential(nn.Linear(feature_dim, 50), nn.LayerNorm(50), nn.Tanh())
        self.policy = nn.Sequential(
            nn.Linear(50, 512),
            nn.ReLU(),
            nn.Linear(512, 512),
            nn.ReLU(),
            nn.Linear(512, action_dim),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.policy(self.trunk(z))


@contextlib.contextmanager
def _seeded(seed: int | None):
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_encoder(config: EncoderConfig, seed: int | None = None) -> Encoder:
    with _seeded(seed):
        return Encoder(config)


def build_heads(
    config: EncoderConfig, spec: ChunkSpec, seed: int | None = None
) -> tuple[ChunkProjector, ActorHead]:
    with _seeded(None if seed is None else seed + 1):
        projector = ChunkProjector(spec.dim, config.resolved_feature_dim)
        actor = ActorHead(config.resolved_feature_dim, spec.action_dim)
    return projector, actor


# ------------------------------------------------------------- preprocessing


def sample_crop_box(
    height: int,
    width: int,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.5, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> tuple[int, int, int, int]:
    """Random-resized-crop box ``(top, left, h, w)``.

    Follows the usual ten-attempt rejection scheme with a centre-crop fallback.
    A candidate is accepted only if its rounded area still lies in ``scale``.
    """
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height and scale[0] <= h * w / area <= scale[1]:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < min(ratio):
        w = width
        h = int(round(w / min(ratio)))
    elif in_ratio > max(ratio):
        h = height
        w = int(round(h * max(ratio)))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _to_tensor(images: Any) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images
    else:
        x = torch.from_numpy(np.ascontiguousarray(np.asarray(images)))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise InputError(f"expected (N, H, W, 3) images, got {tuple(x.shape)}")
    if x.shape[1] == 0 or x.shape[2] == 0:
        raise InputError("zero-sized image")
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    return x.permute(0, 3, 1, 2).contiguous()


def preprocess(
    images: Any,
    input_size: int,
    augment: bool = False,
    rng: np.random.Generator | None = None,
    scale: tuple[float, float] = (0.5, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """``(N, H, W, 3)`` uint8 images -> ``(N, 3, S, S)`` floats in [0, 1].

    With ``augment`` each image gets its own random resized crop; otherwise the
    whole image is resized.  Both paths share the same bilinear sampler.
    """
    x = _to_tensor(images).to(dtype)
    n, _, H, W = x.shape
    if augment:
        if rng is None:
            raise InputError("augment=True needs an rng")
        boxes = [sample_crop_box(H, W, rng, scale, ratio) for _ in range(n)]
    else:
        boxes = [(0, 0, H, W)] * n
    if not augment and H == input_size and W == input_size:
        return x
    rois = torch.tensor(
        [[i, left, top, left + w, top + h] for i, (top, left, h, w) in enumerate(boxes)],
        dtype=dtype,
    )
    out = roi_align(x, rois, output_size=(input_size, input_size), spatial_scale=1.0,
                    sampling_ratio=0, aligned=True)
    return out.clamp_(0.0, 1.0)


def _check_images(encoder: Encoder, images: torch.Tensor) -> None:
    size = encoder.config.input_size
    if images.ndim != 4 or tuple(images.shape[1:]) != (3, size, size):
        raise InputError(f"expected (N, 3, {size}, {size}) input, got {tuple(images.shape)}")


def encode(encoder: Encoder, images: torch.Tensor) -> torch.Tensor:
    _check_images(encoder, images)
    return encoder(images)


def project_chunk(projector: ChunkProjector, chunks: torch.Tensor) -> torch.Tensor:
    if chunks.ndim != 2 or chunks.shape[1] != projector.in_dim:
        raise InputError(f"chunk dim {tuple(chunks.shape)} != projector input {projector.in_dim}")
    return projector(chunks)


def predict_action(actor: ActorHead, z: torch.Tensor, return_trunk: bool = False):
    if z.ndim != 2 or z.shape[1] != actor.in_dim:
        raise InputError(f"embedding dim {tuple(z.shape)} != actor input {actor.in_dim}")
    trunk = actor.trunk(z)
    action = actor.policy(trunk)
    return (action, trunk) if return_trunk else action


@torch.no_grad()
def embed_frames(
    encoder: Encoder, frames: np.ndarray, batch_size: int = 256
) -> torch.Tensor:
    """Eval-mode embeddings of raw uint8 frames, without augmentation."""
    was_training = encoder.training
    encoder.eval()
    out = []
    for start in range(0, len(frames), batch_size):
        x = preprocess(frames[start:start + batch_size], encoder.config.input_size)
        out.append(encoder(x))
    encoder.train(was_training)
    if not out:
        return torch.zeros(0, encoder.feature_dim)
    return torch.cat(out)


# --------------------------------------------------------------- checkpoints


def _config_header(config: EncoderConfig, spec: ChunkSpec, extra: dict | None) -> str:
    header = {"format": CHECKPOINT_FORMAT, "encoder": asdict(config), "chunk": asdict(spec)}
    if extra:
        header["extra"] = extra
    return json.dumps(header, sort_keys=True)


def save_checkpoint(
    path: str | os.PathLike,
    encoder: Encoder,
    projector: ChunkProjector | None,
    actor: ActorHead | None,
    spec: ChunkSpec,
    extra: dict | None = None,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "header": _config_header(encoder.config, spec, extra),
        "encoder": encoder.state_dict(),
        "projector": None if projector is None else projector.state_dict(),
        "actor": None if actor is None else actor.state_dict(),
    }
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    encoder: Encoder
    projector: ChunkProjector | None
    actor: ActorHead | None
    spec: ChunkSpec
    header: dict


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: missing {CHECKPOINT_FORMAT} tag")
    header = json.loads(payload["header"])
    enc_cfg = header["encoder"]
    config = EncoderConfig(**enc_cfg)
    spec = ChunkSpec(**header["chunk"])
    encoder = Encoder(config)
    encoder.load_state_dict(payload["encoder"])
    projector = actor = None
    if payload.get("projector") is not None:
        projector = ChunkProjector(spec.dim, config.resolved_feature_dim)
        projector.load_state_dict(payload["projector"])
    if payload.get("actor") is not None:
        actor = ActorHead(config.resolved_feature_dim, spec.action_dim)
        actor.load_state_dict(payload["actor"])
    encoder.eval()
    return Checkpoint(encoder, projector, actor, spec, header)


def parameter_bytes(module: nn.Module) -> bytes:
    """Concatenated raw bytes of every parameter and buffer, for freeze checks."""
    chunks: Sequence[torch.Tensor] = [t.detach().cpu().contiguous() for t in module.state_dict().values()]
    return b"".join(t.numpy().tobytes() for t in chunks)
