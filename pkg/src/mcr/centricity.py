"""Manipulation centricity: Grad-CAM heatmaps scored against ground-truth masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from mcr.encoder import preprocess
from mcr.errors import InputError, UndefinedCorrelationError, UnsupportedBackboneError

CENTRICITY_SCHEMA = "mcr-centricity-report-v1"
DEFAULT_THRESHOLD = 2

Target = Callable[[torch.Tensor], torch.Tensor]


def embedding_norm(z: torch.Tensor) -> torch.Tensor:
    """Default Grad-CAM target: per-sample L2 norm of the embedding."""
    return torch.linalg.vector_norm(z, dim=1)


@dataclass
class CamResult:
    """``raw`` is the normalized float map in [0, 255] before quantization."""

    raw: np.ndarray
    heatmap: np.ndarray


def grad_cam(
    encoder,
    images: torch.Tensor,
    target: Target | None = None,
    output_size: tuple[int, int] | None = None,
) -> CamResult:
    """Gradient-weighted activation maps for a batch of preprocessed images.

    Channel weights are the spatial mean of d(target)/d(activation) over the
    encoder's last convolutional feature map; the map is ReLU of the weighted
    channel sum, bilinearly upsampled, then min-max scaled to [0, 255] per
    image.  ``target`` maps the ``(N, D)`` embedding to ``N`` scalars and must
    treat samples independently (the batch is backpropagated as one sum).
    A single ``(3, H, W)`` image is accepted and gives unbatched output.
    """
    if not (hasattr(encoder, "features") and hasattr(encoder, "head")):
        raise UnsupportedBackboneError(
            f"{type(encoder).__name__} has no convolutional feature map to attribute"
        )
    single = images.ndim == 3
    if single:
        images = images.unsqueeze(0)
    if images.ndim != 4:
        raise InputError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
    target = target or embedding_norm
    out_h, out_w = output_size or images.shape[-2:]

    with torch.no_grad():
        fmap = encoder.features(images)
    if fmap.ndim != 4:
        raise UnsupportedBackboneError("feature map is not (N, C, h, w)")
    with torch.enable_grad():
        fmap = fmap.requires_grad_(True)
        scores = target(encoder.head(fmap))
        if scores.shape != (images.shape[0],):
            raise InputError(f"target must return one scalar per image, got {tuple(scores.shape)}")
        (grads,) = torch.autograd.grad(scores.sum(), fmap, allow_unused=True)
    if grads is None:
        grads = torch.zeros_like(fmap)

    with torch.no_grad():
        weights = grads.mean(dim=(2, 3), keepdim=True)
        cam = torch.relu((weights * fmap).sum(dim=1, keepdim=True))
        cam = F.interpolate(cam, size=(out_h, out_w), mode="bilinear", align_corners=False)
        cam = cam.squeeze(1).to(torch.float64)
        lo = cam.amin(dim=(1, 2), keepdim=True)
        hi = cam.amax(dim=(1, 2), keepdim=True)
        span = hi - lo
        scaled = torch.where(span > 0, (cam - lo) / span.clamp_min(1e-300), torch.zeros_like(cam))
        raw = (scaled * 255.0).numpy()
    heat = np.floor(raw + 1e-9).clip(0, 255).astype(np.uint8)
    if single:
        return CamResult(raw[0], heat[0])
    return CamResult(raw, heat)


def binarize(heatmap: np.ndarray, threshold: int = DEFAULT_THRESHOLD) -> np.ndarray:
    return np.asarray(heatmap) >= threshold


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


@dataclass
class FrameScore:
    trajectory_id: str
    frame: int
    jaccard: float


@dataclass
class CentricityResult:
    per_frame: list[FrameScore]
    mean: float
    empty_union_frames: int = 0


@dataclass
class EvalFrame:
    image: np.ndarray
    mask: np.ndarray
    trajectory_id: str = ""
    frame: int = 0


def eval_frames_from_trajectories(trajectories: Iterable) -> list[EvalFrame]:
    frames = []
    for traj in trajectories:
        if traj.masks is None:
            raise InputError(f"trajectory {traj.id} has no masks")
        for i, (img, mask) in enumerate(zip(traj.frames, traj.masks)):
            frames.append(EvalFrame(img, mask, traj.id, i))
    return frames


def manipulation_centricity(
    encoder,
    eval_set: Sequence[EvalFrame | tuple[np.ndarray, np.ndarray]],
    target: Target | None = None,
    threshold: int = DEFAULT_THRESHOLD,
    batch_size: int = 128,
) -> CentricityResult:
    """Mean Jaccard between binarized Grad-CAM maps and ground-truth masks."""
    if len(eval_set) == 0:
        raise InputError("eval set is empty")
    frames = [f if isinstance(f, EvalFrame) else EvalFrame(f[0], f[1], "", i)
              for i, f in enumerate(eval_set)]
    was_training = encoder.training
    encoder.eval()
    input_size = encoder.config.input_size
    scores: list[FrameScore] = []
    empty = 0
    try:
        for start in range(0, len(frames), batch_size):
            chunk = frames[start:start + batch_size]
            by_shape: dict[tuple, list[int]] = {}
            for i, f in enumerate(chunk):
                if f.mask.shape != f.image.shape[:2]:
                    raise InputError(
                        f"mask {f.mask.shape} does not match image {f.image.shape[:2]}"
                    )
                by_shape.setdefault(f.image.shape[:2], []).append(i)
            results: dict[int, float] = {}
            for shape, idx in by_shape.items():
                imgs = np.stack([chunk[i].image for i in idx])
                x = preprocess(imgs, input_size)
                cams = grad_cam(encoder, x, target, output_size=shape)
                for j, i in enumerate(idx):
                    pred = binarize(cams.heatmap[j], threshold)
                    gt = np.asarray(chunk[i].mask, dtype=bool)
                    if not pred.any() and not gt.any():
                        empty += 1
                    results[i] = jaccard(pred, gt)
            for i, f in enumerate(chunk):
                scores.append(FrameScore(f.trajectory_id, f.frame, float(results[i])))
    finally:
        encoder.train(was_training)
    mean = float(np.mean([s.jaccard for s in scores]))
    return CentricityResult(scores, mean, empty)


def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"x and y must be 1-D of equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InputError("need at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant sequence")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class CentricityReport:
    method: str
    per_frame: list[FrameScore]
    centricity_mean: float
    success_rates: list[dict] = field(default_factory=list)
    pearson_r: float | None = None
    empty_union_frames: int = 0

    @classmethod
    def from_result(cls, method: str, result: CentricityResult) -> "CentricityReport":
        return cls(method, result.per_frame, result.mean, empty_union_frames=result.empty_union_frames)

    def to_json(self) -> dict:
        return {
            "schema": CENTRICITY_SCHEMA,
            "method": self.method,
            "per_frame": [
                {"trajectory_id": s.trajectory_id, "frame": s.frame, "jaccard": s.jaccard}
                for s in self.per_frame
            ],
            "centricity_mean": self.centricity_mean,
            "success_rates": list(self.success_rates),
            "pearson_r": self.pearson_r,
            "empty_union_frames": self.empty_union_frames,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CentricityReport":
        return cls(
            method=d["method"],
            per_frame=[FrameScore(**p) for p in d["per_frame"]],
            centricity_mean=float(d["centricity_mean"]),
            success_rates=list(d.get("success_rates", [])),
            pearson_r=d.get("pearson_r"),
            empty_union_frames=int(d.get("empty_union_frames", 0)),
        )
