"""Pre-training loop over the three objectives."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from mcr.encoder import (
    ActorHead,
    ChunkProjector,
    Encoder,
    EncoderConfig,
    build_encoder,
    build_heads,
    predict_action,
    preprocess,
    project_chunk,
    save_checkpoint,
)
from mcr.losses import LossConfig, LossInputs, total_loss
from mcr.trajectory_data import ChunkSpec, Trajectory, TrainingBatch, sample_training_batch

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, terms: dict):
        super().__init__(f"non-finite loss at step {step}: {terms}")
        self.step = step


@dataclass
class PretrainSettings:
    steps: int = 500_000
    batch_size: int = 32
    learning_rate: float = 1e-4
    augment: bool = True
    crop_scale: tuple[float, float] = (0.5, 1.0)
    checkpoint_every: int = 500
    log_every: int = 100
    seed: int = 0


@dataclass
class PretrainResult:
    encoder: Encoder
    projector: ChunkProjector
    actor: ActorHead
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    seconds: float = 0.0


def _images(batch: TrainingBatch, names: Sequence[str], input_size: int, augment: bool,
            rng: np.random.Generator, scale) -> dict[str, torch.Tensor]:
    if not names:
        return {}
    stacked = np.concatenate([getattr(batch, f"images_{n}") for n in names])
    x = preprocess(stacked, input_size, augment=augment, rng=rng, scale=scale)
    return dict(zip(names, x.chunk(len(names))))


def training_step(
    batch: TrainingBatch,
    encoder: Encoder,
    projector: ChunkProjector,
    actor: ActorHead,
    losses: LossConfig,
    settings: PretrainSettings,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Forward one batch and return the total loss and its breakdown."""
    names = []
    if losses.enable_dyn or losses.enable_act:
        names.append("t")
    if losses.enable_tcl:
        names += ["u", "v", "w"]
    imgs = _images(batch, names, encoder.config.input_size, settings.augment, rng,
                   settings.crop_scale)
    z = dict(zip(imgs, encoder(torch.cat(list(imgs.values()))).chunk(len(imgs))))
    inputs = LossInputs()
    if losses.enable_dyn:
        inputs.z_t = z["t"]
        inputs.h_pos = project_chunk(projector, torch.from_numpy(batch.chunks_t))
        inputs.h_neg = project_chunk(projector, torch.from_numpy(batch.chunks_k))
    if losses.enable_act:
        inputs.actions = torch.from_numpy(batch.actions_t)
        inputs.predicted_actions = predict_action(actor, z["t"])
    if losses.enable_tcl:
        inputs.z_u, inputs.z_v, inputs.z_w = z["u"], z["v"], z["w"]
        inputs.z_neg = z["u"][torch.from_numpy(batch.negative_index)]
        inputs.video_ids = batch.trajectory_ids
    return total_loss(inputs, losses)


def pretrain(
    dataset: Sequence[Trajectory],
    encoder_config: EncoderConfig,
    spec: ChunkSpec,
    losses: LossConfig,
    settings: PretrainSettings,
    checkpoint_dir: str | Path | None = None,
    on_log: Callable[[dict], None] | None = None,
) -> PretrainResult:
    """Adam on the unit-weighted objective sum; the last checkpoint is the result."""
    rng = np.random.default_rng(settings.seed)
    encoder = build_encoder(encoder_config, seed=settings.seed)
    projector, actor = build_heads(encoder_config, spec, seed=settings.seed)
    params = list(encoder.parameters()) + list(projector.parameters()) + list(actor.parameters())
    optim = torch.optim.Adam(params, lr=settings.learning_rate)
    encoder.train()
    history: list[dict] = []
    checkpoints: list[Path] = []
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    for step in range(settings.steps + 1):
        batch = sample_training_batch(dataset, settings.batch_size, spec, rng)
        loss, terms = training_step(batch, encoder, projector, actor, losses, settings, rng)
        record = {"step": step, "total": loss.item()}
        record.update({k: v.item() for k, v in terms.items()})
        if not all(math.isfinite(v) for k, v in record.items() if k != "step"):
            raise NonFiniteLossError(step, record)
        history.append(record)
        if on_log is not None and (step % settings.log_every == 0 or step == settings.steps):
            on_log(record)
        if step == settings.steps:
            break  # the last record is the loss of the final weights
        optim.zero_grad(set_to_none=True)
        loss.backward()
        optim.step()
        done = step + 1
        if ckpt_dir is not None and done % settings.checkpoint_every == 0 and done < settings.steps:
            path = ckpt_dir / f"step_{done:07d}.pt"
            save_checkpoint(path, encoder, projector, actor, spec, {"step": done})
            checkpoints.append(path)
    if ckpt_dir is not None:
        path = ckpt_dir / "final.pt"
        save_checkpoint(path, encoder, projector, actor, spec, {"step": settings.steps})
        checkpoints.append(path)
    encoder.eval()
    return PretrainResult(encoder, projector, actor, history, checkpoints,
                          time.perf_counter() - start)
