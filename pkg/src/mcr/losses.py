"""Pre-training objectives: dynamics alignment, action prediction, time contrast.

Similarity everywhere is the negative Euclidean distance.  The contrastive
terms are cross-entropy over a handful of logits with the positive in slot 0,
evaluated through ``logsumexp`` so large distances do not overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from mcr.errors import ConfigError, InputError

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossConfig:
    enable_dyn: bool = True
    enable_act: bool = True
    enable_tcl: bool = True
    reduction: str = "mean"
    # use every other-video z_u in the batch as a tcl negative instead of one
    tcl_all_negatives: bool = False

    def __post_init__(self) -> None:
        if not (self.enable_dyn or self.enable_act or self.enable_tcl):
            raise ConfigError("at least one loss term must be enabled")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")

    @property
    def enabled(self) -> tuple[str, ...]:
        names = []
        if self.enable_dyn:
            names.append("dyn")
        if self.enable_act:
            names.append("act")
        if self.enable_tcl:
            names.append("tcl")
        return tuple(names)


def _same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise InputError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def _reduce(per_sample: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    raise InputError(f"unknown reduction {reduction!r}")


def negative_l2_similarity(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _same_shape(x, y)
    return -torch.linalg.vector_norm(x - y, dim=-1)


def info_nce(logits: torch.Tensor) -> torch.Tensor:
    """Per-row ``-log softmax(logits)[0]``."""
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def dynamics_alignment_loss(
    z: torch.Tensor, h_pos: torch.Tensor, h_neg: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    _same_shape(z, h_pos, h_neg)
    logits = torch.stack(
        [negative_l2_similarity(z, h_pos), negative_l2_similarity(z, h_neg)], dim=-1
    )
    return _reduce(info_nce(logits), reduction)


def action_prediction_loss(
    a: torch.Tensor, a_hat: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Squared error, averaged over action dims per sample then reduced over the batch.

    With ``mean`` this is the mean over all elements.
    """
    _same_shape(a, a_hat)
    sq = (a - a_hat) ** 2
    if sq.ndim > 1:
        sq = sq.reshape(sq.shape[0], -1).mean(dim=1)
    return _reduce(sq, reduction)


def time_contrastive_loss(
    z_u: torch.Tensor,
    z_v: torch.Tensor,
    z_w: torch.Tensor,
    z_neg: torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """Anchor ``z_u``; positive ``z_v``; negatives ``z_w`` and a cross-video ``z_neg``."""
    _same_shape(z_u, z_v, z_w, z_neg)
    logits = torch.stack(
        [
            negative_l2_similarity(z_u, z_v),
            negative_l2_similarity(z_u, z_w),
            negative_l2_similarity(z_u, z_neg),
        ],
        dim=-1,
    )
    return _reduce(info_nce(logits), reduction)


def time_contrastive_loss_all_negatives(
    z_u: torch.Tensor,
    z_v: torch.Tensor,
    z_w: torch.Tensor,
    video_ids: list,
    reduction: str = "mean",
) -> torch.Tensor:
    """Variant where every other-video anchor in the batch is a negative.

    Rows with no other-video element fall back to the single ``z_w`` negative.
    """
    _same_shape(z_u, z_v, z_w)
    B = z_u.shape[0]
    if len(video_ids) != B:
        raise InputError("need one video id per batch element")
    pair = -torch.cdist(z_u, z_u)
    ids = list(video_ids)
    other = torch.tensor([[ids[i] != ids[j] for j in range(B)] for i in range(B)])
    pair = pair.masked_fill(~other, float("-inf"))
    logits = torch.cat(
        [
            negative_l2_similarity(z_u, z_v).unsqueeze(1),
            negative_l2_similarity(z_u, z_w).unsqueeze(1),
            pair,
        ],
        dim=1,
    )
    return _reduce(info_nce(logits), reduction)


@dataclass
class LossInputs:
    """Everything total_loss may need from one forward pass."""

    z_t: torch.Tensor | None = None
    h_pos: torch.Tensor | None = None
    h_neg: torch.Tensor | None = None
    actions: torch.Tensor | None = None
    predicted_actions: torch.Tensor | None = None
    z_u: torch.Tensor | None = None
    z_v: torch.Tensor | None = None
    z_w: torch.Tensor | None = None
    z_neg: torch.Tensor | None = None
    video_ids: list | None = None


def total_loss(
    outputs: LossInputs, config: LossConfig
) -> tuple[torch.Tensor, Mapping[str, torch.Tensor]]:
    """Unit-weighted sum of the enabled terms plus a per-term breakdown.

    Disabled terms are absent from the breakdown.
    """
    terms: dict[str, torch.Tensor] = {}
    if config.enable_dyn:
        terms["dyn"] = dynamics_alignment_loss(
            outputs.z_t, outputs.h_pos, outputs.h_neg, config.reduction
        )
    if config.enable_act:
        terms["act"] = action_prediction_loss(
            outputs.actions, outputs.predicted_actions, config.reduction
        )
    if config.enable_tcl:
        if config.tcl_all_negatives:
            terms["tcl"] = time_contrastive_loss_all_negatives(
                outputs.z_u, outputs.z_v, outputs.z_w, outputs.video_ids, config.reduction
            )
        else:
            terms["tcl"] = time_contrastive_loss(
                outputs.z_u, outputs.z_v, outputs.z_w, outputs.z_neg, config.reduction
            )
    total = sum(terms.values())
    return total, terms
