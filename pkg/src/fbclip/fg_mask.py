"""Soft foreground mask from four per-token anomaly indicators.

All functions take batched tensors -- patches (B, L, C), cls (B, C) -- and
return (B, L).  The mask is built from frozen encoder statistics and is
always detached from the autograd graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .backbone import TokenStack

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8
COS_EPS = 1e-8
FOREGROUND, BACKGROUND = 1.0, 0.5


@dataclass(frozen=True)
class IndicatorWeights:
    a_local: float = 0.3
    a_center: float = 0.3
    a_cls: float = 0.3
    a_temp: float = 0.1

    def without_temporal(self) -> "IndicatorWeights":
        """Spread the temporal weight proportionally over the other three."""
        rest = self.a_local + self.a_center + self.a_cls
        scale = (rest + self.a_temp) / rest
        return IndicatorWeights(self.a_local * scale, self.a_center * scale, self.a_cls * scale, 0.0)


@dataclass
class SoftForegroundMask:
    values: torch.Tensor  # (B, L), entries exactly 0.5 or 1.0

    def __post_init__(self):
        v = self.values
        if not torch.all((v == FOREGROUND) | (v == BACKGROUND)):
            raise ValueError("soft foreground mask entries must be 0.5 or 1.0")


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine along the last dim; a zero-norm operand gives 0."""
    na = a.norm(dim=-1).clamp_min(COS_EPS)
    nb = b.norm(dim=-1).clamp_min(COS_EPS)
    return (a * b).sum(-1) / (na * nb)


def local_saliency(patches: torch.Tensor) -> torch.Tensor:
    """Distance from each token to the kernel-3 moving average (replicate pad)."""
    padded = torch.cat([patches[:, :1], patches, patches[:, -1:]], dim=1)
    avg = (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3.0
    return (patches - avg).norm(dim=-1)


def center_distance(patches: torch.Tensor, center: torch.Tensor | None = None) -> torch.Tensor:
    if center is None:
        center = patches.mean(dim=1)
    if center.ndim == 1:
        center = center.expand(patches.shape[0], -1)
    return (patches - center.unsqueeze(1)).norm(dim=-1)


def cls_inconsistency(patches: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
    if (patches.norm(dim=-1) == 0).any() or (cls.norm(dim=-1) == 0).any():
        logger.debug("zero-norm token in cls_inconsistency; cosine taken as 0")
    return 1.0 - cosine(patches, cls.unsqueeze(1))


def temporal_variation(curr: torch.Tensor, prev: torch.Tensor | None):
    """Per-token change from the previous tapped layer.

    Returns ``(values, available)``; without a previous layer the values are
    zeros and ``available`` is False.
    """
    if prev is None:
        return torch.zeros(curr.shape[:2], dtype=curr.dtype), False
    if prev.shape != curr.shape:
        raise ValueError(f"layer shapes differ: {tuple(prev.shape)} vs {tuple(curr.shape)}")
    return (curr - prev).norm(dim=-1), True


def minmax_normalize(v: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    lo = v.min(dim=-1, keepdim=True).values
    hi = v.max(dim=-1, keepdim=True).values
    return (v - lo) / (hi - lo + eps)


def anomaly_score(stack: TokenStack, prev_stack: TokenStack | None = None,
                  weights: IndicatorWeights = IndicatorWeights(), center=None) -> torch.Tensor:
    """Weighted sum of the four min-max normalised indicators, (B, L)."""
    with torch.no_grad():
        x = stack.patches
        temp, has_prev = temporal_variation(x, None if prev_stack is None else prev_stack.patches)
        w = weights if has_prev else weights.without_temporal()
        score = (
            w.a_local * minmax_normalize(local_saliency(x))
            + w.a_center * minmax_normalize(center_distance(x, center))
            + w.a_cls * minmax_normalize(cls_inconsistency(x, stack.cls))
        )
        if has_prev:
            score = score + w.a_temp * minmax_normalize(temp)
    return score


def build_mask(stack: TokenStack, prev_stack: TokenStack | None = None,
               weights: IndicatorWeights = IndicatorWeights(), threshold: float = 0.5,
               center=None) -> SoftForegroundMask:
    score = anomaly_score(stack, prev_stack, weights, center)
    values = torch.where(score > threshold, FOREGROUND, BACKGROUND).to(stack.patches.dtype)
    return SoftForegroundMask(values)


def build_masks(stacks: list[TokenStack], weights: IndicatorWeights = IndicatorWeights(),
                threshold: float = 0.5, center=None) -> list[SoftForegroundMask]:
    """One mask per tapped layer; temporal variation uses the previous tapped layer."""
    return [
        build_mask(s, stacks[i - 1] if i else None, weights, threshold, center)
        for i, s in enumerate(stacks)
    ]
