"""Semantic consistency regularisation: entropy + margin on image-text alignment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-8
NORM_EPS = 1e-8


@dataclass(frozen=True)
class SCRConfig:
    tau: float = 0.07
    gamma: float = 1.0
    lambda_total: float = 0.15
    w_entropy: float = 1.0
    w_margin: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class AlignmentLogits:
    s: torch.Tensor  # (B, 2) scaled cosine similarities: [normal, abnormal]
    p: torch.Tensor  # (B, 2) softmax of s


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    n = x.norm(dim=-1, keepdim=True)
    if (n == 0).any():
        logger.debug("zero-norm vector in l2_normalize")
    return x / (n + NORM_EPS)


def align(v: torch.Tensor, text, tau: float = 0.07) -> AlignmentLogits:
    """Alignment of already-pooled features v (B, D) with the two text prototypes."""
    t = text.as_matrix() if hasattr(text, "as_matrix") else text
    s = l2_normalize(v) @ l2_normalize(t).T / tau
    return AlignmentLogits(s=s, p=torch.softmax(s, dim=-1))


def pool_and_align(tokens: torch.Tensor, text, tau: float = 0.07) -> AlignmentLogits:
    """Mean-pool tokens (B, N, D) per image, then :func:`align`."""
    return align(tokens.mean(dim=1), text, tau)


def entropy_loss(logits: AlignmentLogits) -> torch.Tensor:
    p = logits.p.clamp_min(PROB_CLAMP)
    return -(logits.p * torch.log(p)).sum(dim=-1).mean()


def margin_loss(logits: AlignmentLogits, gamma: float = 1.0) -> torch.Tensor:
    gap = (logits.s[:, 1] - logits.s[:, 0]).abs()
    return F.relu(gamma - gap).mean()


def consistency_loss(logits: AlignmentLogits, cfg: SCRConfig = SCRConfig()) -> torch.Tensor:
    if cfg.lambda_total == 0:
        return logits.s.sum() * 0.0
    return cfg.lambda_total * (cfg.w_entropy * entropy_loss(logits) + cfg.w_margin * margin_loss(logits, cfg.gamma))


BINARY_ENTROPY_MAX = math.log(2.0)
