"""Background prototype from a multi-group token bank, and suppression."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .fg_mask import SoftForegroundMask, cosine
from .mvfbe import EnhancedFeatureGroup

logger = logging.getLogger(__name__)


@dataclass
class BackgroundBank:
    tokens: torch.Tensor  # (B, M, C)

    @property
    def size(self) -> int:
        return self.tokens.shape[1]


def candidate_count(L: int, fraction: str) -> int:
    if fraction == "half":
        return L // 2
    if fraction == "full":
        return L
    raise ValueError(f"candidate fraction must be 'half' or 'full', got {fraction!r}")


def collect_candidates(groups: list[EnhancedFeatureGroup], fraction: str = "half",
                       masks=None, sort_by_mask: bool = False) -> BackgroundBank:
    """Concatenate the leading patch tokens of every group, in group order.

    With ``sort_by_mask`` the patch tokens of each group are first ordered by
    ascending foreground probability (stable, so raster order breaks ties);
    ``masks`` then holds one (B, L) mask per group.
    """
    if not groups:
        raise ValueError("no feature groups to build a background bank from")
    parts = []
    for i, g in enumerate(groups):
        x = g.patches
        n = candidate_count(x.shape[1], fraction)
        if sort_by_mask:
            m = masks[i].values if isinstance(masks[i], SoftForegroundMask) else masks[i]
            order = torch.sort(m, dim=-1, stable=True).indices[:, :n]
            parts.append(torch.gather(x, 1, order.unsqueeze(-1).expand(-1, -1, x.shape[-1])))
        else:
            parts.append(x[:, :n])
    return BackgroundBank(torch.cat(parts, dim=1))


def prototype(bank: BackgroundBank) -> torch.Tensor:
    """Elementwise half mean + half max over the bank rows, (B, C)."""
    if bank.size < 1:
        raise ValueError("empty background bank")
    return 0.5 * bank.tokens.mean(dim=1) + 0.5 * bank.tokens.max(dim=1).values


def suppress(group: EnhancedFeatureGroup, proto: torch.Tensor, alpha: float = 0.5):
    """Background-suppressed copy of ``group`` and the per-token residual norm.

    The class row is passed through untouched.
    """
    x = group.patches
    if proto.shape[-1] != x.shape[-1]:
        raise ValueError("prototype width does not match token width")
    if (proto.norm(dim=-1) == 0).any():
        logger.debug("zero-norm background prototype; cosine taken as 0")
    p = proto.unsqueeze(1)
    s_bg = cosine(x, p).unsqueeze(-1)
    residual = x - p
    out = alpha * x + (1.0 - alpha) * residual * (1.0 - s_bg)
    err = residual.norm(dim=-1)
    return group.replace(torch.cat([group.tokens[:, :1], out], dim=1)), err


def suppress_all(groups, fraction="half", alpha=0.5, masks=None, sort_by_mask=False):
    bank = collect_candidates(groups, fraction, masks, sort_by_mask)
    proto = prototype(bank)
    outs = [suppress(g, proto, alpha) for g in groups]
    return [o[0] for o in outs], [o[1] for o in outs], proto
