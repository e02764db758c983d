"""Multi-view foreground/background enhancement.

Three views per tapped layer -- identity, semantic (global, cls-guided
attention) and spatial (5x5 neighbourhood aggregation) -- each refined by
gated dual-stream self-attention.  The semantic and spatial views have no
trainable parameters and run on frozen encoder tokens, so they are computed
outside autograd by the kernels in :mod:`fbclip.kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import kernels
from .backbone import TokenStack
from .fg_mask import SoftForegroundMask

VIEWS = ("ID", "SEM", "SPA")


@dataclass
class EnhancedFeatureGroup:
    tokens: torch.Tensor  # (B, L+1, C), cls at index 0
    view: str
    source_layer: int

    @property
    def cls(self):
        return self.tokens[:, 0]

    @property
    def patches(self):
        return self.tokens[:, 1:]

    def replace(self, tokens):
        return EnhancedFeatureGroup(tokens, self.view, self.source_layer)


def _mask_values(mask, L):
    values = mask.values if isinstance(mask, SoftForegroundMask) else torch.as_tensor(mask)
    if values.shape[-1] != L:
        raise ValueError(f"mask length {values.shape[-1]} does not match {L} patch tokens")
    return values


def _to_numpy(t):
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)


def view_identity(stack: TokenStack) -> EnhancedFeatureGroup:
    return EnhancedFeatureGroup(stack.tokens(), "ID", stack.layer_index)


def view_semantic(stack: TokenStack, mask, alpha: float = 0.6, backend=None) -> EnhancedFeatureGroup:
    p = _mask_values(mask, stack.num_patches)
    out = kernels.sem_aggregate(_to_numpy(stack.patches), _to_numpy(stack.cls), _to_numpy(p), alpha, backend)
    patches = torch.from_numpy(out).to(stack.patches.dtype)
    return EnhancedFeatureGroup(torch.cat([stack.cls.unsqueeze(1), patches], 1), "SEM", stack.layer_index)


def view_spatial(stack: TokenStack, mask, kernel: int = 5, eps: float = 1e-8, backend=None) -> EnhancedFeatureGroup:
    L = stack.num_patches
    side = math.isqrt(L)
    if side * side != L:
        raise ValueError(f"spatial view needs a square patch grid, got L={L}")
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError("kernel must be a positive odd integer")
    p = _mask_values(mask, L)
    out = kernels.spa_aggregate(_to_numpy(stack.patches), _to_numpy(stack.cls), _to_numpy(p),
                                side, kernel, eps, backend)
    patches = torch.from_numpy(out).to(stack.patches.dtype)
    return EnhancedFeatureGroup(torch.cat([stack.cls.unsqueeze(1), patches], 1), "SPA", stack.layer_index)


class FBGate(nn.Module):
    """Per-token scalar gate in [0, 1]."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(dim, 1)

    def forward(self, x):
        return torch.sigmoid(self.fc(x))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 8):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attention=False):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(B, N, C))
        return (out, attn) if return_attention else out


class FBAttention(nn.Module):
    """LayerNorm(MHSA_fg(g*x) + MHSA_bg((1-g)*x)) with a learned gate g."""

    def __init__(self, dim: int, heads: int = 8):
        super().__init__()
        self.gate = FBGate(dim)
        self.mhsa_fg = MultiHeadSelfAttention(dim, heads)
        self.mhsa_bg = MultiHeadSelfAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, return_attention=False):
        g = self.gate(x)
        fg, a_fg = self.mhsa_fg(g * x, return_attention=True)
        bg, a_bg = self.mhsa_bg((1.0 - g) * x, return_attention=True)
        out = self.norm(fg + bg)
        return (out, a_fg, a_bg) if return_attention else out


def fb_attention(group: EnhancedFeatureGroup, module: FBAttention) -> EnhancedFeatureGroup:
    return group.replace(module(group.tokens))


def compute_views(stacks: list[TokenStack], masks: list, views=VIEWS, sem_alpha: float = 0.6,
                  spa_kernel: int = 5, backend=None) -> list[EnhancedFeatureGroup]:
    """Parameter-free view enhancement; layer-major, views in (ID, SEM, SPA) order."""
    if len(stacks) != len(masks):
        raise ValueError(f"need one mask per tapped layer ({len(stacks)}), got {len(masks)}")
    unknown = set(views) - set(VIEWS)
    if unknown:
        raise ValueError(f"unknown views {sorted(unknown)}")
    out = []
    for stack, mask in zip(stacks, masks):
        for v in VIEWS:
            if v not in views:
                continue
            if v == "ID":
                out.append(view_identity(stack))
            elif v == "SEM":
                out.append(view_semantic(stack, mask, sem_alpha, backend))
            else:
                out.append(view_spatial(stack, mask, spa_kernel, backend=backend))
    return out


def refine_all(groups: list[EnhancedFeatureGroup], fb) -> list[EnhancedFeatureGroup]:
    """Apply FB-attention to every group; ``fb`` is one shared module or one per group."""
    if isinstance(fb, (nn.ModuleList, list, tuple)):
        if len(fb) != len(groups):
            raise ValueError(f"{len(fb)} FB-attention modules for {len(groups)} groups")
        return [fb_attention(g, m) for g, m in zip(groups, fb)]
    return [fb_attention(g, fb) for g in groups]


def enhance_all(stacks, masks, fb, views=VIEWS, sem_alpha=0.6, spa_kernel=5, backend=None):
    return refine_all(compute_views(stacks, masks, views, sem_alpha, spa_kernel, backend), fb)
