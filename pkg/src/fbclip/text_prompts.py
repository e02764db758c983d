"""Object-agnostic learnable prompts and multi-strategy text feature fusion.

Each prompt runs through the frozen text encoder; the resulting sequence is
pooled three ways (EOT row, mean of all rows, selector-weighted rows), each
projected to the joint space and mixed with fixed weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .backbone import TextTokenSequence, encode_text


@dataclass(frozen=True)
class FusionWeights:
    lambda_global: float = 1.0
    lambda_attn: float = 0.5
    lambda_eot: float = 0.5

    def __post_init__(self):
        for v in (self.lambda_global, self.lambda_attn, self.lambda_eot):
            if not torch.isfinite(torch.tensor(float(v))):
                raise ValueError("fusion weights must be finite")


EOT_ONLY = FusionWeights(0.0, 0.0, 1.0)
EOT_GP_ATTN = FusionWeights()


class TextFeatureSet(NamedTuple):
    normal: torch.Tensor
    abnormal: torch.Tensor

    def as_matrix(self) -> torch.Tensor:
        """(2, D): row 0 normal, row 1 abnormal."""
        return torch.stack([self.normal, self.abnormal])


def eot_feature(seq: TextTokenSequence, proj: torch.Tensor) -> torch.Tensor:
    idx = seq.token_ids.argmax(dim=-1)
    rows = seq.tokens[torch.arange(seq.tokens.shape[0]), idx]
    return rows @ proj.to(rows.dtype)


def global_feature(seq: TextTokenSequence, proj: torch.Tensor) -> torch.Tensor:
    if seq.length == 0:
        raise ValueError("cannot mean-pool an empty sequence")
    return seq.tokens.mean(dim=1) @ proj.to(seq.tokens.dtype)


class TokenSelector(nn.Module):
    """Two-layer scorer: one logit per token."""

    def __init__(self, width: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, width // 4)
        self.fc1 = nn.Linear(width, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x))).squeeze(-1)


def attention_weights(seq: TextTokenSequence, selector: nn.Module) -> torch.Tensor:
    return torch.softmax(selector(seq.tokens), dim=-1)


def attention_feature(seq: TextTokenSequence, selector: nn.Module) -> torch.Tensor:
    """Selector-weighted sum of rows, in encoder width (not yet projected)."""
    w = attention_weights(seq, selector)
    return (w.unsqueeze(-1) * seq.tokens).sum(dim=1)


def fuse(eot, global_, attn_proj, w: FusionWeights = EOT_GP_ATTN):
    return w.lambda_global * global_ + w.lambda_attn * attn_proj + w.lambda_eot * eot


class PromptLearner(nn.Module):
    """``[V_1..V_E] object`` and ``[W_1..W_E] damaged object``.

    Only the two context blocks are trainable; word, start and end-of-text
    embeddings come from the frozen encoder vocabulary.
    """

    def __init__(self, text_encoder, context_length: int = 12, init_std: float = 0.02, generator=None):
        super().__init__()
        width = text_encoder.embed_ids(torch.tensor([0])).shape[-1]
        self.context_length = context_length
        self.normal_ctx = nn.Parameter(init_std * torch.randn(context_length, width, generator=generator))
        self.abnormal_ctx = nn.Parameter(init_std * torch.randn(context_length, width, generator=generator))

        normal_words = text_encoder.word_ids(["object"])
        abnormal_words = text_encoder.word_ids(["damaged", "object"])
        n = context_length + 2 + max(len(normal_words), len(abnormal_words))
        ids = torch.full((2, n), text_encoder.PAD, dtype=torch.long)
        for row, words in enumerate((normal_words, abnormal_words)):
            seq = [text_encoder.sot_id] + [text_encoder.PAD] * context_length + list(words) + [text_encoder.eot_id]
            ids[row, : len(seq)] = torch.tensor(seq)
        self.register_buffer("token_ids", ids, persistent=False)
        with torch.no_grad():
            self.register_buffer("fixed_embeddings", text_encoder.embed_ids(ids).detach().clone(),
                                 persistent=False)

    def embeddings(self) -> torch.Tensor:
        """(2, L_text, D_text) prompt embeddings with contexts spliced in."""
        E = self.context_length
        fixed = self.fixed_embeddings.to(self.normal_ctx.dtype)
        ctx = torch.stack([self.normal_ctx, self.abnormal_ctx])
        return torch.cat([fixed[:, :1], ctx, fixed[:, 1 + E :]], dim=1)


def build_text_features(prompt: PromptLearner, selector: nn.Module, backbone,
                        weights: FusionWeights = EOT_GP_ATTN) -> TextFeatureSet:
    seq = encode_text(backbone, prompt.embeddings(), prompt.token_ids)
    proj = backbone.text_projection
    eot = eot_feature(seq, proj)
    glob = global_feature(seq, proj)
    # the attention pooling is projected with the same matrix as EOT/global
    attn = attention_feature(seq, selector) @ proj.to(seq.tokens.dtype)
    fused = fuse(eot, glob, attn, weights)
    return TextFeatureSet(normal=fused[0], abnormal=fused[1])
