"""Frozen vision/text encoders.

Two implementations share one surface:

* :class:`SyntheticBackbone` -- small seeded random encoders, a pure function
  of ``(seed, input)``.  Everything downstream is testable with it.
* :class:`ClipBackbone` -- adapter around a HuggingFace ``CLIPModel`` loaded
  from ``backbone.weights_path``.  Optional; needs ``transformers``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class BackboneError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    patch_grid_side: int = 24
    channel_width: int = 1024
    text_width: int = 768
    tap_layers: tuple = (6, 12, 18, 24)
    image_resolution: int = 336
    depth: int = 24
    text_encoder_width: int | None = None  # width before the text projection; defaults to text_width
    context_length: int = 77

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        for name in ("patch_grid_side", "channel_width", "text_width", "image_resolution", "depth"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.tap_layers:
            raise ValueError("tap_layers must be non-empty")
        if any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            raise ValueError(f"tap_layers must be strictly increasing: {self.tap_layers}")
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > self.depth:
            raise ValueError(f"tap_layers {self.tap_layers} outside encoder depth 1..{self.depth}")

    @property
    def num_patches(self) -> int:
        return self.patch_grid_side**2

    @property
    def text_hidden(self) -> int:
        return self.text_encoder_width or self.text_width


@dataclass
class TokenStack:
    """Output of one tapped layer: ``cls`` (B, C) and ``patches`` (B, L, C)."""

    cls: torch.Tensor
    patches: torch.Tensor
    layer_index: int

    @property
    def num_patches(self) -> int:
        return self.patches.shape[1]

    def tokens(self) -> torch.Tensor:
        """(B, L+1, C) with the class token at index 0."""
        return torch.cat([self.cls.unsqueeze(1), self.patches], dim=1)

    def validate(self, cfg: EncoderConfig | None = None):
        if self.patches.ndim != 3 or self.cls.ndim != 2:
            raise ValueError("TokenStack expects cls (B, C) and patches (B, L, C)")
        if cfg is not None and self.patches.shape[1] != cfg.num_patches:
            raise ValueError(f"expected {cfg.num_patches} patch tokens, got {self.patches.shape[1]}")
        if not (torch.isfinite(self.cls).all() and torch.isfinite(self.patches).all()):
            raise ValueError(f"non-finite tokens in layer {self.layer_index}")
        return self


@dataclass
class TextTokenSequence:
    """Encoded prompt tokens (P, L_text, D_text) plus their ids (P, L_text)."""

    tokens: torch.Tensor
    token_ids: torch.Tensor

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class SyntheticVisionEncoder(nn.Module):
    """Random patch embedding followed by residual tanh mixing layers.

    Tokens of similar-looking patches form tight clusters, and a patch whose
    colour/texture departs from its surroundings lands away from the
    background cluster, which is what the mask and enhancement stages key on.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        if cfg.image_resolution % cfg.patch_grid_side:
            raise ValueError("image_resolution must be a multiple of patch_grid_side")
        self.cfg = cfg
        self.patch_px = cfg.image_resolution // cfg.patch_grid_side
        C = cfg.channel_width
        in_dim = 3 * self.patch_px**2
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("embed", torch.randn(in_dim, C, generator=g) * (3.0 / math.sqrt(in_dim)))
        self.register_buffer("pos", 0.05 * torch.randn(cfg.num_patches, C, generator=g))
        self.register_buffer("cls_bias", 0.5 * torch.randn(C, generator=g))
        self.register_buffer("mix_in", torch.randn(cfg.depth, C, C, generator=g) / math.sqrt(C))
        self.register_buffer("mix_out", 0.5 * torch.randn(cfg.depth, C, C, generator=g) / math.sqrt(C))
        _freeze(self)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        p = self.patch_px
        B = images.shape[0]
        x = images.unfold(2, p, p).unfold(3, p, p)  # B, 3, H, W, p, p
        return x.permute(0, 2, 3, 1, 4, 5).reshape(B, self.cfg.num_patches, -1)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> list[TokenStack]:
        x = self.patchify((images - 0.5) / 0.25).to(self.embed.dtype)
        x = x @ self.embed + self.pos
        taps = set(self.cfg.tap_layers)
        out = []
        for layer in range(1, self.cfg.depth + 1):
            x = x + torch.tanh(x @ self.mix_in[layer - 1]) @ self.mix_out[layer - 1]
            if layer in taps:
                cls = x.mean(dim=1) + self.cls_bias
                out.append(TokenStack(cls=cls.clone(), patches=x.clone(), layer_index=layer))
        return out


class SyntheticTextEncoder(nn.Module):
    """Tiny frozen causal transformer block over prompt embeddings."""

    PAD, OBJECT, DAMAGED = 0, 1, 2

    def __init__(self, cfg: EncoderConfig, seed: int = 0, vocab_size: int = 64):
        super().__init__()
        self.cfg = cfg
        W = cfg.text_hidden
        self.vocab_size = vocab_size
        self.sot_id = vocab_size - 2
        self.eot_id = vocab_size - 1
        self.context_length = cfg.context_length
        g = torch.Generator().manual_seed(seed + 7919)
        self.register_buffer("token_embedding", torch.randn(vocab_size, W, generator=g))
        self.register_buffer("positional", 0.1 * torch.randn(cfg.context_length, W, generator=g))
        for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
            self.register_buffer(name, torch.randn(W, W, generator=g) / math.sqrt(W))
        self.register_buffer("projection", torch.randn(W, cfg.text_width, generator=g) / math.sqrt(W))
        _freeze(self)

    def word_ids(self, words: list[str]) -> list[int]:
        vocab = {"object": self.OBJECT, "damaged": self.DAMAGED}
        return [vocab[w] for w in words]

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding[ids]

    def forward(self, embeddings: torch.Tensor, token_ids: torch.Tensor) -> TextTokenSequence:
        n = embeddings.shape[1]
        if n > self.context_length:
            raise ValueError(f"prompt length {n} exceeds context window {self.context_length}")
        x = embeddings + self.positional[:n].to(embeddings.dtype)
        dt = x.dtype
        q, k, v = x @ self.wq.to(dt), x @ self.wk.to(dt), x @ self.wv.to(dt)
        scores = q @ k.transpose(-1, -2) / math.sqrt(x.shape[-1])
        causal = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        x = x + torch.softmax(scores, dim=-1) @ v @ self.wo.to(dt)
        x = x + torch.tanh(x @ self.w1.to(dt)) @ self.w2.to(dt)
        x = F.layer_norm(x, (x.shape[-1],))
        return TextTokenSequence(tokens=x, token_ids=token_ids)


@dataclass
class SyntheticBackbone:
    cfg: EncoderConfig
    seed: int = 0
    vision: SyntheticVisionEncoder = field(init=False)
    text: SyntheticTextEncoder = field(init=False)

    kind = "synthetic"

    def __post_init__(self):
        self.vision = SyntheticVisionEncoder(self.cfg, self.seed)
        self.text = SyntheticTextEncoder(self.cfg, self.seed)
        g = torch.Generator().manual_seed(self.seed + 104729)
        C, D = self.cfg.channel_width, self.cfg.text_width
        self._visual_proj = torch.randn(C, D, generator=g) / math.sqrt(C)

    @property
    def text_projection(self) -> torch.Tensor:
        return self.text.projection

    def encode_image(self, images: torch.Tensor) -> list[TokenStack]:
        return encode_image(self, images)

    def encode_text(self, embeddings, token_ids) -> TextTokenSequence:
        return encode_text(self, embeddings, token_ids)

    def project_cls(self, cls: torch.Tensor) -> torch.Tensor:
        return cls @ self._visual_proj.to(cls.dtype)

    def to(self, dtype):
        self.vision.to(dtype)
        self.text.to(dtype)
        self._visual_proj = self._visual_proj.to(dtype)
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(parameter_checksum(self.vision).encode())
        h.update(parameter_checksum(self.text).encode())
        h.update(self._visual_proj.numpy().tobytes())
        return h.hexdigest()


class ClipBackbone:
    """HuggingFace CLIP adapter (e.g. ``openai/clip-vit-large-patch14-336``)."""

    kind = "clip"

    def __init__(self, cfg: EncoderConfig, weights_path: str | os.PathLike):
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - depends on optional extra
            raise BackboneError("the clip backbone needs `pip install transformers`") from exc
        if not weights_path or not os.path.exists(weights_path):
            raise BackboneError(f"CLIP weights not found at {weights_path!r}")
        self.model = _freeze(CLIPModel.from_pretrained(str(weights_path)))
        self.tokenizer = CLIPTokenizer.from_pretrained(str(weights_path))
        vcfg = self.model.config.vision_config
        side = vcfg.image_size // vcfg.patch_size
        if side != cfg.patch_grid_side or vcfg.hidden_size != cfg.channel_width:
            raise BackboneError(
                f"config expects grid {cfg.patch_grid_side}/C={cfg.channel_width}, "
                f"weights have grid {side}/C={vcfg.hidden_size}"
            )
        if cfg.tap_layers[-1] > vcfg.num_hidden_layers:
            raise BackboneError(f"tap layer {cfg.tap_layers[-1]} beyond depth {vcfg.num_hidden_layers}")
        self.cfg = cfg
        self.text = self  # encode surface used by the prompt learner
        self.eot_id = self.tokenizer.eos_token_id
        self.sot_id = self.tokenizer.bos_token_id
        self.context_length = self.model.config.text_config.max_position_embeddings
        self._mean = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1)
        self._std = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1)

    # text-side helpers mirrored from SyntheticTextEncoder
    PAD = 0

    def word_ids(self, words):
        return self.tokenizer(" ".join(words), add_special_tokens=False)["input_ids"]

    def embed_ids(self, ids):
        return self.model.text_model.embeddings.token_embedding(ids)

    @property
    def text_projection(self):
        return self.model.text_projection.weight.T

    @torch.no_grad()
    def vision(self, images):
        x = (images - self._mean.to(images)) / self._std.to(images)
        out = self.model.vision_model(pixel_values=x, output_hidden_states=True)
        stacks = []
        for layer in self.cfg.tap_layers:
            h = out.hidden_states[layer]
            stacks.append(TokenStack(cls=h[:, 0], patches=h[:, 1:], layer_index=layer))
        return stacks

    def __call__(self, embeddings, token_ids):
        tm = self.model.text_model
        n = embeddings.shape[1]
        if n > self.context_length:
            raise ValueError(f"prompt length {n} exceeds context window {self.context_length}")
        h = tm.embeddings(inputs_embeds=embeddings)
        causal = torch.full((n, n), float("-inf"), dtype=h.dtype).triu(1)
        causal = causal[None, None].expand(h.shape[0], 1, n, n)
        h = tm.encoder(inputs_embeds=h, attention_mask=causal).last_hidden_state
        h = tm.final_layer_norm(h)
        return TextTokenSequence(tokens=h, token_ids=token_ids)

    def encode_image(self, images):
        return encode_image(self, images)

    def encode_text(self, embeddings, token_ids):
        return encode_text(self, embeddings, token_ids)

    def project_cls(self, cls):
        return self.model.visual_projection(self.model.vision_model.post_layernorm(cls))

    def to(self, dtype):
        self.model.to(dtype)
        return self

    def checksum(self) -> str:
        return parameter_checksum(self.model)


def encode_image(backbone, images: torch.Tensor) -> list[TokenStack]:
    """Run the frozen vision encoder; one TokenStack per tap layer, in tap order."""
    cfg = backbone.cfg
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
    if images.shape[-2:] != (cfg.image_resolution, cfg.image_resolution):
        raise ValueError(
            f"image resolution {tuple(images.shape[-2:])} does not match "
            f"configured {cfg.image_resolution}x{cfg.image_resolution}"
        )
    stacks = backbone.vision(images)
    return [s.validate(cfg) for s in stacks]


def encode_text(backbone, embeddings: torch.Tensor, token_ids: torch.Tensor) -> TextTokenSequence:
    """Encode prompt embeddings (P, L, D_text); returns every row, not only EOT."""
    if embeddings.ndim == 2:
        embeddings = embeddings.unsqueeze(0)
        token_ids = token_ids.unsqueeze(0)
    ids = token_ids.long()
    top = ids.max(dim=-1, keepdim=True).values
    if not torch.all((ids == top).sum(dim=-1) == 1):
        raise ValueError("each prompt needs exactly one end-of-text (maximal) token id")
    return backbone.text(embeddings, ids)


def build_backbone(cfg: EncoderConfig, kind: str = "synthetic", seed: int = 0, weights_path=None):
    if kind == "synthetic":
        return SyntheticBackbone(cfg, seed)
    if kind == "clip":
        path = weights_path
        cache = os.environ.get("FBCLIP_CACHE")
        if path and not os.path.isabs(path) and cache:
            path = os.path.join(cache, path)
        return ClipBackbone(cfg, path)
    raise ValueError(f"unknown backbone kind {kind!r}")
