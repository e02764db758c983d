"""End-to-end forward pass: frozen encoders -> mask -> views ->
FB-attention -> background suppression -> maps, image scores and SCR."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import bg_suppress, fg_mask, mvfbe, scoring, scr
from .backbone import build_backbone, encode_image
from .mvfbe import EnhancedFeatureGroup, FBAttention
from .text_prompts import PromptLearner, TokenSelector, build_text_features


class TextHead(nn.Module):
    def __init__(self, width, hidden=None):
        super().__init__()
        self.selector = TokenSelector(width, hidden)


class FBCLIPHead(nn.Module):
    """All trainable parameters.  State-dict keys: ``prompt.*``, ``text.selector.*``,
    ``fb.*`` (gate, two MHSA streams, LayerNorm) and ``visual_proj.weight``."""

    def __init__(self, cfg, backbone):
        super().__init__()
        enc = cfg.encoder_config()
        self.prompt = PromptLearner(backbone.text, cfg.prompt.context_length, cfg.prompt.init_std)
        width = self.prompt.normal_ctx.shape[-1]
        self.text = TextHead(width, cfg.text.selector_hidden)
        C, D = enc.channel_width, enc.text_width
        if cfg.mvfbe.per_group:
            n = len(enc.tap_layers) * len(cfg.mvfbe.views)
            self.fb = nn.ModuleList([FBAttention(C, cfg.mvfbe.heads) for _ in range(n)])
        else:
            self.fb = FBAttention(C, cfg.mvfbe.heads)
        self.visual_proj = nn.Linear(C, D, bias=False)


@dataclass
class Prepared:
    """Frozen-encoder products for a batch; cacheable across training steps."""

    views: torch.Tensor      # (B, G, L+1, C)
    masks: torch.Tensor      # (B, N, L)
    cls_embed: torch.Tensor  # (B, D) projected class token of the deepest tap
    meta: tuple              # ((view, layer), ...) per group

    def __len__(self):
        return self.views.shape[0]

    def groups(self) -> list[EnhancedFeatureGroup]:
        return [EnhancedFeatureGroup(self.views[:, i], v, layer) for i, (v, layer) in enumerate(self.meta)]

    def split(self) -> list["Prepared"]:
        return [Prepared(self.views[i:i + 1], self.masks[i:i + 1], self.cls_embed[i:i + 1], self.meta)
                for i in range(len(self))]

    @staticmethod
    def cat(items: list["Prepared"]) -> "Prepared":
        return Prepared(torch.cat([p.views for p in items]), torch.cat([p.masks for p in items]),
                        torch.cat([p.cls_embed for p in items]), items[0].meta)


@dataclass
class Outputs:
    maps: torch.Tensor        # (B, G, h, w) abnormal probability per group
    global_prob: torch.Tensor  # (B,)
    alignment: scr.AlignmentLogits
    residuals: list            # per-group reconstruction error (diagnostic)

    @property
    def mean_map(self):
        return self.maps.mean(dim=1)


class Pipeline:
    def __init__(self, cfg, backbone=None, head: FBCLIPHead | None = None):
        self.cfg = cfg
        self.enc = cfg.encoder_config()
        self.backbone = backbone or build_backbone(self.enc, cfg.backbone.kind, cfg.backbone_seed,
                                                   cfg.backbone.weights_path)
        self.head = head or FBCLIPHead(cfg, self.backbone)
        layer = self.enc.tap_layers[-1]
        try:
            self.scr_group = list(self._meta()).index((cfg.scr.source_group, layer))
        except ValueError:
            raise ValueError(f"scr.source_group {cfg.scr.source_group!r} not among enabled views") from None

    def _meta(self):
        views = [v for v in mvfbe.VIEWS if v in self.cfg.mvfbe.views]
        return tuple((v, layer) for layer in self.enc.tap_layers for v in views)

    @torch.no_grad()
    def prepare(self, images: torch.Tensor) -> Prepared:
        cfg = self.cfg
        stacks = encode_image(self.backbone, images)
        masks = fg_mask.build_masks(stacks, cfg.indicator_weights(), cfg.mask.threshold)
        groups = mvfbe.compute_views(stacks, masks, cfg.mvfbe.views, cfg.mvfbe.sem_alpha,
                                     cfg.mvfbe.spa_kernel, cfg.kernel_backend)
        return Prepared(
            views=torch.stack([g.tokens for g in groups], dim=1),
            masks=torch.stack([m.values for m in masks], dim=1),
            cls_embed=self.backbone.project_cls(stacks[-1].cls),
            meta=self._meta(),
        )

    def text_features(self):
        return build_text_features(self.head.prompt, self.head.text.selector, self.backbone,
                                   self.cfg.fusion_weights())

    def forward(self, prep: Prepared) -> Outputs:
        cfg = self.cfg
        text = self.text_features()
        groups = mvfbe.refine_all(prep.groups(), self.head.fb)
        masks = None
        if cfg.bs.sort_by_mask:
            layer_pos = {layer: i for i, layer in enumerate(self.enc.tap_layers)}
            masks = [prep.masks[:, layer_pos[g.source_layer]] for g in groups]
        final, residuals, _ = bg_suppress.suppress_all(groups, cfg.bs.candidate_fraction, cfg.bs.alpha,
                                                       masks, cfg.bs.sort_by_mask)
        maps = torch.stack([scoring.patch_similarity_map(g, text, self.head.visual_proj, cfg.scoring.tau)
                            for g in final], dim=1)
        glob = scr.align(prep.cls_embed, text, cfg.scoring.tau).p[:, 1]
        scr_tokens = self.head.visual_proj(final[self.scr_group].patches)
        alignment = scr.pool_and_align(scr_tokens, text, cfg.scr.tau)
        return Outputs(maps=maps, global_prob=glob, alignment=alignment, residuals=residuals)

    __call__ = forward

    def losses(self, out: Outputs, labels: torch.Tensor, masks: torch.Tensor) -> dict:
        """Image BCE + pixel focal/Dice + consistency regulariser."""
        cfg = self.cfg
        eps = 1e-6
        glob = out.global_prob.clamp(eps, 1 - eps)
        l_image = F.binary_cross_entropy(glob, labels.to(glob.dtype))
        prob = scoring.upsample(out.mean_map, self.enc.image_resolution).clamp(eps, 1 - eps)
        y = masks.to(prob.dtype)
        l_pixel = focal_loss(prob, y) + dice_loss(prob, y) + dice_loss(1 - prob, 1 - y)
        l_scr = scr.consistency_loss(out.alignment, cfg.scr_config())
        total = cfg.train.w_image * l_image + cfg.train.w_pixel * l_pixel + l_scr
        return {"total": total, "image": l_image, "pixel": l_pixel, "consistency": l_scr}

    @torch.no_grad()
    def score(self, images: torch.Tensor, prep: Prepared | None = None) -> list[scoring.AnomalyMap]:
        prep = self.prepare(images) if prep is None else prep
        out = self.forward(prep)
        s = self.cfg.scoring
        return scoring.fuse_maps([out.maps[:, i] for i in range(out.maps.shape[1])],
                                 self.enc.image_resolution, s.sigma, out.global_prob,
                                 (s.weight_max, s.weight_global))


def focal_loss(prob, target, gamma: float = 2.0):
    p_t = torch.where(target > 0.5, prob, 1 - prob)
    return (-(1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(prob, target, smooth: float = 1.0):
    inter = (prob * target).sum()
    return 1 - (2 * inter + smooth) / (prob.sum() + target.sum() + smooth)
