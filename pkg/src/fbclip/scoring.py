"""Anomaly maps from feature groups, and image/pixel-level metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from sklearn.metrics import average_precision_score, roc_auc_score

from .scr import l2_normalize

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class AnomalyMap:
    map: np.ndarray  # (H, W) in [0, 1]
    image_score: float


def _project(x, proj):
    if isinstance(proj, torch.nn.Module):
        return proj(x)
    return x @ proj.to(x.dtype)


def patch_abnormal_probability(patches: torch.Tensor, text, proj, tau: float = 0.07) -> torch.Tensor:
    """(B, L) probability that each patch aligns with the abnormal prompt."""
    t = text.as_matrix() if hasattr(text, "as_matrix") else text
    v = l2_normalize(_project(patches, proj))
    s = v @ l2_normalize(t).T / tau
    return torch.softmax(s, dim=-1)[..., 1]


def patch_similarity_map(group, text, proj, tau: float = 0.07) -> torch.Tensor:
    """(B, H, W) abnormal-probability map for one feature group."""
    prob = patch_abnormal_probability(group.patches, text, proj, tau)
    side = math.isqrt(prob.shape[1])
    return prob.reshape(prob.shape[0], side, side)


def upsample(maps: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of (B, h, w) maps to (B, size, size)."""
    return F.interpolate(maps.unsqueeze(1), size=(size, size), mode="bilinear", align_corners=False).squeeze(1)


def gaussian_smooth(m: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return m
    return ndimage.gaussian_filter(m, sigma=sigma, mode="reflect", truncate=4.0)


def fuse_maps(maps, image_resolution: int, sigma: float = 4.0, global_prob=None,
              score_weights=(0.5, 0.5)):
    """Average per-group maps, upsample, smooth, clamp; attach an image score.

    ``maps`` is a list of (B, h, w) or (h, w) maps.  Returns a list of
    :class:`AnomalyMap` (or one map when the inputs were 2-D).
    """
    if len(maps) == 0:
        raise ValueError("fuse_maps needs at least one map")
    single = torch.as_tensor(maps[0]).ndim == 2
    stacked = torch.stack([torch.as_tensor(m, dtype=torch.float64) for m in maps])
    if single:
        stacked = stacked.unsqueeze(1)
    mean = stacked.mean(dim=0)
    full = upsample(mean, image_resolution).detach().cpu().numpy()
    out = []
    for b in range(full.shape[0]):
        m = np.clip(gaussian_smooth(full[b], sigma), 0.0, 1.0)
        peak = float(m.max())
        if global_prob is None:
            score = peak
        else:
            g = float(torch.as_tensor(global_prob).reshape(-1)[b])
            score = (score_weights[0] * peak + score_weights[1] * g) / sum(score_weights)
        out.append(AnomalyMap(map=m, image_score=score))
    return out[0] if single else out


def _binary_labels(labels):
    labels = np.asarray(labels).astype(bool).ravel()
    return labels


def auroc(scores, labels):
    """Probability that a random positive outscores a random negative (ties 1/2).

    Returns ``None`` when ``labels`` holds a single class.
    """
    y = _binary_labels(labels)
    if y.all() or not y.any():
        return None
    return float(roc_auc_score(y, np.asarray(scores, dtype=np.float64).ravel()))


def average_precision(scores, labels):
    """Step-interpolated area under the precision-recall curve.

    AP = sum_n (R_n - R_{n-1}) P_n over the distinct score thresholds.
    Returns ``None`` without positives.
    """
    y = _binary_labels(labels)
    if not y.any():
        return None
    return float(average_precision_score(y, np.asarray(scores, dtype=np.float64).ravel()))


def pro_curve(maps, gt_masks):
    """FPR and mean per-region overlap at every distinct threshold, ascending in FPR."""
    maps = np.stack([np.asarray(getattr(m, "map", m), dtype=np.float64) for m in maps])
    gts = np.stack([np.asarray(g).astype(bool) for g in gt_masks])
    if maps.shape != gts.shape:
        raise ValueError(f"maps {maps.shape} and masks {gts.shape} do not align")

    neg = ~gts
    n_neg = neg.sum()
    if n_neg == 0:
        raise ValueError("no normal pixels; FPR undefined")
    fp_step = neg / n_neg

    pro_step = np.zeros(gts.shape)
    sizes = []
    for i in range(len(gts)):
        labelled, n = ndimage.label(gts[i], structure=EIGHT_CONNECTED)
        for r in range(1, n + 1):
            region = labelled == r
            sizes.append(region.sum())
            pro_step[i][region] = 1.0 / sizes[-1]
    if not sizes:
        raise ValueError("no anomalous regions in the ground truth")
    pro_step /= len(sizes)

    scores = maps.ravel()
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    fpr = np.cumsum(fp_step.ravel()[order])
    pro = np.cumsum(pro_step.ravel()[order])
    last_of_tie = np.r_[s[1:] != s[:-1], True]
    fpr = np.r_[0.0, np.clip(fpr[last_of_tie], 0.0, 1.0)]
    pro = np.r_[0.0, np.clip(pro[last_of_tie], 0.0, 1.0)]
    return fpr, pro


def integrate_to(x, y, limit):
    """Trapezoid area under the polyline (x, y) on [0, limit]; x ascending."""
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit and keep.sum() < len(x):
        j = int(np.argmax(~keep))
        x0, y0, x1, y1 = x[j - 1], y[j - 1], x[j], y[j]
        ys = np.r_[ys, y0 + (limit - x0) * (y1 - y0) / (x1 - x0)]
        xs = np.r_[xs, limit]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(maps, gt_masks, fpr_limit: float = 0.3):
    """Area under the PRO curve for FPR in [0, fpr_limit], divided by fpr_limit."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(maps, gt_masks)
    return integrate_to(fpr, pro, fpr_limit) / fpr_limit


METRIC_NAMES = ("image_auroc", "image_ap", "pixel_auroc", "pixel_aupro")


@dataclass
class MetricReport:
    dataset: str
    categories: dict = field(default_factory=dict)
    mean: dict = field(default_factory=dict)

    @classmethod
    def from_categories(cls, dataset, categories):
        mean = {}
        for k in METRIC_NAMES:
            vals = [c[k] for c in categories.values() if c.get(k) is not None]
            mean[k] = float(np.mean(vals)) if vals else None
        return cls(dataset, categories, mean)

    def to_dict(self):
        return {"dataset": self.dataset, "categories": self.categories, "mean": self.mean}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["dataset"], d["categories"], d["mean"])
