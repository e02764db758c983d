"""Training loop over cached frozen-encoder features."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..pipeline import Pipeline, Prepared
from .checkpoint import Checkpoint
from .data import DatasetIndex, load_image, record_mask

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FeatureCache:
    preps: list          # one Prepared per image
    labels: torch.Tensor  # (n,)
    masks: torch.Tensor   # (n, R, R)


def build_cache(pipeline: Pipeline, records, batch_size: int = 8) -> FeatureCache:
    R = pipeline.enc.image_resolution
    preps, labels, masks = [], [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images = torch.stack([load_image(r.path, R) for r in chunk])
        preps.extend(pipeline.prepare(images).split())
        for r in chunk:
            labels.append(r.label)
            masks.append(torch.from_numpy(record_mask(r, R)))
    return FeatureCache(preps, torch.tensor(labels), torch.stack(masks))


def _make_optimizer(name, params, lr):
    if name.lower() == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name.lower() == "adamw":
        return torch.optim.AdamW(params, lr=lr)
    if name.lower() == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r}")


def _dump_divergence(out_dir, step, losses, head):
    info = {
        "step": step,
        "losses": {k: float(v.detach()) for k, v in losses.items()},
        "param_norms": {k: float(p.detach().norm()) for k, p in head.named_parameters()},
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "divergence.json").write_text(json.dumps(info, indent=2))
    return info


def train(index: DatasetIndex, cfg, out_dir=None, backbone=None, cache: FeatureCache | None = None) -> Checkpoint:
    """Fit the trainable head; returns the final checkpoint (history attached).

    Loss = w_image * BCE(global abnormal prob) + w_pixel * (focal + Dice)
    + consistency regulariser.  One master seed drives parameter init, data
    order and (unless ``backbone.seed`` is set) the synthetic backbone.
    """
    cfg = cfg.resolve_preset()
    t = cfg.train
    records = [r for r in index if not r.mask_missing]
    if len(records) < len(index):
        logger.warning("dropping %d abnormal images without masks", len(index) - len(records))
    if not records:
        raise ValueError("empty training index")

    torch.manual_seed(t.seed)
    pipeline = Pipeline(cfg, backbone)
    cache = cache or build_cache(pipeline, records)
    head = pipeline.head
    head.train()
    opt = _make_optimizer(t.optimizer, [p for p in head.parameters() if p.requires_grad], t.lr)

    n = len(cache.preps)
    total_steps = t.max_steps if t.max_steps else t.epochs * math.ceil(n / t.batch_size)
    rng = np.random.default_rng(t.seed)
    history = []
    step = 0
    while step < total_steps:
        order = rng.permutation(n)
        for start in range(0, n, t.batch_size):
            idx = order[start:start + t.batch_size]
            prep = Prepared.cat([cache.preps[i] for i in idx])
            out = pipeline(prep)
            if not (torch.isfinite(out.maps).all() and torch.isfinite(out.global_prob).all()):
                nan = torch.tensor(float("nan"))
                losses = {"total": nan, "image": nan, "pixel": nan, "consistency": nan}
            else:
                losses = pipeline.losses(out, cache.labels[idx], cache.masks[idx])
            if not all(torch.isfinite(v) for v in losses.values()):
                info = _dump_divergence(out_dir, step, losses, head)
                raise TrainingDiverged(f"non-finite loss at step {step}: {info['losses']}")
            opt.zero_grad()
            losses["total"].backward()
            opt.step()
            step += 1
            history.append({k: float(v.detach()) for k, v in losses.items()})
            if t.log_every and step % t.log_every == 0:
                logger.info("step %d  total %.4f  image %.4f  pixel %.4f  scr %.4f", step,
                            *(history[-1][k] for k in ("total", "image", "pixel", "consistency")))
            if out_dir is not None and t.checkpoint_every and step % t.checkpoint_every == 0:
                Checkpoint.from_head(head, cfg, step).save(Path(out_dir) / f"step_{step:06d}")
            if step >= total_steps:
                break

    head.eval()
    ckpt = Checkpoint.from_head(head, cfg, step)
    ckpt.history = history
    if out_dir is not None:
        ckpt.save(Path(out_dir) / "final")
        (Path(out_dir) / "history.json").write_text(json.dumps(history))
    return ckpt
