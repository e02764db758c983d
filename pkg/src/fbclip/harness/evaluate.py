"""Per-category evaluation and map export."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .. import scoring
from .checkpoint import Checkpoint
from .data import DatasetIndex, load_image, record_mask


def map_to_png(m: np.ndarray) -> Image.Image:
    return Image.fromarray((np.clip(m, 0, 1) * 255).round().astype(np.uint8), mode="L")


def overlay_png(image: torch.Tensor, m: np.ndarray, strength: float = 0.6) -> Image.Image:
    rgb = image.permute(1, 2, 0).numpy()
    heat = np.zeros_like(rgb)
    heat[..., 0] = m
    heat[..., 2] = 1 - m
    a = strength * m[..., None]
    out = (1 - a) * rgb + a * heat
    return Image.fromarray((np.clip(out, 0, 1) * 255).round().astype(np.uint8), mode="RGB")


def score_records(pipeline, records, batch_size: int = 8):
    """Yield ``(record, image, AnomalyMap)`` in record order."""
    R = pipeline.enc.image_resolution
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images = torch.stack([load_image(r.path, R) for r in chunk])
        for r, img, amap in zip(chunk, images, pipeline.score(images)):
            yield r, img, amap


def category_metrics(scores, labels, maps, gts, fpr_limit=0.3) -> dict:
    pix = [(m, g) for m, g in zip(maps, gts) if g is not None]
    out = {
        "image_auroc": scoring.auroc(scores, labels),
        "image_ap": scoring.average_precision(scores, labels),
        "pixel_auroc": None,
        "pixel_aupro": None,
    }
    if pix:
        pm = np.stack([m for m, _ in pix])
        pg = np.stack([g for _, g in pix])
        out["pixel_auroc"] = scoring.auroc(pm.ravel(), pg.ravel())
        if pg.any() and (~pg).any():
            out["pixel_aupro"] = scoring.aupro(list(pm), list(pg), fpr_limit)
    return out


def evaluate(index: DatasetIndex, ckpt, report_path=None, emit_maps=None, dataset: str | None = None,
             backbone=None, batch_size: int = 8) -> scoring.MetricReport:
    """Run the full pipeline on every record; aggregate per category and overall mean."""
    pipeline = ckpt.pipeline(backbone) if isinstance(ckpt, Checkpoint) else ckpt
    R = pipeline.enc.image_resolution
    cats = {}
    for cat in index.categories:
        records = index.by_category(cat)
        scores, labels, maps, gts = [], [], [], []
        for r, img, amap in score_records(pipeline, records, batch_size):
            scores.append(amap.image_score)
            labels.append(r.label)
            maps.append(amap.map)
            gts.append(record_mask(r, R))
            if emit_maps:
                d = Path(emit_maps) / cat
                d.mkdir(parents=True, exist_ok=True)
                stem = f"{r.defect}_{Path(r.path).stem}"
                map_to_png(amap.map).save(d / f"{stem}.png")
                overlay_png(img, amap.map).save(d / f"{stem}_overlay.png")
        cats[cat] = category_metrics(scores, labels, maps, gts)
    name = dataset or pipeline.cfg.data.dataset or Path(index.root).name
    report = scoring.MetricReport.from_categories(name, cats)
    if report_path:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(report.to_json())
    return report
