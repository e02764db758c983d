import json
import logging

import numpy as np
import pytest
import torch

from fbclip.harness import cli
from fbclip.harness.checkpoint import Checkpoint
from fbclip.harness.config import PRESETS, RunConfig, load_config
from fbclip.harness.data import DatasetError, ingest, load_image, record_mask, write_synthetic_dataset
from fbclip.harness.evaluate import category_metrics, evaluate
from fbclip.harness.train import TrainingDiverged, build_cache, train
from fbclip.pipeline import Pipeline
from fbclip.scoring import AnomalyMap, MetricReport, auroc


@pytest.fixture(scope="session")
def data16(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("d16"), n_per_category=8, seed=5)


@pytest.fixture(scope="session")
def index16(data16):
    return ingest(data16)


def _cfg(steps=50, seed=0):
    cfg = RunConfig.synthetic()
    cfg.train.max_steps = steps
    cfg.train.seed = seed
    return cfg


# -- ingestion ---------------------------------------------------------------------

def _png(path):
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", (8, 8), (120, 120, 120)).save(path)


def test_ingest_toy_tree(tmp_path):
    for cat in ("b", "a"):
        _png(tmp_path / cat / "test" / "good" / "001.png")
        _png(tmp_path / cat / "test" / "good" / "000.png")
        _png(tmp_path / cat / "test" / "crack" / "000.png")
        _png(tmp_path / cat / "ground_truth" / "crack" / "000_mask.png")
    idx = ingest(tmp_path)
    assert len(idx) == 6
    assert [r.path for r in idx] == sorted(r.path for r in idx)
    assert idx.categories == ["a", "b"]
    assert sum(r.label for r in idx) == 2
    assert all(not r.mask_missing for r in idx)
    assert ingest(tmp_path) == idx


def test_ingest_missing_mask(tmp_path, caplog):
    _png(tmp_path / "a" / "test" / "good" / "000.png")
    _png(tmp_path / "a" / "test" / "hole" / "000.png")
    with caplog.at_level(logging.WARNING):
        idx = ingest(tmp_path)
    bad = [r for r in idx if r.label]
    assert bad[0].mask_missing and "no mask" in caplog.text
    assert record_mask(bad[0], 8) is None


def test_ingest_errors(tmp_path):
    with pytest.raises(DatasetError):
        ingest(tmp_path / "missing")
    with pytest.raises(DatasetError):
        ingest(tmp_path)
    (tmp_path / "a" / "test" / "good").mkdir(parents=True)
    with pytest.raises(DatasetError, match="no images"):
        ingest(tmp_path)


def test_ingest_flat_layout(tmp_path):
    _png(tmp_path / "a" / "normal" / "0.png")
    _png(tmp_path / "a" / "abnormal" / "1.png")
    _png(tmp_path / "a" / "masks" / "1.png")
    idx = ingest(tmp_path, layout="flat")
    assert [(r.label, r.mask_missing) for r in idx] == [(1, False), (0, False)]
    with pytest.raises(DatasetError):
        ingest(tmp_path, layout="weird")


def test_synthetic_dataset(index16):
    assert len(index16) == 16 and index16.categories == ["alpha", "beta"]
    r = next(x for x in index16 if x.label)
    m = record_mask(r, 64)
    assert m.dtype == bool and 0 < m.mean() < 0.5
    img = load_image(r.path, 64)
    assert img.shape == (3, 64, 64) and 0 <= float(img.min()) and float(img.max()) <= 1


# -- configuration ---------------------------------------------------------------

def test_config_defaults():
    cfg = RunConfig()
    assert cfg.scr.lambda_ == 0.15 and cfg.scr.gamma == 1.0 and cfg.scr.tau == 0.07
    assert (cfg.text.lambda_global, cfg.text.lambda_attn, cfg.text.lambda_eot) == (1.0, 0.5, 0.5)
    assert (cfg.mask.alpha_local, cfg.mask.alpha_center, cfg.mask.alpha_cls, cfg.mask.alpha_temp) == (0.3, 0.3, 0.3, 0.1)
    assert cfg.mask.threshold == 0.5 and cfg.mvfbe.sem_alpha == 0.6 and cfg.mvfbe.spa_kernel == 5
    assert cfg.bs.alpha == 0.5 and cfg.bs.candidate_fraction == "half"
    assert cfg.train.optimizer == "adam" and cfg.train.lr == 5e-5 and cfg.prompt.context_length == 12
    assert "scr.lambda" in cfg.keys()


def test_config_toml_and_overrides(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('preset = "synthetic"\n[scr]\nlambda = 0.0\n[train]\nlr = 0.01\n')
    cfg = load_config(p, {"train.seed": 9})
    assert cfg.scr.lambda_ == 0.0 and cfg.train.lr == 0.01 and cfg.train.seed == 9
    assert cfg.backbone.kind == "synthetic"
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(p, {"train.nope": 1})
    p.write_text("[bogus]\nx = 1\n")
    with pytest.raises(ValueError):
        load_config(p)


def test_cross_dataset_presets():
    assert PRESETS == {"visa-to-mvtec": ("visa", "mvtec"), "mvtec-to-visa": ("mvtec", "visa")}
    cfg = RunConfig()
    cfg.update({"data": {"preset": "visa-to-mvtec", "visa_root": "/v", "mvtec_root": "/m"}})
    r = cfg.resolve_preset()
    assert (r.data.train_root, r.data.eval_root, r.data.dataset) == ("/v", "/m", "mvtec")
    cfg.data.preset = "nope"
    with pytest.raises(ValueError):
        cfg.resolve_preset()


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for p in sorted(root.glob("*.toml")):
        load_config(p).resolve_preset()


# -- training ---------------------------------------------------------------------

@pytest.fixture(scope="session")
def trained(index16):
    return train(index16, _cfg())


def test_train_loss_decreases(trained):
    t = [h["total"] for h in trained.history]
    assert len(t) == 50 and trained.step == 50
    assert all(np.isfinite(t))
    assert t[-1] < t[0]
    assert np.mean(t[-5:]) < np.mean(t[:5])


def test_train_deterministic(index16, trained):
    again = train(index16, _cfg())
    assert again.payload() == trained.payload()
    other = train(index16, _cfg(seed=1))
    assert other.payload() != trained.payload()


def test_scr_toggle(index16):
    cfg = _cfg(steps=3)
    cfg.scr.lambda_ = 0.0
    ck = train(index16, cfg)
    assert all(h["consistency"] == 0.0 for h in ck.history)
    assert all(h["total"] == pytest.approx(h["image"] + h["pixel"]) for h in ck.history)


def test_periodic_checkpoints(index16, tmp_path):
    cfg = _cfg(steps=4)
    cfg.train.checkpoint_every = 2
    train(index16, cfg, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["final", "history.json", "step_000002", "step_000004"]
    assert Checkpoint.load(tmp_path / "step_000002").step == 2


def test_divergence_dump(index16, tmp_path):
    cfg = _cfg(steps=3)
    cfg.train.lr = float("inf")
    with pytest.raises(TrainingDiverged):
        train(index16, cfg, tmp_path)
    info = json.loads((tmp_path / "divergence.json").read_text())
    assert "losses" in info and "param_norms" in info


def test_empty_index_rejected(index16):
    from fbclip.harness.data import DatasetIndex

    with pytest.raises(ValueError):
        train(DatasetIndex(()), _cfg())


def test_cache_matches_live_features(index16):
    torch.manual_seed(0)
    p = Pipeline(_cfg())
    recs = list(index16)[:4]
    cache = build_cache(p, recs)
    live = p.prepare(torch.stack([load_image(r.path, 64) for r in recs]))
    assert torch.equal(torch.cat([c.views for c in cache.preps]), live.views)
    assert cache.masks.shape == (4, 64, 64)


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(trained, tmp_path):
    trained.save(tmp_path / "a")
    loaded = Checkpoint.load(tmp_path / "a" / "params.safetensors")
    loaded.save(tmp_path / "b")
    a = (tmp_path / "a" / "params.safetensors").read_bytes()
    assert (tmp_path / "b" / "params.safetensors").read_bytes() == a
    assert (tmp_path / "b" / "meta.json").read_text() == (tmp_path / "a" / "meta.json").read_text()
    assert loaded.step == 50 and loaded.config == trained.config
    keys = set(loaded.params)
    assert {"prompt.normal_ctx", "prompt.abnormal_ctx", "visual_proj.weight"} <= keys
    assert any(k.startswith("fb.gate") for k in keys) and any(k.startswith("text.selector") for k in keys)


def test_checkpoint_rejects_foreign(tmp_path):
    (tmp_path / "meta.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path)


# -- evaluation ------------------------------------------------------------------

class DarkSpotScorer:
    """Stub pipeline: the map marks pixels much darker than the image median."""

    def __init__(self):
        self.cfg = RunConfig.synthetic()
        self.enc = self.cfg.encoder_config()

    def score(self, images):
        out = []
        for img in images.numpy():
            g = img.mean(0)
            m = np.clip((np.median(g) - g) / 0.35, 0, 1)
            out.append(AnomalyMap(m, float(m.mean())))
        return out


def test_evaluate_separable_fixture(index16, tmp_path):
    report = evaluate(index16, DarkSpotScorer(), tmp_path / "r.json", tmp_path / "maps", dataset="toy")
    for cat in ("alpha", "beta"):
        assert report.categories[cat]["image_auroc"] == 1.0
        assert report.categories[cat]["pixel_auroc"] > 0.95
    text = (tmp_path / "r.json").read_text()
    assert MetricReport.from_json(text).to_json() == text
    pngs = sorted(p.name for p in (tmp_path / "maps" / "alpha").iterdir())
    assert len(pngs) == 16 and any(n.endswith("_overlay.png") for n in pngs)


def test_shuffled_labels_near_chance(index16):
    scores, labels = [], []
    for r, amap in zip(index16, DarkSpotScorer().score(torch.stack([load_image(r.path, 64) for r in index16]))):
        scores.append(amap.image_score)
        labels.append(r.label)
    assert auroc(scores, labels) == 1.0
    rng = np.random.default_rng(0)
    shuffled = [auroc(scores, rng.permutation(labels)) for _ in range(20)]
    assert abs(np.mean(shuffled) - 0.5) <= 0.15


def test_category_metrics_without_pixels():
    m = category_metrics([0.1, 0.9], [0, 1], [np.zeros((2, 2))] * 2, [None, None])
    assert m["pixel_auroc"] is None and m["pixel_aupro"] is None and m["image_auroc"] == 1.0


def test_evaluate_deterministic(index16, trained, tmp_path):
    a = evaluate(index16, trained)
    b = evaluate(index16, Checkpoint.load(trained.save(tmp_path / "ck")))
    assert a.to_json() == b.to_json()


# -- CLI -------------------------------------------------------------------------------

def test_cli_round_trip(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["make-synthetic", "data", "--n", "4", "--seed", "3"]) == 0
    cfg = tmp_path / "c.toml"
    cfg.write_text('preset = "synthetic"\n[data]\ntrain_root = "data"\n')
    assert cli.main(["train", "--config", str(cfg), "--seed", "4", "--out", "run",
                     "--set", "train.max_steps=3"]) == 0
    ck = Checkpoint.load("run/final")
    assert ck.step == 3 and ck.config.train.seed == 4
    assert cli.main(["eval", "--config", str(cfg), "--ckpt", "run/final", "--data", "data",
                     "--report", "rep.json", "--emit-maps", "maps"]) == 0
    assert MetricReport.from_json((tmp_path / "rep.json").read_text()).categories.keys() == {"alpha", "beta"}
    img = sorted((tmp_path / "data" / "alpha" / "test" / "defect").iterdir())[0]
    capsys.readouterr()
    assert cli.main(["score", "--ckpt", "run/final", "--image", str(img), "--out", "h.png"]) == 0
    score = float(capsys.readouterr().out.strip())
    assert 0.0 <= score <= 1.0
    assert (tmp_path / "h.png").exists() and (tmp_path / "h_overlay.png").exists()


def test_cli_train_needs_data(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('preset = "synthetic"\n')
    assert cli.main(["train", "--config", str(cfg)]) == 2


def test_cli_selftest(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 8


def test_cli_eval_with_clip_backbone(tmp_path, monkeypatch):
    """Untrained head on an HF CLIP backbone: eval runs and writes maps and a report."""
    from test_backbone import _tiny_clip

    _tiny_clip(tmp_path / "tiny")
    monkeypatch.setenv("FBCLIP_CACHE", str(tmp_path))
    monkeypatch.chdir(tmp_path)
    cfg = RunConfig.synthetic()
    cfg.update({
        "backbone": {"kind": "clip", "weights_path": "tiny", "patch_grid_side": 4, "channel_width": 16,
                     "text_width": 8, "text_encoder_width": 16, "tap_layers": [1, 2], "image_resolution": 16,
                     "depth": 2},
        "mvfbe": {"heads": 2},
    })
    torch.manual_seed(0)
    Checkpoint.from_head(Pipeline(cfg).head, cfg, 0).save("untrained")
    write_synthetic_dataset("data", n_per_category=4, categories=("alpha",), resolution=16, seed=0)
    (tmp_path / "c.toml").write_text("")
    assert cli.main(["eval", "--config", "c.toml", "--ckpt", "untrained", "--data", "data",
                     "--report", "r.json", "--emit-maps", "maps"]) == 0
    report = MetricReport.from_json((tmp_path / "r.json").read_text())
    assert set(report.mean) == {"image_auroc", "image_ap", "pixel_auroc", "pixel_aupro"}
    assert len(list((tmp_path / "maps" / "alpha").glob("*_overlay.png"))) == 4
