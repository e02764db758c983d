import numpy as np
import pytest
import torch

from fbclip.harness.config import RunConfig
from fbclip.pipeline import Pipeline, Prepared, dice_loss, focal_loss


def _pipe(**sections):
    cfg = RunConfig.synthetic()
    cfg.update(sections)
    torch.manual_seed(0)
    return Pipeline(cfg)


@pytest.fixture(scope="module")
def images():
    return torch.rand(3, 3, 64, 64, generator=torch.Generator().manual_seed(0))


def test_prepare_shapes(images):
    p = _pipe()
    prep = p.prepare(images)
    assert prep.views.shape == (3, 6, 65, 32)
    assert prep.masks.shape == (3, 2, 64)
    assert prep.cls_embed.shape == (3, 32)
    assert prep.meta == (("ID", 2), ("SEM", 2), ("SPA", 2), ("ID", 4), ("SEM", 4), ("SPA", 4))
    assert len(prep.split()) == 3
    again = Prepared.cat(prep.split())
    assert torch.equal(again.views, prep.views)


def test_forward_outputs(images):
    p = _pipe()
    out = p(p.prepare(images))
    assert out.maps.shape == (3, 6, 8, 8)
    assert float(out.maps.detach().min()) >= 0 and float(out.maps.detach().max()) <= 1
    assert out.global_prob.shape == (3,)
    assert out.alignment.p.shape == (3, 2)
    assert len(out.residuals) == 6


def test_losses_and_gradients(images):
    p = _pipe()
    out = p(p.prepare(images))
    masks = torch.zeros(3, 64, 64)
    masks[1, 10:20, 10:20] = 1
    losses = p.losses(out, torch.tensor([0, 1, 0]), masks)
    assert set(losses) == {"total", "image", "pixel", "consistency"}
    assert losses["total"].item() == pytest.approx(
        losses["image"].item() + losses["pixel"].item() + losses["consistency"].item(), rel=1e-6)
    losses["total"].backward()
    head = p.head
    for name in ("prompt.normal_ctx", "prompt.abnormal_ctx", "visual_proj.weight", "fb.gate.fc.weight"):
        g = dict(head.named_parameters())[name].grad
        assert g is not None and torch.isfinite(g).all() and g.abs().sum() > 0


def test_score_maps(images):
    amaps = _pipe().score(images)
    assert len(amaps) == 3
    for a in amaps:
        assert a.map.shape == (64, 64) and 0 <= a.map.min() and a.map.max() <= 1
        assert 0 <= a.image_score <= 1


@pytest.mark.parametrize("sections", [
    {"mvfbe": {"per_group": True}},
    {"bs": {"sort_by_mask": True}},
    {"bs": {"candidate_fraction": "full"}},
    {"mvfbe": {"views": ["ID"]}},
    {"text": {"lambda_global": 0.0, "lambda_attn": 0.0, "lambda_eot": 1.0}},
    {"mvfbe": {"kernel_backend": "python"}},
])
def test_configuration_axes_run(images, sections):
    p = _pipe(**sections)
    out = p(p.prepare(images))
    assert torch.isfinite(out.maps).all()


def test_per_group_modules():
    p = _pipe(mvfbe={"per_group": True})
    assert len(p.head.fb) == 6


def test_identity_only_ablation_groups(images):
    p = _pipe(mvfbe={"views": ["ID"]})
    assert p.prepare(images).meta == (("ID", 2), ("ID", 4))


def test_scr_source_must_be_enabled():
    with pytest.raises(ValueError, match="source_group"):
        _pipe(mvfbe={"views": ["ID"]}, scr={"source_group": "SEM"})


def test_backends_give_same_scores(images):
    a = _pipe(mvfbe={"kernel_backend": "python"}).score(images)
    from fbclip import kernels

    if "compiled" not in kernels.BACKENDS:
        pytest.skip("extension not built")
    b = _pipe(mvfbe={"kernel_backend": "compiled"}).score(images)
    for x, y in zip(a, b):
        assert np.allclose(x.map, y.map, atol=1e-6)


def test_focal_and_dice():
    y = torch.tensor([1.0, 0.0, 1.0, 0.0])
    perfect = torch.tensor([1 - 1e-7, 1e-7, 1 - 1e-7, 1e-7])
    assert focal_loss(perfect, y).item() == pytest.approx(0.0, abs=1e-9)
    assert dice_loss(y, y).item() == pytest.approx(0.0)
    half = torch.full((4,), 0.5)
    # (1 - 0.5)^2 * ln 2
    assert focal_loss(half, y).item() == pytest.approx(0.25 * np.log(2))
    assert dice_loss(half, y).item() == pytest.approx(1 - 3 / 5)
