"""Quick oracle/invariant sweep on the synthetic backbone (``fbclip selftest``)."""

from __future__ import annotations

import io
import math
import tempfile
import time

import numpy as np
import torch

from . import bg_suppress, fg_mask, kernels, mvfbe, oracles, scoring, scr
from .backbone import TokenStack


def _rand_stack(rng, L, C, layer=1):
    t = torch.from_numpy(rng.normal(size=(1, L + 1, C)))
    return TokenStack(cls=t[:, 0], patches=t[:, 1:], layer_index=layer)


def _rand_mask(rng, L):
    return torch.from_numpy(rng.choice([0.5, 1.0], size=(1, L)))


def check_sem(rng, backend, n=10):
    worst = 0.0
    for _ in range(n):
        L, C = int(rng.integers(1, 37)), int(rng.integers(1, 17))
        stack, p = _rand_stack(rng, L, C), _rand_mask(rng, L)
        got = mvfbe.view_semantic(stack, p, 0.6, backend).tokens[0].numpy()
        ref = oracles.semantic_view(stack.tokens()[0].numpy(), p[0].numpy(), 0.6)
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst <= 1e-5, f"max abs err {worst:.2e}"


def check_spa(rng, backend, n=10):
    worst = 0.0
    for _ in range(n):
        side, C = int(rng.integers(1, 7)), int(rng.integers(1, 17))
        stack, p = _rand_stack(rng, side * side, C), _rand_mask(rng, side * side)
        got = mvfbe.view_spatial(stack, p, 5, backend=backend).tokens[0].numpy()
        ref = oracles.spatial_view(stack.tokens()[0].numpy(), p[0].numpy(), 5)
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst <= 1e-5, f"max abs err {worst:.2e}"


def check_suppress(rng, n=20):
    worst = 0.0
    for _ in range(n):
        L, C = int(rng.integers(1, 20)), int(rng.integers(1, 17))
        t = torch.from_numpy(rng.normal(size=(1, L + 1, C)))
        group = mvfbe.EnhancedFeatureGroup(t, "ID", 1)
        proto = torch.from_numpy(rng.normal(size=(1, C)))
        out, err = bg_suppress.suppress(group, proto)
        ref, ref_err = oracles.suppress(t[0, 1:].numpy(), proto[0].numpy())
        worst = max(worst, float(np.abs(out.patches[0].numpy() - ref).max()),
                    float(np.abs(err[0].numpy() - ref_err).max()))
    x = torch.from_numpy(rng.normal(size=(1, 1, 6))).expand(1, 5, 6).clone()
    same, _ = bg_suppress.suppress(mvfbe.EnhancedFeatureGroup(x, "ID", 1), x[:, 1])
    exact = torch.equal(same.patches, 0.5 * x[:, 1:])
    return worst <= 1e-6 and exact, f"max abs err {worst:.2e}, prototype fixture exact={exact}"


def check_mask(rng, n=50):
    ok = True
    for _ in range(n):
        stack = _rand_stack(rng, int(rng.integers(2, 40)), 8)
        v = fg_mask.build_mask(stack).values
        ok &= bool(((v == 0.5) | (v == 1.0)).all())
    const = torch.ones(1, 16, 8)
    flat = fg_mask.build_mask(TokenStack(const[:, 0], const, 1)).values
    ok &= bool((flat == 0.5).all())
    return ok, "values in {0.5, 1.0}; constant stack all 0.5"


def check_scr():
    uni = scr.AlignmentLogits(s=torch.zeros(1, 2, dtype=torch.float64), p=torch.full((1, 2), 0.5, dtype=torch.float64))
    e = float(scr.entropy_loss(uni))
    m = float(scr.margin_loss(uni, 1.0))
    c = float(scr.consistency_loss(uni))
    ok = abs(e - math.log(2)) <= 1e-6 and m == 1.0 and abs(c - 0.15 * (math.log(2) + 0.5)) <= 1e-4
    return ok, f"entropy {e:.6f}, margin {m}, total {c:.6f}"


def check_metrics(rng, n=20):
    ok = abs(scoring.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) - 0.75) <= 1e-9
    for _ in range(n):
        k = int(rng.integers(4, 30))
        y = rng.integers(0, 2, size=k)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, size=k).astype(float)
        ok &= abs(scoring.auroc(s, y) - oracles.auroc_pairs(s, y)) <= 1e-9
        ok &= abs(scoring.average_precision(s, y) - oracles.ap_sweep(s, y)) <= 1e-9
    m = rng.random((8, 8))
    g = np.zeros((8, 8), bool)
    g[2:4, 2:5] = True
    g[6, 6] = True
    ok &= abs(scoring.aupro([m], [g]) - oracles.aupro_sweep([m], [g])) <= 1e-3
    return bool(ok), "auroc/ap/aupro vs exhaustive sweeps"


def check_gradient(rng):
    text = torch.from_numpy(rng.normal(size=(2, 6)))

    def f(v):
        return scr.consistency_loss(scr.align(v, text, 0.07))

    v = torch.from_numpy(rng.normal(size=(3, 6))).requires_grad_(True)
    f(v).backward()
    num = oracles.central_difference(f, v)
    err = oracles.relative_error(v.grad, num)
    return err <= 1e-3, f"relative error {err:.2e}"


def check_checkpoint():
    from .harness.checkpoint import Checkpoint
    from .harness.config import RunConfig
    from .pipeline import Pipeline

    cfg = RunConfig.synthetic()
    torch.manual_seed(0)
    ck = Checkpoint.from_head(Pipeline(cfg).head, cfg, 3)
    with tempfile.TemporaryDirectory() as d:
        ck.save(d)
        again = Checkpoint.load(d)
    ok = again.payload() == ck.payload() and again.config.to_dict() == cfg.to_dict()
    return ok, "save -> load -> save byte-stable"


def run(seed: int = 0, out=None) -> bool:
    rng = np.random.default_rng(seed)
    checks = []
    for b in kernels.BACKENDS:
        checks.append((f"semantic view vs loop oracle [{b}]", lambda b=b: check_sem(rng, b)))
        checks.append((f"spatial view vs loop oracle [{b}]", lambda b=b: check_spa(rng, b)))
    checks += [
        ("background suppression vs direct transcription", lambda: check_suppress(rng)),
        ("soft mask contract", lambda: check_mask(rng)),
        ("consistency regulariser analytics", check_scr),
        ("metric oracles", lambda: check_metrics(rng)),
        ("consistency gradient vs finite differences", lambda: check_gradient(rng)),
        ("checkpoint round-trip", check_checkpoint),
    ]
    out = out or io.StringIO()
    all_ok = True
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail}; {time.perf_counter() - t0:.2f}s)", file=out)
    return all_ok
