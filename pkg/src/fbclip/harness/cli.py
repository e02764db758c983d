"""``fbclip`` command line: train, eval, score, selftest, make-synthetic."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import selftest
from .checkpoint import Checkpoint
from .config import load_config, tomllib
from .data import ingest, load_image, write_synthetic_dataset
from .evaluate import map_to_png, overlay_png
from .evaluate import evaluate as run_evaluate
from .train import TrainingDiverged
from .train import train as run_train


def _value(text: str):
    """Parse a ``--set`` value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        out[key.strip()] = _value(val.strip())
    return out


def cmd_train(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.data:
        overrides["data.train_root"] = args.data
    cfg = load_config(args.config, overrides).resolve_preset()
    if not cfg.data.train_root:
        print("no training data: set data.train_root (or a preset with its roots) or pass --data", file=sys.stderr)
        return 2
    index = ingest(cfg.data.train_root, cfg.data.layout, cfg.data.split)
    out = Path(args.out or "runs/latest")
    try:
        ckpt = run_train(index, cfg, out)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    last = ckpt.history[-1]["total"] if ckpt.history else float("nan")
    print(f"trained {ckpt.step} steps on {len(index)} images; final loss {last:.4f}; checkpoint {out / 'final'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args.set)).resolve_preset()
    ckpt = Checkpoint.load(args.ckpt)
    root = args.data or cfg.data.eval_root
    if not root:
        print("no evaluation data: pass --data or set data.eval_root", file=sys.stderr)
        return 2
    index = ingest(root, cfg.data.layout, cfg.data.split)
    report = run_evaluate(index, ckpt, args.report, args.emit_maps, cfg.data.dataset or None)
    for cat, m in sorted(report.categories.items()):
        print(cat, " ".join(f"{k}={_fmt(v)}" for k, v in m.items()))
    print("mean", " ".join(f"{k}={_fmt(v)}" for k, v in report.mean.items()))
    return 0


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def cmd_score(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    pipe = ckpt.pipeline()
    img = load_image(args.image, pipe.enc.image_resolution)
    amap = pipe.score(img.unsqueeze(0))[0]
    out = Path(args.out or f"{Path(args.image).stem}_heatmap.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    map_to_png(amap.map).save(out)
    overlay_png(img, amap.map).save(out.with_name(out.stem + "_overlay.png"))
    print(f"{amap.image_score:.6f}")
    print(f"heatmap written to {out}", file=sys.stderr)
    return 0


def cmd_selftest(args) -> int:
    ok = selftest.run(args.seed, sys.stdout)
    print("selftest:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_make_synthetic(args) -> int:
    cats = tuple(args.categories.split(","))
    write_synthetic_dataset(args.root, args.n, cats, args.resolution, args.seed)
    print(f"wrote {args.n * len(cats)} images under {args.root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbclip")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit the trainable head")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="checkpoint directory (default runs/latest)")
    t.add_argument("--data", help="training root, overrides data.train_root")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--report")
    e.add_argument("--emit-maps")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("score", help="score one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", help="heatmap path (default <image-stem>_heatmap.png)")
    s.set_defaults(fn=cmd_score)

    st = sub.add_parser("selftest", help="oracle/invariant checks on the synthetic backbone")
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(fn=cmd_selftest)

    m = sub.add_parser("make-synthetic", help="write a synthetic MVTec-style dataset")
    m.add_argument("root")
    m.add_argument("--n", type=int, default=16, help="images per category")
    m.add_argument("--categories", default="alpha,beta")
    m.add_argument("--resolution", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_make_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
