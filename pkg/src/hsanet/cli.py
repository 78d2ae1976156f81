"""Command-line entry point: ``hsanet <subcommand> ...``.

Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import CheckpointError
from .gradcheck import finite_diff_check
from .metrics import dice_loss
from .model import ModelConfig, ParamStore, forward, init_params
from .tensor import NonFiniteError, ShapeError
from .training import NumericalError, TrainConfig, evaluate, predict, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("hsanet")


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return TrainConfig.from_dict(d)


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    d = cfg.to_dict()
    for key in ("lr", "weight_decay", "batch_size", "epochs", "seed", "lr_schedule"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    for key in ("num_scales", "base_channels", "attention_max_tokens"):
        v = getattr(args, key, None)
        if v is not None:
            d["model"][key] = v
            if key in ("num_scales", "base_channels"):
                d["model"]["channel_schedule"] = None
                d["model"]["attention_dim"] = None
    return TrainConfig.from_dict(d)


def cmd_synth(args) -> int:
    spec = D.SynthSpec(
        seed=args.seed if args.seed is not None else 0,
        count=args.count,
        size=args.size,
        change_fraction=args.change_fraction,
        noise_sigma=args.noise_sigma,
        removal_prob=args.removal_prob,
    )
    m = D.synth_generate(spec, args.out)
    c = m.counts()
    print(f"wrote {len(m.records)} pairs to {args.out} (train={c['train']} val={c['val']} test={c['test']})")
    return EXIT_OK


def cmd_tile(args) -> int:
    t1 = D.read_image(args.t1)
    t2 = D.read_image(args.t2)
    mask = D.read_mask(args.mask)
    tiles = D.tile_scene(t1, t2, mask, args.patch, prefix=args.prefix)
    D.write_tiles(tiles, args.out, split=args.split)
    print(f"wrote {len(tiles)} tiles to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    manifest = D.load_manifest(args.manifest)
    res = train(cfg, manifest, args.out)
    for rec in res.log:
        print(rec.line())
    print(f"checkpoint: {res.last_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    expect = D.parse_counts(args.expect_counts) if args.expect_counts else None
    manifest = D.load_manifest(args.manifest, expect_counts=expect)
    out_path = None
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        out_path = Path(args.out) / f"metrics_{args.split}.json"
    if args.checkpoint is None and not args.oracle:
        raise ValueError("--checkpoint is required unless --oracle is given")
    report, cm = evaluate(args.checkpoint, manifest, args.split, out_path=out_path, oracle=args.oracle)
    print(report.to_text())
    print(f"tp: {cm.tp}\nfp: {cm.fp}\ntn: {cm.tn}\nfn: {cm.fn}")
    return EXIT_OK


def cmd_predict(args) -> int:
    written = predict(args.checkpoint, args.t1, args.t2, args.out, gt_path=args.gt)
    for k, p in written.items():
        print(f"{k}: {p}")
    return EXIT_OK


def cmd_render(args) -> int:
    pred = D.read_mask(args.pred)
    gt = D.read_mask(args.gt)
    out = Path(args.out)
    if out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "error.png"
    D.write_image(out, D.render_error_map(pred, gt))
    print(f"error map: {out}")
    return EXIT_OK


def tiny_model_gradcheck(seed: int = 0, step: float = 1e-3, tol: float = 1e-2,
                         max_coords: int | None = None):
    """Finite-difference check of forward + dice loss over every parameter of
    a 2-scale, 4-channel model on 16x16 inputs."""
    cfg = ModelConfig(num_scales=2, base_channels=4, attention_max_tokens=16)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for name, t in params:
        if name.endswith(".bias"):
            # nonzero biases so bias gradients are exercised away from zero
            t.data = rng.uniform(-0.1, 0.1, t.shape).astype(np.float32)
    t1 = rng.random((1, 3, 16, 16))
    t2 = rng.random((1, 3, 16, 16))
    y = (rng.random((1, 1, 16, 16)) > 0.7).astype(np.float64)
    names = params.names()

    def f(*tensors):
        store = ParamStore(list(zip(names, tensors)))
        return dice_loss(forward(t1, t2, store, cfg), y)

    return finite_diff_check(f, params.tensors(), step=step, tol=tol, names=names,
                             max_coords=max_coords, seed=seed)


def cmd_gradcheck(args) -> int:
    report = tiny_model_gradcheck(args.seed or 0, args.step, args.tol, args.max_coords)
    print(report)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring TrainConfig (with nested model)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hsanet", description="HSANet change detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic bitemporal dataset")
    s.add_argument("--count", type=int, default=92)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--change-fraction", type=float, default=0.15)
    s.add_argument("--noise-sigma", type=float, default=0.02)
    s.add_argument("--removal-prob", type=float, default=0.1)
    s.set_defaults(func=cmd_synth, need_out=True)

    s = sub.add_parser("tile", parents=[common], help="cut a scene triple into patches")
    s.add_argument("--t1", required=True)
    s.add_argument("--t2", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--patch", type=int, default=256)
    s.add_argument("--split", default="train", choices=D.SPLITS)
    s.add_argument("--prefix", default="")
    s.set_defaults(func=cmd_tile, need_out=True)

    s = sub.add_parser("train", parents=[common], help="train with AdamW on dice loss")
    s.add_argument("--manifest", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr-schedule", choices=["constant"])
    s.add_argument("--num-scales", type=int)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--attention-max-tokens", type=int)
    s.set_defaults(func=cmd_train, need_out=True)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest split")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test", choices=D.SPLITS)
    s.add_argument("--expect-counts", help="train,val,test counts the manifest must contain")
    s.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    s.set_defaults(func=cmd_eval, need_out=False)

    s = sub.add_parser("predict", parents=[common], help="probability map, mask and error map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--t1", required=True)
    s.add_argument("--t2", required=True)
    s.add_argument("--gt")
    s.set_defaults(func=cmd_predict, need_out=True)

    s = sub.add_parser("render", parents=[common], help="TP/FP/TN/FN error map from two masks")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.set_defaults(func=cmd_render, need_out=True)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a tiny model")
    s.add_argument("--step", type=float, default=1e-3)
    s.add_argument("--tol", type=float, default=1e-2)
    s.add_argument("--max-coords", type=int)
    s.set_defaults(func=cmd_gradcheck, need_out=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.need_out and not args.out:
        print(f"hsanet {args.command}: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (NumericalError, NonFiniteError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ShapeError, CheckpointError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
