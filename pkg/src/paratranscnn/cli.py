"""Command-line entry point: synth, train, eval, predict, export-attention, gradcheck."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, ModelConfig, TrainConfig, load_config
from .io import FormatError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def _layers(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("layer counts must be >= 1")
    return vals


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paratranscnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic segmentation dataset")
    s.add_argument("--cases", type=int, default=2)
    s.add_argument("--slices", type=int, default=4)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", type=Path, help="JSON with 'model' and 'train' sections")
    t.add_argument("--data", type=Path, required=True, help="manifest.json or its directory")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--input-size", type=int)
    t.add_argument("--patch-overlap", action="store_true", default=None)
    t.add_argument("--four-stages", action="store_true", default=None)
    t.add_argument("--no-pyramid", action="store_true", default=None)
    t.add_argument("--no-channel-attention", action="store_true", default=None)
    t.add_argument("--token-dim", type=int)
    t.add_argument("--layers", type=_layers, help="Transformer layers per stage, e.g. 3,3,3")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--plot", action="store_true", help="also write loss_curve.pgm")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--csv", type=Path)
    e.add_argument("--mode", choices=("3d", "2d"), default="3d", help="group metrics per case or per slice")

    for name, helptext in (("predict", "segment one image"), ("export-attention", "dump channel-attention maps")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("--checkpoint", type=Path, required=True)
        q.add_argument("--image", type=Path, required=True, help="PTCN image (H x W or P x H x W)")
        q.add_argument("--out", type=Path, required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of ops and a whole f64 network")
    g.add_argument("--config", type=Path, help="model config JSON (default: minimal)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ops-only", action="store_true")
    return p


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    if args.config is not None:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    m = {}
    for flag in ("patch_overlap", "four_stages", "no_pyramid", "no_channel_attention", "input_size"):
        if getattr(args, flag) is not None:
            m[flag] = getattr(args, flag)
    if args.token_dim is not None:
        m["token_dim"] = args.token_dim
    if args.layers is not None:
        m["layers_per_stage"] = args.layers
    t = {}
    if args.seed is not None:
        t["seed"] = m["seed"] = args.seed
    for flag, key in (("epochs", "epochs"), ("lr", "base_lr"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            t[key] = getattr(args, flag)
    return dataclasses.replace(model_cfg, **m), dataclasses.replace(train_cfg, **t)


def cmd_synth(args) -> int:
    from .data import synth_generate

    man = synth_generate(args.out, args.cases, args.slices, args.classes, args.size, seed=args.seed)
    print(f"wrote {len(man)} slices to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_manifest
    from .train import render_loss_curve, train

    model_cfg, train_cfg = _train_configs(args)
    manifest = load_manifest(args.data)
    if model_cfg.num_classes != manifest.num_classes:
        model_cfg = dataclasses.replace(model_cfg, num_classes=manifest.num_classes)
    ck, tlog = train(model_cfg, train_cfg, manifest, args.out, resume=args.resume)
    if args.plot:
        render_loss_curve(tlog, args.out / "loss_curve.pgm")
    last = tlog.records[-1] if tlog.records else None
    msg = f"finished at iteration {ck.iteration}"
    if last is not None:
        msg += f", last loss {last['loss']:.4f}"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    rep = evaluate(args.checkpoint, args.data, mode=args.mode, csv_path=args.csv)
    print(rep.summary())
    return EXIT_OK


def cmd_predict(args) -> int:
    from .train import predict

    r = predict(args.checkpoint, args.image, args.out)
    print(f"wrote {r['mask_path']} and {r['overlay_path']}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    from .train import export_attention

    r = export_attention(args.checkpoint, args.image, args.out)
    print(f"wrote attention maps for stages {sorted(r)} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_gradcheck, op_suite

    ops_rep = op_suite(seed=args.seed)
    print("\n".join(ops_rep.lines()))
    ok = ops_rep.ok
    if not args.ops_only:
        cfg = load_config(args.config)[0] if args.config is not None else ModelConfig.minimal()
        net = model_gradcheck(cfg, seed=args.seed, progress=lambda r: print(
            f"{'ok  ' if r.ok else 'FAIL'} {r.name}", flush=True) if args.verbose else None)
        print("\n".join(net.lines()))
        ok = ok and net.ok
    print("gradcheck PASSED" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-attention": cmd_export_attention,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .train import TrainingDiverged

    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
