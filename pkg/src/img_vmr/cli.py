"""Command line entry point: ``img synth|train|eval|noise-sweep|report``.

Exit codes: 0 on success, 2 on invalid input or configuration, 3 when a
training loss turns non-finite.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import BRANCHES, SyntheticSpec, load_json, load_model_config
from .data import generate_synthetic_dataset, load_dataset, save_dataset
from .errors import ConfigError, IMGError, TrainingDivergenceError
from .report import kind_of, render_text, write_sweep_svgs

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("img_vmr")


def _bundles(data_dir, split, load_audio=True, max_frames=None):
    """Bundles of one split; datasets without split tags are used whole."""
    bundles = load_dataset(data_dir, load_audio=load_audio, max_frames=max_frames)
    if split and any(b.split is not None for b in bundles):
        bundles = [b for b in bundles if b.split == split]
    return bundles


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))


def cmd_synth(args) -> int:
    spec = load_json(SyntheticSpec, args.spec) if args.spec else SyntheticSpec()
    if os.environ.get("IMG_SEED") is not None:
        spec.seed = load_model_config().seed
    out = save_dataset(generate_synthetic_dataset(spec), args.out)
    print(f"wrote {spec.n_samples} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import CHECKPOINT_NAME, config_from_checkpoint, load_checkpoint, train

    cfg = load_model_config(args.config)
    bundles = _bundles(args.data, "train", max_frames=cfg.max_frames)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    resume = None
    ckpt_path = Path(args.out) / CHECKPOINT_NAME
    if args.resume and ckpt_path.exists():
        resume = load_checkpoint(ckpt_path)
        if config_from_checkpoint(resume) != cfg:
            raise ConfigError(f"{ckpt_path} was trained with a different config; "
                              "resume with the same config or start a fresh run")
    state = train(cfg, bundles, out_dir=args.out, resume=resume, stop_after_epoch=args.stop_after)
    print(f"trained {state.epoch} epochs ({state.step} steps); checkpoint at {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint, load_model

    model = load_model(args.ckpt)
    bundles = _bundles(args.data, args.split, load_audio=args.branch != "visual",
                       max_frames=model.cfg.max_frames)
    report = evaluate_checkpoint(model, bundles, args.branch)
    obj = {"kind": "eval", "branch": args.branch, "checkpoint": str(args.ckpt), **report.to_json()}
    if args.report:
        _write_json(args.report, obj)
    print(render_text(obj))
    return EXIT_OK


def cmd_noise_sweep(args) -> int:
    from .train import load_model, noise_sweep

    try:
        fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad --fractions: {args.fractions}") from exc
    model = load_model(args.ckpt)
    bundles = _bundles(args.data, args.split, max_frames=model.cfg.max_frames)
    seed = int(os.environ.get("IMG_SEED", args.seed))
    obj = {"kind": "noise_sweep", "checkpoint": str(args.ckpt), "seed": seed,
           "rows": noise_sweep(model, bundles, fractions, seed=seed)}
    if args.report:
        _write_json(args.report, obj)
    print(render_text(obj))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        obj = json.loads(Path(args.input).read_text())
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"{args.input}: invalid JSON ({exc})") from exc
    print(render_text(obj))
    if args.svg:
        if kind_of(obj) == "noise_sweep":
            for path in write_sweep_svgs(obj, args.svg):
                print(f"wrote {path}")
        else:
            print("no curves for an evaluation report; --svg ignored", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="img", description="Importance-weighted audio-visual moment retrieval")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--spec", help="SyntheticSpec JSON (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the train split of a dataset directory")
    p.add_argument("--config", help="ModelConfig JSON (defaults when omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.pt if present")
    p.add_argument("--stop-after", type=int, metavar="EPOCH",
                   help="end after this many epochs; the LR schedule still spans the full run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one branch of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--branch", choices=BRANCHES, default="fusion")
    p.add_argument("--split", default="test")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep", help="replace growing shares of audio with noise")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0,0.25,0.5,0.75,1.0")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the JSON table here")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("report", help="render an eval or noise-sweep JSON file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--svg", help="directory for SVG curves (noise sweeps)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IMGError, argparse.ArgumentTypeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
