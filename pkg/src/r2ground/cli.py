"""Command-line surface: synthetic data, training, evaluation, inference,
gradient audits, and parameter accounting."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from .features import SynthSpec, load_manifest, write_dataset
from .training import (
    GroundingModel,
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_samples,
    predictions_record,
    save_checkpoint,
    score_files,
    train,
    write_predictions,
)


def _load_config(path) -> TrainConfig:
    cfg = TrainConfig.from_file(path)
    seed_env = os.environ.get("R2G_SEED")
    if seed_env is not None:
        cfg.seed = int(seed_env)
    return cfg


def cmd_gen_synth(args) -> int:
    raw = json.loads(Path(args.spec).read_text())
    seed = int(raw.pop("seed", 0))
    counts = {
        "train": int(raw.pop("train_count", 100)),
        "val": int(raw.pop("val_count", 25)),
    }
    dataset = raw.pop("dataset", "synthetic")
    spec_keys = {f.name for f in fields(SynthSpec)}
    unknown = set(raw) - spec_keys
    if unknown:
        print(f"unknown synth spec keys: {sorted(unknown)}", file=sys.stderr)
        return 2
    spec = SynthSpec(**raw)
    for name, count in counts.items():
        if count <= 0:
            continue
        path = write_dataset(spec, seed if name == "train" else seed + 7919,
                             count, args.out, name, dataset=dataset)
        print(f"wrote {count} samples -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    manifest = load_manifest(args.manifest, features_dir=args.features_dir)
    samples = load_samples(manifest)

    def progress(entry):
        if entry.step % args.log_every == 0:
            terms = " ".join(f"{k}={v:.4f}" for k, v in entry.terms.items())
            print(f"step {entry.step:5d} lr {entry.lr:.2e} "
                  f"loss {entry.loss:.4f} ({terms})")

    model, history = train(cfg, samples, callback=progress)
    save_checkpoint(model, args.out, step=len(history))
    print(f"saved checkpoint ({model.param_count()} parameters) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.pred and args.gt:
        report = score_files(args.pred, args.gt)
    elif args.ckpt and args.manifest:
        model, _ = load_checkpoint(args.ckpt)
        manifest = load_manifest(args.manifest, features_dir=args.features_dir)
        samples = load_samples(manifest)
        report = evaluate(model, samples,
                          saliency_threshold=manifest.saliency_positive_threshold)
    else:
        print("eval needs either --ckpt and --manifest, or --pred and --gt",
              file=sys.stderr)
        return 2
    for key, value in report.items():
        print(f"{key}: {value:.4f}")
    return 0


def cmd_infer(args) -> int:
    from .features import load_features

    model, _ = load_checkpoint(args.ckpt)
    fs = load_features(args.features)
    kept, sal, summary = model.predict(fs)
    rec = predictions_record(
        Path(args.features).stem, kept, sal, summary,
        frame_rate=fs.frame_rate,
        unit="seconds" if args.seconds else "frames",
    )
    if args.out:
        write_predictions([rec], args.out)
        print(f"wrote predictions -> {args.out}")
    else:
        print(json.dumps(rec))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, TOLERANCE, run_all

    names = [args.module] if args.module else list(CHECKS)
    for name in names:
        if name not in CHECKS:
            print(f"unknown module {name!r}; choose from {sorted(CHECKS)}",
                  file=sys.stderr)
            return 2
    results = run_all(names)
    failed = False
    for name, err in results.items():
        ok = err < TOLERANCE
        failed |= not ok
        print(f"{name:12s} max rel err {err:.3e}  "
              f"{'PASS' if ok else 'FAIL'} (tolerance {TOLERANCE:g})")
    return 1 if failed else 0


def cmd_param_count(args) -> int:
    cfg = _load_config(args.config) if args.config else TrainConfig()
    model = GroundingModel(cfg)
    total = model.param_count()
    by_part = {"block": model.block.count(), "heads": model.heads.count()}
    print(f"learnable parameters: {total} ({total/1e6:.2f}M)")
    for part, count in by_part.items():
        print(f"  {part}: {count}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="r2ground",
        description="Video temporal grounding over frozen multi-layer features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON synth spec file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features-dir", default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a predictions file")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--features-dir", default=None)
    p.add_argument("--pred", help="predictions JSONL")
    p.add_argument("--gt", help="ground-truth JSONL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run inference on one feature file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seconds", action="store_true",
                   help="report moments in seconds instead of frames")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audits")
    p.add_argument("--module", default=None,
                   help="tensor | attention | block | calibration | heads | full")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("param-count", help="report learnable parameter count")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_param_count)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
