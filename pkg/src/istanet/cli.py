"""Command-line harness.

Commands: train, eval, gradcheck, inspect, synth.
Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 numeric abort.
"""

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .data import ParseError, ValidationError, load_manifest, parse_iskel
from .engine import ConfigurationError, UsageError
from .gradcheck import run_gradcheck
from .model import ISTANet, ModelConfig, TrainConfig, evaluate_topk
from .synth import generate_corpus
from .tokenizer import token_rows, tokenize
from .training import NumericAbort, preprocess, train

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class ConfigFileError(ValueError):
    pass


_TOP_KEYS = {"model", "train", "data", "out_dir"}
_DATA_KEYS = {"manifest", "train_tag", "val_tag", "num_classes"}


def load_run_config(path):
    """Strictly parse a run-config JSON file; unknown keys are rejected and
    referenced paths must exist."""
    if not os.path.exists(path):
        raise ConfigFileError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigFileError(f"{path}: invalid JSON ({e})") from None
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigFileError(f"{path}: unknown top-level keys {sorted(unknown)}")
    for key in ("model", "train", "data"):
        if key not in doc:
            raise ConfigFileError(f"{path}: missing required section {key!r}")

    model_fields = set(ModelConfig.__dataclass_fields__)
    bad = set(doc["model"]) - model_fields
    if bad:
        raise ConfigFileError(f"{path}: unknown model keys {sorted(bad)}")
    train_fields = set(TrainConfig.__dataclass_fields__)
    bad = set(doc["train"]) - train_fields
    if bad:
        raise ConfigFileError(f"{path}: unknown train keys {sorted(bad)}")
    bad = set(doc["data"]) - _DATA_KEYS
    if bad:
        raise ConfigFileError(f"{path}: unknown data keys {sorted(bad)}")

    try:
        model_config = ModelConfig.from_dict(doc["model"])
        train_config = TrainConfig.from_dict(doc["train"])
    except (TypeError, ConfigurationError) as e:
        raise ConfigFileError(f"{path}: {e}") from None

    manifest_path = doc["data"]["manifest"]
    if not os.path.isabs(manifest_path):
        manifest_path = os.path.join(os.path.dirname(os.path.abspath(path)), manifest_path)
    if not os.path.exists(manifest_path):
        raise ConfigFileError(f"{path}: manifest not found: {manifest_path}")
    data = dict(doc["data"])
    data["manifest"] = manifest_path
    data.setdefault("train_tag", "train")
    data.setdefault("val_tag", "val")
    return model_config, train_config, data, doc.get("out_dir", "runs/out")


def _apply_overrides(model_config, train_config, args):
    if args.epochs is not None:
        train_config.epochs = args.epochs
    if args.lr is not None:
        train_config.lr = args.lr
    if args.seed is not None:
        train_config.seed = args.seed
    if args.window is not None:
        w = tuple(int(v) for v in args.window.split(","))
        if len(w) != 3:
            raise ConfigFileError(f"--window expects t,j,e, got {args.window!r}")
        model_config.window = w
    if args.frames is not None:
        model_config.frames = args.frames
    return model_config, train_config


def _dtype(args):
    return np.float64 if args.precision == "f64" else np.float32


def cmd_train(args):
    model_config, train_config, data, out_dir = load_run_config(args.config)
    model_config, train_config = _apply_overrides(model_config, train_config, args)
    if args.out is not None:
        out_dir = args.out
    manifest = load_manifest(data["manifest"], num_classes=data.get("num_classes"))
    rng = np.random.default_rng(train_config.seed)
    model = ISTANet(model_config, rng=rng, dtype=_dtype(args))
    os.makedirs(out_dir, exist_ok=True)
    snapshot = {"model": model_config.to_dict(), "train": train_config.to_dict(),
                "data": data, "out_dir": out_dir}
    with open(os.path.join(out_dir, "config.resolved.json"), "w", encoding="utf-8") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)

    def log_sink(record, wall_ms):
        val = "-" if record["val_top1"] is None else f"{record['val_top1']:.4f}"
        print(f"epoch {record['epoch']:4d} lr {record['lr']:.4g} "
              f"loss {record['train_loss']:.4f} train@1 {record['train_top1']:.4f} "
              f"val@1 {val} ({wall_ms:.0f} ms)")

    train(model, manifest, train_config, out_dir=out_dir,
          train_tag=data["train_tag"], val_tag=data["val_tag"], log_sink=log_sink)
    return EXIT_OK


def cmd_eval(args):
    model, _, _, _, _ = load_checkpoint(args.checkpoint, dtype=_dtype(args))
    manifest = load_manifest(args.manifest)
    frames = model.config.frames
    prep = lambda s: preprocess(s, frames)

    if args.folds:
        accs = []
        for tag in manifest.fold_tags():
            entries = manifest.split(tag)
            acc, _ = evaluate_topk(model, manifest, entries, k=1, preprocess=prep)
            accs.append(acc)
            print(f"{tag}: {100 * acc:.2f}")
        print(f"mean: {100 * float(np.mean(accs)):.2f}")
        return EXIT_OK

    entries = manifest.split(args.split)
    if not entries:
        raise UsageError(f"no samples tagged {args.split!r} in manifest")
    acc, per_class = evaluate_topk(model, manifest, entries, k=1, preprocess=prep)
    print(f"top-1: {100 * acc:.2f}")
    for cls, (hits, total) in enumerate(per_class):
        if total:
            print(f"class {cls} ({manifest.class_names[cls]}): {hits}/{total}")
    return EXIT_OK


def cmd_gradcheck(args):
    config = None
    if args.config:
        config, _, _, _ = load_run_config(args.config)
    report, offenders = run_gradcheck(config=config, seed=args.seed or 0,
                                      tolerance=args.tolerance)
    for name in sorted(report):
        print(f"{name}: {report[name]:.3e}")
    if offenders:
        print(f"FAIL: {len(offenders)} parameter(s) exceed tolerance {args.tolerance}:",
              file=sys.stderr)
        for name, err in sorted(offenders.items()):
            print(f"  {name}: {err:.3e}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"OK: all {len(report)} parameters within {args.tolerance}")
    return EXIT_OK


def cmd_inspect(args):
    with open(args.sample, "r", encoding="utf-8") as f:
        seq = parse_iskel(f.read(), source_id=args.sample)

    if args.what == "tokens":
        window = tuple(int(v) for v in args.window.split(","))
        tokens, u_layout = tokenize(seq.data, window)
        print("u,t_block,j_block,e_block,s,c,value")
        for row in token_rows(tokens, u_layout, window):
            *idx, value = row
            print(",".join(str(v) for v in idx) + f",{value!r}")
        return EXIT_OK

    # attention: forward the sample through a checkpoint, dump score matrices
    if not args.checkpoint:
        raise UsageError("inspect attention requires --checkpoint")
    model, _, _, _, _ = load_checkpoint(args.checkpoint, dtype=_dtype(args))
    seq = preprocess(seq, model.config.frames)
    tokens = model.tokenize_sample(seq, mode="infer")
    sink = []
    model.forward_tokens(tokens, mode="infer", score_sink=sink)
    layout = model.config.u_layout()
    print(f"# u_layout,{layout[0]},{layout[1]},{layout[2]}")
    for b, block_scores in enumerate(sink):
        for h, scores in enumerate(block_scores):
            print(f"# block,{b},head,{h}")
            for row in scores:
                print(",".join(repr(float(v)) for v in row))
    return EXIT_OK


def cmd_synth(args):
    path = generate_corpus(args.out, num_train=args.num_train, num_val=args.num_val,
                           t=args.frames, j=args.joints, noise=args.noise,
                           seed=args.seed or 0, folds=args.folds)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="istanet",
                                     description="Interactive spatiotemporal token attention harness")
    parser.add_argument("--seed", type=int, default=None, help="global seed override")
    parser.add_argument("--workers", type=int, default=1,
                        help="data loading workers (loading is sequential and "
                             "deterministic regardless)")
    parser.add_argument("--precision", choices=("f32", "f64"), default="f32")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--window", default=None, help="t,j,e override")
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="val")
    p.add_argument("--folds", action="store_true", help="k-fold protocol over fold tags")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", default=None)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump tokens or attention scores as CSV")
    p.add_argument("what", choices=("tokens", "attention"))
    p.add_argument("sample")
    p.add_argument("--window", default="1,1,1", help="t,j,e window for token dump")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("synth", help="generate the synthetic 2-entity corpus")
    p.add_argument("out")
    p.add_argument("--num-train", type=int, default=64)
    p.add_argument("--num-val", type=int, default=32)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--joints", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--folds", type=int, default=0)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigFileError, ConfigurationError, ParseError, ValidationError,
            UsageError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
