"""Command-line entry point.

Subcommands: gen-data, train-source, adapt, eval, analyze, gradcheck,
reproduce. Exit codes are machine readable: 0 ok, 2 configuration or
contract error, 3 numeric failure, 4 I/O or container format error.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import pipeline
from .contrast import OBJECTIVES
from .errors import (ConfigError, ContractError, FormatError, GenerationError,
                     NumericError, StplabError)
from .gradcheck import run_gradcheck_suite
from .metrics import build_analysis_set, class_variances, emit_report, knn_purity
from .segnet import load_checkpoint, save_checkpoint
from .stfusion import FUSION_KINDS
from .synthvid import read_dataset
from .trainer import adapt_sfda

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _add_config_flag(parser):
    parser.add_argument("--config", help="JSON run-config file; flags override it")


def build_parser():
    parser = argparse.ArgumentParser(prog="stplab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--domain", choices=("source", "target"), required=True)
    p.add_argument("--num-sequences", type=int, default=60)
    p.add_argument("--frames", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--force", action="store_true")
    _add_config_flag(p)

    p = sub.add_parser("train-source", help="supervised training on labeled source data")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--poly-power", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fusion", choices=FUSION_KINDS)
    _add_config_flag(p)

    p = sub.add_parser("adapt", help="source-free adaptation on unlabeled target data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=OBJECTIVES, default="stpl")
    p.add_argument("--tau", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--cap-m", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--poly-power", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fusion", choices=FUSION_KINDS,
                   help="must match the checkpoint's fusion kind")
    _add_config_flag(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_config_flag(p)

    p = sub.add_parser("analyze", help="feature-space purity and variance analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int)
    p.add_argument("--knn-ks", help="comma-separated k values")
    p.add_argument("--distance", choices=("euclidean", "cosine"))
    p.add_argument("--seed", type=int, default=0)
    _add_config_flag(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("reproduce", help="source training plus every objective, tabulated")
    p.add_argument("--workdir", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated benchmark seeds")
    p.add_argument("--methods", default=",".join(pipeline.METHOD_ORDER))
    p.add_argument("--force-data", action="store_true")
    p.add_argument("--adapt-iterations", type=int)
    p.add_argument("--source-iterations", type=int)
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-eval", type=int)
    _add_config_flag(p)
    return parser


def _overrides_from(args, mapping):
    overrides = {}
    for flag, path in mapping.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return overrides


def cmd_gen_data(args):
    overrides = _overrides_from(args, {
        "frames": ("data", "frames"),
        "height": ("data", "height"),
        "width": ("data", "width"),
        "classes": ("data", "classes"),
    })
    config = pipeline.load_run_config(args.config, overrides)
    manifest = pipeline.generate_split(args.out, args.domain, args.seed,
                                       args.num_sequences, config, force=args.force)
    print(f"wrote {manifest['sequences']} sequences "
          f"({manifest['classes']} classes, domain={manifest['domain']}) to {args.out}")
    print(f"domain spec: {json.dumps(manifest['spec'], sort_keys=True)}")
    return EXIT_OK


def cmd_train_source(args):
    overrides = _overrides_from(args, {
        "iterations": ("train_source", "iterations"),
        "lr": ("train_source", "lr0"),
        "momentum": ("train_source", "momentum"),
        "poly_power": ("train_source", "poly_power"),
        "fusion": ("model", "fusion"),
    })
    config = pipeline.load_run_config(args.config, overrides)
    ckpt = pipeline.train_source_to(args.out, args.data, config, seed=args.seed)
    print(f"source checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_adapt(args):
    overrides = _overrides_from(args, {
        "iterations": ("adapt", "iterations"),
        "lr": ("adapt", "lr0"),
        "momentum": ("adapt", "momentum"),
        "poly_power": ("adapt", "poly_power"),
        "tau": ("adapt", "tau"),
        "k": ("adapt", "k"),
        "cap_m": ("adapt", "cap_m"),
    })
    config = pipeline.load_run_config(args.config, overrides)
    expected = None
    if args.fusion is not None:
        stored = load_checkpoint(args.checkpoint).config
        expected = dataclasses.replace(stored, fusion=args.fusion)
    train_cfg = pipeline.train_config_from(config, "adapt", seed=args.seed,
                                           objective=args.method)
    model, log = adapt_sfda(args.checkpoint, args.data, train_cfg,
                            expected_config=expected)
    out = Path(args.out)
    save_checkpoint(model, out)
    log.write(out / "loss.csv",
              config_echo=json.dumps({"seed": args.seed, "method": args.method,
                                      "config": config}, sort_keys=True))
    print(f"adapted checkpoint ({args.method}) written to {out}")
    return EXIT_OK


def cmd_eval(args):
    config = pipeline.load_run_config(args.config)
    report = pipeline.run_eval(args.checkpoint, args.data, config, seed=args.seed)
    written = emit_report(report, args.out)
    print(f"mIoU={report.miou:.4f} temporal_consistency={report.temporal_consistency:.2f}%")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_analyze(args):
    overrides = _overrides_from(args, {
        "per_class": ("metrics", "per_class"),
        "distance": ("metrics", "distance"),
    })
    if args.knn_ks:
        overrides.setdefault("metrics", {})["knn_ks"] = [
            int(v) for v in args.knn_ks.split(",")]
    config = pipeline.load_run_config(args.config, overrides)
    model = load_checkpoint(args.checkpoint)
    _, sequences = read_dataset(args.data)
    analysis = build_analysis_set(model, sequences,
                                  per_class=config["metrics"]["per_class"],
                                  seed=args.seed)
    purity = knn_purity(analysis, config["metrics"]["knn_ks"],
                        distance=config["metrics"]["distance"])
    intra, inter = class_variances(analysis)
    report = pipeline.run_eval(args.checkpoint, args.data, config, seed=args.seed)
    report.purity = purity
    report.sigma_intra = intra
    report.sigma_inter = inter
    written = emit_report(report, args.out)
    print(f"sigma_intra={intra:.6f} sigma_inter={inter:.6f}")
    for k in sorted(purity):
        print(f"purity@k={k}: {purity[k]:.2f}%")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args):
    rows = run_gradcheck_suite(n_seeds=args.seeds, tolerance=args.tolerance)
    width = max(len(name) for name, _, _ in rows)
    failed = False
    for name, err, ok in rows:
        state = "PASS" if ok else "FAIL"
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {state}")
        failed = failed or not ok
    if failed:
        raise NumericError("gradient check failed for at least one operation")
    return EXIT_OK


def cmd_reproduce(args):
    overrides = _overrides_from(args, {
        "adapt_iterations": ("adapt", "iterations"),
        "source_iterations": ("train_source", "iterations"),
        "num_train": ("data", "num_train"),
        "num_eval": ("data", "num_eval"),
    })
    config = pipeline.load_run_config(args.config, overrides)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    methods = [m for m in args.methods.split(",") if m != ""]
    table = pipeline.run_benchmark(args.workdir, seeds, methods=methods,
                                   config=config, force_data=args.force_data)
    print((Path(args.workdir) / "table.md").read_text())
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "reproduce": cmd_reproduce,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ContractError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StplabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
