"""Command-line entry point.

Subcommands: gen-data, train, ablate, eval, gradcheck, export-maps.
Exit codes: 0 success, 1 usage error, 2 runtime/diverged, 3 I/O error.
Artifact-writing commands refuse to clobber existing outputs unless
--overwrite is given, and always persist the resolved configuration next to
their outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck, network, synth, trainer
from .errors import (ConfigError, ContractError, CorruptFileError, EntconError,
                     FormatError, GenerationError, ParameterError,
                     TrainingDivergedError)
from .uncertainty import entropy, export_entropy_slices
from .volumes import read_volume

USAGE_EXIT, RUNTIME_EXIT, IO_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _refuse_clobber(paths: list[str], overwrite: bool):
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not overwrite:
        raise FileExistsError(
            f"refusing to overwrite {existing[0]} (pass --overwrite)")


def _emit(summary: dict, as_json: bool):
    if as_json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for k, v in summary.items():
            print(f"{k}: {v}")


def _split_csv(s):
    return [v for v in s.split(",") if v]


def cmd_gen_data(args) -> int:
    _refuse_clobber([os.path.join(args.out, "manifest.json")], args.overwrite)
    cfg = synth.GenConfig(
        out_dir=args.out, n_train=args.n_train, n_val=args.n_val,
        size=(args.size,) * 3, labeled_ratio=args.labeled_ratio,
        categories=tuple(_split_csv(args.categories)),
        scatters=tuple(_split_csv(args.scatter)),
        contrast=args.contrast, seed=args.seed)
    manifest = synth.build_dataset(cfg)
    with open(os.path.join(args.out, "resolved_config.json"), "w") as fh:
        json.dump(cfg.__dict__, fh, indent=1, default=list)
        fh.write("\n")
    n_lab = sum(e["labeled"] for e in manifest["volumes"])
    _emit({"manifest": os.path.join(args.out, "manifest.json"),
           "volumes": len(manifest["volumes"]), "labeled": n_lab}, args.json)
    return 0


_CONFIG_OVERRIDES = (
    ("manifest", str), ("out", str), ("seed", int), ("epochs", int),
    ("eta", float), ("entropy-mode", str), ("beta-mode", str),
    ("beta-fixed", float), ("beta-decay", float), ("gamma", float),
    ("tau", float), ("top-k", int), ("patch-k", int), ("noise-sigma", float),
    ("lr", float),
)


def _config_from_args(args) -> trainer.RunConfig:
    overrides = {}
    for flag, _ in _CONFIG_OVERRIDES:
        key = flag.replace("-", "_")
        val = getattr(args, key, None)
        if val is not None:
            overrides["out_dir" if key == "out" else key] = val
    for key in ("use_consistency", "use_contrastive"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val == "true"
    if args.config:
        return trainer.RunConfig.from_json(args.config, **overrides)
    return trainer.RunConfig(**overrides)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.manifest or not cfg.out_dir:
        print("train needs --manifest and --out (or a config providing them)",
              file=sys.stderr)
        return USAGE_EXIT
    _refuse_clobber([os.path.join(cfg.out_dir, "epoch_log.csv")], args.overwrite)
    summary = trainer.train(cfg)
    _emit({"out_dir": summary["out_dir"],
           "best_val_dice": summary["best_val_dice"],
           "best_epoch": summary["best_epoch"],
           "final_val_dice": summary["final"]["val_dice"]}, args.json)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.manifest:
        print("ablate needs --manifest (or a config providing it)", file=sys.stderr)
        return USAGE_EXIT
    axes = {}
    for spec in args.axis or []:
        if "=" not in spec:
            print(f"bad --axis {spec!r}; expected name=v1,v2,...", file=sys.stderr)
            return USAGE_EXIT
        name, vals = spec.split("=", 1)
        axes[name] = _split_csv(vals)
    if not args.out:
        print("ablate needs --out", file=sys.stderr)
        return USAGE_EXIT
    seeds = [int(s) for s in _split_csv(args.seeds)]
    _refuse_clobber([os.path.join(args.out, "ablation_cells.csv")], args.overwrite)
    os.makedirs(args.out, exist_ok=True)
    cfg.to_json(os.path.join(args.out, "resolved_config.json"))
    result = trainer.ablate(cfg, axes, seeds, args.out)
    _emit({"cells_csv": result["cells_csv"], "runs_csv": result["runs_csv"],
           "cells": len(result["cells"])}, args.json)
    return 0


def cmd_eval(args) -> int:
    if not args.oracle and not args.checkpoint:
        print("eval needs --checkpoint (or --oracle)", file=sys.stderr)
        return USAGE_EXIT
    _refuse_clobber([os.path.join(args.out, "per_volume.csv")], args.overwrite)
    result = trainer.evaluate(args.checkpoint, args.manifest,
                              group_by=_split_csv(args.group_by),
                              out_dir=args.out, oracle=args.oracle)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved_config.json"), "w") as fh:
        json.dump({"checkpoint": args.checkpoint, "manifest": args.manifest,
                   "group_by": _split_csv(args.group_by), "oracle": args.oracle},
                  fh, indent=1)
        fh.write("\n")
    for w in result["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    _emit({"overall": result["overall"],
           "groups": {k: v["dice"] for k, v in result["groups"].items()}},
          args.json)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed)
    ok = all(r["ok"] for r in results)
    if args.json:
        print(json.dumps({"ok": ok, "suites": results}, sort_keys=True))
    else:
        for r in results:
            status = "ok" if r["ok"] else "FAIL"
            print(f"{r['suite']:<14} max_rel_error={r['max_rel_error']:.3e} "
                  f"threshold={r['threshold']:.0e} [{status}]")
    return 0 if ok else RUNTIME_EXIT


def cmd_export_maps(args) -> int:
    _refuse_clobber([args.out], args.overwrite)
    vol = read_volume(args.image)
    params, _ = network.load_checkpoint(args.checkpoint)
    x = np.asarray(vol.data, dtype=np.float64)
    p = network.forward(params, x)["p"]
    h = entropy(p)
    written = export_entropy_slices(h, args.axis, args.out)
    with open(os.path.join(args.out, "resolved_config.json"), "w") as fh:
        json.dump({"checkpoint": args.checkpoint, "image": args.image,
                   "axis": args.axis}, fh, indent=1)
        fh.write("\n")
    _emit({"out": args.out, "slices": len(written)}, args.json)
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="entcon", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="generate a synthetic lesion dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=40)
    g.add_argument("--n-val", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--labeled-ratio", type=float, default=0.1)
    g.add_argument("--categories", default="small,medium,large")
    g.add_argument("--scatter", default="scattered,non-scattered")
    g.add_argument("--contrast", type=float, default=2.5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    def add_config_flags(sp):
        sp.add_argument("--config", help="RunConfig JSON; flags override")
        sp.add_argument("--manifest")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--eta", type=float)
        sp.add_argument("--entropy-mode", choices=("dual", "student_only", "teacher_only"))
        sp.add_argument("--beta-mode", choices=("none", "fixed", "adaptive"))
        sp.add_argument("--beta-fixed", type=float)
        sp.add_argument("--beta-decay", type=float)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--top-k", type=int)
        sp.add_argument("--patch-k", type=int)
        sp.add_argument("--noise-sigma", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--use-consistency", dest="use_consistency",
                        choices=("true", "false"))
        sp.add_argument("--use-contrastive", dest="use_contrastive",
                        choices=("true", "false"))

    t = sub.add_parser("train", help="run one training")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run a config grid")
    add_config_flags(a)
    a.add_argument("--axis", action="append",
                   help="axis spec, e.g. entropy_mode=dual,student_only")
    a.add_argument("--seeds", default="0")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--group-by", default="category,scatter")
    e.add_argument("--oracle", action="store_true",
                   help="test hook: use ground truth as the prediction")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="run all finite-difference suites")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("export-maps", help="export entropy-map CSV slices")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--image", required=True)
    m.add_argument("--axis", default="D", choices=("H", "W", "D"))
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export_maps)

    for sp in (g, t, a, e, c, m):
        sp.add_argument("--overwrite", action="store_true")
        sp.add_argument("--json", action="store_true",
                        help="machine-readable summary on stdout")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        return args.func(args)
    except (FileNotFoundError, FileExistsError, IsADirectoryError,
            PermissionError, FormatError, CorruptFileError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return IO_EXIT
    except (ParameterError, ConfigError, ContractError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except (TrainingDivergedError, GenerationError, EntconError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
