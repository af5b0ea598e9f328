"""Command-line entry point.

Subcommands:
  gen-data  --spec spec.json --out dir     write a synthetic dataset to disk
  zsl       --config cfg.json              run the ZSL co-training pipeline
  gzsl      --config cfg.json --setting N  run a GZSL pipeline (1, 2, or plain)
  ood       --config cfg.json --method M   run an OOD evaluation
  report    --in out/<name>                pretty-print a run summary
  selftest                                 gradient checks + metric oracles

Exit codes: 0 ok, 1 configuration/usage error, 2 runtime failure. The only
environment dependence is ICOT_OUT_DIR, which overrides the configured
output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .datamodel import DatasetFormatError, write_dataset
from .report import ConfigError, RunConfig, run_experiment
from .selftest import run_selftest
from .synthbench import SynthSpec, generate

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")


def _cmd_gen_data(args) -> int:
    spec_dict = _load_json(args.spec)
    try:
        spec = SynthSpec(**spec_dict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}")
    result = generate(spec)
    paths = write_dataset(args.out, result.all_features, result.all_labels,
                          result.data.semantics, result.data.space,
                          result.data.split)
    for kind, path in sorted(paths.items()):
        print(f"wrote {kind}: {path}")
    return EXIT_OK


def _run_config(args, pipeline: str, overrides: dict) -> int:
    raw = _load_json(args.config)
    raw["pipeline"] = pipeline
    raw.update(overrides)
    if getattr(args, "threads", None):
        raw["threads"] = args.threads
    config = RunConfig.from_dict(raw)
    result = run_experiment(config)
    summary = {k: v for k, v in result.to_json_dict().items()
               if v not in (None, {}, [])}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_report(args) -> int:
    path = Path(args.indir) / "summary.json"
    if not path.exists():
        raise ConfigError(f"no summary.json under {args.indir}")
    summary = _load_json(str(path))
    print(f"run: {summary.get('name')}  pipeline: {summary.get('pipeline')}  "
          f"seed: {summary.get('seed')}")
    for key in ("acc", "acc_seen", "acc_unseen", "harmonic", "apr"):
        if summary.get(key) is not None:
            print(f"  {key:>12}: {summary[key]:.1f}")
    for point in summary.get("curves") or []:
        print(f"  tnr@fnr={point['fnr_target']:.2f}: {point['tnr']:.3f}")
    extra = summary.get("extra") or {}
    for key in sorted(extra):
        print(f"  {key}: {extra[key]}")
    return EXIT_OK


def _cmd_selftest(_args) -> int:
    results = run_selftest()
    worst = EXIT_OK
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        if not ok:
            worst = EXIT_RUNTIME
    return worst


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icot",
                                     description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--spec", required=True, help="SynthSpec JSON file")
    gen.add_argument("--out", required=True, help="output directory")

    for name in ("zsl", "gzsl", "ood"):
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--threads", type=int, default=None)
        if name == "gzsl":
            p.add_argument("--setting", choices=("1", "2", "plain"), default=None)
        if name == "ood":
            p.add_argument("--method", choices=("semantic", "iter", "max-softmax"),
                           default=None)

    rep = sub.add_parser("report", help="pretty-print a run summary")
    rep.add_argument("--in", dest="indir", required=True)

    sub.add_parser("selftest", help="run gradient checks and metric oracles")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    if args.command is None:
        parser.print_usage()
        return EXIT_CONFIG
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "zsl":
            return _run_config(args, "zsl", {})
        if args.command == "gzsl":
            overrides = {}
            if args.setting is not None:
                overrides["gzsl_setting"] = args.setting
            return _run_config(args, "gzsl", overrides)
        if args.command == "ood":
            raw_overrides = {}
            if args.method is not None:
                raw = _load_json(args.config)
                ood = dict(raw.get("ood", {}))
                ood["method"] = args.method
                raw_overrides["ood"] = ood
            return _run_config(args, "ood", raw_overrides)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "selftest":
            return _cmd_selftest(args)
        parser.print_usage()
        return EXIT_CONFIG
    except (ConfigError, DatasetFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
