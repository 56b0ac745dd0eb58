"""Command-line entry point: synthesize, eval, and inspect-marginals.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 budget
violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import BudgetError, ConfigError, DataError
from .pipeline import RunConfig, run_eval, run_synthesize

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BUDGET = 4

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--epsilon", type=float, help="privacy budget epsilon")
    parser.add_argument("--delta", type=float, help="privacy budget delta")
    parser.add_argument("--seed", type=int, help="master seed for all randomness")
    parser.add_argument("--report", help="path for the JSON run report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dptrace",
        description="Differentially private synthesis of network header traces")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    syn = sub.add_parser("synthesize", help="publish noisy marginals and synthesize a trace")
    _add_common(syn)
    syn.add_argument("--input", help="raw trace CSV")
    syn.add_argument("--schema", help="schema sidecar JSON")
    syn.add_argument("--output", help="synthetic trace CSV to write")
    syn.add_argument("--group-key", help="comma-separated group identifier attributes")
    syn.add_argument("--tau", type=float, help="protocol rule probability threshold")
    syn.add_argument("--rules", help="JSON protocol rule file (defaults built in)")
    syn.add_argument("--iterations", type=int, help="maximum update iterations")
    syn.add_argument("--n-records", type=int, help="synthetic record count "
                     "(default: consensus noisy total)")
    syn.add_argument("--key-attribute", help="attribute anchoring initialization")
    syn.add_argument("--init-marginals", help="how many key-bearing tables seed the "
                     "initialization ('all' or a count)")
    syn.add_argument("--init-mode", choices=("marginal", "uniform"),
                     help="seeded or uniform initialization")
    syn.add_argument("--distance-log", help="CSV path for per-iteration distances")

    ev = sub.add_parser("eval", help="score a synthetic trace against the raw one")
    _add_common(ev)
    ev.add_argument("--raw", help="raw trace CSV")
    ev.add_argument("--syn", help="synthetic trace CSV")
    ev.add_argument("--schema", help="schema sidecar JSON")
    ev.add_argument("--metrics", help="comma-separated subset of jsd,emd,sketch")
    ev.add_argument("--sketch-attrs", help="comma-separated attributes to sketch")

    ins = sub.add_parser("inspect-marginals", help="summarize a run report's tables")
    ins.add_argument("report", help="run report JSON from a synthesize run")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    updates: dict = {}
    direct = ("epsilon", "delta", "seed", "input", "schema", "output", "report",
              "tau", "rules", "raw", "syn", "distance_log")
    for name in direct:
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "group_key", None):
        updates["group_key"] = tuple(args.group_key.split(","))
    if getattr(args, "metrics", None):
        updates["metrics"] = tuple(args.metrics.split(","))
    if getattr(args, "sketch_attrs", None):
        updates["sketch_attrs"] = tuple(args.sketch_attrs.split(","))
    merged = {**config.as_dict(), **updates}

    synth = dict(merged["synth"])
    if getattr(args, "iterations", None) is not None:
        synth["max_iterations"] = args.iterations
    if getattr(args, "n_records", None) is not None:
        synth["n_records"] = args.n_records
    if getattr(args, "key_attribute", None) is not None:
        synth["key_attribute"] = args.key_attribute
    if getattr(args, "init_marginals", None) is not None:
        raw_value = args.init_marginals
        synth["n_init_marginals"] = raw_value if raw_value == "all" else int(raw_value)
    if getattr(args, "init_mode", None) is not None:
        synth["init_mode"] = args.init_mode
    merged["synth"] = synth
    return RunConfig.from_dict(merged)


def _inspect(report_path: str) -> int:
    path = Path(report_path)
    if not path.exists():
        raise DataError(f"report not found: {path}")
    report = json.loads(path.read_text(encoding="utf-8"))
    selection = report.get("selection", {})
    print(f"candidates: {selection.get('candidates')}")
    print("selected pairs:")
    for entry in selection.get("pairs", []):
        if entry.get("selected"):
            print(f"  {'x'.join(entry['pair']):30s} noisy_phi={entry['noisy_phi']:.2f} "
                  f"psi={entry['psi']:.2f} cells={entry['cells']} rho={entry['rho']:.6g}")
    print("published tables:")
    for entry in report.get("published", []):
        print(f"  {'x'.join(entry['attrs']):30s} cells={entry['cells']} "
              f"rho={entry['rho']:.6g} total={entry['total']:.1f}")
    ledger = report.get("ledger", {})
    print(f"ledger: consumed {ledger.get('consumed')} of {ledger.get('rho_total')} "
          f"(sealed: {ledger.get('sealed')})")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synthesize":
            config = _config_from_args(args)
            if not config.input or not config.schema:
                raise ConfigError("synthesize needs --input and --schema")
            result = run_synthesize(config)
            print(f"synthesized {result.synthetic.n} records"
                  + (f" -> {config.output}" if config.output else ""))
            return EXIT_OK
        if args.command == "eval":
            config = _config_from_args(args)
            if not config.raw or not config.syn or not config.schema:
                raise ConfigError("eval needs --raw, --syn and --schema")
            report = run_eval(config)
            print(json.dumps(report.as_dict(), indent=2))
            return EXIT_OK
        if args.command == "inspect-marginals":
            return _inspect(args.report)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
