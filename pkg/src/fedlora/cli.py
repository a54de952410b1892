"""Command line entry point: ``fedlora {run,compare,sweep,trace-plot}``.

Every config key is also a ``--flag``; values are read as YAML scalars or
lists (``--seeds [0,1,2]``, ``--epsilon null``). Precedence is command line,
then config file, then built-in defaults.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import CONFIG_SCHEMA_VERSION, __version__
from .config import FIELDS, ConfigError, from_mapping
from .data import DataError
from .numerics import SVDConvergenceError
from .privacy import CalibrationError
from .runner import TraceFormatError, compare_methods, emit_noise_trace_plotdata, run_experiment, sweep

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_IO = 4
EXIT_NUMERIC = 5


def _yaml_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


OFF = ("off", "null", "none", "~")


def _list_value(text: str):
    """Comma list (``off,1,0.1``) or YAML list; ``off``/``null`` items become ``None``."""
    text = text.strip()
    if text.startswith("["):
        text = text[1:-1] if text.endswith("]") else text[1:]
    parts = [part.strip() for part in text.split(",") if part.strip()]
    return [None if part.lower() in OFF else _yaml_value(part) for part in parts]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", nargs="?", help="YAML config file")
    group = parser.add_argument_group("config overrides")
    for name in FIELDS:
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="VALUE",
                           type=_yaml_value, default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlora", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version",
                        version=f"fedlora {__version__} (config schema {CONFIG_SCHEMA_VERSION})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one method over the configured seeds")
    _add_config_flags(p)

    p = sub.add_parser("compare", help="run several methods at one or more privacy budgets")
    _add_config_flags(p)
    p.add_argument("--methods", type=_list_value, required=True,
                   help="e.g. joint-lora,ffa-lora,deer")
    p.add_argument("--epsilons", type=_list_value, help="e.g. off,1,0.1 (default: --epsilon)")

    p = sub.add_parser("sweep", help="cartesian product over budgets, betas and seeds")
    _add_config_flags(p)
    p.add_argument("--epsilons", type=_list_value)
    p.add_argument("--betas", type=_list_value)
    p.add_argument("--sweep-seeds", type=_list_value, dest="sweep_seeds")

    p = sub.add_parser("trace-plot", help="turn noise-trace CSVs into per-term series files")
    p.add_argument("traces", nargs="+", help="noise_trace_seed*.csv files")
    p.add_argument("--out", required=True, help="directory for series files")
    return parser


def load_config(args: argparse.Namespace, **extra):
    mapping = {}
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"{path}: cannot read config ({exc.strerror})") from None
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML: {exc}"]) from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        mapping.update(loaded or {})
    for key, value in vars(args).items():
        if key.startswith("cfg_"):
            mapping[key[4:]] = value
    mapping.update(extra)
    return from_mapping(mapping)


def _run(args) -> None:
    config = load_config(args)
    summary = run_experiment(config)
    acc = summary["final"]["accuracy"]
    print(f"{summary['method']}: accuracy {acc['mean']:.4f} ± {acc['std']:.4f} over "
          f"{len(summary['seeds'])} seed(s); outputs in {summary['output_dir']}")


def _compare(args) -> None:
    configs = [load_config(args, method=m) for m in args.methods]
    compare_methods(configs, args.epsilons)
    out = Path(configs[0].output_dir)
    print((out / "comparison.txt").read_text(encoding="utf-8"), end="")


def _sweep(args) -> None:
    config = load_config(args)
    rows = sweep(config, args.epsilons, args.betas, args.sweep_seeds)
    print(f"{len(rows)} runs written to {Path(config.output_dir) / 'sweep.csv'}")


def _trace_plot(args) -> None:
    for s in emit_noise_trace_plotdata(args.traces, args.out):
        slope = "undefined" if s.slope is None else f"{s.slope:.6g}"
        print(f"{s.path}: slope {slope}")


COMMANDS = {"run": _run, "compare": _compare, "sweep": _sweep, "trace-plot": _trace_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, CalibrationError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TraceFormatError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SVDConvergenceError, FloatingPointError, ValueError) as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
