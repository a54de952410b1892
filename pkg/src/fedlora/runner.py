"""Experiment orchestration: single runs, method comparisons, sweeps and trace series.

All row data is written as CSV with ``repr`` floats so reruns of the same
config are byte-identical; summaries are JSON.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CONFIG_SCHEMA_VERSION, __version__
from .config import ExperimentConfig, dump_config
from .data import Dataset, dirichlet_partition, load_csv, make_task
from .federation import RoundMetrics, RoundSchedule, new_state, run_federation, evaluate
from .lora import accuracy, attach_adapters, pretrain_base
from .numerics import make_rng
from .privacy import PrivacySpec

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("seed", "round", "accuracy", "macro_f1", "deviation_norm",
                  "mean_linear_B", "mean_linear_A", "epsilon_spent")
TRACE_COLUMNS = ("method", "epsilon", "seed", "round", "layer", "phase",
                 "norm_linear_B", "norm_linear_A", "norm_base", "norm_quadratic")
SUMMARY_METRICS = ("accuracy", "macro_f1", "deviation_norm")
TRACE_TERMS = {
    "linear_B": ("norm_linear_B", ("TrainB", "TrainBoth")),
    "linear_A": ("norm_linear_A", ("TrainA", "TrainBoth")),
    "quadratic": ("norm_quadratic", ("TrainB", "TrainA", "TrainBoth")),
    "base": ("norm_base", ("TrainB", "TrainA", "TrainBoth")),
}


class TraceFormatError(ValueError):
    pass


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def eps_label(epsilon) -> str:
    return "off" if epsilon is None else repr(float(epsilon))


def method_label(config: ExperimentConfig) -> str:
    label = config.method
    if config.pattern is not None:
        pattern = config.pattern if isinstance(config.pattern, str) else \
            "|".join("+".join(step) for step in config.pattern)
        label += f"[{pattern}]"
    if not config.regulate:
        label += "-noreg"
    return label


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- single runs -------------------------------------------------------------

@dataclass
class PreparedData:
    pretrain: Dataset
    train: Dataset
    val: Dataset
    test: Dataset


def prepare_data(config: ExperimentConfig, seed: int) -> PreparedData:
    if config.data == "synthetic":
        task = make_task(config.classes, config.dim, config.n_train, config.n_val, config.n_test,
                         config.n_pretrain, config.class_sep, config.domain_shift, seed)
        return PreparedData(task.pretrain, task.train, task.val, task.test)
    train, val, test = load_csv(config.csv_path, config.label_column, config.split_fractions, seed)
    if val is None or test is None:
        raise ValueError(f"{config.csv_path}: split_fractions leave the val or test split empty")
    # the leading slice of the shuffled train split pre-trains the frozen base
    cut = int(round(config.pretrain_fraction * len(train)))
    if cut < 1 or cut >= len(train):
        raise ValueError(f"{config.csv_path}: pretrain_fraction leaves no rows for one side")
    pre = Dataset(train.X[:cut], train.y[:cut], train.classes, "pretrain")
    return PreparedData(pre, train.subset(np.arange(cut, len(train))), val, test)


def schedule_for(config: ExperimentConfig) -> RoundSchedule:
    if config.method == "joint-lora":
        return RoundSchedule.joint()
    if config.method == "ffa-lora":
        return RoundSchedule.freeze_a()
    if config.pattern is None:
        return RoundSchedule.alternating()
    return RoundSchedule.budget(config.pattern)


def default_layers(config: ExperimentConfig) -> tuple[int, ...]:
    # only the hidden layer for the MLP: a square r x r output factor makes
    # the pseudo-inverse regulator badly conditioned
    return (0,)


@dataclass
class SeedResult:
    seed: int
    clip: float | None
    sigma: float | None
    log: list[RoundMetrics]
    traces: list
    events: list
    val_accuracy: float
    base_accuracy: float


def run_seed(config: ExperimentConfig, seed: int, clip: float | None = None) -> SeedResult:
    """One federation for one seed at one clip value."""
    data = prepare_data(config, seed)
    classes = data.train.classes
    base = pretrain_base(config.architecture, data.pretrain.X, data.pretrain.y, classes,
                         hidden=config.hidden, epochs=config.pretrain_epochs,
                         batch_size=config.batch_size, lr=config.lr, seed=seed)
    layers = config.adapt_layers if config.adapt_layers is not None else default_layers(config)
    model = attach_adapters(base, layers, config.rank, config.alpha, config.init_std, make_rng([seed, 1]))
    plan = dirichlet_partition(data.train.y, config.clients, config.beta, seed,
                               min_shard=config.effective_min_shard)
    shards = [data.train.subset(idx) for idx in plan.shards]
    if config.privacy_enabled:
        clip = config.clip if clip is None else clip
        privacy = PrivacySpec.calibrated(config.epsilon, clip, config.clients, max(config.rounds, 1),
                                         delta=config.delta)
    else:
        clip = None
        privacy = PrivacySpec.disabled(config.clients, config.rounds)
    state = new_state(model, shards, schedule_for(config), privacy, seed,
                      local_epochs=config.local_epochs, batch_size=config.batch_size, lr=config.lr,
                      regulate=config.regulate)
    metrics = run_federation(state, config.rounds, data.test)
    val_acc, _ = evaluate(state, data.val)
    return SeedResult(seed=seed, clip=clip, sigma=privacy.sigma if privacy.enabled else None,
                      log=metrics, traces=list(state.traces), events=list(state.events),
                      val_accuracy=val_acc,
                      base_accuracy=accuracy(base, data.test.X, data.test.y))


def run_seed_auto(config: ExperimentConfig, seed: int) -> SeedResult:
    """Like :func:`run_seed`, picking clip from ``clip_grid`` by validation accuracy when asked."""
    if config.clip != "auto" or not config.privacy_enabled:
        return run_seed(config, seed)
    best = None
    for c in config.clip_grid:
        result = run_seed(config, seed, clip=c)
        log.info("seed %d clip %g: val accuracy %.4f", seed, c, result.val_accuracy)
        if best is None or result.val_accuracy > best.val_accuracy:
            best = result
    return best


def metric_rows(result: SeedResult):
    for m in result.log:
        yield (result.seed, m.round, m.accuracy, m.macro_f1, m.deviation_norm,
               m.mean_linear_B, m.mean_linear_A, m.epsilon_spent)


def trace_rows(config: ExperimentConfig, result: SeedResult):
    for t in result.traces:
        yield (method_label(config), eps_label(config.epsilon), result.seed, t.round, t.layer, t.phase,
               t.norm_linear_B, t.norm_linear_A, t.norm_base, t.norm_quadratic)


def mean_std(values) -> dict:
    values = [float(v) for v in values]
    mean = math.fsum(values) / len(values)
    if len(values) > 1:
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1))
    else:
        std = 0.0
    return {"mean": mean, "std": std, "values": values}


def summarize(config: ExperimentConfig, results: list[SeedResult]) -> dict:
    finals = [r.log[-1] for r in results]
    return {
        "version": __version__,
        "schema_version": CONFIG_SCHEMA_VERSION,
        "method": method_label(config),
        "epsilon": config.epsilon,
        "seeds": [r.seed for r in results],
        "rounds": config.rounds,
        "clip": {str(r.seed): r.clip for r in results},
        "sigma": {str(r.seed): r.sigma for r in results},
        "base_accuracy": mean_std([r.base_accuracy for r in results]),
        "final": {key: mean_std([getattr(m, key) for m in finals]) for key in SUMMARY_METRICS},
    }


def run_experiment(config: ExperimentConfig, output_dir=None) -> dict:
    """Run every seed, writing per-seed metrics (and traces under DP) plus a summary.

    Returns the summary dictionary that is also written to ``summary.json``.
    """
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(config), encoding="utf-8")
    results = []
    for seed in config.seeds:
        log.info("%s eps=%s seed=%d", method_label(config), eps_label(config.epsilon), seed)
        result = run_seed_auto(config, seed)
        _write_csv(out / f"metrics_seed{seed}.csv", METRIC_COLUMNS, metric_rows(result))
        if config.privacy_enabled:
            _write_csv(out / f"noise_trace_seed{seed}.csv", TRACE_COLUMNS, trace_rows(config, result))
        results.append(result)
    summary = summarize(config, results)
    summary["output_dir"] = str(out)
    _write_json(out / "summary.json", {k: v for k, v in summary.items() if k != "output_dir"})
    summary["results"] = results
    return summary


# -- comparisons and sweeps --------------------------------------------------

COMPARISON_COLUMNS = ("method", "epsilon", "accuracy_mean", "accuracy_std",
                      "macro_f1_mean", "macro_f1_std", "seeds")
CURVE_COLUMNS = ("method", "epsilon", "seed", "round", "accuracy", "macro_f1", "deviation_norm")


def check_comparable(configs: list[ExperimentConfig]) -> None:
    if not configs:
        raise ValueError("compare needs at least one method")
    reference = configs[0].shared_fields()
    problems = []
    for cfg in configs[1:]:
        for key, value in cfg.shared_fields().items():
            if value != reference[key]:
                problems.append(f"{method_label(cfg)}: {key}={value!r} differs from "
                                f"{method_label(configs[0])}: {key}={reference[key]!r}")
    labels = [method_label(c) for c in configs]
    if len(set(labels)) != len(labels):
        problems.append(f"duplicate methods in comparison: {labels}")
    if problems:
        raise ValueError("methods do not share their configuration:\n  " + "\n  ".join(problems))


def format_table(methods, budgets, cells) -> str:
    """Aligned text table; ``cells[(method, budget)]`` holds the display string."""
    header = ["method"] + [f"eps={b}" for b in budgets]
    rows = [[m] + [cells[(m, b)] for b in budgets] for m in methods]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def compare_methods(configs: list[ExperimentConfig], epsilons=None, output_dir=None) -> list[dict]:
    """Run each method at each privacy budget and tabulate final accuracy / macro-F1.

    ``epsilons`` defaults to the shared ``epsilon`` of the configs; ``None``
    inside the list means DP off.
    """
    check_comparable(configs)
    epsilons = [configs[0].epsilon] if epsilons is None else list(epsilons)
    out = Path(output_dir if output_dir is not None else configs[0].output_dir)
    table, curves, cells = [], [], {}
    for eps in epsilons:
        for cfg in configs:
            cfg = cfg.replace(epsilon=eps)
            label = method_label(cfg)
            summary = run_experiment(cfg, out / f"{label}_eps-{eps_label(eps)}")
            acc, f1 = summary["final"]["accuracy"], summary["final"]["macro_f1"]
            table.append({"method": label, "epsilon": eps_label(eps),
                          "accuracy_mean": acc["mean"], "accuracy_std": acc["std"],
                          "macro_f1_mean": f1["mean"], "macro_f1_std": f1["std"],
                          "seeds": len(summary["seeds"])})
            cells[(label, eps_label(eps))] = f"{acc['mean']:.4f} ± {acc['std']:.4f}"
            for r in summary["results"]:
                for m in r.log:
                    curves.append((label, eps_label(eps), r.seed, m.round, m.accuracy, m.macro_f1,
                                   m.deviation_norm))
    _write_csv(out / "comparison.csv", COMPARISON_COLUMNS,
               ([row[c] for c in COMPARISON_COLUMNS] for row in table))
    _write_csv(out / "curves.csv", CURVE_COLUMNS, curves)
    methods = list(dict.fromkeys(row["method"] for row in table))
    text = format_table(methods, [eps_label(e) for e in epsilons], cells)
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    return table


SWEEP_COLUMNS = ("method", "epsilon", "beta", "seed", "accuracy", "macro_f1", "deviation_norm", "clip")


def sweep(config: ExperimentConfig, epsilons=None, betas=None, seeds=None, output_dir=None) -> list[tuple]:
    """Cartesian product over budgets, Dirichlet betas and seeds; one final row per run."""
    epsilons = [config.epsilon] if epsilons is None else list(epsilons)
    betas = [config.beta] if betas is None else [float(b) for b in betas]
    seeds = list(config.seeds) if seeds is None else [int(s) for s in seeds]
    out = Path(output_dir if output_dir is not None else config.output_dir)
    rows = []
    for eps, beta in itertools.product(epsilons, betas):
        cfg = config.replace(epsilon=eps, beta=beta, seeds=seeds)
        summary = run_experiment(cfg, out / f"eps-{eps_label(eps)}_beta-{beta!r}")
        for r in summary["results"]:
            m = r.log[-1]
            rows.append((method_label(cfg), eps_label(eps), beta, r.seed, m.accuracy, m.macro_f1,
                         m.deviation_norm, "" if r.clip is None else r.clip))
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    return rows


# -- noise-trace series ------------------------------------------------------

@dataclass
class TraceSeries:
    method: str | None
    epsilon: str | None
    term: str | None
    rounds: list[int]
    values: list[float]
    slope: float | None
    path: Path


def fitted_slope(rounds, values) -> float | None:
    """Least-squares slope; ``None`` when fewer than two distinct rounds."""
    if len(set(rounds)) < 2:
        return None
    x = np.asarray(rounds, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def read_trace(path) -> list[dict]:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot open trace ({exc.strerror})") from None
    rows = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != TRACE_COLUMNS:
            raise TraceFormatError(f"{path}:1: expected header {','.join(TRACE_COLUMNS)}")
        for line_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(TRACE_COLUMNS):
                raise TraceFormatError(f"{path}:{line_no}: expected {len(TRACE_COLUMNS)} cells, got {len(cells)}")
            row = dict(zip(TRACE_COLUMNS, cells))
            try:
                row["seed"] = int(row["seed"])
                row["round"] = int(row["round"])
                row["layer"] = int(row["layer"])
                for key in ("norm_linear_B", "norm_linear_A", "norm_base", "norm_quadratic"):
                    row[key] = float(row[key])
            except ValueError as exc:
                raise TraceFormatError(f"{path}:{line_no}: {exc}") from None
            if row["phase"] not in ("TrainB", "TrainA", "TrainBoth"):
                raise TraceFormatError(f"{path}:{line_no}: unknown phase {row['phase']!r}")
            rows.append(row)
    return rows


def emit_noise_trace_plotdata(trace_paths, output_dir) -> list[TraceSeries]:
    """Per (method, epsilon, noise term): the per-round mean norm and its fitted slope.

    Each series file has ``round,norm`` rows followed by ``# slope=`` and
    ``# points=`` comment lines. An input with no rows yields one empty
    series whose slope is ``undefined``.
    """
    if isinstance(trace_paths, (str, Path)):
        trace_paths = [trace_paths]
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grouped: dict[tuple, dict[int, list[float]]] = {}
    series = []
    for path in trace_paths:
        rows = read_trace(path)
        if not rows:
            target = out / f"{Path(path).stem}_empty.csv"
            _write_series(target, [], [], None)
            series.append(TraceSeries(None, None, None, [], [], None, target))
            continue
        for row in rows:
            for term, (column, phases) in TRACE_TERMS.items():
                if row["phase"] in phases:
                    key = (row["method"], row["epsilon"], term)
                    grouped.setdefault(key, {}).setdefault(row["round"], []).append(row[column])
    for (method, eps, term), by_round in sorted(grouped.items()):
        rounds = sorted(by_round)
        values = [math.fsum(by_round[t]) / len(by_round[t]) for t in rounds]
        slope = fitted_slope(rounds, values)
        target = out / f"{method}_eps-{eps}_{term}.csv"
        _write_series(target, rounds, values, slope)
        series.append(TraceSeries(method, eps, term, rounds, values, slope, target))
    return series


def _write_series(path: Path, rounds, values, slope) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("round", "norm"))
        for t, v in zip(rounds, values):
            writer.writerow((t, repr(float(v))))
        fh.write(f"# slope={'undefined' if slope is None else repr(slope)}\n")
        fh.write(f"# points={len(rounds)}\n")


def read_series(path) -> tuple[list[int], list[float], float | None]:
    rounds, values, slope = [], [], None
    with Path(path).open(encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            line = line.strip()
            if line.startswith("# slope="):
                text = line.split("=", 1)[1]
                slope = None if text == "undefined" else float(text)
            elif line and not line.startswith("#"):
                t, v = line.split(",")
                rounds.append(int(t))
                values.append(float(v))
    return rounds, values, slope
