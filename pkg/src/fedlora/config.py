"""Experiment configuration: a flat YAML mapping validated into :class:`ExperimentConfig`.

Every key is optional except ``method``. Validation collects all problems
before raising so a config file can be fixed in one pass.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any

import yaml

from .federation import BUDGET_PRESETS, Phase
from .lora import ARCHITECTURES

METHODS = ("joint-lora", "ffa-lora", "deer")
DATA_SOURCES = ("synthetic", "csv")


class ConfigError(ValueError):
    """Raised with every validation failure found, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    # model
    architecture: str = "two-layer-mlp"
    hidden: int = 32
    adapt_layers: tuple[int, ...] | None = None  # None: hidden layers (MLP) or the only layer
    rank: int = 8
    alpha: float = 8.0
    init_std: float = 0.02
    pretrain_epochs: int = 5
    # data
    data: str = "synthetic"
    classes: int = 8
    dim: int = 32
    n_train: int = 2400
    n_val: int = 300
    n_test: int = 800
    n_pretrain: int = 2000
    class_sep: float = 3.0
    domain_shift: float = 0.5
    csv_path: str | None = None
    label_column: str | None = None
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    pretrain_fraction: float = 0.3
    clients: int = 12
    beta: float = 0.1
    min_shard: int | None = None  # None: batch_size
    # training
    rounds: int = 50
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    # privacy
    epsilon: float | None = None  # None disables DP
    delta: float | None = None  # None: 1 / clients
    clip: float | str = 0.01  # a positive number or "auto"
    clip_grid: tuple[float, ...] = (0.003, 0.01, 0.03)
    # deer only
    pattern: str | tuple[tuple[str, ...], ...] | None = None
    regulate: bool = True
    # bookkeeping
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"

    @property
    def privacy_enabled(self) -> bool:
        return self.epsilon is not None

    @property
    def effective_min_shard(self) -> int:
        return self.batch_size if self.min_shard is None else self.min_shard

    def replace(self, **changes) -> "ExperimentConfig":
        return from_mapping({**to_mapping(self), **changes})

    def shared_fields(self) -> dict:
        """Everything that must agree between runs being compared."""
        out = to_mapping(self)
        for key in ("method", "pattern", "regulate", "output_dir"):
            out.pop(key)
        return out


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
REQUIRED = tuple(name for name, f in FIELDS.items()
                 if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING)

POSITIVE_INT = ("hidden", "rank", "pretrain_epochs", "classes", "dim", "n_train", "n_val", "n_test",
                "n_pretrain", "clients", "local_epochs", "batch_size")
NONNEG_INT = ("rounds",)
POSITIVE_REAL = ("alpha", "init_std", "class_sep", "beta", "lr")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuple(x) for x in v)
    return v


def _check(raw: dict, problems: list[str]) -> None:
    for key in POSITIVE_INT:
        v = raw[key]
        if not _is_int(v) or v < 1:
            problems.append(f"{key}: must be a positive integer, got {v!r}")
    for key in NONNEG_INT:
        v = raw[key]
        if not _is_int(v) or v < 0:
            problems.append(f"{key}: must be a non-negative integer, got {v!r}")
    for key in POSITIVE_REAL:
        v = raw[key]
        if not _is_real(v) or v <= 0:
            problems.append(f"{key}: must be a positive number, got {v!r}")

    if raw["method"] is not None and raw["method"] not in METHODS:
        problems.append(f"method: must be one of {list(METHODS)}, got {raw['method']!r}")
    if raw["architecture"] not in ARCHITECTURES:
        problems.append(f"architecture: must be one of {list(ARCHITECTURES)}, got {raw['architecture']!r}")
    if not _is_real(raw["domain_shift"]) or not 0 <= raw["domain_shift"] <= 1:
        problems.append(f"domain_shift: must lie in [0, 1], got {raw['domain_shift']!r}")
    if not _is_real(raw["pretrain_fraction"]) or not 0 < raw["pretrain_fraction"] < 1:
        problems.append(f"pretrain_fraction: must lie in (0, 1), got {raw['pretrain_fraction']!r}")
    if raw["min_shard"] is not None and (not _is_int(raw["min_shard"]) or raw["min_shard"] < 1):
        problems.append(f"min_shard: must be a positive integer or null, got {raw['min_shard']!r}")

    layers = raw["adapt_layers"]
    if layers is not None:
        if not isinstance(layers, tuple) or not layers or not all(_is_int(i) and i >= 0 for i in layers):
            problems.append(f"adapt_layers: must be a non-empty list of layer indices, got {layers!r}")
        else:
            depth = 1 if raw["architecture"] == "linear-softmax" else 2
            if max(layers) >= depth:
                problems.append(f"adapt_layers: {raw['architecture']} has {depth} layer(s), got {list(layers)}")

    fr = raw["split_fractions"]
    if (not isinstance(fr, tuple) or len(fr) != 3 or not all(_is_real(f) and f >= 0 for f in fr)
            or not math.isclose(sum(fr), 1.0, abs_tol=1e-9)):
        problems.append(f"split_fractions: must be three non-negative numbers summing to 1, got {fr!r}")

    # data source: exactly one
    if raw["data"] not in DATA_SOURCES:
        problems.append(f"data: must be one of {list(DATA_SOURCES)}, got {raw['data']!r}")
    elif raw["data"] == "csv":
        if not raw["csv_path"]:
            problems.append("csv_path: required when data is 'csv'")
        if not raw["label_column"]:
            problems.append("label_column: required when data is 'csv'")
    else:
        if raw["csv_path"] is not None:
            problems.append("csv_path: given but data is 'synthetic'; choose one data source")
        if _is_int(raw["classes"]) and _is_int(raw["dim"]) and raw["dim"] < raw["classes"]:
            problems.append(f"dim: must be >= classes ({raw['classes']}), got {raw['dim']}")

    # privacy
    eps = raw["epsilon"]
    if eps is not None and (not _is_real(eps) or eps <= 0):
        problems.append(f"epsilon: must be a positive number or null, got {eps!r}")
    delta = raw["delta"]
    if delta is not None and (not _is_real(delta) or not 0 < delta < 1):
        problems.append(f"delta: must lie in (0, 1) or be null, got {delta!r}")
    clip = raw["clip"]
    if clip != "auto" and (not _is_real(clip) or clip <= 0):
        problems.append(f"clip: must be a positive number or 'auto', got {clip!r}")
    grid = raw["clip_grid"]
    if not isinstance(grid, tuple) or not grid or not all(_is_real(c) and c > 0 for c in grid):
        problems.append(f"clip_grid: must be a non-empty list of positive numbers, got {grid!r}")

    # method-specific
    pattern = raw["pattern"]
    if pattern is not None:
        if raw["method"] not in ("deer", None):
            problems.append(f"pattern: only valid with method 'deer', got method {raw['method']!r}")
        if isinstance(pattern, str):
            if pattern.rstrip("%") not in BUDGET_PRESETS:
                problems.append(f"pattern: unknown preset {pattern!r}; known: {sorted(BUDGET_PRESETS)}")
        elif not isinstance(pattern, tuple) or not pattern or not all(
                isinstance(step, tuple) and step for step in pattern):
            problems.append("pattern: must be a preset name or a non-empty list of non-empty phase lists")
        else:
            known = {p.value for p in Phase}
            bad = sorted({p for step in pattern for p in step if p not in known})
            if bad:
                problems.append(f"pattern: unknown phases {bad}; known: {sorted(known)}")
    if not isinstance(raw["regulate"], bool):
        problems.append(f"regulate: must be true or false, got {raw['regulate']!r}")
    elif not raw["regulate"] and raw["method"] not in ("deer", None):
        problems.append("regulate: only meaningful with method 'deer'")

    seeds = raw["seeds"]
    if not isinstance(seeds, tuple) or not seeds or not all(_is_int(s) and s >= 0 for s in seeds):
        problems.append(f"seeds: must be a non-empty list of non-negative integers, got {seeds!r}")
    elif len(set(seeds)) != len(seeds):
        problems.append(f"seeds: duplicates in {list(seeds)}")
    if not isinstance(raw["output_dir"], str) or not raw["output_dir"]:
        problems.append("output_dir: must be a non-empty path")


def from_mapping(mapping: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(mapping, dict):
        raise ConfigError([f"config must be a mapping of keys to values, got {type(mapping).__name__}"])
    problems = []
    unknown = sorted(set(mapping) - set(FIELDS))
    for key in unknown:
        problems.append(f"{key}: unknown key")
    for key in REQUIRED:
        if mapping.get(key) is None:
            problems.append(f"{key}: required")

    raw = {name: (None if f.default is dataclasses.MISSING else f.default) for name, f in FIELDS.items()}
    raw.update({k: _tuple(v) for k, v in mapping.items() if k in FIELDS})
    if raw["epsilon"] is False or raw["epsilon"] == "off":
        raw["epsilon"] = None  # YAML 1.1 reads a bare off as false
    if _is_int(raw["pattern"]):
        raw["pattern"] = str(raw["pattern"])  # bare presets such as 75 arrive as integers
    if isinstance(raw["seeds"], int) and not isinstance(raw["seeds"], bool):
        raw["seeds"] = (raw["seeds"],)
    for key in ("alpha", "init_std", "class_sep", "domain_shift", "beta", "lr", "pretrain_fraction"):
        if _is_int(raw[key]):
            raw[key] = float(raw[key])
    _check(raw, problems)
    if problems:
        raise ConfigError(problems)
    if raw["clip"] != "auto":
        raw["clip"] = float(raw["clip"])
    raw["clip_grid"] = tuple(float(c) for c in raw["clip_grid"])
    raw["split_fractions"] = tuple(float(f) for f in raw["split_fractions"])
    if raw["epsilon"] is not None:
        raw["epsilon"] = float(raw["epsilon"])
    if raw["delta"] is not None:
        raw["delta"] = float(raw["delta"])
    return ExperimentConfig(**raw)


def parse_config(text: str) -> ExperimentConfig:
    """Parse YAML text. An empty document is treated as an empty mapping."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"not valid YAML: {exc}"]) from None
    return from_mapping({} if data is None else data)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def to_mapping(config: ExperimentConfig) -> dict[str, Any]:
    return {name: _plain(getattr(config, name)) for name in FIELDS}


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(to_mapping(config), sort_keys=False)
