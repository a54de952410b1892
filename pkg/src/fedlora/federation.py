"""Server/client rounds for federated LoRA under three aggregation schedules.

``joint``
    Every client trains both factors; the server averages ``A`` and ``B``
    independently. This is plain FedAvg over the factors and suffers
    aggregation deviation.
``freeze-a``
    ``A`` stays at its shared random initialisation; only ``B`` is trained,
    noised and averaged.
``alternating``
    Each round is split into half-rounds. In each half one factor is frozen
    at the shared global value while the other is trained and averaged, so
    every aggregation happens with one factor identical across clients.
    Under DP the noise is drawn at full layer size and mapped into the
    trained factor with a pseudo-inverse regulator.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .lora import LoraAdapter, LoraModel, Selector, local_train, predict
from .numerics import frobenius_norm
from .privacy import (
    NoiseTrace,
    PrivacySpec,
    clip_update,
    epsilon_of,
    mechanism_noise,
    noise_decomposition,
    regulate_for_A,
    regulate_for_B,
)


class Phase(enum.Enum):
    TRAIN_B = "TrainB"
    TRAIN_A = "TrainA"
    TRAIN_BOTH = "TrainBoth"

    @property
    def selector(self) -> Selector:
        return {
            Phase.TRAIN_B: Selector.ONLY_B,
            Phase.TRAIN_A: Selector.ONLY_A,
            Phase.TRAIN_BOTH: Selector.BOTH,
        }[self]


VARIANTS = ("joint", "freeze-a", "alternating", "alternating-budget")

BUDGET_PRESETS = {
    "100": (("TrainB", "TrainA"),),
    "75": (("TrainB", "TrainA"), ("TrainB",)),
    "50": (("TrainB",), ("TrainA",)),
}


@dataclass(frozen=True)
class RoundSchedule:
    variant: str
    pattern: tuple[tuple[Phase, ...], ...]

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown schedule variant {self.variant!r}")
        if not self.pattern or any(not step for step in self.pattern):
            raise ValueError("schedule pattern must be non-empty and every round must train something")

    def phases(self, round_index: int) -> tuple[Phase, ...]:
        return self.pattern[round_index % len(self.pattern)]

    @classmethod
    def joint(cls) -> "RoundSchedule":
        return cls("joint", ((Phase.TRAIN_BOTH,),))

    @classmethod
    def freeze_a(cls) -> "RoundSchedule":
        return cls("freeze-a", ((Phase.TRAIN_B,),))

    @classmethod
    def alternating(cls) -> "RoundSchedule":
        return cls("alternating", ((Phase.TRAIN_B, Phase.TRAIN_A),))

    @classmethod
    def budget(cls, pattern) -> "RoundSchedule":
        """Cyclic pattern, either a preset name ("100", "75", "50") or nested phase names."""
        if isinstance(pattern, str):
            key = pattern.rstrip("%")
            if key not in BUDGET_PRESETS:
                raise ValueError(f"unknown budget preset {pattern!r}; known: {sorted(BUDGET_PRESETS)}")
            pattern = BUDGET_PRESETS[key]
        parsed = tuple(tuple(Phase(p) for p in step) for step in pattern)
        return cls("alternating-budget", parsed)

    def communication_budget(self) -> float:
        """Average factor uploads per round relative to two (one A and one B)."""
        uploads = sum(2 if p is Phase.TRAIN_BOTH else 1 for step in self.pattern for p in step)
        return uploads / (2.0 * len(self.pattern))


@dataclass(frozen=True)
class AggregationEvent:
    round: int
    phase: str
    deviation_norm: float
    pre_noise_deviation_norm: float


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    accuracy: float
    macro_f1: float
    deviation_norm: float
    mean_linear_B: float
    mean_linear_A: float
    epsilon_spent: float


@dataclass
class FederationState:
    base: LoraModel
    global_adapters: dict[int, LoraAdapter]
    client_adapters: list[dict[int, LoraAdapter]]
    shards: list[Dataset]
    schedule: RoundSchedule
    privacy: PrivacySpec
    client_rngs: list[np.random.Generator]
    server_rng: np.random.Generator
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    regulate: bool = True
    round: int = 0
    events: list[AggregationEvent] = field(default_factory=list)
    traces: list[NoiseTrace] = field(default_factory=list)

    @property
    def clients(self) -> int:
        return len(self.shards)

    def global_model(self) -> LoraModel:
        return self.base.with_adapters(self.global_adapters)


def new_state(base: LoraModel, shards: list[Dataset], schedule: RoundSchedule,
              privacy: PrivacySpec, seed: int, **options) -> FederationState:
    """Fresh federation: every client starts from the server's adapters.

    ``base`` must already carry freshly initialised adapters. One child seed
    stream per client plus one for the server is derived from ``seed``.
    """
    if not shards:
        raise ValueError("a federation needs at least one client")
    if not base.adapted_layers():
        raise ValueError("base model has no adapters attached")
    for k, shard in enumerate(shards):
        if len(shard) == 0:
            raise ValueError(f"client {k} has an empty shard")
    if privacy.enabled and privacy.clients != len(shards):
        raise ValueError(f"privacy spec is for {privacy.clients} clients, federation has {len(shards)}")
    seqs = np.random.SeedSequence(seed).spawn(len(shards) + 1)
    global_adapters = {i: base.adapter(i) for i in base.adapted_layers()}
    return FederationState(
        base=base,
        global_adapters=global_adapters,
        client_adapters=[dict(global_adapters) for _ in shards],
        shards=list(shards),
        schedule=schedule,
        privacy=privacy,
        client_rngs=[np.random.Generator(np.random.PCG64(s)) for s in seqs[:-1]],
        server_rng=np.random.Generator(np.random.PCG64(seqs[-1])),
        **options,
    )


def aggregate(matrices) -> np.ndarray:
    """Unweighted mean, summed in list order."""
    matrices = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not matrices:
        raise ValueError("cannot aggregate an empty list")
    shape = matrices[0].shape
    for i, m in enumerate(matrices):
        if m.shape != shape:
            raise ValueError(f"matrix {i} has shape {m.shape}, expected {shape}")
    total = matrices[0].copy()
    for m in matrices[1:]:
        total += m
    return total / len(matrices)


def aggregation_deviation(Bs, As, alpha: float, r: int):
    """Entrywise ``|s (mean B)(mean A) - s mean(B A)|`` and its Frobenius norm."""
    if len(Bs) != len(As):
        raise ValueError(f"got {len(Bs)} B factors but {len(As)} A factors")
    if not Bs:
        raise ValueError("no factors to compare")
    for k, (b, a) in enumerate(zip(Bs, As)):
        if np.shape(b)[1] != np.shape(a)[0]:
            raise ValueError(f"client {k}: B {np.shape(b)} and A {np.shape(a)} are not conformable")
    s = alpha / r
    products = [np.asarray(b) @ np.asarray(a) for b, a in zip(Bs, As)]
    O = np.abs(s * (aggregate(Bs) @ aggregate(As)) - s * aggregate(products))
    return O, frobenius_norm(O)


def _noisy_upload(state: FederationState, k: int, start: LoraAdapter, trained: LoraAdapter,
                  phase: Phase, regulated: bool):
    """Clip the trained factors' deltas, add DP noise and build the uploaded adapter.

    Returns ``(uploaded, pre_noise, trace_terms)``; ``trace_terms`` is
    ``None`` when DP is off.
    """
    privacy = state.privacy
    trains_b = phase.selector.trains("B")
    trains_a = phase.selector.trains("A")
    if not privacy.enabled:
        return trained, trained, None

    new_b, new_a = start.B, start.A
    if trains_b:
        new_b = start.B + clip_update(trained.B - start.B, privacy.clip)
    if trains_a:
        new_a = start.A + clip_update(trained.A - start.A, privacy.clip)
    pre_noise = replace(trained, B=new_b, A=new_a)

    rng = state.client_rngs[k]
    m, n = start.shape
    xi_b = np.zeros_like(new_b)
    xi_a = np.zeros_like(new_a)
    base_norm = 0.0
    if regulated and phase is not Phase.TRAIN_BOTH:
        xi_w = mechanism_noise(m, n, privacy, rng)
        base_norm = frobenius_norm(xi_w)
        if trains_b:
            xi_b = regulate_for_B(xi_w, new_a)
        else:
            xi_a = regulate_for_A(xi_w, new_b)
    else:
        if trains_b:
            xi_b = mechanism_noise(*new_b.shape, privacy, rng)
        if trains_a:
            xi_a = mechanism_noise(*new_a.shape, privacy, rng)
        base_norm = math.sqrt(frobenius_norm(xi_b) ** 2 + frobenius_norm(xi_a) ** 2)
    lin_b, lin_a, quad = noise_decomposition(new_b, new_a, xi_b, xi_a, start.alpha, start.rank)
    uploaded = replace(trained, B=new_b + xi_b, A=new_a + xi_a)
    terms = (frobenius_norm(lin_b), frobenius_norm(lin_a), base_norm, frobenius_norm(quad))
    return uploaded, pre_noise, terms


def run_phase(state: FederationState, phase: Phase, regulated: bool | None = None) -> AggregationEvent:
    """One half-round: distribute, train locally, upload, aggregate, redistribute."""
    if regulated is None:
        regulated = state.regulate
    layers = sorted(state.global_adapters)
    uploads, pre_noise, terms = [], [], []
    for k, shard in enumerate(state.shards):
        start = dict(state.global_adapters)
        model = state.base.with_adapters(start)
        trained_model = local_train(model, shard.X, shard.y, phase.selector, state.local_epochs,
                                    state.batch_size, state.lr, state.client_rngs[k])
        client_up, client_pre, client_terms = {}, {}, {}
        for i in layers:
            up, pre, t = _noisy_upload(state, k, start[i], trained_model.adapter(i), phase, regulated)
            client_up[i], client_pre[i], client_terms[i] = up, pre, t
        uploads.append(client_up)
        pre_noise.append(client_pre)
        terms.append(client_terms)

    dev_sq = 0.0
    pre_dev_sq = 0.0
    new_global = {}
    for i in layers:
        g = state.global_adapters[i]
        Bs = [u[i].B for u in uploads]
        As = [u[i].A for u in uploads]
        _, dev = aggregation_deviation(Bs, As, g.alpha, g.rank)
        _, pre_dev = aggregation_deviation([p[i].B for p in pre_noise], [p[i].A for p in pre_noise],
                                           g.alpha, g.rank)
        dev_sq += dev * dev
        pre_dev_sq += pre_dev * pre_dev
        new_b = aggregate(Bs) if phase.selector.trains("B") else g.B
        new_a = aggregate(As) if phase.selector.trains("A") else g.A
        new_global[i] = replace(g, B=new_b, A=new_a)

    if state.privacy.enabled:
        for i in layers:
            lin_b = [t[i][0] for t in terms]
            lin_a = [t[i][1] for t in terms]
            base = [t[i][2] for t in terms]
            quad = [t[i][3] for t in terms]
            state.traces.append(NoiseTrace(
                round=state.round + 1, layer=i,
                norm_linear_B=float(np.mean(lin_b)), norm_linear_A=float(np.mean(lin_a)),
                norm_base=float(np.mean(base)), norm_quadratic=float(np.mean(quad)),
                phase=phase.value,
            ))

    state.global_adapters = new_global
    state.client_adapters = [dict(new_global) for _ in state.shards]
    event = AggregationEvent(round=state.round + 1, phase=phase.value,
                             deviation_norm=math.sqrt(dev_sq),
                             pre_noise_deviation_norm=math.sqrt(pre_dev_sq))
    state.events.append(event)
    return event


def _run_round(state: FederationState, allowed: tuple[str, ...], regulated: bool) -> FederationState:
    if state.schedule.variant not in allowed:
        raise ValueError(
            f"schedule variant {state.schedule.variant!r} cannot run here; expected one of {allowed}"
        )
    for phase in state.schedule.phases(state.round):
        run_phase(state, phase, regulated=regulated and phase is not Phase.TRAIN_BOTH)
    state.round += 1
    return state


def run_round_joint(state: FederationState) -> FederationState:
    return _run_round(state, ("joint",), regulated=False)


def run_round_ffa(state: FederationState) -> FederationState:
    return _run_round(state, ("freeze-a",), regulated=False)


def run_round_deer(state: FederationState) -> FederationState:
    return _run_round(state, ("alternating", "alternating-budget"), regulated=state.regulate)


ROUND_RUNNERS = {
    "joint": run_round_joint,
    "freeze-a": run_round_ffa,
    "alternating": run_round_deer,
    "alternating-budget": run_round_deer,
}


def macro_f1(y_true, y_pred, classes: int) -> float:
    """Unweighted mean of per-class F1, a class with no support and no predictions scoring 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for c in range(classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


def evaluate(state: FederationState, test: Dataset) -> tuple[float, float]:
    pred = predict(state.global_model(), test.X)
    return float(np.mean(pred == test.y)), macro_f1(test.y, pred, test.classes)


def _mean_term(traces, factor: str) -> float:
    values = [getattr(tr, f"norm_linear_{factor}") for tr in traces
              if Phase(tr.phase).selector.trains(factor)]
    return float(np.mean(values)) if values else 0.0


def _round_metrics(state: FederationState, test: Dataset, events, traces) -> RoundMetrics:
    acc, f1 = evaluate(state, test)
    t = state.round
    if not state.privacy.enabled:
        eps = math.inf if t > 0 else 0.0
    else:
        eps = epsilon_of(state.privacy.sigma, state.privacy.delta, t) if t > 0 else 0.0
    return RoundMetrics(
        round=t,
        accuracy=acc,
        macro_f1=f1,
        deviation_norm=max((e.deviation_norm for e in events), default=0.0),
        mean_linear_B=_mean_term(traces, "B"),
        mean_linear_A=_mean_term(traces, "A"),
        epsilon_spent=eps,
    )


def run_federation(state: FederationState, rounds: int, test: Dataset) -> list[RoundMetrics]:
    """Run ``rounds`` rounds, evaluating the global model before the first and after each."""
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    runner = ROUND_RUNNERS[state.schedule.variant]
    log = [_round_metrics(state, test, [], [])]
    for _ in range(rounds):
        n_events, n_traces = len(state.events), len(state.traces)
        runner(state)
        log.append(_round_metrics(state, test, state.events[n_events:], state.traces[n_traces:]))
    return log


def _adapter_to_dict(ad: LoraAdapter) -> dict:
    m, n = ad.shape
    return {"m": m, "n": n, "r": ad.rank, "alpha": ad.alpha,
            "A": ad.A.ravel().tolist(), "B": ad.B.ravel().tolist()}


def _adapter_from_dict(d: dict) -> LoraAdapter:
    m, n, r = d["m"], d["n"], d["r"]
    return LoraAdapter(B=np.asarray(d["B"], dtype=np.float64).reshape(m, r),
                       A=np.asarray(d["A"], dtype=np.float64).reshape(r, n),
                       alpha=float(d["alpha"]))


def checkpoint(state: FederationState) -> dict:
    """JSON-ready snapshot of everything that changes between rounds."""
    return {
        "round": state.round,
        "global_adapters": {str(i): _adapter_to_dict(a) for i, a in state.global_adapters.items()},
        "client_adapters": [{str(i): _adapter_to_dict(a) for i, a in c.items()}
                            for c in state.client_adapters],
        "client_rng_states": [rng.bit_generator.state for rng in state.client_rngs],
        "server_rng_state": state.server_rng.bit_generator.state,
        "events": [vars(e) for e in state.events],
        "traces": [vars(t) for t in state.traces],
    }


def restore(state: FederationState, snapshot: dict) -> FederationState:
    """Load a :func:`checkpoint` into a state built from the same configuration."""
    if len(snapshot["client_adapters"]) != state.clients:
        raise ValueError("checkpoint client count does not match the federation")
    state.round = int(snapshot["round"])
    state.global_adapters = {int(i): _adapter_from_dict(d)
                             for i, d in snapshot["global_adapters"].items()}
    state.client_adapters = [{int(i): _adapter_from_dict(d) for i, d in c.items()}
                             for c in snapshot["client_adapters"]]
    for rng, st in zip(state.client_rngs, snapshot["client_rng_states"]):
        rng.bit_generator.state = st
    state.server_rng.bit_generator.state = snapshot["server_rng_state"]
    state.events = [AggregationEvent(**e) for e in snapshot["events"]]
    state.traces = [NoiseTrace(**t) for t in snapshot.get("traces", [])]
    return state
