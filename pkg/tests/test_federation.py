import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedlora.data import dirichlet_partition, make_task
from fedlora.federation import (
    Phase,
    RoundSchedule,
    aggregate,
    aggregation_deviation,
    checkpoint,
    macro_f1,
    new_state,
    restore,
    run_federation,
    run_phase,
    run_round_deer,
    run_round_ffa,
    run_round_joint,
)
from fedlora.lora import Selector, attach_adapters, local_train, pretrain_base
from fedlora.numerics import make_rng
from fedlora.privacy import PrivacySpec


def small_setup(schedule, K=4, seed=0, eps=None, beta=0.1, clip=0.05, arch="linear-softmax",
                identical=False, n_train=240, **options):
    task = make_task(4, 8, n_train, 20, 100, 200, 3.0, 0.5, seed)
    base = pretrain_base(arch, task.pretrain.X, task.pretrain.y, 4, hidden=8, epochs=2, seed=seed)
    model = attach_adapters(base, range(len(base.layers)), 2, 2.0, 0.1, make_rng(seed + 1))
    if identical:
        shards = [task.train] * K
    else:
        plan = dirichlet_partition(task.train.y, K, beta, seed, min_shard=8)
        shards = [task.train.subset(s) for s in plan.shards]
    privacy = PrivacySpec.disabled(K, 5) if eps is None else PrivacySpec.calibrated(eps, clip, K, 5)
    options = {"local_epochs": 1, "batch_size": 16, "lr": 0.1, **options}
    return new_state(model, shards, schedule, privacy, seed, **options), task


class TestAggregate:
    def test_identical(self):
        m = np.array([[1.0, -2.0]])
        assert np.array_equal(aggregate([m, m, m]), m)

    def test_midpoint(self):
        assert np.array_equal(aggregate([[[0.0]], [[2.0]]]), [[1.0]])

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            aggregate([np.zeros((2, 2)), np.zeros((2, 3))])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_commutes_with_transpose(self, seed):
        rng = np.random.default_rng(seed)
        ms = [rng.normal(size=(3, 4)) for _ in range(int(rng.integers(1, 6)))]
        assert np.allclose(aggregate([m.T for m in ms]), aggregate(ms).T, rtol=0, atol=1e-15)


class TestDeviation:
    def test_hand(self):
        O, norm = aggregation_deviation([[[1.0]], [[0.0]]], [[[1.0]], [[2.0]]], 1.0, 1)
        assert np.allclose(O, [[0.25]]) and norm == pytest.approx(0.25)

    def test_single_client(self):
        rng = np.random.default_rng(0)
        O, norm = aggregation_deviation([rng.normal(size=(3, 2))], [rng.normal(size=(2, 4))], 8, 2)
        assert norm == 0.0 and not O.any()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_shared_factor_gives_zero(self, seed, share_b):
        rng = np.random.default_rng(seed)
        K = int(rng.integers(2, 7))
        shared_b, shared_a = rng.normal(size=(5, 2)), rng.normal(size=(2, 6))
        Bs = [shared_b if share_b else rng.normal(size=(5, 2)) for _ in range(K)]
        As = [rng.normal(size=(2, 6)) if share_b else shared_a for _ in range(K)]
        assert aggregation_deviation(Bs, As, 8.0, 2)[1] <= 1e-10

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            aggregation_deviation([np.ones((2, 1))], [], 1, 1)


class TestSchedule:
    def test_alternating_every_round(self):
        s = RoundSchedule.alternating()
        assert all(s.phases(t) == (Phase.TRAIN_B, Phase.TRAIN_A) for t in range(5))
        assert s.communication_budget() == 1.0

    def test_presets(self):
        assert RoundSchedule.budget("75").communication_budget() == 0.75
        assert RoundSchedule.budget("50%").communication_budget() == 0.5
        s = RoundSchedule.budget("75")
        assert s.phases(3) == (Phase.TRAIN_B,) and s.phases(4) == (Phase.TRAIN_B, Phase.TRAIN_A)

    def test_empty_pattern(self):
        with pytest.raises(ValueError):
            RoundSchedule.budget([])

    def test_unknown_phase(self):
        with pytest.raises(ValueError):
            RoundSchedule.budget([["TrainC"]])

    def test_runner_checks_variant(self):
        state, _ = small_setup(RoundSchedule.joint())
        with pytest.raises(ValueError, match="cannot run"):
            run_round_deer(state)


class TestJoint:
    def test_heterogeneous_deviation_matches_hand_formula(self):
        state, _ = small_setup(RoundSchedule.joint(), K=2)
        start = dict(state.global_adapters)
        trained = []
        # replay the clients to capture their factors before averaging
        rngs = [np.random.Generator(np.random.PCG64()) for _ in range(2)]
        for rng, src in zip(rngs, state.client_rngs):
            rng.bit_generator.state = src.bit_generator.state
        for k, shard in enumerate(state.shards):
            model = state.base.with_adapters(start)
            trained.append(local_train(model, shard.X, shard.y, Selector.BOTH, 1, 16, 0.1, rngs[k]).adapter(0))
        run_round_joint(state)
        s = trained[0].alpha / trained[0].rank
        mean_b = (trained[0].B + trained[1].B) / 2
        mean_a = (trained[0].A + trained[1].A) / 2
        mean_prod = (trained[0].B @ trained[0].A + trained[1].B @ trained[1].A) / 2
        hand = np.linalg.norm(np.abs(s * mean_b @ mean_a - s * mean_prod))
        assert state.events[-1].deviation_norm == pytest.approx(hand, rel=1e-12)
        assert hand > 0

    def test_single_client_is_centralised(self):
        state, task = small_setup(RoundSchedule.joint(), K=1)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0).spawn(2)[0]))
        expected = local_train(state.global_model(), state.shards[0].X, state.shards[0].y,
                               Selector.BOTH, 1, 16, 0.1, rng)
        run_round_joint(state)
        assert state.events[-1].deviation_norm == 0.0
        assert state.global_adapters[0].B.tobytes() == expected.adapter(0).B.tobytes()
        assert state.global_adapters[0].A.tobytes() == expected.adapter(0).A.tobytes()

    def test_identical_clients_no_deviation(self):
        state, _ = small_setup(RoundSchedule.joint(), identical=True)
        # identical seeds per client so every client computes the same factors
        for rng in state.client_rngs[1:]:
            rng.bit_generator.state = state.client_rngs[0].bit_generator.state
        run_round_joint(state)
        assert state.events[-1].deviation_norm == 0.0

    def test_dp_produces_quadratic_noise(self):
        state, _ = small_setup(RoundSchedule.joint(), eps=1.0)
        run_round_joint(state)
        assert state.traces and all(t.norm_quadratic > 0 for t in state.traces)


class TestFFA:
    def test_a_frozen_and_no_deviation(self):
        state, task = small_setup(RoundSchedule.freeze_a(), eps=1.0)
        a0 = state.global_adapters[0].A.tobytes()
        for _ in range(5):
            run_round_ffa(state)
        assert state.global_adapters[0].A.tobytes() == a0
        assert all(e.deviation_norm <= 1e-10 for e in state.events)
        assert all(t.norm_quadratic == 0.0 and t.norm_linear_A == 0.0 for t in state.traces)


class TestDeer:
    @pytest.mark.parametrize("eps", [None, 1.0])
    def test_deviation_vanishes(self, eps):
        state, _ = small_setup(RoundSchedule.alternating(), eps=eps, K=5)
        for _ in range(3):
            run_round_deer(state)
        assert len(state.events) == 6
        assert all(e.deviation_norm <= 1e-10 for e in state.events)

    def test_quadratic_noise_is_zero(self):
        state, _ = small_setup(RoundSchedule.alternating(), eps=1.0)
        for _ in range(2):
            run_round_deer(state)
        assert [t.phase for t in state.traces] == ["TrainB", "TrainA"] * 2
        assert all(t.norm_quadratic == 0.0 for t in state.traces)

    def test_clients_synchronised_after_half_round(self):
        state, _ = small_setup(RoundSchedule.alternating(), eps=1.0)
        run_phase(state, Phase.TRAIN_B)
        g = state.global_adapters[0].B
        assert max(np.linalg.norm(c[0].B - g) for c in state.client_adapters) == 0.0

    def test_single_client_matches_centralised_alternation(self):
        state, _ = small_setup(RoundSchedule.alternating(), K=1)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(0).spawn(2)[0]))
        model = state.global_model()
        shard = state.shards[0]
        for _ in range(3):
            model = local_train(model, shard.X, shard.y, Selector.ONLY_B, 1, 16, 0.1, rng)
            model = local_train(model, shard.X, shard.y, Selector.ONLY_A, 1, 16, 0.1, rng)
        for _ in range(3):
            run_round_deer(state)
        assert state.global_adapters[0].B.tobytes() == model.adapter(0).B.tobytes()
        assert state.global_adapters[0].A.tobytes() == model.adapter(0).A.tobytes()

    def test_half_budget_b_only_keeps_a(self):
        state, _ = small_setup(RoundSchedule.budget([["TrainB"]]))
        a0 = state.global_adapters[0].A.tobytes()
        for _ in range(3):
            run_round_deer(state)
        assert state.global_adapters[0].A.tobytes() == a0

    def test_regulated_linear_noise_bounded_by_base(self):
        state, _ = small_setup(RoundSchedule.alternating(), eps=1.0)
        for _ in range(2):
            run_round_deer(state)
        for t in state.traces:
            s = 1.0  # alpha / r in small_setup
            assert max(t.norm_linear_B, t.norm_linear_A) <= s * t.norm_base * (1 + 1e-12)


class TestRunFederation:
    def test_zero_rounds(self):
        state, task = small_setup(RoundSchedule.joint())
        log = run_federation(state, 0, task.test)
        assert len(log) == 1 and log[0].round == 0 and log[0].epsilon_spent == 0.0

    def test_deterministic(self):
        logs = []
        for _ in range(2):
            state, task = small_setup(RoundSchedule.alternating(), eps=1.0)
            logs.append(run_federation(state, 3, task.test))
        assert logs[0] == logs[1]

    def test_epsilon_grows(self):
        state, task = small_setup(RoundSchedule.freeze_a(), eps=3.0)
        log = run_federation(state, 5, task.test)
        eps = [m.epsilon_spent for m in log]
        assert all(a < b for a, b in zip(eps, eps[1:])) and eps[-1] <= 3.0

    def test_metrics_in_range(self):
        state, task = small_setup(RoundSchedule.joint(), arch="two-layer-mlp")
        for m in run_federation(state, 2, task.test):
            assert 0 <= m.accuracy <= 1 and 0 <= m.macro_f1 <= 1

    def test_deer_not_worse_than_joint_without_dp(self):
        finals = {}
        for name, sched in (("joint", RoundSchedule.joint()), ("deer", RoundSchedule.alternating())):
            state, task = small_setup(sched, K=6, n_train=480, arch="two-layer-mlp")
            finals[name] = run_federation(state, 30, task.test)[-1].accuracy
        assert finals["deer"] >= finals["joint"]

    def test_checkpoint_resume(self):
        full, task = small_setup(RoundSchedule.alternating(), eps=1.0)
        run_federation(full, 4, task.test)

        part, _ = small_setup(RoundSchedule.alternating(), eps=1.0)
        run_federation(part, 2, task.test)
        snap = json.loads(json.dumps(checkpoint(part)))
        resumed, _ = small_setup(RoundSchedule.alternating(), eps=1.0)
        restore(resumed, snap)
        run_federation(resumed, 2, task.test)
        assert resumed.round == 4
        assert resumed.global_adapters[0].B.tobytes() == full.global_adapters[0].B.tobytes()
        assert resumed.traces == full.traces


class TestMacroF1:
    def test_perfect(self):
        assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0

    def test_absent_class_scores_zero(self):
        # class 2 never appears or is predicted: 0/0 counts as 0
        assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)

    def test_hand(self):
        # class 0: tp=1 fp=1 fn=0 -> 2/3 ; class 1: tp=0 fp=0 fn=1 -> 0
        assert macro_f1([0, 1], [0, 0], 2) == pytest.approx(1 / 3)
