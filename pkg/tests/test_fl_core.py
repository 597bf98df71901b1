import math
from collections import Counter

import numpy as np
import pytest

from dpfed.accountant import PrivacyBudget, RdpLedger, calibrate_noise, default_alpha_grid
from dpfed.fl_core import (
    Aggregator,
    BudgetExhaustedError,
    ClientConfig,
    DatasetShard,
    LogisticRegressionModel,
    ServerState,
    clip_gradient,
    fedavg_aggregate,
    heterogeneous_update,
    load_csv_shard,
    local_update,
    make_synthetic_federation,
    run_round,
    shuffle_updates,
)
from dpfed.mechanisms import MechanismKind, MechanismParams, NoiseStream
from oracles import central_difference_gradient


def tiny_shard(seed=0, n=40, f=4, classes=3):
    rng = np.random.default_rng(seed)
    return DatasetShard(rng.normal(size=(n, f)), rng.integers(0, classes, n))


def make_client(shard, mech=None, **kw):
    args = dict(
        id=0,
        shard=shard,
        epsilon_k=8.0,
        mechanism=mech,
        clip_c=1.0,
        sample_rate_q=1.0,
        local_epochs_I=1,
        learning_rate=0.1,
    )
    args.update(kw)
    return ClientConfig(**args)


class TestShard:
    def test_validation(self):
        with pytest.raises(ValueError):
            DatasetShard(np.zeros((0, 3)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError):
            DatasetShard(np.zeros((2, 3)), np.array([0.5, 1.0]))
        with pytest.raises(ValueError):
            DatasetShard(np.array([[np.inf, 0.0]]), np.array([0]))

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "shard.csv"
        path.write_text("x0,x1,label\n0.5,-1.25,0\n2.0,3.5,2\n", encoding="utf-8")
        shard = load_csv_shard(path)
        assert shard.n == 2
        assert shard.features[1, 1] == 3.5
        assert shard.labels.tolist() == [0, 2]

    def test_csv_header_required(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n", encoding="utf-8")
        with pytest.raises(ValueError):
            load_csv_shard(path)


class TestLossModel:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            f = int(rng.integers(2, 10))
            classes = int(rng.integers(2, 5))
            model = LogisticRegressionModel(classes, f)
            if model.dim > 50:
                continue
            shard = DatasetShard(rng.normal(size=(12, f)), rng.integers(0, classes, 12))
            w = rng.normal(scale=0.5, size=model.dim)
            got = model.gradient(w, shard)
            want = central_difference_gradient(lambda v: model.loss(v, shard), w)
            denom = max(np.max(np.abs(want)), 1e-8)
            assert np.max(np.abs(got - want)) / denom < 1e-4

    def test_per_example_gradients_average(self):
        model = LogisticRegressionModel(3, 4)
        shard = tiny_shard(3)
        w = np.random.default_rng(1).normal(size=model.dim)
        per = model.per_example_gradients(w, shard)
        assert per.shape == (shard.n, model.dim)
        assert np.allclose(per.mean(axis=0), model.gradient(w, shard), rtol=1e-12)

    def test_accuracy_range(self):
        model = LogisticRegressionModel(3, 4)
        shard = tiny_shard(4)
        acc = model.accuracy(model.init_params(), shard)
        assert 0.0 <= acc <= 1.0


class TestClip:
    def test_forced_scaling(self):
        g = np.array([2.0, 0.0])
        out = clip_gradient(g, 1.0)
        assert np.allclose(out, [1.0, 0.0], rtol=1e-15)

    def test_unchanged_inside_ball(self):
        g = np.array([0.3, 0.4])
        assert np.array_equal(clip_gradient(g, 1.0), g)

    def test_zero_vector(self):
        assert np.array_equal(clip_gradient(np.zeros(3), 1.0), np.zeros(3))

    def test_norm_bound_random(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            g = rng.normal(size=8) * rng.uniform(0.1, 10)
            c = rng.uniform(0.1, 3)
            out = clip_gradient(g, c)
            assert np.linalg.norm(out) <= c + 1e-12
            if np.linalg.norm(g) > 0:
                cos = np.dot(out, g) / (np.linalg.norm(out) * np.linalg.norm(g) + 1e-300)
                assert cos == pytest.approx(1.0, abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            clip_gradient(np.array([np.nan, 1.0]), 1.0)


class TestLocalUpdate:
    def test_noise_free_reduction(self):
        # q=1, I=1, one step: exactly global - eta * mean clipped gradient
        model = LogisticRegressionModel(3, 4)
        shard = tiny_shard(5)
        cfg = make_client(shard, clip_c=100.0)
        w0 = np.random.default_rng(3).normal(scale=0.3, size=model.dim)
        upd = local_update(cfg, w0, model, NoiseStream(0, 0, 0, "local-update"))
        grads = model.per_example_gradients(w0, shard)
        norms = np.linalg.norm(grads, axis=1, keepdims=True)
        clipped = grads * np.minimum(1.0, 100.0 / norms)
        want = w0 - 0.1 * clipped.mean(axis=0)
        assert np.allclose(upd.params, want, rtol=1e-12)
        assert upd.noise_draws == 0

    def test_per_example_clipping_binds(self):
        model = LogisticRegressionModel(3, 4)
        shard = tiny_shard(21)
        c = 0.05
        cfg = make_client(shard, clip_c=c)
        w0 = np.random.default_rng(6).normal(scale=2.0, size=model.dim)
        upd = local_update(cfg, w0, model, NoiseStream(2, 0, 0, "local-update"))
        grads = model.per_example_gradients(w0, shard)
        norms = np.linalg.norm(grads, axis=1, keepdims=True)
        assert (norms > c).any()  # clipping is actually active
        clipped = grads * np.minimum(1.0, c / norms)
        assert np.all(np.linalg.norm(clipped, axis=1) <= c + 1e-12)
        want = w0 - 0.1 * clipped.mean(axis=0)
        assert np.allclose(upd.params, want, rtol=1e-12)

    def test_determinism(self):
        model = LogisticRegressionModel(3, 4)
        shard = tiny_shard(6)
        mech = MechanismParams(MechanismKind.GAUSSIAN, 1.0, 5.0)
        cfg = make_client(shard, mech, sample_rate_q=0.3, local_epochs_I=3)
        a = local_update(cfg, model.init_params(), model, NoiseStream(9, 2, 0, "local-update"))
        b = local_update(cfg, model.init_params(), model, NoiseStream(9, 2, 0, "local-update"))
        assert np.array_equal(a.params, b.params)
        c = local_update(cfg, model.init_params(), model, NoiseStream(9, 3, 0, "local-update"))
        assert not np.array_equal(a.params, c.params)

    def test_huge_noise_gives_chance_accuracy(self):
        rng = np.random.default_rng(8)
        shards, eval_shard = make_synthetic_federation(1, 400, 20, 10, seed=55, eval_fraction=2.5)
        model = LogisticRegressionModel(10, 20)
        mech = MechanismParams(MechanismKind.GAUSSIAN, 1.0, 1e6)
        cfg = make_client(shards[0], mech, sample_rate_q=0.5, local_epochs_I=2)
        w = model.init_params()
        for r in range(3):
            w = local_update(cfg, w, model, NoiseStream(13, r, 0, "local-update")).params
        assert model.accuracy(w, eval_shard) == pytest.approx(0.1, abs=0.05)

    def test_noise_draw_counting(self):
        model = LogisticRegressionModel(3, 4)
        mech = MechanismParams(MechanismKind.LAPLACE, 1.0, 2.0)
        cfg = make_client(tiny_shard(7), mech, local_epochs_I=4, sample_rate_q=1.0)
        upd = local_update(cfg, model.init_params(), model, NoiseStream(1, 0, 0, "local-update"))
        assert upd.noise_draws == 4

    def test_mechanism_sensitivity_must_match_clip(self):
        mech = MechanismParams(MechanismKind.LAPLACE, 2.0, 1.0)
        with pytest.raises(ValueError):
            make_client(tiny_shard(8), mech, clip_c=1.0)


class TestHeterogeneousUpdate:
    def test_equal_epsilon_collapses_to_sgd(self):
        cfg = make_client(tiny_shard(9), epsilon_k=4.0, learning_rate=0.5)
        w = np.array([1.0, -1.0, 0.0, 2.0] * 4, dtype=float)[: 1 * 4]
        g = np.array([0.1, 0.2, 0.3, 0.4])
        w_max = np.zeros(4)
        out = heterogeneous_update(cfg, w[:4], g, w_max, eps_max=4.0)
        assert np.allclose(out, w[:4] - 0.5 * g, rtol=1e-15)

    def test_tiny_epsilon_maximal_pull(self):
        cfg = make_client(tiny_shard(10), epsilon_k=1e-9, learning_rate=1.0)
        w = np.ones(4)
        out = heterogeneous_update(cfg, w, np.zeros(4), np.zeros(4), eps_max=1.0)
        # lam -> 1: w - (w - w_max) = w_max
        assert np.allclose(out, np.zeros(4), atol=1e-8)

    def test_at_anchor_no_penalty(self):
        cfg = make_client(tiny_shard(11), epsilon_k=2.0, learning_rate=0.7)
        w = np.array([0.5, 0.5, -0.5, 1.0])
        g = np.array([1.0, 0.0, 0.0, 0.0])
        out = heterogeneous_update(cfg, w, g, w, eps_max=8.0)
        assert np.allclose(out, w - 0.7 * g, rtol=1e-15)

    def test_eps_max_domination(self):
        cfg = make_client(tiny_shard(12), epsilon_k=4.0)
        with pytest.raises(ValueError):
            heterogeneous_update(cfg, np.zeros(4), np.zeros(4), np.zeros(4), eps_max=2.0)


class TestFedAvg:
    def test_identical_models(self):
        m = np.array([1.0, 2.0])
        assert np.array_equal(fedavg_aggregate([m, m, m], [0.2, 0.3, 0.5]), m)

    def test_midpoint(self):
        out = fedavg_aggregate([np.array([0.0, 0.0]), np.array([2.0, 4.0])], [1.0, 1.0])
        assert np.allclose(out, [1.0, 2.0], rtol=1e-15)

    def test_degenerate_weight(self):
        a, b = np.array([1.0]), np.array([5.0])
        assert np.array_equal(fedavg_aggregate([a, b], [1.0, 0.0]), a)

    def test_subset_renormalization(self):
        # weights that do not sum to 1 over the subset are rescaled
        out = fedavg_aggregate([np.array([0.0]), np.array([1.0])], [0.1, 0.3])
        assert out[0] == pytest.approx(0.75, rel=1e-12)

    def test_single_model_identity(self):
        m = np.array([3.0, -1.0])
        assert np.array_equal(fedavg_aggregate([m], [0.4]), m)

    def test_errors(self):
        with pytest.raises(ValueError):
            fedavg_aggregate([], [])
        with pytest.raises(ValueError):
            fedavg_aggregate([np.zeros(2), np.zeros(3)], [1.0, 1.0])
        with pytest.raises(ValueError):
            fedavg_aggregate([np.zeros(2)], [0.0])


class TestShuffle:
    def test_single_unchanged(self):
        pairs = [(3, np.array([1.0]))]
        assert shuffle_updates(pairs, NoiseStream(0, purpose="shuffle")) == pairs

    def test_multiset_preserved(self):
        pairs = [(i, np.array([float(i)])) for i in range(6)]
        out = shuffle_updates(pairs, NoiseStream(1, purpose="shuffle"))
        assert sorted(cid for cid, _ in out) == list(range(6))
        for cid, vec in out:
            assert vec[0] == float(cid)  # pairs stay intact

    def test_uniformity_chi_square(self):
        items = [(0, np.array([0.0])), (1, np.array([1.0])), (2, np.array([2.0]))]
        counts = Counter()
        for trial in range(10_000):
            out = shuffle_updates(items, NoiseStream(12345, trial, 0, "shuffle"))
            counts[tuple(cid for cid, _ in out)] += 1
        assert len(counts) == 6
        for perm, count in counts.items():
            assert count / 10_000 == pytest.approx(1.0 / 6.0, abs=0.02)


def build_federation(
    n_clients=4,
    mech_kind=None,
    epsilon=8.0,
    horizon=40,
    aggregator=Aggregator.FEDAVG,
    eps_list=None,
    seed=100,
):
    shards, eval_shard = make_synthetic_federation(n_clients, 60, 5, 3, seed=seed)
    model = LogisticRegressionModel(3, 5)
    grid = default_alpha_grid()
    clients, ledgers, budgets = [], {}, {}
    for cid, shard in enumerate(shards):
        eps_k = eps_list[cid] if eps_list else epsilon
        mech = None
        if mech_kind is not None:
            budget = PrivacyBudget(eps_k, 1e-5, horizon)
            mech = calibrate_noise(mech_kind, 1.0, budget).mechanism
        clients.append(
            ClientConfig(
                id=cid,
                shard=shard,
                epsilon_k=eps_k if mech_kind else math.inf,
                mechanism=mech,
                clip_c=1.0,
                sample_rate_q=0.5,
                local_epochs_I=2,
                learning_rate=0.05,
            )
        )
        ledgers[cid] = RdpLedger(grid)
        budgets[cid] = PrivacyBudget(eps_k, 1e-5, horizon)
    server = ServerState(
        global_model=model.init_params(),
        round_t=0,
        weights=np.full(n_clients, 1.0 / n_clients),
        aggregator=aggregator,
        selection_fraction=1.0,
    )
    return server, clients, model, ledgers, budgets, eval_shard


class TestRunRound:
    def test_noiseless_full_participation_loss_non_increasing(self):
        server, clients, model, ledgers, budgets, eval_shard = build_federation()
        for cfg in clients:
            cfg.sample_rate_q = 1.0
            cfg.local_epochs_I = 1
            cfg.clip_c = 1000.0
        losses = []
        for _ in range(20):
            result = run_round(server, clients, model, ledgers, 7, budgets, eval_shard=eval_shard)
            server = result.server
            losses.append(result.metrics.train_loss)
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))

    def test_budget_ceiling_and_halt(self):
        horizon = 10  # 5 rounds x 2 local epochs
        server, clients, model, ledgers, budgets, eval_shard = build_federation(
            mech_kind=MechanismKind.GAUSSIAN, horizon=horizon
        )
        metrics = []
        for _ in range(5):
            result = run_round(server, clients, model, ledgers, 3, budgets, eval_shard=eval_shard)
            server = result.server
            metrics.append(result.metrics)
        assert all(m.cumulative_epsilon <= 8.0 for m in metrics)
        assert metrics[-1].cumulative_epsilon == pytest.approx(8.0, abs=1e-3)
        with pytest.raises(BudgetExhaustedError):
            run_round(server, clients, model, ledgers, 3, budgets, eval_shard=eval_shard)
        # ledgers unchanged by the aborted round
        eps_after, _ = ledgers[0].to_dp(1e-5)
        assert eps_after <= 8.0

    def test_metrics_count_and_determinism(self):
        rows = []
        for attempt in range(2):
            server, clients, model, ledgers, budgets, eval_shard = build_federation(
                mech_kind=MechanismKind.STAIRCASE
            )
            acc = []
            for _ in range(3):
                result = run_round(server, clients, model, ledgers, 11, budgets, eval_shard=eval_shard)
                server = result.server
                acc.append(result.metrics)
            rows.append(acc)
        assert len(rows[0]) == 3
        for a, b in zip(rows[0], rows[1]):
            assert a == b

    def test_selection_fraction(self):
        server, clients, model, ledgers, budgets, eval_shard = build_federation()
        server.selection_fraction = 0.5
        result = run_round(server, clients, model, ledgers, 4, budgets, eval_shard=eval_shard)
        # only ceil(0.5 * 4) = 2 clients trained: the others left no local model
        assert len(result.client_models) == 2

    def test_mode_connect_round_runs(self):
        server, clients, model, ledgers, budgets, eval_shard = build_federation(
            aggregator=Aggregator.MODE_CONNECT
        )
        result = run_round(server, clients, model, ledgers, 5, budgets, eval_shard=eval_shard)
        assert result.server.global_model.shape == server.global_model.shape

    def test_heterogeneous_epsilons_round(self):
        server, clients, model, ledgers, budgets, eval_shard = build_federation(
            mech_kind=MechanismKind.GAUSSIAN, eps_list=[2.0, 4.0, 6.0, 8.0]
        )
        result = run_round(server, clients, model, ledgers, 6, budgets, eval_shard=eval_shard)
        # system epsilon is the per-client maximum
        per_client = [ledgers[c.id].to_dp(1e-5)[0] for c in clients]
        assert result.metrics.cumulative_epsilon == pytest.approx(max(per_client), rel=1e-12)
        # weaker-budget clients got more noise
        scales = [c.mechanism.scale for c in clients]
        assert scales == sorted(scales, reverse=True)

    def test_shuffled_round_fedavg_invariant(self):
        a_server, clients, model, ledgers, budgets, eval_shard = build_federation()
        a = run_round(a_server, clients, model, ledgers, 9, budgets, eval_shard=eval_shard)
        b_server, clients2, model2, ledgers2, budgets2, eval_shard2 = build_federation()
        b = run_round(
            b_server, clients2, model2, ledgers2, 9, budgets2, eval_shard=eval_shard2, shuffle=True
        )
        # equal weights: FedAvg is order-invariant, so shuffling changes nothing
        assert np.allclose(a.server.global_model, b.server.global_model, rtol=1e-12)
