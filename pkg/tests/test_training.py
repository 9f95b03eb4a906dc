import math

import numpy as np
import pytest
from scipy import stats

from fairgcf.data import RatingDataset, Split, split_per_user
from fairgcf.graph import build_graph, graph_from_edges
from fairgcf.propagation import init_embeddings
from fairgcf.training import (
    Adam,
    GradientDescent,
    TrainConfig,
    bpr_pair_grads,
    bpr_pair_loss,
    ce_pair_grads,
    cost_sensitive_combine,
    fit,
    pair_ce_losses,
    sample_negative,
    sample_negatives,
    train_epoch,
)


def _toy_dataset(n_users=12, n_items=10, per_user=6, seed=0):
    rng = np.random.default_rng(seed)
    users, items, ratings = [], [], []
    for u in range(n_users):
        chosen = rng.choice(n_items, size=per_user, replace=False)
        users += [u] * per_user
        items += chosen.tolist()
        ratings += rng.integers(1, 6, size=per_user).astype(float).tolist()
    return RatingDataset(
        users=np.array(users), items=np.array(items), ratings=np.array(ratings),
        num_users=n_users, num_items=n_items, rating_scale=(1, 5),
    )


def _toy_split(seed=0) -> Split:
    return split_per_user(_toy_dataset(seed=seed), seed=seed)


class TestSampling:
    def test_forced_choice(self):
        # user 0 interacted with every item except 3
        users = np.array([0, 0, 0, 0])
        items = np.array([0, 1, 2, 4])
        g = graph_from_edges(1, 5, users, items)
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_negative(0, g, rng) == 3

    def test_never_in_profile(self):
        ds = _toy_dataset()
        g = build_graph(ds)
        rng = np.random.default_rng(1)
        for _ in range(300):
            u = int(rng.integers(ds.num_users))
            j = sample_negative(u, g, rng)
            assert not g.has_edge(u, j)

    def test_uniformity_chi_square(self):
        users = np.array([0, 0])
        items = np.array([0, 1])
        g = graph_from_edges(1, 12, users, items)
        rng = np.random.default_rng(2)
        draws = [sample_negative(0, g, rng) for _ in range(100_000)]
        counts = np.bincount(draws, minlength=12)
        assert counts[0] == 0 and counts[1] == 0
        observed = counts[2:]
        result = stats.chisquare(observed)
        assert result.pvalue > 0.01

    def test_exhausted_user_rejected(self):
        g = graph_from_edges(1, 2, np.array([0, 0]), np.array([0, 1]))
        with pytest.raises(ValueError):
            sample_negative(0, g, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_negatives(np.array([0]), g, np.random.default_rng(0))

    def test_batch_sampling_valid_and_deterministic(self):
        ds = _toy_dataset()
        g = build_graph(ds)
        users = g.users[:40]
        a = sample_negatives(users, g, np.random.default_rng(3))
        b = sample_negatives(users, g, np.random.default_rng(3))
        assert np.array_equal(a, b)
        for u, j in zip(users, a):
            assert not g.has_edge(int(u), int(j))


class TestLosses:
    def test_ce_perfect_classification(self):
        l_pos, l_neg = pair_ce_losses(1.0 - 1e-9, 1e-9)
        assert l_pos == pytest.approx(0.0, abs=1e-6)
        assert l_neg == pytest.approx(0.0, abs=1e-6)

    def test_ce_closed_forms(self):
        l_pos, _ = pair_ce_losses(0.5, 0.5)
        assert l_pos == pytest.approx(math.log(2), abs=1e-12)
        _, l_neg = pair_ce_losses(0.5, 0.75)
        assert l_neg == pytest.approx(math.log(4), abs=1e-12)

    def test_combine(self):
        assert cost_sensitive_combine(1.0, 1.0, 0.0) == 2.0
        assert cost_sensitive_combine(1.0, 1.0, 0.1) == pytest.approx(2.0)
        assert cost_sensitive_combine(3.0, 1.0, 1.0) == 2.0  # only the negative side
        assert cost_sensitive_combine(2.0, 0.5, 0.0) == 2.0 + 0.5

    def test_combine_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            cost_sensitive_combine(1.0, 1.0, 1.5)

    def test_bpr_closed_forms(self):
        assert bpr_pair_loss(1.0, 1.0) == pytest.approx(math.log(2), abs=1e-12)
        assert bpr_pair_loss(math.log(3), 0.0) == pytest.approx(-math.log(0.75), abs=1e-12)

    def test_bpr_monotone_in_margin(self):
        margins = np.linspace(-3, 3, 25)
        losses = bpr_pair_loss(margins, np.zeros_like(margins))
        assert np.all(np.diff(losses) < 0)

    def test_ce_gradients_match_finite_differences(self):
        from scipy.special import expit

        rng = np.random.default_rng(4)
        raws = rng.normal(scale=2.0, size=50)
        step = 1e-6
        for lam in (0.0, 0.1, 0.7, 1.0):
            for raw in raws:
                p = expit(raw)
                g_pos, g_neg = ce_pair_grads(p, p)
                g_pos, g_neg = (1 - lam) * g_pos, (1 + lam) * g_neg

                def pos_only(r):
                    return (1 - lam) * pair_ce_losses(expit(r), 0.5)[0]

                def neg_only(r):
                    return (1 + lam) * pair_ce_losses(0.5, expit(r))[1]

                fd_pos = (pos_only(raw + step) - pos_only(raw - step)) / (2 * step)
                fd_neg = (neg_only(raw + step) - neg_only(raw - step)) / (2 * step)
                assert abs(g_pos - fd_pos) <= 1e-6 * max(1.0, abs(fd_pos))
                assert abs(g_neg - fd_neg) <= 1e-6 * max(1.0, abs(fd_neg))

    def test_bpr_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        step = 1e-6
        for _ in range(50):
            rp, rn = rng.normal(scale=2.0, size=2)
            g_pos, g_neg = bpr_pair_grads(rp, rn)
            fd_pos = (bpr_pair_loss(rp + step, rn) - bpr_pair_loss(rp - step, rn)) / (2 * step)
            fd_neg = (bpr_pair_loss(rp, rn + step) - bpr_pair_loss(rp, rn - step)) / (2 * step)
            assert abs(g_pos - fd_pos) / max(1e-9, abs(fd_pos)) < 1e-6
            assert abs(g_neg - fd_neg) / max(1e-9, abs(fd_neg)) < 1e-6


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_=1.5)
        with pytest.raises(ValueError):
            TrainConfig(objective="hinge")
        with pytest.raises(ValueError):
            TrainConfig(patience=0)
        with pytest.raises(ValueError):
            TrainConfig(propagation_refresh="sometimes")

    def test_effective_lambda(self):
        assert TrainConfig(objective="plain_ce", lambda_=0.4).effective_lambda() == 0.0
        assert TrainConfig(objective="cost_sensitive_ce", lambda_=0.4).effective_lambda() == 0.4


class TestTrainEpoch:
    def _setup(self, objective="cost_sensitive_ce", refresh="batch", lr=0.05):
        split = _toy_split()
        graph = build_graph(split.train)
        config = TrainConfig(
            objective=objective, lambda_=0.1, dim=8, n_layers=2,
            learning_rate=lr, batch_size=16, max_epochs=5, patience=3,
            seed=0, propagation_refresh=refresh,
        )
        h0 = init_embeddings(graph.num_nodes, config.dim, seed=1)
        return split, graph, config, h0

    def test_zero_learning_rate_keeps_h0(self):
        split, graph, config, h0 = self._setup(lr=0.0)
        opt = GradientDescent(0.0)
        out, loss = train_epoch(h0.copy(), graph, config, np.random.default_rng(0), opt)
        assert np.array_equal(out, h0)
        assert math.isfinite(loss)

    def test_loss_decreases_on_single_pair(self):
        graph = graph_from_edges(1, 2, np.array([0]), np.array([0]))
        config = TrainConfig(
            objective="cost_sensitive_ce", lambda_=0.1, dim=4, n_layers=1,
            learning_rate=0.1, batch_size=4, max_epochs=50, patience=50, seed=0,
        )
        h0 = init_embeddings(graph.num_nodes, config.dim, seed=2)
        opt = Adam(config.learning_rate)
        rng = np.random.default_rng(3)
        first = None
        last = None
        for _ in range(50):
            h0, loss = train_epoch(h0, graph, config, rng, opt)
            first = loss if first is None else first
            last = loss
        assert last < first

    def test_bit_identical_across_runs(self):
        for refresh in ("batch", "epoch"):
            split, graph, config, h0 = self._setup(refresh=refresh)
            losses = []
            for _ in range(2):
                rng = np.random.default_rng(7)
                opt = Adam(config.learning_rate)
                h = h0.copy()
                run = []
                for _ in range(3):
                    h, loss = train_epoch(h, graph, config, rng, opt)
                    run.append(loss)
                losses.append((run, h.copy()))
            assert losses[0][0] == losses[1][0]
            assert np.array_equal(losses[0][1], losses[1][1])

    def test_one_negative_per_positive(self, monkeypatch):
        split, graph, config, h0 = self._setup()
        calls = {"n": 0}
        import fairgcf.training as training_mod

        original = training_mod.sample_negatives

        def counting(users, g, rng):
            calls["n"] += users.shape[0]
            return original(users, g, rng)

        monkeypatch.setattr(training_mod, "sample_negatives", counting)
        train_epoch(h0, graph, config, np.random.default_rng(0), Adam(0.01))
        assert calls["n"] == graph.num_edges

    def test_objectives_run_epoch_mode(self):
        for objective in ("cost_sensitive_ce", "plain_ce", "bpr"):
            split, graph, config, h0 = self._setup(objective=objective, refresh="epoch")
            out, loss = train_epoch(h0, graph, config, np.random.default_rng(1), Adam(0.01))
            assert math.isfinite(loss)
            assert out.shape == h0.shape
            assert not np.array_equal(out, h0)


class TestFit:
    def _config(self, **kw):
        base = dict(
            objective="cost_sensitive_ce", lambda_=0.1, dim=8, n_layers=2,
            learning_rate=0.01, batch_size=32, max_epochs=12, patience=4,
            seed=0, val_cutoff=10,
        )
        base.update(kw)
        return TrainConfig(**base)

    def test_empty_validation_rejected(self):
        split = _toy_split()
        empty_val = Split(
            train=split.train,
            validation=split.validation.subset(np.zeros(len(split.validation), dtype=bool)),
            test=split.test,
            seed=0,
        )
        with pytest.raises(ValueError):
            fit(empty_val, self._config())

    def test_patience_one_stops_after_two_epochs_when_worsening(self, monkeypatch):
        import fairgcf.training as training_mod

        values = iter([0.9, 0.8, 0.7, 0.6, 0.5])

        def fake_ndcg(*args, **kwargs):
            return next(values)

        monkeypatch.setattr(training_mod, "corpus_ndcg", fake_ndcg)
        split = _toy_split()
        state, trace = fit(split, self._config(patience=1, max_epochs=10))
        assert trace.n_epochs == 2
        assert trace.best_epoch == 1

    def test_best_checkpoint_is_argmax(self):
        split = _toy_split()
        state, trace = fit(split, self._config())
        assert trace.best_val_ndcg == max(trace.val_ndcg)
        assert trace.best_state is state

    def test_terminates_before_max_epochs_on_toy_data(self):
        split = _toy_split(seed=3)
        config = self._config(max_epochs=500, patience=5, learning_rate=0.05)
        state, trace = fit(split, config)
        assert trace.n_epochs < 500

    def test_lambda_zero_bitwise_equals_plain_ce(self):
        split = _toy_split(seed=1)
        a_state, a_trace = fit(split, self._config(objective="cost_sensitive_ce", lambda_=0.0))
        b_state, b_trace = fit(split, self._config(objective="plain_ce", lambda_=0.7))
        assert a_trace.losses == b_trace.losses
        assert a_trace.val_ndcg == b_trace.val_ndcg
        assert np.array_equal(a_state.h0, b_state.h0)

    def test_trace_export(self):
        split = _toy_split()
        _, trace = fit(split, self._config(max_epochs=3, patience=10))
        text = trace.to_tsv()
        lines = text.strip().splitlines()
        assert lines[0] == "epoch\tloss\tval_ndcg\tseconds"
        assert len(lines) == trace.n_epochs + 1


class TestOptimizers:
    def test_sgd_step(self):
        opt = GradientDescent(0.5)
        out = opt.step(np.array([1.0, 2.0]), np.array([2.0, -2.0]))
        assert out.tolist() == [0.0, 3.0]

    def test_adam_moves_against_gradient(self):
        opt = Adam(0.1)
        params = np.zeros(3)
        grad = np.array([1.0, -1.0, 0.0])
        out = opt.step(params, grad)
        assert out[0] < 0 and out[1] > 0 and out[2] == 0.0

    def test_adam_bias_correction_first_step(self):
        opt = Adam(0.1)
        out = opt.step(np.zeros(1), np.array([0.3]))
        # first Adam step has magnitude ~= lr regardless of gradient scale
        assert abs(out[0]) == pytest.approx(0.1, rel=1e-6)
