"""Optimization loop: determinism, descent on an overparameterized toy task,
early-stopping contract, and exact optimizer-state round-trips."""
import random

import numpy as np
import pytest

import hetlink.trainer as trainer_mod
from hetlink.autodiff import Parameter
from hetlink.batching import make_batches, prepare_corpus
from hetlink.encoder import EncoderConfig
from hetlink.graph import RawEdge, build_graph
from hetlink.model import LinkModel
from hetlink.objectives import LossConfig, build_labels
from hetlink.sampler import SamplerConfig, sample_corpus
from hetlink.trainer import Adam, TrainConfig, TrainingError, fit, train_epoch

from conftest import toy_dti_graph


def overfit_task(seed=0, samples=40):
    edges = [RawEdge("H", "h", f"e{i}", "T", f"t{i}") for i in range(3)]
    g = build_graph(edges, ["H"], ["T"])
    corpus = sample_corpus(
        g, g.head_nodes(),
        SamplerConfig(max_inner=1, walk_length=3, samples_per_head=samples, seed=seed),
    )
    positives = {(g.node_ref("H", "h"), g.node_ref("T", "t0"))}
    labels = build_labels(corpus, positives)
    model = LinkModel.build(
        g, corpus, EncoderConfig(layers=1, heads=2, d_in=8, d_hidden=8, d_out=6),
        distance_cap=4, seed=seed, d_mlp=4,
    )
    prepared = prepare_corpus(corpus, g, model.tables, model.vocab)
    batches = make_batches(prepared, 16, positive_steps=labels.positive_steps, min_nodes=2)
    return g, corpus, labels, model, batches


class TestTrainEpoch:
    def test_zero_learning_rate_keeps_parameters_and_loss(self):
        _, _, _, model, batches = overfit_task()
        params = model.encoder_parameters()
        before = [p.data.copy() for p in params]
        opt = Adam(params, lr=0.0)
        cfg = LossConfig()
        l1 = train_epoch(model, batches, opt, cfg, random.Random(1))
        l2 = train_epoch(model, batches, opt, cfg, random.Random(2))
        assert l1 == l2
        for p, b in zip(params, before):
            assert np.array_equal(p.data, b)

    def test_descent_on_overfit_toy(self):
        _, _, _, model, batches = overfit_task()
        opt = Adam(model.encoder_parameters(), lr=5e-3)
        cfg = LossConfig(temperature=0.2)
        losses = [
            train_epoch(model, batches, opt, cfg, random.Random(e)) for e in range(50)
        ]
        assert losses[49] < losses[0]

    def test_same_seed_identical_trajectory(self):
        results = []
        for _ in range(2):
            _, _, _, model, batches = overfit_task(seed=3)
            opt = Adam(model.encoder_parameters(), lr=1e-3)
            cfg = LossConfig()
            results.append(
                [train_epoch(model, batches, opt, cfg, random.Random(e)) for e in range(5)]
            )
        assert results[0] == results[1]


class TestAdam:
    def test_state_round_trip_is_exact(self):
        rng = np.random.default_rng(4)
        p1 = Parameter(rng.normal(size=(3, 2)), name="p1")
        p2 = Parameter(rng.normal(size=(4,)), name="p2")
        opt = Adam([p1, p2], lr=0.01)
        for _ in range(3):
            p1.grad[...] = rng.normal(size=p1.shape)
            p2.grad[...] = rng.normal(size=p2.shape)
            opt.step()
        state = {k: v.copy() for k, v in opt.state_arrays().items()}
        clone_p1 = Parameter(p1.data.copy(), name="p1")
        clone_p2 = Parameter(p2.data.copy(), name="p2")
        clone = Adam([clone_p1, clone_p2], lr=0.01)
        clone.load_state_arrays(state)
        g1, g2 = rng.normal(size=p1.shape), rng.normal(size=p2.shape)
        for opt_, a, b in ((opt, p1, p2), (clone, clone_p1, clone_p2)):
            a.grad[...] = g1
            b.grad[...] = g2
            opt_.step()
        assert np.array_equal(p1.data, clone_p1.data)
        assert np.array_equal(p2.data, clone_p2.data)

    def test_update_is_pure_function_of_gradient_and_state(self):
        p = Parameter(np.ones(3), name="p")
        opt = Adam([p], lr=0.1)
        p.grad[...] = [1.0, -1.0, 0.5]
        opt.step()
        first = p.data.copy()
        q = Parameter(np.ones(3), name="p")
        opt2 = Adam([q], lr=0.1)
        q.grad[...] = [1.0, -1.0, 0.5]
        opt2.step()
        assert np.array_equal(first, q.data)


class TestFit:
    def _fit_once(self, seed=5, max_epochs=4, patience=2):
        g = toy_dti_graph()
        corpus = sample_corpus(
            g, g.head_nodes(),
            SamplerConfig(max_inner=2, walk_length=3, samples_per_head=30, seed=seed),
        )
        d0, d1 = g.node_ref("drug", "d0"), g.node_ref("drug", "d1")
        p0, p1, p2 = (g.node_ref("protein", f"p{i}") for i in range(3))
        train_pairs = [(d0, p0), (d1, p1), (d0, p2)]
        train_labels = [1, 1, 0]
        val_pairs = [(d1, p0), (d0, p1)]
        val_labels = [1, 0]
        labels = build_labels(corpus, {(d0, p0), (d1, p1)})
        model = LinkModel.build(
            g, corpus, EncoderConfig(layers=1, heads=2, d_in=8, d_hidden=8, d_out=6),
            distance_cap=6, seed=seed, d_mlp=4,
        )
        cfg = TrainConfig(
            learning_rate=1e-3, max_epochs=max_epochs, patience=patience,
            batch_size=16, seed=seed, probe_steps=10,
        )
        log = fit(
            model, corpus, labels, train_pairs, train_labels,
            val_pairs, val_labels, LossConfig(), cfg,
        )
        return log

    def test_log_is_monotone_in_epoch_and_keeps_best(self):
        log = self._fit_once()
        assert log.epochs == sorted(log.epochs)
        assert log.best_val_auc == max(log.val_auc)
        assert log.best_val_auc >= log.val_auc[-1]

    def test_same_seed_identical_logs(self):
        a = self._fit_once(seed=6)
        b = self._fit_once(seed=6)
        assert a.train_loss == b.train_loss
        assert a.val_auc == b.val_auc

    def test_patience_one_with_worsening_auc_stops_after_two_epochs(self, monkeypatch):
        fake_aucs = iter([0.9, 0.8, 0.7, 0.6, 0.5])
        monkeypatch.setattr(
            trainer_mod, "validation_auc", lambda *a, **k: next(fake_aucs)
        )
        log = self._fit_once(seed=7, max_epochs=5, patience=1)
        assert len(log.epochs) == 2

    def test_validation_overlap_rejected(self):
        g = toy_dti_graph()
        corpus = sample_corpus(
            g, g.head_nodes(), SamplerConfig(walk_length=3, samples_per_head=5, seed=0)
        )
        d0, p0 = g.node_ref("drug", "d0"), g.node_ref("protein", "p0")
        labels = build_labels(corpus, {(d0, p0)})
        model = LinkModel.build(
            g, corpus, EncoderConfig(layers=1, heads=1, d_in=8, d_hidden=8, d_out=4),
            distance_cap=6, seed=0,
        )
        with pytest.raises(TrainingError, match="overlap"):
            fit(
                model, corpus, labels,
                [(d0, p0)], [1],
                [(d0, p0)], [1],
                LossConfig(),
                TrainConfig(max_epochs=2, patience=1),
            )

    def test_config_validation(self):
        with pytest.raises(TrainingError):
            TrainConfig(max_epochs=10, patience=10)
        with pytest.raises(TrainingError):
            TrainConfig(learning_rate=0.0)
