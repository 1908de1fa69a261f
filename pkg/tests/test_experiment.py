"""Experiment driver: config validation, fold pipeline, leakage audit,
deterministic outputs, importance ranking, and the sensitivity sweep."""
import json
import os
from pathlib import Path

import numpy as np
import pytest

from hetlink.autodiff import Tensor
from hetlink.experiment import (
    ConfigError,
    ExperimentConfig,
    degree_product_auc,
    importance_report,
    load_experiment_data,
    run_experiment,
    run_fold,
    sensitivity_sweep,
    thread_cap,
)
from hetlink.graph import RawEdge, build_graph, drop_typed_pairs
from hetlink.model import LinkModel
from hetlink.encoder import EncoderConfig
from hetlink.sampler import SamplerConfig, sample_corpus

from conftest import toy_dti_graph


def tiny_config(**overrides) -> dict:
    base = {
        "synthetic": {"heads": 16, "tails": 16, "bridges": 8,
                      "bridge_attach_head": 0.3, "bridge_attach_tail": 0.3},
        "folds": 3,
        "eval_folds": 1,
        "negative_ratio": 1.5,
        "seed": 3,
        "mask_scored_edge": True,
        "sampler": {"max_inner": 2, "walk_length": 3, "samples_per_head": 15,
                    "distance_cap": 6},
        "encoder": {"layers": 1, "heads": 2, "d_in": 16, "d_hidden": 8, "d_out": 8},
        "train": {"max_epochs": 2, "patience": 1, "batch_size": 32,
                  "probe_steps": 10},
        "d_mlp": 8,
        "predictor_steps": 30,
    }
    base.update(overrides)
    return base


class TestConfigValidation:
    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="walk_lenght"):
            ExperimentConfig.from_dict(tiny_config(walk_lenght=3))

    def test_unknown_nested_key_rejected(self):
        cfg = tiny_config()
        cfg["sampler"]["max_innerr"] = 2
        with pytest.raises(ConfigError, match="sampler"):
            ExperimentConfig.from_dict(cfg)

    def test_seed_inside_subsections_rejected(self):
        cfg = tiny_config()
        cfg["sampler"]["seed"] = 5
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(cfg)

    def test_requires_a_data_source(self):
        with pytest.raises(ConfigError, match="edge_file"):
            ExperimentConfig.from_dict({"folds": 2})

    def test_missing_edge_file_rejected(self, tmp_path):
        cfg = {
            "edge_file": str(tmp_path / "absent.tsv"),
            "link_edge_type": "binds",
            "head_types": ["drug"],
            "tail_types": ["protein"],
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        with pytest.raises(ConfigError, match="does not exist"):
            ExperimentConfig.from_json(path)

    def test_invalid_fold_counts(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(tiny_config(folds=1))
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(tiny_config(eval_folds=9))


class TestDataAssembly:
    def test_negative_ratio_preserved(self):
        sparse = {"heads": 16, "tails": 16, "bridges": 8,
                  "bridge_attach_head": 0.18, "bridge_attach_tail": 0.18}
        cfg = ExperimentConfig.from_dict(
            tiny_config(negative_ratio=5.0, synthetic=sparse)
        )
        data = load_experiment_data(cfg)
        assert len(data.dataset.negatives) == 5 * len(data.dataset.positives)

    def test_edge_and_link_files(self, tmp_path):
        edge_path = tmp_path / "edges.tsv"
        edge_path.write_text(
            "drug\td0\tbinds\tprotein\tp0\n"
            "drug\td1\tbinds\tprotein\tp1\n"
            "drug\td0\tsimilar\tdrug\td1\n"
            "protein\tp0\tassoc\tprotein\tp1\n"
        )
        link_path = tmp_path / "links.tsv"
        link_path.write_text(
            "drug\td0\tprotein\tp0\t1\n"
            "drug\td1\tprotein\tp1\t1\n"
            "drug\td0\tprotein\tp1\t0\n"
            "drug\td1\tprotein\tp0\t0\n"
        )
        cfg = ExperimentConfig.from_dict(
            {
                "edge_file": str(edge_path),
                "link_file": str(link_path),
                "link_edge_type": "binds",
                "head_types": ["drug"],
                "tail_types": ["protein"],
                "folds": 2,
            }
        )
        data = load_experiment_data(cfg)
        assert len(data.dataset.positives) == 2
        assert len(data.dataset.negatives) == 2

    def test_link_edge_extraction_from_graph(self, tmp_path):
        edge_path = tmp_path / "edges.tsv"
        edge_path.write_text(
            "drug\td0\tbinds\tprotein\tp0\n"
            "drug\td1\tbinds\tprotein\tp1\n"
            "drug\td1\tsimilar\tdrug\td0\n"
        )
        cfg = ExperimentConfig.from_dict(
            {
                "edge_file": str(edge_path),
                "link_edge_type": "binds",
                "head_types": ["drug"],
                "tail_types": ["protein"],
                "folds": 2,
                "negative_ratio": 1.0,
            }
        )
        data = load_experiment_data(cfg)
        assert len(data.dataset.positives) == 2


class TestFoldPipeline:
    def test_held_out_links_absent_from_training_graph(self):
        cfg = ExperimentConfig.from_dict(tiny_config())
        data = load_experiment_data(cfg)
        result = run_fold(cfg, data, fold=0)
        tg = result.model.graph
        for h, t in data.dataset.fold_positives(0):
            for et, nbr in tg.neighbors(h):
                assert not (et == data.link_edge_id and nbr == t)

    def test_drop_typed_pairs_preserves_node_identity(self):
        g = toy_dti_graph()
        pair = (g.node_ref("drug", "d0"), g.node_ref("protein", "p0"))
        g2 = drop_typed_pairs(g, [pair], g.edge_type_id("binds"))
        assert g2.node_types == g.node_types
        assert g2.node_names == g.node_names
        assert g2.degree(pair[0]) == g.degree(pair[0]) - 1
        assert not any(
            et == g.edge_type_id("binds") and nbr == pair[1]
            for et, nbr in g2.neighbors(pair[0])
        )

    def test_degree_product_baseline(self):
        g = toy_dti_graph()
        pairs = [
            (g.node_ref("drug", "d0"), g.node_ref("protein", "p0")),
            (g.node_ref("drug", "d1"), g.node_ref("protein", "p2")),
        ]
        auc = degree_product_auc(g, pairs, [1, 0])
        assert 0.0 <= auc <= 1.0
        assert degree_product_auc(g, pairs, [1, 1]) is None


class TestRunExperiment:
    def test_outputs_are_byte_identical_across_runs(self, tmp_path):
        outputs = []
        for name in ("a", "b"):
            cfg = ExperimentConfig.from_dict(
                tiny_config(out_dir=str(tmp_path / name))
            )
            run_experiment(cfg)
            outputs.append(tmp_path / name)
        for fname in ("metrics.json", "predictions.tsv", "importance.csv", "metrics.csv"):
            a = (outputs[0] / fname).read_bytes()
            b = (outputs[1] / fname).read_bytes()
            assert a == b, f"{fname} differs between identical runs"

    def test_prediction_rows_cover_eval_folds(self, tmp_path):
        cfg = ExperimentConfig.from_dict(tiny_config(out_dir=str(tmp_path / "o")))
        result = run_experiment(cfg)
        data = load_experiment_data(cfg)
        expected = len(data.dataset.fold_positives(0)) + len(
            data.dataset.fold_negatives(0)
        )
        assert len(result.predictions) == expected
        lines = (tmp_path / "o" / "predictions.tsv").read_text().splitlines()
        assert len(lines) == expected
        head, tail, score, label = lines[0].split("\t")
        assert label in ("0", "1")
        assert 0.0 < float(score) < 1.0

    def test_metrics_json_structure(self, tmp_path):
        cfg = ExperimentConfig.from_dict(tiny_config(out_dir=str(tmp_path / "o")))
        run_experiment(cfg)
        payload = json.loads((tmp_path / "o" / "metrics.json").read_text())
        assert {"folds", "aggregate"} == set(payload)
        fold0 = payload["folds"][0]
        assert {"fold", "accuracy", "f1", "auc", "aupr"} == set(fold0)
        assert "auc_mean" in payload["aggregate"]

    def test_parallel_folds_match_sequential(self, tmp_path):
        seq_cfg = ExperimentConfig.from_dict(
            tiny_config(out_dir=str(tmp_path / "s"), eval_folds=2)
        )
        par_cfg = ExperimentConfig.from_dict(
            tiny_config(out_dir=str(tmp_path / "p"), eval_folds=2, parallel_folds=2)
        )
        run_experiment(seq_cfg)
        run_experiment(par_cfg)
        assert (tmp_path / "s" / "metrics.json").read_bytes() == (
            tmp_path / "p" / "metrics.json"
        ).read_bytes()

    def test_thread_cap_env(self, monkeypatch):
        monkeypatch.setenv("CHAT_THREADS", "1")
        assert thread_cap() == 1
        monkeypatch.setenv("CHAT_THREADS", "junk")
        assert thread_cap() > 1000
        monkeypatch.delenv("CHAT_THREADS")
        assert thread_cap() > 1000


class TestImportance:
    def _model_and_corpus(self, edges, walk_length=2, samples=20):
        g = build_graph(edges, ["H"], ["T"])
        corpus = sample_corpus(
            g, g.head_nodes(),
            SamplerConfig(max_inner=1, walk_length=walk_length, samples_per_head=samples, seed=0),
        )
        model = LinkModel.build(
            g, corpus, EncoderConfig(layers=1, heads=2, d_in=8, d_hidden=8, d_out=4),
            distance_cap=4, seed=0,
        )
        return g, corpus, model

    def test_single_connection_type_scores_one(self):
        edges = [RawEdge("H", f"h{i}", "e", "T", f"t{i}") for i in range(4)]
        g, corpus, model = self._model_and_corpus(edges)
        rows = importance_report(model, corpus)
        assert len(rows) == 1
        rank, label, mean_alpha, occ = rows[0]
        assert rank == 1 and label == "e"
        assert mean_alpha == 1.0 and occ > 0

    def test_rows_sorted_non_increasing(self):
        g = toy_dti_graph()
        corpus = sample_corpus(
            g, g.head_nodes(),
            SamplerConfig(max_inner=2, walk_length=4, samples_per_head=50, seed=2),
        )
        model = LinkModel.build(
            g, corpus, EncoderConfig(layers=1, heads=2, d_in=8, d_hidden=8, d_out=4),
            distance_cap=6, seed=1,
        )
        rows = importance_report(model, corpus)
        alphas = [r[2] for r in rows]
        assert alphas == sorted(alphas, reverse=True)
        assert len(rows) <= 30

    def test_hand_set_logits_control_ranking(self):
        # two connection types; synthesize hidden states whose connection
        # token carries its vocab row, and an attention vector reading it
        edges = []
        for i in range(6):
            edges.append(RawEdge("H", f"h{i}", "fast", "T", f"ta{i}"))
            edges.append(RawEdge("T", f"ta{i}", "slow", "T", f"tb{i}"))
        g, corpus, model = self._model_and_corpus(edges, walk_length=3, samples=30)
        fast_row = model.vocab.lookup((g.edge_type_id("fast"),), frozen=True)
        d = model.config.d_out

        def fake_encode(batch, **kw):
            B, a_max = batch.conn_idx.shape
            T = batch.token_mask.shape[1]
            H = np.zeros((B, T, d))
            for r in range(B):
                for j in range(a_max):
                    if batch.tail_mask[r, j]:
                        big = batch.conn_idx[r, j] == fast_row
                        H[r, 2 * j + 1, 0] = 10.0 if big else 1.0
            return Tensor(H)

        model.encode_batch = fake_encode
        model.attention_vector.data[...] = 0.0
        model.attention_vector.data[d] = 1.0  # reads the connection token
        rows = importance_report(model, corpus)
        assert rows[0][1] == "fast"
        assert rows[0][2] > rows[-1][2]


class TestSweep:
    def test_single_repeat_gives_zero_std_and_one_row_per_m(self, tmp_path):
        cfg = ExperimentConfig.from_dict(tiny_config())
        rows = sensitivity_sweep(cfg, [5, 10], repeats=1)
        assert [m for m, _, _ in rows] == [5, 10]
        assert all(std == 0.0 for _, _, std in rows)
        for _, mean_, _ in rows:
            assert 0.0 <= mean_ <= 1.0

    def test_m_values_validated(self):
        cfg = ExperimentConfig.from_dict(tiny_config())
        with pytest.raises(ConfigError):
            sensitivity_sweep(cfg, [10, 5], repeats=1)
        with pytest.raises(ConfigError):
            sensitivity_sweep(cfg, [5], repeats=0)
