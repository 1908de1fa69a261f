"""Experiment command line.

Subcommands: sample (dump a corpus), train (fold-0 training + checkpoint),
evaluate (score a checkpoint on the fold-0 test split), run (full k-fold
experiment), importance (connection ranking), sweep (sample-size sensitivity),
gradcheck (finite-difference audit of the full pipeline).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .experiment import (
    ConfigError,
    ExperimentConfig,
    _seed,
    build_index,
    importance_report,
    load_experiment_data,
    run_experiment,
    run_fold,
    sensitivity_sweep,
    thread_cap,
    write_importance_csv,
    write_sweep_csv,
)
from .graph import build_graph
from .model import LinkModel
from .predictor import evaluate_metrics, occurrence_training_set, score_pairs, train_predictor
from .sampler import SamplerConfig, dump_corpus, sample_corpus


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", default=None, help="override the output directory")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    data = load_experiment_data(cfg)
    sampler_cfg = replace(cfg.sampler, seed=_seed(cfg.seed, "sampler", 0))
    corpus = sample_corpus(data.graph, data.graph.head_nodes(), sampler_cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_corpus(corpus, data.graph, out / "corpus.tsv")
    print(f"wrote {len(corpus)} sequences to {out / 'corpus.tsv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = load_experiment_data(cfg)
    result = run_fold(cfg, data, fold=0)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.model.save(out / "checkpoint.npz")
    result.log.write_csv(out / "train_log.csv")
    print(
        f"fold 0: best val AUC {result.log.best_val_auc:.4f} "
        f"at epoch {result.log.best_epoch}; checkpoint in {out / 'checkpoint.npz'}"
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    data = load_experiment_data(cfg)
    from .experiment import drop_typed_pairs, _split_train_val

    test_pos = data.dataset.fold_positives(0)
    test_neg = data.dataset.fold_negatives(0)
    rest_pos = [p for p, f in zip(data.dataset.positives, data.dataset.pos_folds) if f != 0]
    rest_neg = [p for p, f in zip(data.dataset.negatives, data.dataset.neg_folds) if f != 0]
    val_rng = np.random.default_rng(np.random.SeedSequence(_seed(cfg.seed, "val", 0)))
    train_pos, val_pos = _split_train_val(rest_pos, cfg.val_fraction, val_rng)
    train_neg, _ = _split_train_val(rest_neg, cfg.val_fraction, val_rng)
    held_out = test_pos + val_pos
    train_graph = (
        drop_typed_pairs(data.graph, held_out, data.link_edge_id)
        if data.link_edge_id >= 0
        else data.graph
    )
    model = LinkModel.load(args.checkpoint, train_graph)
    sampler_cfg = replace(cfg.sampler, seed=_seed(cfg.seed, "sampler", 0))
    corpus = sample_corpus(train_graph, train_graph.head_nodes(), sampler_cfg)
    index = build_index(model, corpus)
    feats, ys, ws = occurrence_training_set(
        index,
        train_pos + train_neg,
        [1] * len(train_pos) + [0] * len(train_neg),
        model.predictor.scalar_dot,
    )
    train_predictor(model.predictor, feats, ys, ws,
                    steps=cfg.predictor_steps, lr=cfg.predictor_lr)
    pairs = test_pos + test_neg
    labels = [1] * len(test_pos) + [0] * len(test_neg)
    scores = score_pairs(pairs, index, model.predictor)
    metrics = evaluate_metrics(list(zip(scores, labels)))
    metrics["fold"] = 0
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.parallel_folds is not None:
        cfg = replace(cfg, parallel_folds=args.parallel_folds)
    result = run_experiment(cfg)
    print(json.dumps(result.aggregate, indent=2, sort_keys=True))
    print(f"outputs in {cfg.out_dir}")
    return 0


def cmd_importance(args) -> int:
    cfg = _load_config(args)
    data = load_experiment_data(cfg)
    from .experiment import drop_typed_pairs, _split_train_val

    test_pos = data.dataset.fold_positives(0)
    rest_pos = [p for p, f in zip(data.dataset.positives, data.dataset.pos_folds) if f != 0]
    val_rng = np.random.default_rng(np.random.SeedSequence(_seed(cfg.seed, "val", 0)))
    _, val_pos = _split_train_val(rest_pos, cfg.val_fraction, val_rng)
    train_graph = (
        drop_typed_pairs(data.graph, test_pos + val_pos, data.link_edge_id)
        if data.link_edge_id >= 0
        else data.graph
    )
    model = LinkModel.load(args.checkpoint, train_graph)
    sampler_cfg = replace(cfg.sampler, seed=_seed(cfg.seed, "sampler", 0))
    corpus = sample_corpus(train_graph, train_graph.head_nodes(), sampler_cfg)
    rows = importance_report(model, corpus)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_importance_csv(out / "importance.csv", rows)
    print(f"wrote {len(rows)} rows to {out / 'importance.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    m_values = [int(m) for m in args.m.split(",")]
    rows = sensitivity_sweep(cfg, m_values, args.repeats)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "sweep.csv", rows)
    for m, mean_, std_ in rows:
        print(f"m={m}: AUC {mean_:.4f} +/- {std_:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import pipeline_gradient_check

    worst = pipeline_gradient_check(seed=args.seed if args.seed is not None else 0)
    print(f"max relative gradient error: {worst:.3e}")
    if worst >= 1e-4:
        print("FAIL: above the 1e-4 tolerance")
        return 1
    print("PASS")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hetlink",
        description="Concentrated-walk link prediction experiments on heterogeneous networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, needs_config in [
        ("sample", cmd_sample, True),
        ("train", cmd_train, True),
        ("evaluate", cmd_evaluate, True),
        ("run", cmd_run, True),
        ("importance", cmd_importance, True),
        ("sweep", cmd_sweep, True),
        ("gradcheck", cmd_gradcheck, False),
    ]:
        p = sub.add_parser(name)
        if needs_config:
            _add_common(p)
        p.set_defaults(fn=fn)
        if name == "run":
            p.add_argument("--parallel-folds", type=int, default=None,
                           help="folds to run concurrently (capped by CHAT_THREADS)")
        if name in ("evaluate", "importance"):
            p.add_argument("--checkpoint", required=True)
        if name == "sweep":
            p.add_argument("--m", required=True, help="comma-separated samples-per-head values")
            p.add_argument("--repeats", type=int, default=1)
        if name == "gradcheck":
            p.add_argument("--seed", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
