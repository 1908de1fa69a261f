"""Experiment driver: ingestion, per-fold training graphs, sampling, training,
ensemble evaluation, and the interpretability / sensitivity reports.

Every piece of randomness is derived from the master seed through named
seed sequences, so two runs with the same config produce byte-identical
output files.  Held-out link edges are removed from each fold's training
graph before sampling and distance computation; a leakage audit asserts this
on every run.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig
from .graph import (
    HetGraph,
    NodeRef,
    RawEdge,
    GraphError,
    build_graph,
    drop_typed_pairs,
    parse_edge_file,
    parse_link_file,
    split_links,
    LinkDataset,
    bfs_distance,
)
from .model import LinkModel
from .objectives import LossConfig, build_labels
from .predictor import (
    build_index,
    evaluate_metrics,
    occurrence_training_set,
    score_pairs,
    train_predictor,
)
from .sampler import ConcentratedSequence, SamplerConfig, sample_corpus
from .synthetic import (
    HEAD_TYPE,
    LINK_EDGE,
    TAIL_TYPE,
    PlantedConfig,
    generate_planted,
)
from .trainer import TrainConfig, TrainLog, fit


class ConfigError(Exception):
    pass


def _check_keys(data: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys in {where}: {unknown}")


def _sub_config(cls, data: dict, where: str, banned: set[str] = frozenset()):
    names = {f.name for f in dataclasses.fields(cls)} - set(banned)
    _check_keys(data, names, where)
    try:
        return cls(**data)
    except Exception as e:
        raise ConfigError(f"invalid {where} config: {e}") from e


@dataclass(frozen=True)
class ExperimentConfig:
    edge_file: str | None = None
    link_file: str | None = None
    link_edge_type: str | None = None
    synthetic: PlantedConfig | None = None
    head_types: tuple[str, ...] = ()
    tail_types: tuple[str, ...] = ()
    directed: bool = False
    folds: int = 5
    eval_folds: int | None = None
    negative_ratio: float = 1.0
    val_fraction: float = 0.1
    seed: int = 0
    out_dir: str = "out"
    mask_scored_edge: bool = False
    parallel_folds: int = 1
    d_mlp: int = 64
    scalar_dot: bool = False
    predictor_steps: int = 300
    predictor_lr: float = 0.05
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.synthetic is None and self.edge_file is None:
            raise ConfigError("config needs either an edge_file or a synthetic block")
        if self.synthetic is None and not (self.head_types and self.tail_types):
            raise ConfigError("head_types and tail_types are required with edge files")
        if self.synthetic is None and self.link_file is None and self.link_edge_type is None:
            raise ConfigError("positives need a link_file or a link_edge_type")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.eval_folds is not None and not (1 <= self.eval_folds <= self.folds):
            raise ConfigError("eval_folds must lie in [1, folds]")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.negative_ratio <= 0:
            raise ConfigError("negative_ratio must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        top = {f.name for f in dataclasses.fields(cls)}
        _check_keys(data, top, "experiment")
        kw = dict(data)
        if "synthetic" in kw and kw["synthetic"] is not None:
            # the generator keeps its own seed: the dataset is part of the
            # experiment definition, while the master seed drives methodology
            kw["synthetic"] = _sub_config(PlantedConfig, kw["synthetic"], "synthetic")
        if "sampler" in kw:
            kw["sampler"] = _sub_config(SamplerConfig, kw["sampler"], "sampler",
                                        banned={"seed"})
        if "encoder" in kw:
            kw["encoder"] = _sub_config(EncoderConfig, kw["encoder"], "encoder")
        if "loss" in kw:
            kw["loss"] = _sub_config(LossConfig, kw["loss"], "loss")
        if "train" in kw:
            kw["train"] = _sub_config(TrainConfig, kw["train"], "train", banned={"seed"})
        if "head_types" in kw:
            kw["head_types"] = tuple(kw["head_types"])
        if "tail_types" in kw:
            kw["tail_types"] = tuple(kw["tail_types"])
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        cfg = cls.from_dict(data)
        for name in ("edge_file", "link_file"):
            p = getattr(cfg, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name} does not exist: {p}")
        return cfg


def derive_seed(*parts: int) -> int:
    """Stable child seed from the master seed and integer context tags."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# fixed integer tags per randomness consumer (str hash is salted per process)
_CONTEXT = {"sampler": 11, "model": 23, "split": 37, "val": 53, "probe": 71,
            "predictor": 89, "sweep": 101}


def _seed(master: int, context: str, *extra: int) -> int:
    return int(
        np.random.SeedSequence([master, _CONTEXT[context], *extra]).generate_state(1)[0]
    )


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class ExperimentData:
    graph: HetGraph          # full graph, all link edges included
    dataset: LinkDataset
    link_edge_id: int


def load_experiment_data(config: ExperimentConfig) -> ExperimentData:
    if config.synthetic is not None:
        edges, positive_names = generate_planted(config.synthetic)
        head_types, tail_types = (HEAD_TYPE,), (TAIL_TYPE,)
        link_edge_type = LINK_EDGE
        graph = build_graph(edges, head_types, tail_types, config.directed)
        positives = [
            (graph.node_ref(HEAD_TYPE, h), graph.node_ref(TAIL_TYPE, t))
            for h, t in positive_names
        ]
    else:
        edges = parse_edge_file(config.edge_file)
        graph = build_graph(edges, config.head_types, config.tail_types, config.directed)
        link_edge_type = config.link_edge_type
        if config.link_file is not None:
            positives = []
            file_negatives = []
            for rec in parse_link_file(config.link_file):
                pair = (
                    graph.node_ref(rec.head_type, rec.head_id),
                    graph.node_ref(rec.tail_type, rec.tail_id),
                )
                (positives if rec.label == 1 else file_negatives).append(pair)
        else:
            positives = extract_link_edges(graph, link_edge_type)
            file_negatives = []

    if link_edge_type is None:
        # positives came from a link file that does not mirror graph edges
        link_edge_id = -1
    else:
        link_edge_id = graph.edge_type_id(link_edge_type)

    if config.synthetic is None and config.link_file is not None and file_negatives:
        dataset = _dataset_from_file(positives, file_negatives, config.folds,
                                     _seed(config.seed, "split"))
    else:
        dataset = split_links(
            graph, positives, config.folds, config.negative_ratio,
            _seed(config.seed, "split"),
        )
    return ExperimentData(graph, dataset, link_edge_id)


def extract_link_edges(graph: HetGraph, edge_type: str) -> list[tuple[NodeRef, NodeRef]]:
    """All (head, tail) pairs joined by the given edge type, deterministic order."""
    et = graph.edge_type_id(edge_type)
    pairs = []
    seen = set()
    for head in graph.head_nodes():
        hg = graph.global_of(head)
        for e, nbr in graph.neighbors(head):
            if e != et or nbr.type_id not in graph.tail_type_ids:
                continue
            key = (hg, graph.global_of(nbr))
            if key not in seen:
                seen.add(key)
                pairs.append((head, nbr))
    return pairs


def _dataset_from_file(positives, negatives, folds: int, seed: int) -> LinkDataset:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pos_folds = [0] * len(positives)
    for rank, idx in enumerate(rng.permutation(len(positives))):
        pos_folds[int(idx)] = rank % folds
    neg_folds = [0] * len(negatives)
    for rank, idx in enumerate(rng.permutation(len(negatives))):
        neg_folds[int(idx)] = rank % folds
    ratio = len(negatives) / max(len(positives), 1)
    return LinkDataset(list(positives), list(negatives), pos_folds, neg_folds, ratio, folds)


def head_link_mask(graph: HetGraph, link_edge_id: int):
    """Masking callback: every link edge incident to a head is hidden from
    that head's own walks and distance labels, so scored pairs never see
    their own edge in their position encodings."""

    def mask(head: NodeRef):
        pairs = [
            (head, nbr)
            for et, nbr in graph.neighbors(head)
            if et == link_edge_id and nbr.type_id in graph.tail_type_ids
        ]
        return link_edge_id, pairs

    return mask


def audit_no_leakage(
    train_graph: HetGraph,
    link_edge_id: int,
    held_out: Sequence[tuple[NodeRef, NodeRef]],
    corpus: Sequence[ConcentratedSequence],
    labels,
    train_positive_set: set[tuple[NodeRef, NodeRef]],
    distance_cap: int,
    head_edge_mask=None,
    spot_checks: int = 5,
) -> None:
    """Assert held-out links leak into neither the graph, the labels, nor the
    attached distances.  Raises AssertionError on any violation."""
    held = set(held_out)
    if link_edge_id >= 0:
        for h, t in held_out:
            for e, nbr in train_graph.neighbors(h):
                assert not (
                    e == link_edge_id and train_graph.global_of(nbr) == train_graph.global_of(t)
                ), f"held-out link {train_graph.node_label(h)}-{train_graph.node_label(t)} still in training graph"
    for seq, pos_steps in zip(corpus, labels.positive_steps):
        for j in pos_steps:
            pair = (seq.head, seq.steps[j][1])
            assert pair in train_positive_set, "label outside training positives"
            assert pair not in held, "held-out link leaked into sequence labels"
    for seq in corpus[:: max(1, len(corpus) // spot_checks)][:spot_checks]:
        g = train_graph
        if head_edge_mask is not None:
            et, pairs = head_edge_mask(seq.head)
            if pairs:
                g = drop_typed_pairs(train_graph, pairs, et)
        table = bfs_distance(g, seq.head, cap=distance_cap)
        for node, d in zip(seq.nodes, seq.distances):
            assert d == int(table.dist[g.global_of(node)]), (
                "sequence distances disagree with the training graph"
            )


# ---------------------------------------------------------------------------
# per-fold pipeline
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    metrics: dict
    predictions: list[tuple[str, str, float, int]]
    log: TrainLog
    model: LinkModel
    corpus: list[ConcentratedSequence]
    baseline_auc: float | None


def _split_train_val(items: list, fraction: float, rng: np.random.Generator):
    n_val = max(1, int(round(len(items) * fraction))) if items else 0
    perm = rng.permutation(len(items))
    val_idx = set(int(i) for i in perm[:n_val])
    train = [x for i, x in enumerate(items) if i not in val_idx]
    val = [x for i, x in enumerate(items) if i in val_idx]
    return train, val


def run_fold(config: ExperimentConfig, data: ExperimentData, fold: int) -> FoldResult:
    graph = data.graph
    dataset = data.dataset
    test_pos = dataset.fold_positives(fold)
    test_neg = dataset.fold_negatives(fold)
    rest_pos = [p for p, f in zip(dataset.positives, dataset.pos_folds) if f != fold]
    rest_neg = [p for p, f in zip(dataset.negatives, dataset.neg_folds) if f != fold]

    val_rng = np.random.default_rng(np.random.SeedSequence(_seed(config.seed, "val", fold)))
    train_pos, val_pos = _split_train_val(rest_pos, config.val_fraction, val_rng)
    train_neg, val_neg = _split_train_val(rest_neg, config.val_fraction, val_rng)

    held_out = test_pos + val_pos
    train_graph = (
        drop_typed_pairs(graph, held_out, data.link_edge_id)
        if data.link_edge_id >= 0
        else graph
    )

    sampler_cfg = replace(config.sampler, seed=_seed(config.seed, "sampler", fold))
    mask = (
        head_link_mask(train_graph, data.link_edge_id)
        if config.mask_scored_edge and data.link_edge_id >= 0
        else None
    )
    corpus = sample_corpus(
        train_graph, train_graph.head_nodes(), sampler_cfg, head_edge_mask=mask
    )
    train_pos_set = set(train_pos)
    labels = build_labels(corpus, train_pos_set)
    audit_no_leakage(
        train_graph, data.link_edge_id, held_out, corpus, labels,
        train_pos_set, sampler_cfg.distance_cap, head_edge_mask=mask,
    )

    model = LinkModel.build(
        train_graph, corpus, config.encoder,
        distance_cap=sampler_cfg.distance_cap,
        seed=_seed(config.seed, "model", fold),
        d_mlp=config.d_mlp,
        scalar_dot=config.scalar_dot,
    )

    train_pairs = train_pos + train_neg
    train_pair_labels = [1] * len(train_pos) + [0] * len(train_neg)
    val_pairs = val_pos + val_neg
    val_pair_labels = [1] * len(val_pos) + [0] * len(val_neg)

    train_cfg = replace(config.train, seed=_seed(config.seed, "probe", fold))
    log = fit(
        model, corpus, labels,
        train_pairs, train_pair_labels,
        val_pairs, val_pair_labels,
        config.loss, train_cfg,
    )

    index = build_index(model, corpus)
    feats, ys, ws = occurrence_training_set(
        index, train_pairs, train_pair_labels, model.predictor.scalar_dot
    )
    train_predictor(
        model.predictor, feats, ys, ws,
        steps=config.predictor_steps, lr=config.predictor_lr,
    )

    test_pairs = test_pos + test_neg
    test_labels = [1] * len(test_pos) + [0] * len(test_neg)
    scores = score_pairs(test_pairs, index, model.predictor)
    metrics = evaluate_metrics(list(zip(scores, test_labels)))
    metrics["fold"] = fold
    predictions = [
        (graph.node_label(h), graph.node_label(t), s, y)
        for (h, t), s, y in zip(test_pairs, scores, test_labels)
    ]
    baseline = degree_product_auc(train_graph, test_pairs, test_labels)
    return FoldResult(fold, metrics, predictions, log, model, corpus, baseline)


def degree_product_auc(
    graph: HetGraph,
    pairs: Sequence[tuple[NodeRef, NodeRef]],
    labels: Sequence[int],
) -> float | None:
    from .predictor import auc_score

    if len(set(labels)) < 2:
        return None
    scores = np.array([graph.degree(h) * graph.degree(t) for h, t in pairs], dtype=float)
    return auc_score(scores, np.array(labels))


# ---------------------------------------------------------------------------
# experiment, importance, sweep
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    fold_metrics: list[dict]
    aggregate: dict
    predictions: list[tuple[str, str, float, int]]
    importance: list[tuple[int, str, float, int]]
    baseline_aucs: list[float | None]
    fold_results: list[FoldResult]


def _aggregate(fold_metrics: list[dict]) -> dict:
    out = {}
    for key in ("accuracy", "f1", "auc", "aupr"):
        vals = [m[key] for m in fold_metrics if m.get(key) is not None]
        if vals:
            out[f"{key}_mean"] = float(np.mean(vals))
            out[f"{key}_std"] = float(np.std(vals))
        else:
            out[f"{key}_mean"] = None
            out[f"{key}_std"] = None
    return out


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    data = load_experiment_data(config)
    n_folds = config.eval_folds if config.eval_folds is not None else config.folds
    fold_ids = list(range(n_folds))

    workers = max(1, min(config.parallel_folds, thread_cap()))
    if workers > 1 and len(fold_ids) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda f: run_fold(config, data, f), fold_ids))
    else:
        results = [run_fold(config, data, f) for f in fold_ids]

    fold_metrics = [r.metrics for r in results]
    aggregate = _aggregate(fold_metrics)
    predictions = [row for r in results for row in r.predictions]
    importance = importance_report(results[0].model, results[0].corpus)
    result = ExperimentResult(
        fold_metrics, aggregate, predictions, importance,
        [r.baseline_auc for r in results], results,
    )
    if write:
        write_outputs(config, result)
    return result


def thread_cap() -> int:
    cap = os.environ.get("CHAT_THREADS")
    if cap is None:
        return 2**31
    try:
        return max(1, int(cap))
    except ValueError:
        return 2**31


def importance_report(
    model: LinkModel,
    corpus: Sequence[ConcentratedSequence],
    top: int = 30,
) -> list[tuple[int, str, float, int]]:
    """Mean attention weight per connection tuple, descending, top rows.

    Each pair occurrence contributes its attention weight to the tuple of the
    connection sitting between the two interest nodes.
    """
    if not corpus:
        raise ValueError("importance report needs a non-empty corpus")
    from .batching import make_batches, prepare_corpus

    prepared = prepare_corpus(corpus, model.graph, model.tables, model.vocab)
    batches = make_batches(prepared, 256, min_nodes=2)
    a = model.attention_vector.data
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for batch in batches:
        H = model.encode_batch(batch).data
        rows = np.arange(H.shape[0])[:, None]
        p0, p1, p2 = batch.pair_pos
        g0 = H[rows, p0]
        g1 = H[rows, p1]
        g2 = H[rows, p2]
        triples = np.concatenate([g0, g1, g2], axis=2)
        raw = triples @ a
        act = np.where(raw > 0, raw, 0.2 * raw)
        act = act + (1.0 - batch.tail_mask) * -1e30
        act = act - act.max(axis=1, keepdims=True)
        e = np.exp(act)
        alpha = e / e.sum(axis=1, keepdims=True)
        for r in range(batch.conn_idx.shape[0]):
            n_pairs = int(batch.n_nodes[r]) - 1
            for j in range(n_pairs):
                vocab_row = int(batch.conn_idx[r, j])
                sums[vocab_row] = sums.get(vocab_row, 0.0) + float(alpha[r, j])
                counts[vocab_row] = counts.get(vocab_row, 0) + 1

    by_row = {idx: conn for conn, idx in model.vocab.items()}
    edge_names = model.graph.edge_types
    rows_out = []
    for vocab_row, total in sums.items():
        conn = by_row.get(vocab_row)
        label = "-".join(edge_names[e] for e in conn) if conn else "<unk>"
        rows_out.append((label, total / counts[vocab_row], counts[vocab_row]))
    rows_out.sort(key=lambda r: (-r[1], r[0]))
    return [
        (rank + 1, label, mean_alpha, occ)
        for rank, (label, mean_alpha, occ) in enumerate(rows_out[:top])
    ]


def sensitivity_sweep(
    config: ExperimentConfig,
    m_values: Sequence[int],
    repeats: int,
) -> list[tuple[int, float, float]]:
    """AUC mean/std per samples-per-head value, re-running the full pipeline
    with derived seeds for every (m, repeat)."""
    if sorted(m_values) != list(m_values) or any(m < 1 for m in m_values):
        raise ConfigError("m values must be positive and ascending")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    rows = []
    for m in m_values:
        aucs = []
        for rep in range(repeats):
            run_cfg = replace(
                config,
                sampler=replace(config.sampler, samples_per_head=m),
                seed=_seed(config.seed, "sweep", m, rep),
            )
            result = run_experiment(run_cfg, write=False)
            aucs.append(result.aggregate["auc_mean"])
        rows.append((m, float(np.mean(aucs)), float(np.std(aucs))))
    return rows


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def write_outputs(config: ExperimentConfig, result: ExperimentResult) -> None:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    payload = {"folds": result.fold_metrics, "aggregate": result.aggregate}
    (out / "metrics.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    with open(out / "metrics.csv", "w", encoding="utf-8") as fh:
        fh.write("fold,accuracy,f1,auc,aupr\n")
        for m in result.fold_metrics:
            fh.write(
                f"{m['fold']},{_csv_float(m['accuracy'])},{_csv_float(m['f1'])},"
                f"{_csv_float(m['auc'])},{_csv_float(m['aupr'])}\n"
            )
        agg = result.aggregate
        fh.write(
            f"mean,{_csv_float(agg['accuracy_mean'])},{_csv_float(agg['f1_mean'])},"
            f"{_csv_float(agg['auc_mean'])},{_csv_float(agg['aupr_mean'])}\n"
        )
        fh.write(
            f"std,{_csv_float(agg['accuracy_std'])},{_csv_float(agg['f1_std'])},"
            f"{_csv_float(agg['auc_std'])},{_csv_float(agg['aupr_std'])}\n"
        )

    with open(out / "predictions.tsv", "w", encoding="utf-8") as fh:
        for head, tail, score, label in result.predictions:
            fh.write(f"{head}\t{tail}\t{score!r}\t{label}\n")

    write_importance_csv(out / "importance.csv", result.importance)
    result.fold_results[0].log.write_csv(out / "train_log.csv")
    for r in result.fold_results[1:]:
        r.log.write_csv(out / f"train_log_fold{r.fold}.csv")


def write_importance_csv(path, rows: list[tuple[int, str, float, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank,tuple,mean_alpha,occurrences\n")
        for rank, label, mean_alpha, occ in rows:
            fh.write(f"{rank},{label},{mean_alpha!r},{occ}\n")


def write_sweep_csv(path, rows: list[tuple[int, float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("m,auc_mean,auc_std\n")
        for m, mean_, std_ in rows:
            fh.write(f"{m},{mean_!r},{std_!r}\n")


def _csv_float(x) -> str:
    return "" if x is None else repr(x)
