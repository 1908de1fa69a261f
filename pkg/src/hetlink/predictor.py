"""Pair scoring, the sequence-ensemble link predictor, and evaluation metrics.

A head-tail query is scored once per occurrence of the tail inside the head's
sampled sequences and the scores are averaged.  When the tail never shows up
in those sequences, averaged hidden representations are scored instead; a
tail absent from the whole corpus is encoded as a one-node sequence.

Averages are computed over value groups in canonical order, so permuting or
replicating the corpus leaves every prediction bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graph import NodeRef
from .model import LinkModel, PredictorParams
from .sampler import ConcentratedSequence


class PredictorError(Exception):
    pass


# ---------------------------------------------------------------------------
# pair scoring
# ---------------------------------------------------------------------------


def pair_features(h_head: np.ndarray, h_tail: np.ndarray, scalar_dot: bool) -> np.ndarray:
    if scalar_dot:
        return np.array([float(np.dot(h_head, h_tail))])
    return h_head * h_tail


def predict_scores(features: Tensor, params: PredictorParams) -> Tensor:
    """Probabilities (n,) for a feature matrix (n, d_feat)."""
    hidden = ad.relu(ad.add(ad.matmul(features, params.w1), params.b1))
    logits = ad.add(ad.matmul(hidden, params.w2), params.b2)
    return ad.sigmoid(ad.reshape(logits, (features.shape[0],)))


def predict_pair(h_head, h_tail, params: PredictorParams) -> Tensor:
    """Probability in (0, 1) for one head/tail representation pair."""
    head = h_head.data if isinstance(h_head, Tensor) else np.asarray(h_head, dtype=float)
    tail = h_tail.data if isinstance(h_tail, Tensor) else np.asarray(h_tail, dtype=float)
    if head.shape != tail.shape or head.ndim != 1:
        raise ad.ShapeError(
            f"predict_pair needs equal-length vectors, got {head.shape}, {tail.shape}"
        )
    feats = Tensor(pair_features(head, tail, params.scalar_dot)[None, :])
    return ad.reshape(predict_scores(feats, params), ())


# ---------------------------------------------------------------------------
# canonical (order-independent) averaging
# ---------------------------------------------------------------------------


def _grouped_mean_scalar(values: np.ndarray) -> float:
    """Mean over value groups in sorted order; invariant to permutation and
    uniform replication of the inputs."""
    uniq, counts = np.unique(values, return_counts=True)
    weights = counts / counts.sum()
    return float(np.sum(weights * uniq))


def _grouped_mean_rows(rows: np.ndarray) -> np.ndarray:
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    weights = counts / counts.sum()
    return np.sum(uniq * weights[:, None], axis=0)


# ---------------------------------------------------------------------------
# representation index
# ---------------------------------------------------------------------------


@dataclass
class RepresentationIndex:
    """Encoded corpus organised for ensemble queries.

    Every stored representation traces back to exactly one encoded sequence
    position: sequence heads at token 0, tail occurrences at their token.
    """

    head_seqs: dict[int, list[int]]                 # head global -> sequence ids
    seq_head_rep: np.ndarray                        # (n_seq, d_out)
    occ_tail_global: np.ndarray                     # (n_occ,)
    occ_seq: np.ndarray                             # (n_occ,)
    occ_rep: np.ndarray                             # (n_occ, d_out)
    singleton_encoder: Callable[[NodeRef], np.ndarray]
    node_global: Callable[[NodeRef], int]
    _per_head_occ: dict[int, dict[int, list[int]]] = field(default_factory=dict)
    _tail_rows: dict[int, np.ndarray] | None = None

    def sequences_of(self, head: NodeRef) -> list[int]:
        return self.head_seqs.get(self.node_global(head), [])

    def _head_occurrences(self, head_g: int) -> dict[int, list[int]]:
        cached = self._per_head_occ.get(head_g)
        if cached is not None:
            return cached
        by_tail: dict[int, list[int]] = {}
        # occ_seq is sorted (occurrences appended in corpus order)
        for sid in self.head_seqs.get(head_g, []):
            lo = int(np.searchsorted(self.occ_seq, sid, side="left"))
            hi = int(np.searchsorted(self.occ_seq, sid, side="right"))
            for row in range(lo, hi):
                by_tail.setdefault(int(self.occ_tail_global[row]), []).append(row)
        self._per_head_occ[head_g] = by_tail
        return by_tail

    def tail_rows_everywhere(self, tail_g: int) -> np.ndarray:
        if self._tail_rows is None:
            table: dict[int, list[int]] = {}
            for row, tg in enumerate(self.occ_tail_global):
                table.setdefault(int(tg), []).append(row)
            self._tail_rows = {tg: np.array(rows) for tg, rows in table.items()}
        return self._tail_rows.get(tail_g, np.zeros(0, dtype=np.int64))

    def head_mean_rep(self, head_g: int) -> np.ndarray:
        rows = self.head_seqs[head_g]
        return _grouped_mean_rows(self.seq_head_rep[rows])


def build_index(
    model: LinkModel,
    corpus: Sequence[ConcentratedSequence],
    batch_size: int = 256,
) -> RepresentationIndex:
    """Encode a corpus and index head and tail-occurrence representations."""
    hidden = model.encode_corpus(corpus, batch_size=batch_size)
    graph = model.graph
    d_out = model.config.d_out
    n_seq = len(corpus)
    head_seqs: dict[int, list[int]] = {}
    seq_head_rep = np.zeros((n_seq, d_out))
    occ_tail, occ_seq, occ_rep = [], [], []
    for i, (seq, H) in enumerate(zip(corpus, hidden)):
        head_seqs.setdefault(graph.global_of(seq.head), []).append(i)
        seq_head_rep[i] = H[0]
        for j, (_, tail) in enumerate(seq.steps):
            occ_tail.append(graph.global_of(tail))
            occ_seq.append(i)
            occ_rep.append(H[2 * (j + 1)])
    return RepresentationIndex(
        head_seqs=head_seqs,
        seq_head_rep=seq_head_rep,
        occ_tail_global=np.array(occ_tail, dtype=np.int64),
        occ_seq=np.array(occ_seq, dtype=np.int64),
        occ_rep=np.array(occ_rep).reshape(len(occ_rep), d_out) if occ_rep else np.zeros((0, d_out)),
        singleton_encoder=model.encode_singleton,
        node_global=graph.global_of,
    )


def ensemble_predict(
    head: NodeRef,
    tail: NodeRef,
    index: RepresentationIndex,
    params: PredictorParams,
) -> float:
    """Average pair score over every occurrence of ``tail`` in ``head``'s
    sequences; falls back to averaged representations when there is none."""
    head_g = index.node_global(head)
    tail_g = index.node_global(tail)
    seq_ids = index.head_seqs.get(head_g)
    if not seq_ids:
        raise PredictorError(
            f"head {head} has no sampled sequences; re-sample the corpus first"
        )
    rows = index._head_occurrences(head_g).get(tail_g)
    if rows:
        head_reps = index.seq_head_rep[index.occ_seq[rows]]
        tail_reps = index.occ_rep[rows]
        feats = (
            np.sum(head_reps * tail_reps, axis=1, keepdims=True)
            if params.scalar_dot
            else head_reps * tail_reps
        )
        # score one row per distinct feature vector, in canonical order, so
        # corpus permutation or uniform replication cannot move a single bit
        uniq, counts = np.unique(feats, axis=0, return_counts=True)
        scores = predict_scores(Tensor(uniq), params).data
        uvals, inverse = np.unique(scores, return_inverse=True)
        gcounts = np.bincount(inverse, weights=counts)
        return float(np.sum((gcounts / gcounts.sum()) * uvals))

    h_mean = index.head_mean_rep(head_g)
    everywhere = index.tail_rows_everywhere(tail_g)
    if everywhere.size:
        t_rep = _grouped_mean_rows(index.occ_rep[everywhere])
    else:
        t_rep = index.singleton_encoder(tail)
    return float(predict_pair(h_mean, t_rep, params).data)


def score_pairs(
    pairs: Sequence[tuple[NodeRef, NodeRef]],
    index: RepresentationIndex,
    params: PredictorParams,
) -> list[float]:
    return [ensemble_predict(h, t, index, params) for h, t in pairs]


# ---------------------------------------------------------------------------
# predictor training (binary cross-entropy on frozen representations)
# ---------------------------------------------------------------------------


def occurrence_training_set(
    index: RepresentationIndex,
    pairs: Sequence[tuple[NodeRef, NodeRef]],
    labels: Sequence[int],
    scalar_dot: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feature rows for BCE training, one per occurrence, weighted 1/Z so each
    pair contributes equally regardless of how often its tail was observed;
    classes are then re-weighted to equal total mass so the 0.5 threshold
    stays meaningful under imbalanced negative ratios."""
    feats, ys, ws = [], [], []
    for (head, tail), y in zip(pairs, labels):
        head_g = index.node_global(head)
        tail_g = index.node_global(tail)
        if head_g not in index.head_seqs:
            continue
        rows = index._head_occurrences(head_g).get(tail_g)
        if rows:
            h = index.seq_head_rep[index.occ_seq[rows]]
            t = index.occ_rep[rows]
            block = np.sum(h * t, axis=1, keepdims=True) if scalar_dot else h * t
            feats.append(block)
            ys.extend([y] * len(rows))
            ws.extend([1.0 / len(rows)] * len(rows))
        else:
            h_mean = index.head_mean_rep(head_g)
            everywhere = index.tail_rows_everywhere(tail_g)
            if everywhere.size:
                t_rep = _grouped_mean_rows(index.occ_rep[everywhere])
            else:
                t_rep = index.singleton_encoder(tail)
            feats.append(pair_features(h_mean, t_rep, scalar_dot)[None, :])
            ys.append(y)
            ws.append(1.0)
    if not feats:
        raise PredictorError("no usable training pairs for the predictor")
    y_arr = np.array(ys, dtype=float)
    w_arr = np.array(ws)
    pos_mass = float(w_arr[y_arr == 1].sum())
    neg_mass = float(w_arr[y_arr == 0].sum())
    if pos_mass > 0 and neg_mass > 0:
        w_arr = np.where(y_arr == 1, w_arr / pos_mass, w_arr / neg_mass)
    return np.concatenate(feats, axis=0), y_arr, w_arr


def train_predictor(
    params: PredictorParams,
    features: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    steps: int = 200,
    lr: float = 0.05,
) -> float:
    """Full-batch adaptive-moment BCE training; returns the final loss."""
    from .trainer import Adam  # local import to avoid a module cycle

    opt = Adam(params.parameters(), lr=lr)
    x = Tensor(features)
    y = Tensor(labels)
    w = Tensor(weights / weights.sum())
    eps = Tensor(np.array(1e-12))
    one = Tensor(np.ones_like(labels))
    final = 0.0
    for _ in range(steps):
        for p in params.parameters():
            p.zero_grad()
        prob = predict_scores(x, params)
        ll = ad.add(
            ad.mul(y, ad.log(ad.add(prob, eps))),
            ad.mul(ad.sub(one, y), ad.log(ad.add(ad.sub(one, prob), eps))),
        )
        loss = ad.scale(ad.tensor_sum(ad.mul(w, ll)), -1.0)
        loss.backward()
        opt.step()
        final = float(loss.data)
    return final


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    i = 0
    sorted_scores = scores[order]
    while i < scores.size:
        j = i + 1
        while j < scores.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = (i + 1 + j) / 2.0  # average of ranks i+1 .. j
        i = j
    return ranks


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive outranks a random negative, ties 1/2."""
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve via threshold-stepped averaging."""
    pos = int(labels.sum())
    if pos == 0 or pos == labels.size:
        raise ValueError("AUPR needs both classes")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    prev_recall = 0.0
    tp = 0
    seen = 0
    i = 0
    n = labels.size
    while i < n:
        j = i + 1
        while j < n and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        seen += j - i
        recall = tp / pos
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return ap


def evaluate_metrics(scored: Sequence[tuple[float, int]]) -> dict:
    """Accuracy/F1 at threshold 0.5 plus ranking metrics.

    With a single-class input the ranking metrics are reported as None.
    """
    if not scored:
        raise ValueError("evaluate_metrics needs at least one scored pair")
    scores = np.array([s for s, _ in scored], dtype=float)
    labels = np.array([y for _, y in scored], dtype=int)
    predicted = (scores >= 0.5).astype(int)
    tp = int(np.sum((predicted == 1) & (labels == 1)))
    fp = int(np.sum((predicted == 1) & (labels == 0)))
    fn = int(np.sum((predicted == 0) & (labels == 1)))
    accuracy = float(np.mean(predicted == labels))
    f1 = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    if labels.min() == labels.max():
        return {"accuracy": accuracy, "f1": f1, "auc": None, "aupr": None}
    return {
        "accuracy": accuracy,
        "f1": f1,
        "auc": auc_score(scores, labels),
        "aupr": average_precision(scores, labels),
    }
