"""Training objectives: contrastive link loss, connection attention, and the
attention-weighted observation loss.

For every sequence the head representation is contrasted against the tail
representations at each tail position: positions whose tail has a known
positive training link form the positive set, all tail positions form the
candidate set.  The observation term rewards alignment between consecutive
interest nodes, weighted by a softmax attention over (node, connection, node)
triples.  Both losses skip sequences that carry no usable pair.

Canonical per-sequence implementations double as oracles for the vectorized
batch path used by the trainer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Parameter, Tensor
from .batching import Batch
from .graph import HetGraph, NodeRef
from .sampler import ConcentratedSequence


class ObjectiveError(Exception):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    observation_weight: float = 1.0
    normalize_contrastive: bool = True
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ObjectiveError(f"temperature must be > 0, got {self.temperature}")
        if self.observation_weight < 0:
            raise ObjectiveError("observation weight must be >= 0")


@dataclass
class SequenceLabels:
    """Per-sequence positive tail steps, derived from training-fold links only.

    ``positive_steps[i]`` holds 0-based step indices j such that the tail at
    step j of sequence i has a known positive link with the sequence head.
    Every tail position is a candidate; duplicates count per position.
    """

    positive_steps: list[list[int]]

    def __len__(self) -> int:
        return len(self.positive_steps)


def build_labels(
    corpus: Sequence[ConcentratedSequence],
    positive_pairs: set[tuple[NodeRef, NodeRef]],
    graph: HetGraph | None = None,
) -> SequenceLabels:
    steps = []
    for seq in corpus:
        pos = [
            j
            for j, (_, tail) in enumerate(seq.steps)
            if (seq.head, tail) in positive_pairs
        ]
        steps.append(pos)
    return SequenceLabels(steps)


def _tail_positions(token_count: int) -> list[int]:
    return list(range(2, token_count, 2))


def _maybe_normalize(vec: Tensor, config: LossConfig) -> Tensor:
    return ad.l2_normalize(vec, axis=-1) if config.normalize_contrastive else vec


def contrastive_loss(
    hidden: Sequence[Tensor], labels: SequenceLabels, config: LossConfig
) -> Tensor:
    """Sum over sequences of the temperature-scaled contrastive link loss.

    Sequences with no positive tail contribute zero.  With normalization on,
    head/tail vectors are L2-normalized before the dot products.
    """
    if config.temperature <= 0:
        raise ObjectiveError("temperature must be > 0")
    terms = []
    for h, pos_steps in zip(hidden, labels.positive_steps):
        token_count = h.shape[0]
        tails = _tail_positions(token_count)
        if not pos_steps or not tails:
            continue
        head = _maybe_normalize(h[0], config)
        sims = []
        for p in tails:
            tail = _maybe_normalize(h[p], config)
            sims.append(ad.reshape(ad.scale(ad.dot(head, tail), 1.0 / config.temperature), (1,)))
        logits = ad.concatenate(sims, axis=0)
        lse = ad.logsumexp(ad.reshape(logits, (1, len(tails))), axis=1)
        pos_logits = [ad.reshape(logits[j], (1,)) for j in pos_steps]
        pos_mean = ad.scale(ad.tensor_sum(ad.concatenate(pos_logits, axis=0)), 1.0 / len(pos_steps))
        terms.append(ad.sub(ad.reshape(lse, ()), pos_mean))
    if not terms:
        return Tensor(np.array(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def connection_attention(h: Tensor, a: Parameter, config: LossConfig | None = None) -> Tensor:
    """Attention over the consecutive interest-node pairs of one sequence.

    Each pair's logit is a leaky-linear map of the concatenated
    (node, connection, node) hidden vectors; the softmax over pairs sums to 1.
    """
    slope = config.leaky_slope if config is not None else 0.2
    token_count = h.shape[0]
    n_pairs = (token_count - 1) // 2
    if n_pairs < 1:
        raise ObjectiveError("connection attention needs at least two interest nodes")
    if a.shape != (3 * h.shape[1],):
        raise ad.ShapeError(
            f"attention vector must have length {3 * h.shape[1]}, got {a.shape}"
        )
    logits = []
    for j in range(n_pairs):
        triple = ad.concatenate([h[2 * j], h[2 * j + 1], h[2 * j + 2]], axis=0)
        logits.append(ad.reshape(ad.leaky_relu(ad.dot(a, triple), slope), (1,)))
    stacked = ad.concatenate(logits, axis=0)
    return ad.softmax(stacked, axis=0)


def observation_loss(
    hidden: Sequence[Tensor], a: Parameter, config: LossConfig | None = None
) -> Tensor:
    """Negated attention-weighted dot products of consecutive interest nodes."""
    terms = []
    for h in hidden:
        n_pairs = (h.shape[0] - 1) // 2
        if n_pairs < 1:
            continue
        alpha = connection_attention(h, a, config)
        for j in range(n_pairs):
            d = ad.dot(h[2 * j], h[2 * j + 2])
            terms.append(ad.mul(ad.reshape(alpha[j], ()), d))
    if not terms:
        return Tensor(np.array(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, -1.0)


def total_loss(
    hidden: Sequence[Tensor],
    labels: SequenceLabels,
    a: Parameter,
    config: LossConfig,
) -> Tensor:
    """Contrastive term plus the weighted observation term."""
    con = contrastive_loss(hidden, labels, config)
    obs = observation_loss(hidden, a, config)
    return ad.add(con, ad.scale(obs, config.observation_weight))


# ---------------------------------------------------------------------------
# vectorized batch path (used by the trainer; oracle-checked against the
# per-sequence implementations above)
# ---------------------------------------------------------------------------


def batch_objective(
    H: Tensor, batch: Batch, a: Parameter, config: LossConfig
) -> tuple[Tensor, float, float]:
    """Summed loss of one padded batch; returns (loss, contrastive, observation).

    ``H`` is (B, T, d_out) from the encoder for this batch.  Masked tail and
    pair slots receive exactly zero weight.
    """
    tail_mask = batch.tail_mask
    if tail_mask.shape[1] == 0:
        zero = Tensor(np.array(0.0))
        return zero, 0.0, 0.0

    head = H[:, 0:1, :]
    tails = ad.gather_rows(H, batch.tail_pos)
    if config.normalize_contrastive:
        head_n = ad.l2_normalize(head, axis=-1)
        tails_n = ad.l2_normalize(tails, axis=-1)
    else:
        head_n, tails_n = head, tails
    sims = ad.tensor_sum(ad.mul(head_n, tails_n), axis=2)
    logits = ad.scale(sims, 1.0 / config.temperature)
    masked = ad.add(logits, Tensor((1.0 - tail_mask) * NEG_INF))
    lse = ad.logsumexp(masked, axis=1)

    pos_count = batch.pos_mask.sum(axis=1)
    has_pos = (pos_count > 0).astype(float)
    inv_pos = np.where(pos_count > 0, 1.0 / np.maximum(pos_count, 1.0), 0.0)
    pos_sum = ad.tensor_sum(ad.mul(logits, Tensor(batch.pos_mask)), axis=1)
    con_terms = ad.sub(ad.mul(lse, Tensor(has_pos)), ad.mul(pos_sum, Tensor(inv_pos)))
    con = ad.tensor_sum(con_terms)

    p0, p1, p2 = batch.pair_pos
    g0 = ad.gather_rows(H, p0)
    g1 = ad.gather_rows(H, p1)
    g2 = ad.gather_rows(H, p2)
    triples = ad.concatenate([g0, g1, g2], axis=2)
    raw = ad.reshape(
        ad.matmul(triples, ad.reshape(a, (a.shape[0], 1))), tail_mask.shape
    )
    act = ad.leaky_relu(raw, config.leaky_slope)
    masked_act = ad.add(act, Tensor((1.0 - tail_mask) * NEG_INF))
    alpha = ad.softmax(masked_act, axis=1)
    # rows without any pair would otherwise softmax to uniform garbage
    has_pair = tail_mask.max(axis=1, initial=0.0)
    alpha = ad.mul(alpha, Tensor(has_pair[:, None]))
    dots = ad.tensor_sum(ad.mul(g0, g2), axis=2)
    obs = ad.scale(ad.tensor_sum(ad.mul(alpha, dots)), -1.0)

    loss = ad.add(con, ad.scale(obs, config.observation_weight))
    return loss, float(con.data), float(obs.data)
