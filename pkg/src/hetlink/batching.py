"""Index-array preparation for batched encoding.

Sequences are turned into integer index arrays once (rows into the node,
distance, and connection tables, plus tail/pair token positions); batches
right-pad those arrays and carry validity masks.  Padded positions are zeroed
after embedding, so no gradient ever reaches a padding row.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ConnectionVocab, EncodingTables
from .graph import HetGraph
from .sampler import ConcentratedSequence


@dataclass(slots=True)
class PreparedSequence:
    seq_index: int
    head_global: int
    node_rows: np.ndarray
    dist_rows: np.ndarray
    conn_rows: np.ndarray
    tail_globals: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.node_rows.size


@dataclass(slots=True)
class Batch:
    seq_indices: list[int]
    n_nodes: np.ndarray          # (B,)
    node_idx: np.ndarray         # (B, n_max)
    dist_idx: np.ndarray         # (B, n_max)
    conn_idx: np.ndarray         # (B, n_max-1)
    token_mask: np.ndarray       # (B, 2*n_max-1)
    tail_pos: np.ndarray         # (B, n_max-1) token positions of tail nodes
    tail_mask: np.ndarray        # (B, n_max-1)
    pos_mask: np.ndarray         # (B, n_max-1) positive-labelled tail slots
    pair_pos: tuple[np.ndarray, np.ndarray, np.ndarray]  # node/conn/node tokens

    @property
    def size(self) -> int:
        return len(self.seq_indices)


def prepare_corpus(
    corpus: Sequence[ConcentratedSequence],
    graph: HetGraph,
    tables: EncodingTables,
    vocab: ConnectionVocab,
) -> list[PreparedSequence]:
    prepared = []
    for i, seq in enumerate(corpus):
        nodes = seq.nodes
        node_rows = tables.node_rows(graph, nodes)
        dist_rows = np.array(
            [tables.distance_row(d) for d in seq.distances], dtype=np.int64
        )
        conn_rows = np.array(
            [vocab.lookup(conn, frozen=True) for conn, _ in seq.steps], dtype=np.int64
        )
        tail_globals = np.array(
            [graph.global_of(n) for _, n in seq.steps], dtype=np.int64
        )
        prepared.append(
            PreparedSequence(i, graph.global_of(seq.head), node_rows, dist_rows,
                             conn_rows, tail_globals)
        )
    return prepared


def make_batches(
    prepared: Sequence[PreparedSequence],
    batch_size: int,
    positive_steps: Sequence[Sequence[int]] | None = None,
    min_nodes: int = 1,
) -> list[Batch]:
    """Group sequences of similar length into padded batches.

    ``positive_steps[i]`` lists the step indices of sequence i whose tail has
    a known positive link with the head; omitted for inference batches.
    Sequences shorter than ``min_nodes`` interest nodes are left out (the
    losses skip them anyway).
    """
    usable = [p for p in prepared if p.n_nodes >= min_nodes]
    usable.sort(key=lambda p: (p.n_nodes, p.seq_index))
    batches = []
    for lo in range(0, len(usable), batch_size):
        group = usable[lo : lo + batch_size]
        batches.append(_stack(group, positive_steps))
    return batches


def _stack(
    group: Sequence[PreparedSequence],
    positive_steps: Sequence[Sequence[int]] | None,
) -> Batch:
    B = len(group)
    n_max = max(p.n_nodes for p in group)
    a_max = max(n_max - 1, 0)
    node_idx = np.zeros((B, n_max), dtype=np.int64)
    dist_idx = np.zeros((B, n_max), dtype=np.int64)
    conn_idx = np.zeros((B, a_max), dtype=np.int64)
    token_mask = np.zeros((B, 2 * n_max - 1))
    tail_mask = np.zeros((B, a_max))
    pos_mask = np.zeros((B, a_max))
    n_nodes = np.zeros(B, dtype=np.int64)
    for r, p in enumerate(group):
        n = p.n_nodes
        n_nodes[r] = n
        node_idx[r, :n] = p.node_rows
        dist_idx[r, :n] = p.dist_rows
        conn_idx[r, : n - 1] = p.conn_rows
        token_mask[r, : 2 * n - 1] = 1.0
        tail_mask[r, : n - 1] = 1.0
        if positive_steps is not None:
            for j in positive_steps[p.seq_index]:
                pos_mask[r, j] = 1.0
    slots = np.arange(a_max, dtype=np.int64)
    tail_pos = np.broadcast_to(2 * (slots + 1), (B, a_max)).copy()
    tail_pos *= tail_mask.astype(np.int64)
    pair0 = np.broadcast_to(2 * slots, (B, a_max)).copy() * tail_mask.astype(np.int64)
    pair1 = (pair0 + tail_mask.astype(np.int64)).astype(np.int64)
    pair2 = (pair0 + 2 * tail_mask.astype(np.int64)).astype(np.int64)
    return Batch(
        [p.seq_index for p in group],
        n_nodes,
        node_idx,
        dist_idx,
        conn_idx,
        token_mask,
        tail_pos,
        tail_mask,
        pos_mask,
        (pair0, pair1, pair2),
    )


def embed_batch(
    batch: Batch, tables: EncodingTables, vocab: ConnectionVocab
) -> tuple[Tensor, np.ndarray]:
    """Padded token matrices (B, 2*n_max-1, d_in) plus the validity mask."""
    node_feat = ad.add(
        ad.embedding_lookup(tables.node_embeddings, batch.node_idx),
        ad.embedding_lookup(tables.distance_table, batch.dist_idx),
    )
    if batch.conn_idx.shape[1] == 0:
        tokens = node_feat
    else:
        conn_feat = ad.add(
            ad.embedding_lookup(vocab.table, batch.conn_idx), tables.edg_constant
        )
        tokens = ad.interleave(node_feat, conn_feat, axis=1)
    return ad.mul(tokens, Tensor(batch.token_mask[:, :, None])), batch.token_mask
