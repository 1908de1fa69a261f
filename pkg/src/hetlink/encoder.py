"""Token embedding and the connection-aware transformer encoder.

A sampled sequence with n interest nodes becomes a (2n-1, d_in) token matrix:
node tokens are the node's trainable feature plus a shortest-distance encoding
(the head always uses distance row 0), connection tokens are the trainable
encoding of their edge-type tuple plus a shared positional constant.  A
pre-normalization multi-head self-attention stack maps the tokens to hidden
representations in d_out, with padded positions masked out exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Parameter, Tensor
from .graph import HetGraph, NodeRef, UNREACHABLE
from .sampler import ConcentratedSequence, Connection


class EncoderError(Exception):
    pass


class DataError(EncoderError):
    """A sequence is missing data the encoder needs (features, distances)."""


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    heads: int = 8
    d_in: int = 512
    d_hidden: int = 256
    d_out: int = 128
    dropout: float = 0.0
    # normalization of the output representations: "l2" (unit rows), "layer"
    # (fixed non-affine layer norm), or "none".  The observation objective is
    # unbounded in representation scale; without a bounded output a
    # constant-step optimizer inflates norms (or, bounded at scale d_out,
    # drowns the contrastive term), so unit rows keep the two loss terms
    # commensurate at observation weight 1
    output_norm: str = "l2"

    def __post_init__(self):
        if min(self.layers, self.heads, self.d_in, self.d_hidden, self.d_out) < 1:
            raise EncoderError("all encoder dimensions must be positive")
        if self.d_hidden % self.heads != 0:
            raise EncoderError(
                f"d_hidden={self.d_hidden} not divisible by heads={self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must be in [0, 1)")
        if self.output_norm not in ("l2", "layer", "none"):
            raise EncoderError(f"unknown output_norm {self.output_norm!r}")

    @property
    def d_head(self) -> int:
        return self.d_hidden // self.heads


UNK_INDEX = 0


class ConnectionVocab:
    """Maps edge-type tuples to rows of a trainable encoding table.

    Index 0 is reserved for unknown tuples seen after the vocabulary is
    frozen (i.e. at inference time).  New tuples may only be added before
    :meth:`build_table` creates the embedding table.
    """

    def __init__(self):
        self._index: dict[Connection, int] = {}
        self.table: Parameter | None = None

    def __len__(self) -> int:
        return len(self._index)

    @property
    def n_rows(self) -> int:
        return len(self._index) + 1

    def lookup(self, conn: Connection, frozen: bool = False) -> int:
        if len(conn) < 1:
            raise EncoderError("connection tuples must have length >= 1")
        idx = self._index.get(conn)
        if idx is not None:
            return idx
        if frozen:
            return UNK_INDEX
        if self.table is not None:
            raise EncoderError(
                "cannot allocate new connection rows after the table is built; "
                "re-fit the vocabulary"
            )
        idx = len(self._index) + 1
        self._index[conn] = idx
        return idx

    def fit_corpus(self, corpus: Sequence[ConcentratedSequence]) -> None:
        for seq in corpus:
            for conn, _ in seq.steps:
                self.lookup(conn)

    def build_table(self, d_in: int, rng: np.random.Generator) -> Parameter:
        self.table = Parameter(
            rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(self.n_rows, d_in)),
            name="connection_table",
        )
        return self.table

    def items(self) -> list[tuple[Connection, int]]:
        return list(self._index.items())

    def to_meta(self) -> list[list]:
        return [[list(conn), idx] for conn, idx in self._index.items()]

    @classmethod
    def from_meta(cls, meta: list[list]) -> "ConnectionVocab":
        vocab = cls()
        for conn, idx in meta:
            vocab._index[tuple(conn)] = idx
        return vocab


class EncodingTables:
    """Trainable input-space encodings: node features, distances, connection tag.

    Node features exist for interest nodes only (the walk never keeps other
    nodes).  The distance table has rows 0..cap plus one shared bucket for
    unreachable / beyond-cap nodes.
    """

    def __init__(self, graph: HetGraph, d_in: int, distance_cap: int, rng: np.random.Generator):
        self.d_in = d_in
        self.distance_cap = distance_cap
        interest = graph.interest_globals()
        self.node_row = np.full(graph.n_nodes, -1, dtype=np.int64)
        self.node_row[interest] = np.arange(interest.size)
        std = 1.0 / np.sqrt(d_in)
        self.node_embeddings = Parameter(
            rng.normal(0.0, std, size=(interest.size, d_in)), name="node_embeddings"
        )
        self.distance_table = Parameter(
            rng.normal(0.0, std, size=(distance_cap + 2, d_in)), name="distance_table"
        )
        self.edg_constant = Parameter(
            rng.normal(0.0, std, size=(1, d_in)), name="edg_constant"
        )

    def distance_row(self, dist: int) -> int:
        if dist == UNREACHABLE or dist > self.distance_cap:
            return self.distance_cap + 1
        return dist

    def node_rows(self, graph: HetGraph, nodes: Sequence[NodeRef]) -> np.ndarray:
        rows = np.array([self.node_row[graph.global_of(n)] for n in nodes], dtype=np.int64)
        if np.any(rows < 0):
            bad = nodes[int(np.argmin(rows))]
            raise DataError(f"node {graph.node_label(bad)} has no feature row")
        return rows

    @classmethod
    def from_arrays(
        cls,
        node_row: np.ndarray,
        node_embeddings: np.ndarray,
        distance_table: np.ndarray,
        edg_constant: np.ndarray,
    ) -> "EncodingTables":
        obj = cls.__new__(cls)
        obj.d_in = node_embeddings.shape[1]
        obj.distance_cap = distance_table.shape[0] - 2
        obj.node_row = node_row.astype(np.int64)
        obj.node_embeddings = Parameter(node_embeddings, name="node_embeddings")
        obj.distance_table = Parameter(distance_table, name="distance_table")
        obj.edg_constant = Parameter(edg_constant, name="edg_constant")
        return obj


def embed_sequence(
    seq: ConcentratedSequence,
    graph: HetGraph,
    tables: EncodingTables,
    vocab: ConnectionVocab,
) -> Tensor:
    """Token matrix (2n-1, d_in) for one sequence.

    Node tokens: feature + distance encoding (head uses row 0 by construction,
    its distance being zero).  Connection tokens: tuple encoding + shared tag.
    """
    if vocab.table is None:
        raise EncoderError("connection table not built")
    nodes = seq.nodes
    if len(seq.distances) != len(nodes):
        raise DataError("sequence is missing distance labels")
    node_rows = tables.node_rows(graph, nodes)
    dist_rows = np.array([tables.distance_row(d) for d in seq.distances], dtype=np.int64)
    node_tok = ad.add(
        ad.embedding_lookup(tables.node_embeddings, node_rows),
        ad.embedding_lookup(tables.distance_table, dist_rows),
    )
    if not seq.steps:
        return node_tok
    conn_rows = np.array(
        [vocab.lookup(conn, frozen=True) for conn, _ in seq.steps], dtype=np.int64
    )
    conn_tok = ad.add(ad.embedding_lookup(vocab.table, conn_rows), tables.edg_constant)
    return ad.interleave(node_tok, conn_tok, axis=0)


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------

_attention_ops = 0


def reset_attention_ops() -> None:
    global _attention_ops
    _attention_ops = 0


def attention_ops() -> int:
    """Multiply-accumulate count of all self-attention work since last reset."""
    return _attention_ops


class TransformerEncoder:
    """Pre-norm residual self-attention stack with position-wise feed-forward."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        c = config

        def w(name, fan_in, fan_out):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            return Parameter(rng.normal(0.0, std, size=(fan_in, fan_out)), name=name)

        def b(name, dim):
            return Parameter(np.zeros(dim), name=name)

        def ln(name, dim):
            return Parameter(np.ones(dim), name=f"{name}.gain"), Parameter(
                np.zeros(dim), name=f"{name}.bias"
            )

        self.w_in = w("encoder.w_in", c.d_in, c.d_hidden)
        self.b_in = b("encoder.b_in", c.d_hidden)
        self.blocks = []
        for i in range(c.layers):
            p = f"encoder.block{i}"
            self.blocks.append(
                {
                    "ln1": ln(f"{p}.ln1", c.d_hidden),
                    "wq": w(f"{p}.wq", c.d_hidden, c.d_hidden),
                    "bq": b(f"{p}.bq", c.d_hidden),
                    "wk": w(f"{p}.wk", c.d_hidden, c.d_hidden),
                    "bk": b(f"{p}.bk", c.d_hidden),
                    "wv": w(f"{p}.wv", c.d_hidden, c.d_hidden),
                    "bv": b(f"{p}.bv", c.d_hidden),
                    "wo": w(f"{p}.wo", c.d_hidden, c.d_hidden),
                    "bo": b(f"{p}.bo", c.d_hidden),
                    "ln2": ln(f"{p}.ln2", c.d_hidden),
                    "w1": w(f"{p}.ff1", c.d_hidden, 2 * c.d_hidden),
                    "b1": b(f"{p}.ff1b", 2 * c.d_hidden),
                    "w2": w(f"{p}.ff2", 2 * c.d_hidden, c.d_hidden),
                    "b2": b(f"{p}.ff2b", c.d_hidden),
                }
            )
        self.ln_f = ln("encoder.ln_f", c.d_hidden)
        self.w_out = w("encoder.w_out", c.d_hidden, c.d_out)
        self.b_out = b("encoder.b_out", c.d_out)
        self._unit = Tensor(np.ones(c.d_out))
        self._zero = Tensor(np.zeros(c.d_out))

    def parameters(self) -> list[Parameter]:
        params = [self.w_in, self.b_in]
        for blk in self.blocks:
            params.extend(blk["ln1"])
            params.extend(
                [blk["wq"], blk["bq"], blk["wk"], blk["bk"], blk["wv"], blk["bv"],
                 blk["wo"], blk["bo"]]
            )
            params.extend(blk["ln2"])
            params.extend([blk["w1"], blk["b1"], blk["w2"], blk["b2"]])
        params.extend(self.ln_f)
        params.extend([self.w_out, self.b_out])
        return params

    def encode(
        self,
        tokens: Tensor,
        mask: np.ndarray,
        collect_attention: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ):
        """Hidden matrices (B, T, d_out) for padded token batches.

        ``mask`` is (B, T) with 1 on valid tokens.  Masked key positions get
        exactly zero attention weight, so padded values can never leak into
        valid positions; padded output rows are zeroed.
        """
        global _attention_ops
        c = self.config
        if tokens.ndim != 3 or tokens.shape[-1] != c.d_in:
            raise ad.ShapeError(
                f"encode expects (B, T, {c.d_in}) tokens, got {tokens.shape}"
            )
        B, T, _ = tokens.shape
        mask = np.asarray(mask, dtype=tokens.data.dtype)
        attn_bias = Tensor((1.0 - mask)[:, None, None, :] * NEG_INF)
        mask_col = Tensor(mask[:, :, None])
        scale = 1.0 / np.sqrt(c.d_head)
        drop = c.dropout if dropout_rng is not None and c.dropout > 0.0 else 0.0

        def dropout(t: Tensor) -> Tensor:
            if drop == 0.0:
                return t
            keep = (dropout_rng.random(t.shape) >= drop) / (1.0 - drop)
            return ad.mul(t, Tensor(keep.astype(t.data.dtype)))

        def split_heads(t: Tensor) -> Tensor:
            t = ad.reshape(t, (B, T, c.heads, c.d_head))
            return ad.transpose(t, (0, 2, 1, 3))

        x = ad.add(ad.matmul(tokens, self.w_in), self.b_in)
        attns = []
        for blk in self.blocks:
            g1, b1 = blk["ln1"]
            h = ad.layer_norm(x, g1, b1)
            q = split_heads(ad.add(ad.matmul(h, blk["wq"]), blk["bq"]))
            k = split_heads(ad.add(ad.matmul(h, blk["wk"]), blk["bk"]))
            v = split_heads(ad.add(ad.matmul(h, blk["wv"]), blk["bv"]))
            scores = ad.add(
                ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale),
                attn_bias,
            )
            attn = ad.softmax(scores, axis=-1)
            if collect_attention:
                attns.append(attn.data.copy())
            ctx = ad.matmul(dropout(attn), v)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, c.d_hidden))
            x = ad.add(x, dropout(ad.add(ad.matmul(ctx, blk["wo"]), blk["bo"])))
            g2, b2 = blk["ln2"]
            h2 = ad.layer_norm(x, g2, b2)
            ff = ad.matmul(ad.relu(ad.add(ad.matmul(h2, blk["w1"]), blk["b1"])), blk["w2"])
            x = ad.add(x, dropout(ad.add(ff, blk["b2"])))
            _attention_ops += 4 * B * T * c.d_hidden * c.d_hidden
            _attention_ops += 2 * B * c.heads * T * T * c.d_head

        gf, bf = self.ln_f
        out = ad.add(ad.matmul(ad.layer_norm(x, gf, bf), self.w_out), self.b_out)
        if c.output_norm == "l2":
            out = ad.l2_normalize(out, axis=-1)
        elif c.output_norm == "layer":
            out = ad.layer_norm(out, self._unit, self._zero)
        out = ad.mul(out, mask_col)
        if collect_attention:
            return out, attns
        return out
