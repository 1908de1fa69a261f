"""Bundle of all trainable state: encodings, transformer, attention vector,
pair predictor; plus exact checkpointing of the lot."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .batching import Batch, embed_batch, make_batches, prepare_corpus
from .encoder import ConnectionVocab, EncoderConfig, EncodingTables, TransformerEncoder
from .graph import HetGraph, NodeRef
from .sampler import ConcentratedSequence


@dataclass
class PredictorParams:
    """Two-layer perceptron over combined head/tail representations."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    scalar_dot: bool

    @classmethod
    def create(
        cls, d_out: int, d_mlp: int, rng: np.random.Generator, scalar_dot: bool = False
    ) -> "PredictorParams":
        d_feat = 1 if scalar_dot else d_out
        std = np.sqrt(2.0 / (d_feat + d_mlp))
        return cls(
            w1=Parameter(rng.normal(0.0, std, size=(d_feat, d_mlp)), name="predictor.w1"),
            b1=Parameter(np.zeros(d_mlp), name="predictor.b1"),
            w2=Parameter(rng.normal(0.0, np.sqrt(2.0 / (d_mlp + 1)), size=(d_mlp, 1)),
                         name="predictor.w2"),
            b2=Parameter(np.zeros(1), name="predictor.b2"),
            scalar_dot=scalar_dot,
        )

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


class LinkModel:
    """Everything the experiment trains, plus the graph it is bound to."""

    def __init__(
        self,
        graph: HetGraph,
        config: EncoderConfig,
        tables: EncodingTables,
        vocab: ConnectionVocab,
        encoder: TransformerEncoder,
        attention_vector: Parameter,
        predictor: PredictorParams,
    ):
        self.graph = graph
        self.config = config
        self.tables = tables
        self.vocab = vocab
        self.encoder = encoder
        self.attention_vector = attention_vector
        self.predictor = predictor

    @classmethod
    def build(
        cls,
        graph: HetGraph,
        corpus: Sequence[ConcentratedSequence],
        config: EncoderConfig,
        distance_cap: int,
        seed: int,
        d_mlp: int = 64,
        scalar_dot: bool = False,
    ) -> "LinkModel":
        streams = np.random.SeedSequence(seed).spawn(5)
        vocab = ConnectionVocab()
        vocab.fit_corpus(corpus)
        vocab.build_table(config.d_in, np.random.default_rng(streams[0]))
        tables = EncodingTables(
            graph, config.d_in, distance_cap, np.random.default_rng(streams[1])
        )
        encoder = TransformerEncoder(config, np.random.default_rng(streams[2]))
        a = Parameter(
            np.random.default_rng(streams[3]).normal(0.0, 0.1, size=(3 * config.d_out,)),
            name="attention_vector",
        )
        predictor = PredictorParams.create(
            config.d_out, d_mlp, np.random.default_rng(streams[4]), scalar_dot
        )
        return cls(graph, config, tables, vocab, encoder, a, predictor)

    def parameters(self) -> list[Parameter]:
        params = [
            self.tables.node_embeddings,
            self.tables.distance_table,
            self.tables.edg_constant,
        ]
        if self.vocab.table is not None:
            params.append(self.vocab.table)
        params.extend(self.encoder.parameters())
        params.append(self.attention_vector)
        params.extend(self.predictor.parameters())
        return params

    def encoder_parameters(self) -> list[Parameter]:
        """Parameters trained by the sequence objective (predictor excluded)."""
        predictor = set(id(p) for p in self.predictor.parameters())
        return [p for p in self.parameters() if id(p) not in predictor]

    # -- forward helpers

    def encode_batch(self, batch: Batch, collect_attention: bool = False,
                     dropout_rng: np.random.Generator | None = None):
        tokens, mask = embed_batch(batch, self.tables, self.vocab)
        return self.encoder.encode(
            tokens, mask, collect_attention=collect_attention, dropout_rng=dropout_rng
        )

    def encode_corpus(
        self,
        corpus: Sequence[ConcentratedSequence],
        batch_size: int = 256,
    ) -> list[np.ndarray]:
        """Hidden matrices (token_count, d_out) per sequence, corpus order."""
        prepared = prepare_corpus(corpus, self.graph, self.tables, self.vocab)
        out: list[np.ndarray | None] = [None] * len(corpus)
        for batch in make_batches(prepared, batch_size):
            H = self.encode_batch(batch).data
            for row, seq_idx in enumerate(batch.seq_indices):
                t = 2 * int(batch.n_nodes[row]) - 1
                out[seq_idx] = H[row, :t].copy()
        return out  # type: ignore[return-value]

    def encode_singleton(self, node: NodeRef) -> np.ndarray:
        """Hidden representation of a one-node sequence (distance row 0)."""
        row = self.tables.node_row[self.graph.global_of(node)]
        if row < 0:
            raise ValueError(f"{self.graph.node_label(node)} has no feature row")
        node_rows = np.array([[row]], dtype=np.int64)
        dist_rows = np.zeros((1, 1), dtype=np.int64)
        tokens = ad.add(
            ad.embedding_lookup(self.tables.node_embeddings, node_rows),
            ad.embedding_lookup(self.tables.distance_table, dist_rows),
        )
        H = self.encoder.encode(tokens, np.ones((1, 1)))
        return H.data[0, 0].copy()

    # -- persistence

    def save(self, path) -> None:
        arrays = {p.name: p.data for p in self.parameters()}
        arrays["node_row"] = self.tables.node_row
        meta = {
            "encoder": {
                "layers": self.config.layers,
                "heads": self.config.heads,
                "d_in": self.config.d_in,
                "d_hidden": self.config.d_hidden,
                "d_out": self.config.d_out,
                "dropout": self.config.dropout,
                "output_norm": self.config.output_norm,
            },
            "distance_cap": self.tables.distance_cap,
            "vocab": self.vocab.to_meta(),
            "scalar_dot": self.predictor.scalar_dot,
            "d_mlp": int(self.predictor.w1.shape[1]),
            "node_types": self.graph.node_types,
            "edge_types": self.graph.edge_types,
        }
        ad.save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path, graph: HetGraph) -> "LinkModel":
        arrays, meta = ad.load_arrays(path)
        if meta["node_types"] != graph.node_types or meta["edge_types"] != graph.edge_types:
            raise ValueError("checkpoint was built against a different graph schema")
        config = EncoderConfig(**meta["encoder"])
        vocab = ConnectionVocab.from_meta(meta["vocab"])
        vocab.table = Parameter(arrays["connection_table"], name="connection_table")
        tables = EncodingTables.from_arrays(
            arrays["node_row"],
            arrays["node_embeddings"],
            arrays["distance_table"],
            arrays["edg_constant"],
        )
        model = cls.build(
            graph,
            corpus=[],
            config=config,
            distance_cap=meta["distance_cap"],
            seed=0,
            d_mlp=meta["d_mlp"],
            scalar_dot=meta["scalar_dot"],
        )
        model.vocab = vocab
        model.tables = tables
        for p in model.encoder.parameters() + [model.attention_vector] + model.predictor.parameters():
            p.data[...] = arrays[p.name]
        return model
