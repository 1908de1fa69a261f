"""Finite-difference audit of the full pipeline.

Builds a small graph, samples a handful of sequences, and checks the analytic
gradient of (embed -> encode -> combined loss) against central differences
for every parameter: token tables, connection vocabulary, transformer
weights, and the pair-attention vector.
"""
from __future__ import annotations

import random

import numpy as np

from .autodiff import check_gradients
from .batching import make_batches, prepare_corpus
from .encoder import EncoderConfig
from .graph import build_graph, RawEdge
from .model import LinkModel
from .objectives import LossConfig, batch_objective, build_labels
from .sampler import SamplerConfig, sample_corpus


def _toy_graph():
    edges = [
        RawEdge("drug", "d0", "binds", "protein", "p0"),
        RawEdge("drug", "d0", "binds", "protein", "p1"),
        RawEdge("drug", "d1", "binds", "protein", "p1"),
        RawEdge("drug", "d1", "treats", "disease", "z0"),
        RawEdge("disease", "z0", "involves", "protein", "p2"),
        RawEdge("drug", "d0", "treats", "disease", "z1"),
        RawEdge("disease", "z1", "involves", "protein", "p0"),
        RawEdge("protein", "p0", "similar", "protein", "p2"),
        RawEdge("protein", "p1", "similar", "protein", "p2"),
    ]
    return build_graph(edges, ["drug"], ["protein"])


def pipeline_gradient_check(
    seed: int = 0, step: float = 1e-5, walk_length: int = 3
) -> float:
    """Max relative error over all parameter entries of the full pipeline."""
    graph = _toy_graph()
    sampler_cfg = SamplerConfig(
        max_inner=1, walk_length=walk_length, samples_per_head=2,
        max_attempts=10, seed=seed, distance_cap=6,
    )
    corpus = sample_corpus(graph, graph.head_nodes(), sampler_cfg)
    config = EncoderConfig(layers=2, heads=2, d_in=16, d_hidden=8, d_out=8)
    model = LinkModel.build(
        graph, corpus, config, distance_cap=sampler_cfg.distance_cap,
        seed=seed + 1, d_mlp=4,
    )
    positives = {
        (graph.node_ref("drug", "d0"), graph.node_ref("protein", "p1")),
        (graph.node_ref("drug", "d1"), graph.node_ref("protein", "p1")),
    }
    labels = build_labels(corpus, positives)
    prepared = prepare_corpus(corpus, graph, model.tables, model.vocab)
    batches = make_batches(
        prepared, batch_size=64, positive_steps=labels.positive_steps, min_nodes=2
    )
    loss_cfg = LossConfig(temperature=0.5, observation_weight=1.0)
    params = model.encoder_parameters()

    def loss_fn():
        total = None
        for batch in batches:
            H = model.encode_batch(batch)
            loss, _, _ = batch_objective(H, batch, model.attention_vector, loss_cfg)
            total = loss if total is None else total + loss
        return total

    return check_gradients(loss_fn, params, step=step)
