"""Synthetic heterogeneous networks for end-to-end and performance tests.

The planted generator builds two communities of head/tail/bridge nodes.
Heads and tails attach to bridges of their own community at random; a
head-tail pair is positively linked exactly when it shares at least one
bridge (plus a small cross-community noise rate), so every positive link is
witnessed in the graph by a head-bridge-tail path even after its direct edge
is held out.  Attachment probabilities are chosen so the intra-community link
rate lands near the configured target.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import RawEdge

HEAD_TYPE = "head"
TAIL_TYPE = "tail"
BRIDGE_TYPE = "bridge"
LINK_EDGE = "interacts"
HEAD_BRIDGE_EDGE = "head_bridge"
BRIDGE_TAIL_EDGE = "bridge_tail"


@dataclass(frozen=True)
class PlantedConfig:
    heads: int = 100
    tails: int = 80
    bridges: int = 40
    communities: int = 2
    bridge_attach_head: float = 0.133
    bridge_attach_tail: float = 0.133
    inter_link_prob: float = 0.01
    # optional community-agnostic decoy hubs: they give unlinked pairs the
    # same two-hop distance profile as linked pairs, so linkage cannot be read
    # off the hop count and training has to pick up co-attachment structure
    hubs: int = 0
    hub_attach: int = 0
    seed: int = 7

    def __post_init__(self):
        if min(self.heads, self.tails, self.bridges, self.communities) < 1:
            raise ValueError("planted generator needs positive node counts")
        for p in (self.bridge_attach_head, self.bridge_attach_tail, self.inter_link_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.hubs > 0 and self.hub_attach > self.hubs:
            raise ValueError("hub_attach cannot exceed hubs")


def generate_planted(
    config: PlantedConfig,
) -> tuple[list[RawEdge], list[tuple[str, str]]]:
    """Edges plus positive (head_name, tail_name) pairs.

    The edge list contains one ``interacts`` edge per positive pair plus the
    community bridge attachments; experiments drop held-out ``interacts``
    edges when building training graphs.
    """
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    c = config.communities
    head_comm = [i % c for i in range(config.heads)]
    tail_comm = [i % c for i in range(config.tails)]
    bridge_comm = [i % c for i in range(config.bridges)]
    head_names = [f"h{i:04d}" for i in range(config.heads)]
    tail_names = [f"t{i:04d}" for i in range(config.tails)]
    bridge_names = [f"b{i:04d}" for i in range(config.bridges)]

    hub_names = [f"x{i:04d}" for i in range(config.hubs)]

    edges: list[RawEdge] = []
    head_bridges: list[set[int]] = [set() for _ in range(config.heads)]
    tail_bridges: list[set[int]] = [set() for _ in range(config.tails)]

    for i in range(config.heads):
        for j in range(config.bridges):
            if head_comm[i] == bridge_comm[j] and rng.random() < config.bridge_attach_head:
                head_bridges[i].add(j)
                edges.append(
                    RawEdge(HEAD_TYPE, head_names[i], HEAD_BRIDGE_EDGE, BRIDGE_TYPE, bridge_names[j])
                )
    for i in range(config.tails):
        for j in range(config.bridges):
            if tail_comm[i] == bridge_comm[j] and rng.random() < config.bridge_attach_tail:
                tail_bridges[i].add(j)
                edges.append(
                    RawEdge(BRIDGE_TYPE, bridge_names[j], BRIDGE_TAIL_EDGE, TAIL_TYPE, tail_names[i])
                )

    # connectivity floor: a node the coin left bridgeless would be absent
    # from the edge list entirely
    for i in range(config.heads):
        if not head_bridges[i]:
            own = [j for j in range(config.bridges) if bridge_comm[j] == head_comm[i]]
            j = own[int(rng.integers(0, len(own)))]
            head_bridges[i].add(j)
            edges.append(
                RawEdge(HEAD_TYPE, head_names[i], HEAD_BRIDGE_EDGE, BRIDGE_TYPE, bridge_names[j])
            )
    for i in range(config.tails):
        if not tail_bridges[i]:
            own = [j for j in range(config.bridges) if bridge_comm[j] == tail_comm[i]]
            j = own[int(rng.integers(0, len(own)))]
            tail_bridges[i].add(j)
            edges.append(
                RawEdge(BRIDGE_TYPE, bridge_names[j], BRIDGE_TAIL_EDGE, TAIL_TYPE, tail_names[i])
            )

    if config.hubs > 0:
        for i in range(config.heads):
            for j in sorted(rng.choice(config.hubs, size=config.hub_attach, replace=False)):
                edges.append(
                    RawEdge(HEAD_TYPE, head_names[i], HEAD_BRIDGE_EDGE, BRIDGE_TYPE, hub_names[j])
                )
        for i in range(config.tails):
            for j in sorted(rng.choice(config.hubs, size=config.hub_attach, replace=False)):
                edges.append(
                    RawEdge(BRIDGE_TYPE, hub_names[j], BRIDGE_TAIL_EDGE, TAIL_TYPE, tail_names[i])
                )

    positives: list[tuple[str, str]] = []
    for i in range(config.heads):
        for j in range(config.tails):
            if head_comm[i] == tail_comm[j]:
                linked = bool(head_bridges[i] & tail_bridges[j])
            else:
                linked = rng.random() < config.inter_link_prob
            if linked:
                positives.append((head_names[i], tail_names[j]))
                edges.append(
                    RawEdge(HEAD_TYPE, head_names[i], LINK_EDGE, TAIL_TYPE, tail_names[j])
                )
    return edges, positives


def generate_random_typed(
    type_counts: Sequence[int],
    n_edges: int,
    n_edge_types: int,
    seed: int,
    type_names: Sequence[str] | None = None,
) -> list[RawEdge]:
    """Uniform random typed multigraph; self-pairs skipped, duplicates allowed
    upstream (the graph builder dedupes)."""
    if type_names is None:
        type_names = [f"T{i}" for i in range(len(type_counts))]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    totals = np.cumsum(type_counts)
    n_nodes = int(totals[-1])

    def node_of(g: int) -> tuple[str, str]:
        t = int(np.searchsorted(totals, g, side="right"))
        local = g - (0 if t == 0 else int(totals[t - 1]))
        return type_names[t], f"n{local}"

    edges: list[RawEdge] = []
    while len(edges) < n_edges:
        u = int(rng.integers(0, n_nodes))
        v = int(rng.integers(0, n_nodes))
        if u == v:
            continue
        et = int(rng.integers(0, n_edge_types))
        ut, un = node_of(u)
        vt, vn = node_of(v)
        edges.append(RawEdge(ut, un, f"e{et}", vt, vn))
    return edges
