"""Concentrated random-walk sampling.

A walk starts at a head node and repeatedly performs uniform random steps over
typed edges.  Every node that is not tail-typed (head-typed nodes included,
once the walk has left its start) counts as an inner node; the traversed edge
types are collected until the walk hits a tail node, at which point the tuple
of edge types becomes the "connection" between the two interest nodes.  Steps
that accumulate more than k inner nodes are discarded and re-drawn, up to a
retry bound.

Also provides the reduction from a meta-path template to the connection-tuple
skeleton a concentrated walk would produce, which makes the "meta-paths are a
special case" argument executable.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .graph import (
    DEFAULT_DISTANCE_CAP,
    DistanceTable,
    HetGraph,
    NodeRef,
    bfs_distance,
)

Connection = tuple[int, ...]


class SamplerError(Exception):
    pass


class MetapathError(SamplerError):
    """A meta-path cannot be realized under the given k / L bounds."""


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs of the concentrated walk.

    max_inner: k, most non-interest nodes tolerated inside one step.
    walk_length: L, interest nodes per sequence (head included).
    samples_per_head: m.
    max_attempts: retries per step before giving up on the sequence.
    distance_cap: hop count at which distance labels saturate.
    """

    max_inner: int = 2
    walk_length: int = 5
    samples_per_head: int = 100
    max_attempts: int = 10
    seed: int = 0
    distance_cap: int = DEFAULT_DISTANCE_CAP

    def __post_init__(self):
        if self.max_inner < 0:
            raise SamplerError("max_inner must be >= 0")
        if self.walk_length < 2:
            raise SamplerError("walk_length must be >= 2")
        if self.samples_per_head < 1:
            raise SamplerError("samples_per_head must be >= 1")
        if self.max_attempts < 1:
            raise SamplerError("max_attempts must be >= 1")
        if self.distance_cap < 1:
            raise SamplerError("distance_cap must be >= 1")


@dataclass(slots=True)
class ConcentratedSequence:
    """One sampled walk: head node, then (connection, tail node) steps.

    ``distances`` holds the hop count from the head to each node in order
    (so ``distances[0] == 0``), measured on the graph the walk ran on.
    """

    head: NodeRef
    steps: list[tuple[Connection, NodeRef]]
    distances: list[int]

    @property
    def nodes(self) -> list[NodeRef]:
        return [self.head] + [node for _, node in self.steps]

    @property
    def node_count(self) -> int:
        return 1 + len(self.steps)

    @property
    def token_count(self) -> int:
        return 2 * self.node_count - 1

    @property
    def connections(self) -> list[Connection]:
        return [conn for conn, _ in self.steps]


def concentrated_step(
    graph: HetGraph,
    start: NodeRef,
    config: SamplerConfig,
    rng: random.Random,
) -> tuple[Connection, NodeRef] | None:
    """One concentrated step from an interest node; None when every attempt fails."""
    out = _step_global(
        graph, graph.global_of(start), config.max_inner, config.max_attempts, rng.random
    )
    if out is None:
        return None
    conn, tail_g = out
    return conn, graph.ref_of(tail_g)


def _step_global(
    graph: HetGraph,
    start: int,
    k: int,
    max_attempts: int,
    rand: Callable[[], float],
) -> tuple[Connection, int] | None:
    indptr = graph._indptr_list
    nbr = graph._nbr_list
    etype = graph._etype_list
    is_tail = graph.is_tail
    for _ in range(max_attempts):
        cur = start
        edges: list[int] = []
        inner = 0
        while True:
            lo = indptr[cur]
            deg = indptr[cur + 1] - lo
            if deg == 0:
                break  # dead end, retry
            j = lo + int(rand() * deg)
            if j >= lo + deg:
                j = lo + deg - 1
            edges.append(etype[j])
            cur = nbr[j]
            if is_tail[cur]:
                return tuple(edges), cur
            inner += 1
            if inner > k:
                break  # too many inner nodes, retry
    return None


def sample_sequence(
    graph: HetGraph,
    head: NodeRef,
    config: SamplerConfig,
    rng: random.Random,
    distances: DistanceTable | None = None,
) -> ConcentratedSequence:
    """Sample one sequence starting at ``head``.

    Steps are appended until the walk holds ``walk_length`` interest nodes or
    a step fails, which terminates the sequence early.  Distance labels come
    from ``distances`` (computed on the fly when omitted).
    """
    if head.type_id not in graph.head_type_ids:
        raise SamplerError(f"{graph.node_label(head)} is not a head-type node")
    if distances is None:
        distances = bfs_distance(graph, head, cap=config.distance_cap)
    return _sample_head(graph, head, config, rng, distances, 1)[0]


def _sample_head(
    graph: HetGraph,
    head: NodeRef,
    config: SamplerConfig,
    rng: random.Random,
    distances: DistanceTable,
    count: int,
) -> list[ConcentratedSequence]:
    # hot loop: locals bound once for all `count` sequences of this head
    indptr = graph._indptr_list
    nbr = graph._nbr_list
    etype = graph._etype_list
    is_tail = graph.is_tail
    refs = graph._refs
    dist = distances.dist
    rand = rng.random
    k = config.max_inner
    attempts = config.max_attempts
    length = config.walk_length
    head_g = graph.global_of(head)

    out: list[ConcentratedSequence] = []
    for _ in range(count):
        steps: list[tuple[Connection, NodeRef]] = []
        dists = [0]
        cur = head_g
        n_nodes = 1
        while n_nodes < length:
            tail_g = -1
            for _attempt in range(attempts):
                pos = cur
                edges: list[int] = []
                inner = 0
                while True:
                    lo = indptr[pos]
                    deg = indptr[pos + 1] - lo
                    if deg == 0:
                        break
                    j = lo + int(rand() * deg)
                    if j >= lo + deg:
                        j = lo + deg - 1
                    edges.append(etype[j])
                    pos = nbr[j]
                    if is_tail[pos]:
                        tail_g = pos
                        break
                    inner += 1
                    if inner > k:
                        break
                if tail_g >= 0:
                    break
            if tail_g < 0:
                break
            steps.append((tuple(edges), refs[tail_g]))
            dists.append(int(dist[tail_g]))
            cur = tail_g
            n_nodes += 1
        out.append(ConcentratedSequence(head, steps, dists))
    return out


def _head_rng(seed: int, head: NodeRef) -> random.Random:
    # string seeding hashes with SHA-512 inside random.Random: stable across
    # processes and independent of sampling order
    return random.Random(f"{seed}/{head.type_id}/{head.local_id}")


def sample_corpus(
    graph: HetGraph,
    heads: Sequence[NodeRef],
    config: SamplerConfig,
    workers: int = 1,
    head_edge_mask: Callable[[NodeRef], tuple[int, list[tuple[NodeRef, NodeRef]]]] | None = None,
) -> list[ConcentratedSequence]:
    """Exactly ``samples_per_head`` sequences per head, in head order.

    Each head gets its own RNG stream derived from (seed, head), so the corpus
    is identical whether heads are sampled serially or in parallel.

    ``head_edge_mask``, when given, returns (edge_type_id, pairs) of typed
    edges a head is not allowed to see: its own walks and distance labels are
    computed on the graph with those edges removed.  This hides each head's
    own link edges from its position encodings and walks.
    """
    if not heads:
        raise SamplerError("sample_corpus needs at least one head node")

    def one_head(head: NodeRef) -> list[ConcentratedSequence]:
        rng = _head_rng(config.seed, head)
        g = graph
        if head_edge_mask is not None:
            edge_type_id, pairs = head_edge_mask(head)
            if pairs:
                from .graph import drop_typed_pairs

                g = drop_typed_pairs(graph, pairs, edge_type_id)
        table = bfs_distance(g, head, cap=config.distance_cap)
        return _sample_head(g, head, config, rng, table, config.samples_per_head)

    if workers <= 1:
        chunks = [one_head(h) for h in heads]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one_head, heads))
    corpus: list[ConcentratedSequence] = []
    for chunk in chunks:
        corpus.extend(chunk)
    return corpus


def format_sequence(seq: ConcentratedSequence, graph: HetGraph) -> str:
    parts = [graph.node_label(seq.head)]
    for conn, node in seq.steps:
        parts.append("(" + ",".join(graph.edge_types[e] for e in conn) + ")")
        parts.append(graph.node_label(node))
    return "\t".join(parts)


def dump_corpus(corpus: Iterable[ConcentratedSequence], graph: HetGraph, path) -> None:
    """One sequence per line: head, then alternating (edge,types) and node labels."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in corpus:
            fh.write(format_sequence(seq, graph) + "\n")


# ---------------------------------------------------------------------------
# meta-path reduction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceTemplate:
    """Connection-tuple / tail-type skeleton a meta-path collapses into."""

    head_type: str
    steps: tuple[tuple[tuple[str, ...], str], ...]

    @property
    def node_count(self) -> int:
        return 1 + len(self.steps)


def metapath_to_concentrated(
    metapath: Sequence[str],
    head_types: Iterable[str],
    tail_types: Iterable[str],
    k: int,
    walk_length: int,
) -> SequenceTemplate:
    """Collapse a node-type/edge-type alternating template into step skeletons.

    Mirrors what a concentrated walk does to a concrete path: maximal runs of
    non-interest node types (head types count as non-interest after position
    one) merge into a single edge-type tuple.  Raises :class:`MetapathError`
    when any run needs more than ``k`` inner nodes or the template holds more
    interest nodes than ``walk_length``.
    """
    if len(metapath) < 3 or len(metapath) % 2 == 0:
        raise MetapathError(
            "metapath must alternate node and edge types and span >= 2 nodes"
        )
    heads = set(head_types)
    tails = set(tail_types)
    if metapath[0] not in heads:
        raise MetapathError(f"metapath must start at a head type, got {metapath[0]!r}")

    node_types = metapath[0::2]
    edge_types_seq = metapath[1::2]
    if node_types[-1] not in tails:
        raise MetapathError(
            f"metapath must end at a tail type, got {node_types[-1]!r}"
        )

    steps: list[tuple[tuple[str, ...], str]] = []
    pending: list[str] = []
    inner = 0
    seg_start = 0
    for i, et in enumerate(edge_types_seq):
        pending.append(et)
        nt = node_types[i + 1]
        if nt in tails:
            if inner > k:
                sub = metapath[2 * seg_start : 2 * (i + 1) + 1]
                raise MetapathError(
                    f"sub-path {'-'.join(sub)} needs {inner} inner nodes "
                    f"but k={k}"
                )
            steps.append((tuple(pending), nt))
            pending = []
            inner = 0
            seg_start = i + 1
        else:
            inner += 1

    n_interest = 1 + len(steps)
    if n_interest > walk_length:
        raise MetapathError(
            f"metapath holds {n_interest} interest nodes but walk_length={walk_length}"
        )
    return SequenceTemplate(metapath[0], tuple(steps))


# ---------------------------------------------------------------------------
# brute-force enumeration (oracles for tests and acceptance checks)
# ---------------------------------------------------------------------------


def enumerate_step_outcomes(
    graph: HetGraph, start: NodeRef, k: int
) -> set[tuple[Connection, NodeRef]]:
    """All (connection, tail) pairs reachable from ``start`` with <= k inner nodes.

    Exhaustive depth-first enumeration of walks (revisits allowed); every
    returned outcome has positive probability under the uniform step law.
    """
    out: set[tuple[Connection, NodeRef]] = set()

    def walk(node: int, edges: tuple[int, ...], inner: int) -> None:
        lo, hi = graph._indptr_list[node], graph._indptr_list[node + 1]
        for j in range(lo, hi):
            v = graph._nbr_list[j]
            path = edges + (graph._etype_list[j],)
            if graph.is_tail[v]:
                out.add((path, graph.ref_of(v)))
            elif inner < k:
                walk(v, path, inner + 1)

    walk(graph.global_of(start), (), 0)
    return out


def connection_has_witness(
    graph: HetGraph, src: NodeRef, conn: Connection, dst: NodeRef
) -> bool:
    """True when a concrete typed path realizes ``conn`` with non-tail inner nodes."""
    target = graph.global_of(dst)

    def walk(node: int, depth: int) -> bool:
        lo, hi = graph._indptr_list[node], graph._indptr_list[node + 1]
        want = conn[depth]
        last = depth == len(conn) - 1
        for j in range(lo, hi):
            if graph._etype_list[j] != want:
                continue
            v = graph._nbr_list[j]
            if last:
                if v == target:
                    return True
            elif not graph.is_tail[v] and walk(v, depth + 1):
                return True
        return False

    return walk(graph.global_of(src), 0)
