"""Heterogeneous-network storage.

Loads typed edge lists, builds an immutable adjacency structure, produces
train/test link splits with uniform negative sampling, and computes capped
shortest-path hop counts.  The graph is read-only after construction and safe
to share across threads.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

UNREACHABLE = -1
DEFAULT_DISTANCE_CAP = 10


class GraphError(Exception):
    """Base class for graph-store failures."""


class EdgeFileError(GraphError):
    """Malformed edge or link file; message carries the line number."""


class GraphConfigError(GraphError):
    """Inconsistent configuration, e.g. unknown interest types."""


class NodeRef(NamedTuple):
    """A node addressed by (node-type index, index within that type)."""

    type_id: int
    local_id: int


class RawEdge(NamedTuple):
    src_type: str
    src_id: str
    edge_type: str
    dst_type: str
    dst_id: str


class RawLink(NamedTuple):
    head_type: str
    head_id: str
    tail_type: str
    tail_id: str
    label: int


def parse_edge_file(path) -> list[RawEdge]:
    """Read a 5-field TSV edge list: src_type, src_id, edge_type, dst_type, dst_id.

    Blank lines and ``#`` comments are ignored; exact duplicate records are
    dropped (first occurrence kept).
    """
    edges: list[RawEdge] = []
    seen: set[RawEdge] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise EdgeFileError(
                    f"{path}: line {lineno}: expected 5 tab-separated fields, "
                    f"got {len(fields)}"
                )
            rec = RawEdge(*fields)
            if rec not in seen:
                seen.add(rec)
                edges.append(rec)
    return edges


def parse_link_file(path) -> list[RawLink]:
    """Read labeled pairs: head_type, head_id, tail_type, tail_id, label in {0,1}."""
    links: list[RawLink] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise EdgeFileError(
                    f"{path}: line {lineno}: expected 5 tab-separated fields, "
                    f"got {len(fields)}"
                )
            if fields[4] not in ("0", "1"):
                raise EdgeFileError(
                    f"{path}: line {lineno}: label must be 0 or 1, got {fields[4]!r}"
                )
            links.append(RawLink(fields[0], fields[1], fields[2], fields[3], int(fields[4])))
    return links


class HetGraph:
    """Immutable typed-node / typed-edge graph with adjacency.

    Nodes get a global integer id laid out type by type; the sampler and BFS
    work on flat arrays while the public API speaks :class:`NodeRef`.
    """

    def __init__(
        self,
        node_types: list[str],
        edge_types: list[str],
        node_names: list[list[str]],
        adjacency: list[list[tuple[int, int]]],
        head_type_ids: frozenset[int],
        tail_type_ids: frozenset[int],
        directed: bool,
    ):
        self.node_types = node_types
        self.edge_types = edge_types
        self.node_names = node_names
        self.head_type_ids = head_type_ids
        self.tail_type_ids = tail_type_ids
        self.directed = directed

        self._name_to_local = [
            {name: i for i, name in enumerate(names)} for names in node_names
        ]
        counts = [len(names) for names in node_names]
        self.type_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.n_nodes = int(self.type_offsets[-1])

        self.type_of = np.repeat(
            np.arange(len(node_types), dtype=np.int32), counts
        )
        self.local_of = np.concatenate(
            [np.arange(c, dtype=np.int64) for c in counts]
        ) if counts else np.zeros(0, dtype=np.int64)
        self._refs = [
            NodeRef(t, i) for t, c in enumerate(counts) for i in range(c)
        ]

        # CSR adjacency (numpy for vectorized BFS, plain lists for the sampler)
        indptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        for g, nbrs in enumerate(adjacency):
            indptr[g + 1] = indptr[g] + len(nbrs)
        nbr = np.zeros(int(indptr[-1]), dtype=np.int64)
        etype = np.zeros(int(indptr[-1]), dtype=np.int32)
        pos = 0
        for nbrs in adjacency:
            for et, v in nbrs:
                nbr[pos] = v
                etype[pos] = et
                pos += 1
        self.indptr = indptr
        self.nbr = nbr
        self.etype = etype
        self._indptr_list = indptr.tolist()
        self._nbr_list = nbr.tolist()
        self._etype_list = etype.tolist()

        tail_mask = np.isin(self.type_of, list(tail_type_ids))
        head_mask = np.isin(self.type_of, list(head_type_ids))
        self.is_tail = tail_mask.tolist()
        self.is_head = head_mask.tolist()
        self._tail_mask = tail_mask
        self._head_mask = head_mask

        self._pair_set = set()
        for u in range(self.n_nodes):
            for v in self.nbr[self.indptr[u] : self.indptr[u + 1]]:
                self._pair_set.add((u, int(v)))

    # -- lookups

    def global_of(self, ref: NodeRef) -> int:
        return int(self.type_offsets[ref.type_id]) + ref.local_id

    def ref_of(self, g: int) -> NodeRef:
        return self._refs[g]

    def node_ref(self, type_name: str, node_name: str) -> NodeRef:
        try:
            t = self.node_types.index(type_name)
        except ValueError:
            raise GraphConfigError(f"unknown node type {type_name!r}") from None
        try:
            return NodeRef(t, self._name_to_local[t][node_name])
        except KeyError:
            raise GraphConfigError(
                f"unknown node {type_name}:{node_name}"
            ) from None

    def node_label(self, ref: NodeRef) -> str:
        return f"{self.node_types[ref.type_id]}:{self.node_names[ref.type_id][ref.local_id]}"

    def edge_type_id(self, name: str) -> int:
        try:
            return self.edge_types.index(name)
        except ValueError:
            raise GraphConfigError(f"unknown edge type {name!r}") from None

    # -- structure

    @property
    def node_type_count(self) -> int:
        return len(self.node_types)

    @property
    def edge_type_count(self) -> int:
        return len(self.edge_types)

    def degree(self, ref: NodeRef) -> int:
        g = self.global_of(ref)
        return self._indptr_list[g + 1] - self._indptr_list[g]

    def neighbors(self, ref: NodeRef) -> list[tuple[int, NodeRef]]:
        g = self.global_of(ref)
        lo, hi = self._indptr_list[g], self._indptr_list[g + 1]
        return [
            (self._etype_list[j], self.ref_of(self._nbr_list[j]))
            for j in range(lo, hi)
        ]

    def has_pair(self, u: NodeRef, v: NodeRef) -> bool:
        """True if any typed edge connects u and v (either direction)."""
        a, b = self.global_of(u), self.global_of(v)
        return (a, b) in self._pair_set or (b, a) in self._pair_set

    def nodes_of_types(self, type_ids: Iterable[int]) -> list[NodeRef]:
        refs = []
        for t in sorted(type_ids):
            refs.extend(NodeRef(t, i) for i in range(len(self.node_names[t])))
        return refs

    def head_nodes(self) -> list[NodeRef]:
        return self.nodes_of_types(self.head_type_ids)

    def tail_nodes(self) -> list[NodeRef]:
        return self.nodes_of_types(self.tail_type_ids)

    def interest_globals(self) -> np.ndarray:
        return np.flatnonzero(self._head_mask | self._tail_mask)


def build_graph(
    edges: Sequence[RawEdge],
    head_types: Sequence[str],
    tail_types: Sequence[str],
    directed: bool = False,
) -> HetGraph:
    """Assemble a :class:`HetGraph` from raw edges.

    Node/edge type names are interned in first-seen order.  Undirected graphs
    store both orientations of every edge.  Self-loops are dropped; duplicate
    typed edges between the same pair collapse to one adjacency entry, while
    differently-typed edges between the same pair are kept as distinct.
    """
    node_types: list[str] = []
    edge_types: list[str] = []
    node_names: list[list[str]] = []
    name_to_local: list[dict[str, int]] = []

    def intern_type(name: str) -> int:
        try:
            return node_types.index(name)
        except ValueError:
            node_types.append(name)
            node_names.append([])
            name_to_local.append({})
            return len(node_types) - 1

    def intern_node(t: int, name: str) -> int:
        table = name_to_local[t]
        local = table.get(name)
        if local is None:
            local = len(node_names[t])
            table[name] = local
            node_names[t].append(name)
        return local

    def intern_edge_type(name: str) -> int:
        try:
            return edge_types.index(name)
        except ValueError:
            edge_types.append(name)
            return len(edge_types) - 1

    typed: list[tuple[int, int, int, int, int]] = []
    for e in edges:
        st = intern_type(e.src_type)
        sl = intern_node(st, e.src_id)
        et = intern_edge_type(e.edge_type)
        dt = intern_type(e.dst_type)
        dl = intern_node(dt, e.dst_id)
        typed.append((st, sl, et, dt, dl))

    counts = [len(n) for n in node_names]
    offsets = [0]
    for c in counts:
        offsets.append(offsets[-1] + c)

    adjacency: list[list[tuple[int, int]]] = [[] for _ in range(offsets[-1])]
    seen_triples: set[tuple[int, int, int]] = set()

    def add_edge(u: int, et: int, v: int) -> None:
        if (u, et, v) in seen_triples:
            return
        seen_triples.add((u, et, v))
        adjacency[u].append((et, v))

    for st, sl, et, dt, dl in typed:
        u = offsets[st] + sl
        v = offsets[dt] + dl
        if u == v:
            continue
        add_edge(u, et, v)
        if not directed:
            add_edge(v, et, u)

    head_ids = []
    tail_ids = []
    for name in head_types:
        if name not in node_types:
            raise GraphConfigError(f"head type {name!r} not present in edge data")
        head_ids.append(node_types.index(name))
    for name in tail_types:
        if name not in node_types:
            raise GraphConfigError(f"tail type {name!r} not present in edge data")
        tail_ids.append(node_types.index(name))
    if not head_ids or not tail_ids:
        raise GraphConfigError("head and tail type sets must both be non-empty")

    return HetGraph(
        node_types,
        edge_types,
        node_names,
        adjacency,
        frozenset(head_ids),
        frozenset(tail_ids),
        directed,
    )


def drop_typed_pairs(
    graph: HetGraph,
    pairs: Sequence[tuple[NodeRef, NodeRef]],
    edge_type_id: int,
) -> HetGraph:
    """A copy of the graph without the given typed link edges.

    Node and type identities are preserved exactly, so NodeRefs remain valid
    across the full graph and any filtered training graph.
    """
    banned: set[tuple[int, int, int]] = set()
    for h, t in pairs:
        a, b = graph.global_of(h), graph.global_of(t)
        banned.add((a, edge_type_id, b))
        if not graph.directed:
            banned.add((b, edge_type_id, a))
    adjacency: list[list[tuple[int, int]]] = []
    for u in range(graph.n_nodes):
        lo, hi = graph._indptr_list[u], graph._indptr_list[u + 1]
        adjacency.append(
            [
                (graph._etype_list[j], graph._nbr_list[j])
                for j in range(lo, hi)
                if (u, graph._etype_list[j], graph._nbr_list[j]) not in banned
            ]
        )
    return HetGraph(
        graph.node_types,
        graph.edge_types,
        graph.node_names,
        adjacency,
        graph.head_type_ids,
        graph.tail_type_ids,
        graph.directed,
    )


# ---------------------------------------------------------------------------
# link splits
# ---------------------------------------------------------------------------


@dataclass
class LinkDataset:
    """Labeled head-tail pairs with fold assignments and sampled negatives."""

    positives: list[tuple[NodeRef, NodeRef]]
    negatives: list[tuple[NodeRef, NodeRef]]
    pos_folds: list[int]
    neg_folds: list[int]
    ratio: float
    k: int

    def fold_positives(self, fold: int) -> list[tuple[NodeRef, NodeRef]]:
        return [p for p, f in zip(self.positives, self.pos_folds) if f == fold]

    def fold_negatives(self, fold: int) -> list[tuple[NodeRef, NodeRef]]:
        return [p for p, f in zip(self.negatives, self.neg_folds) if f == fold]


def split_links(
    graph: HetGraph,
    positives: Sequence[tuple[NodeRef, NodeRef]],
    k: int,
    ratio: float,
    seed: int,
) -> LinkDataset:
    """Assign positives to k near-equal folds and draw uniform negatives.

    Negatives are head-type x tail-type pairs absent from both the positive
    set and the graph edge set; the draw is deterministic under ``seed``.
    """
    if k < 2:
        raise GraphConfigError(f"fold count must be >= 2, got {k}")
    if ratio <= 0:
        raise GraphConfigError(f"negative ratio must be positive, got {ratio}")
    for h, t in positives:
        if h.type_id not in graph.head_type_ids:
            raise GraphConfigError(f"positive head {graph.node_label(h)} is not head-typed")
        if t.type_id not in graph.tail_type_ids:
            raise GraphConfigError(f"positive tail {graph.node_label(t)} is not tail-typed")

    heads = graph.head_nodes()
    tails = graph.tail_nodes()
    n_neg = int(round(len(positives) * ratio))

    forbidden: set[tuple[int, int]] = set()
    for h, t in positives:
        forbidden.add((graph.global_of(h), graph.global_of(t)))
    tail_globals = {graph.global_of(t) for t in tails}
    for h in heads:
        hg = graph.global_of(h)
        lo, hi = graph._indptr_list[hg], graph._indptr_list[hg + 1]
        for j in range(lo, hi):
            v = graph._nbr_list[j]
            if v in tail_globals:
                forbidden.add((hg, v))

    capacity = len(heads) * len(tails) - len(forbidden)
    if n_neg > capacity:
        raise GraphError(
            f"cannot draw {n_neg} negatives: only {capacity} head-tail "
            f"non-edges available"
        )

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    negatives: list[tuple[NodeRef, NodeRef]] = []
    chosen: set[tuple[int, int]] = set()
    while len(negatives) < n_neg:
        h_idx = rng.integers(0, len(heads), size=max(64, n_neg - len(negatives)))
        t_idx = rng.integers(0, len(tails), size=h_idx.size)
        for hi_, ti_ in zip(h_idx, t_idx):
            h, t = heads[int(hi_)], tails[int(ti_)]
            key = (graph.global_of(h), graph.global_of(t))
            if key in forbidden or key in chosen:
                continue
            chosen.add(key)
            negatives.append((h, t))
            if len(negatives) == n_neg:
                break

    pos_perm = rng.permutation(len(positives))
    pos_folds = [0] * len(positives)
    for rank, idx in enumerate(pos_perm):
        pos_folds[int(idx)] = rank % k
    neg_perm = rng.permutation(len(negatives))
    neg_folds = [0] * len(negatives)
    for rank, idx in enumerate(neg_perm):
        neg_folds[int(idx)] = rank % k

    return LinkDataset(list(positives), negatives, pos_folds, neg_folds, ratio, k)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


@dataclass
class DistanceTable:
    """Hop counts from one source, capped; UNREACHABLE marks cap overruns."""

    source: NodeRef
    cap: int
    dist: np.ndarray  # int32 per global node, UNREACHABLE where > cap

    def distance(self, ref, graph: HetGraph | None = None) -> int:
        if isinstance(ref, NodeRef):
            if graph is None:
                raise ValueError("need the graph to resolve a NodeRef")
            return int(self.dist[graph.global_of(ref)])
        return int(self.dist[ref])


def bfs_distance(
    graph: HetGraph,
    source: NodeRef,
    cap: int = DEFAULT_DISTANCE_CAP,
    excluded_edges: Iterable[tuple[NodeRef, int, NodeRef]] | None = None,
) -> DistanceTable:
    """Exact unweighted hop counts from ``source`` up to ``cap``.

    Nodes farther than ``cap`` (or disconnected) get UNREACHABLE.  Edges in
    ``excluded_edges`` (as (node, edge_type_id, node) triples) are not
    traversed, in either direction for undirected graphs.
    """
    s = graph.global_of(source)
    dist = np.full(graph.n_nodes, UNREACHABLE, dtype=np.int32)
    dist[s] = 0

    if excluded_edges:
        banned: set[tuple[int, int, int]] = set()
        for u, et, v in excluded_edges:
            a, b = graph.global_of(u), graph.global_of(v)
            banned.add((a, et, b))
            if not graph.directed:
                banned.add((b, et, a))
        indptr, nbr, etype = graph._indptr_list, graph._nbr_list, graph._etype_list
        queue = deque([s])
        while queue:
            u = queue.popleft()
            d = dist[u]
            if d >= cap:
                continue
            for j in range(indptr[u], indptr[u + 1]):
                v = nbr[j]
                if dist[v] != UNREACHABLE or (u, etype[j], v) in banned:
                    continue
                dist[v] = d + 1
                queue.append(v)
        return DistanceTable(source, cap, dist)

    # vectorized frontier expansion on the CSR arrays; once the frontier has
    # more out-edges than the undiscovered remainder, expand from the small
    # side instead (undirected graphs only)
    frontier = np.array([s], dtype=np.int64)
    indptr, nbr = graph.indptr, graph.nbr

    def out_edges(nodes):
        starts = indptr[nodes]
        counts = indptr[nodes + 1] - starts
        total = int(counts.sum())
        if total == 0:
            return None, None
        offsets = np.repeat(np.cumsum(counts) - counts, counts)
        flat = np.arange(total) - offsets + np.repeat(starts, counts)
        return nbr[flat], np.repeat(np.arange(nodes.size), counts)

    remaining = graph.n_nodes - 1
    frontier_edges = int(indptr[s + 1] - indptr[s])
    for d in range(1, cap + 1):
        if remaining == 0 or frontier_edges == 0:
            break
        undiscovered = np.flatnonzero(dist == UNREACHABLE)
        reverse = (
            not graph.directed
            and int((indptr[undiscovered + 1] - indptr[undiscovered]).sum())
            < frontier_edges
        )
        if reverse:
            neigh, owner = out_edges(undiscovered)
            if neigh is None:
                break
            hit = np.zeros(undiscovered.size, dtype=bool)
            hit[owner[dist[neigh] == d - 1]] = True
            fresh = undiscovered[hit]
        else:
            neigh, _ = out_edges(frontier)
            if neigh is None:
                break
            fresh = neigh[dist[neigh] == UNREACHABLE]
        if fresh.size == 0:
            break
        dist[fresh] = d
        frontier = np.flatnonzero(dist == d)
        remaining -= frontier.size
        frontier_edges = int((indptr[frontier + 1] - indptr[frontier]).sum())
    return DistanceTable(source, cap, dist)
