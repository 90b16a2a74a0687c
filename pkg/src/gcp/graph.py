"""Concept DAG: validation, topological order, degree-centrality weights."""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DuplicateId,
    GraphError,
    InvalidCardinality,
    MultipleOutputs,
    MultipleRoots,
    UnreachableNode,
)


@dataclass(frozen=True)
class NodeSpec:
    id: str
    name: str = ""
    cardinality: int = 0
    description: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "cardinality": self.cardinality,
            "description": self.description,
        }


@dataclass(frozen=True)
class ConceptGraph:
    nodes: tuple[NodeSpec, ...]
    edges: tuple[tuple[str, str], ...]
    topo_order: tuple[str, ...]
    root_id: str
    output_id: str
    _parents: Mapping[str, tuple[str, ...]] = field(repr=False, compare=False)
    _children: Mapping[str, tuple[str, ...]] = field(repr=False, compare=False)
    _by_id: Mapping[str, NodeSpec] = field(repr=False, compare=False)

    def node(self, node_id: str) -> NodeSpec:
        return self._by_id[node_id]

    def parents(self, node_id: str) -> tuple[str, ...]:
        """Parents in topological order (the concatenation order of inputs)."""
        return self._parents[node_id]

    def children(self, node_id: str) -> tuple[str, ...]:
        return self._children[node_id]

    def cardinality(self, node_id: str) -> int:
        return self.node(node_id).cardinality

    @property
    def non_root_ids(self) -> tuple[str, ...]:
        """Non-root nodes in topological order (concept nodes plus the output)."""
        return tuple(n for n in self.topo_order if n != self.root_id)

    @property
    def concept_ids(self) -> tuple[str, ...]:
        """Intermediate concept nodes (neither root nor output), topo order."""
        return tuple(n for n in self.non_root_ids if n != self.output_id)

    def topo_position(self, node_id: str) -> int:
        return self.topo_order.index(node_id)

    def descendants(self, node_ids: Iterable[str]) -> set[str]:
        out: set[str] = set()
        stack = list(node_ids)
        while stack:
            for c in self._children[stack.pop()]:
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out

    def to_spec(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
        }


def _topological_sort(ids: Sequence[str], edges: Sequence[tuple[str, str]]) -> list[str]:
    # Kahn's algorithm; ready nodes are released in declaration order so the
    # result is deterministic.
    rank = {n: i for i, n in enumerate(ids)}
    indeg = {n: 0 for n in ids}
    children: dict[str, list[str]] = {n: [] for n in ids}
    for p, c in edges:
        children[p].append(c)
        indeg[c] += 1
    ready = [(rank[n], n) for n in ids if indeg[n] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, n = heapq.heappop(ready)
        order.append(n)
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, (rank[c], c))
    if len(order) != len(ids):
        stuck = sorted(n for n in ids if n not in set(order))
        raise CycleDetected(f"cycle through nodes {stuck}")
    return order


def build_graph(spec: Mapping) -> ConceptGraph:
    """Validate a graph description ``{"nodes": [...], "edges": [[p, c], ...]}``."""
    raw_nodes = spec.get("nodes")
    if not raw_nodes:
        raise GraphError("graph spec has no nodes")
    nodes = []
    seen: set[str] = set()
    for raw in raw_nodes:
        if isinstance(raw, NodeSpec):
            node = raw
        else:
            node = NodeSpec(
                id=str(raw["id"]),
                name=str(raw.get("name", raw["id"])),
                cardinality=int(raw.get("cardinality", 0)),
                description=str(raw.get("description", "")),
            )
        if node.id in seen:
            raise DuplicateId(f"duplicate node id {node.id!r}")
        seen.add(node.id)
        nodes.append(node)

    edges = []
    for e in spec.get("edges", []):
        p, c = str(e[0]), str(e[1])
        for n in (p, c):
            if n not in seen:
                raise GraphError(f"edge references unknown node {n!r}")
        if p == c:
            raise CycleDetected(f"self-loop on {p!r}")
        if (p, c) in edges:
            raise GraphError(f"duplicate edge {p!r}->{c!r}")
        edges.append((p, c))

    ids = [n.id for n in nodes]
    order = _topological_sort(ids, edges)

    parents = {n: [] for n in ids}
    children = {n: [] for n in ids}
    for p, c in edges:
        parents[c].append(p)
        children[p].append(c)
    roots = [n for n in ids if not parents[n]]
    sinks = [n for n in ids if not children[n]]
    if len(roots) != 1:
        raise MultipleRoots(f"expected exactly one root, found {roots}")
    if len(sinks) != 1:
        raise MultipleOutputs(f"expected exactly one output node, found {sinks}")
    root, out = roots[0], sinks[0]
    if root == out:
        raise GraphError("graph needs at least an input node and an output node")

    # With a single source and a single sink in a DAG every node already lies on
    # a root->output path; the reachability check guards the message.
    reach = {root}
    for n in order:
        if n in reach:
            reach.update(children[n])
    unreachable = [n for n in ids if n not in reach]
    if unreachable:
        raise UnreachableNode(f"nodes not reachable from root: {unreachable}")

    pos = {n: i for i, n in enumerate(order)}
    fixed = []
    for node in nodes:
        if node.id == root:
            if node.cardinality not in (0,):
                node = NodeSpec(node.id, node.name, 0, node.description)
        elif node.cardinality < 2:
            raise InvalidCardinality(
                f"node {node.id!r} needs cardinality >= 2, got {node.cardinality}"
            )
        fixed.append(node)

    return ConceptGraph(
        nodes=tuple(fixed),
        edges=tuple(edges),
        topo_order=tuple(order),
        root_id=root,
        output_id=out,
        _parents={n: tuple(sorted(parents[n], key=pos.__getitem__)) for n in ids},
        _children={n: tuple(sorted(children[n], key=pos.__getitem__)) for n in ids},
        _by_id={n.id: n for n in fixed},
    )


def load_graph(path: str | Path) -> ConceptGraph:
    with open(path) as fh:
        return build_graph(json.load(fh))


def save_graph(graph: ConceptGraph, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(graph.to_spec(), fh, indent=2)


def degree_weights(graph: ConceptGraph, exclude_root: bool = False) -> dict[str, float]:
    """Degree-centrality weights deg(i) / sum_j deg(j), deg = in + out degree.

    With ``exclude_root`` the root is dropped and the remaining weights are
    renormalized, which is what the acquisition scores use.
    """
    deg = {n.id: 0 for n in graph.nodes}
    for p, c in graph.edges:
        deg[p] += 1
        deg[c] += 1
    if exclude_root:
        del deg[graph.root_id]
    ids = [n for n in graph.topo_order if n in deg]
    values = np.array([deg[n] for n in ids], dtype=np.float64)
    values /= values.sum()
    return dict(zip(ids, values.tolist()))


def chain_graph(cardinalities: Sequence[int]) -> ConceptGraph:
    """root -> n1 -> n2 -> ... ; handy for tests and examples."""
    ids = ["root"] + [f"n{i}" for i in range(1, len(cardinalities) + 1)]
    nodes = [{"id": "root", "cardinality": 0}]
    nodes += [{"id": i, "cardinality": int(d)} for i, d in zip(ids[1:], cardinalities)]
    edges = [[a, b] for a, b in zip(ids[:-1], ids[1:])]
    return build_graph({"nodes": nodes, "edges": edges})


def random_graph(
    n_nodes: int,
    rng: np.random.Generator,
    max_parents: int = 3,
    max_cardinality: int = 3,
    root_edge_prob: float = 0.5,
) -> ConceptGraph:
    """Random valid concept DAG with ``n_nodes`` nodes (root and output included)."""
    if n_nodes < 2:
        raise GraphError("need at least two nodes")
    ids = ["root"] + [f"c{i}" for i in range(1, n_nodes - 1)] + ["out"]
    edges: set[tuple[str, str]] = set()
    for j in range(1, n_nodes):
        k = int(rng.integers(1, min(max_parents, j) + 1))
        for p in rng.choice(j, size=k, replace=False):
            edges.add((ids[int(p)], ids[j]))
        if j < n_nodes - 1 and rng.random() < root_edge_prob:
            edges.add(("root", ids[j]))
    # every non-output node needs a child; wire childless ones forward
    for i in range(n_nodes - 1):
        if not any(p == ids[i] for p, _ in edges):
            c = int(rng.integers(i + 1, n_nodes))
            edges.add((ids[i], ids[c]))
    nodes = [{"id": "root", "cardinality": 0}] + [
        {"id": i, "cardinality": int(rng.integers(2, max_cardinality + 1))} for i in ids[1:]
    ]
    order = {n: i for i, n in enumerate(ids)}
    return build_graph(
        {"nodes": nodes, "edges": sorted(edges, key=lambda e: (order[e[1]], order[e[0]]))}
    )
