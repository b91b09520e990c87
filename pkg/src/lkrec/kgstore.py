"""Knowledge graph storage and per-news multi-hop neighbour extraction."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .numkit import InvariantError


@dataclass
class TripleGraph:
    """Undirected adjacency over entity ids plus the entity embedding table.

    ``adjacency[e]`` lists ``(relation_index, neighbour)`` pairs without
    duplicates, in first-seen order.
    """

    adjacency: dict[str, list[tuple[int, str]]] = field(default_factory=dict)
    relations: dict[str, int] = field(default_factory=dict)
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    def neighbors(self, entity: str) -> list[str]:
        seen: dict[str, None] = {}
        for _, n in self.adjacency.get(entity, ()):
            seen[n] = None
        return list(seen)

    @property
    def num_entities(self) -> int:
        return len(self.adjacency)

    @property
    def entity_dim(self) -> int | None:
        for v in self.embeddings.values():
            return int(v.shape[0])
        return None


def build_graph(triples: Iterable[tuple[str, str, str]], embeddings: dict[str, np.ndarray] | None = None) -> TripleGraph:
    g = TripleGraph(embeddings=dict(embeddings or {}))
    seen: set[tuple[str, int, str]] = set()
    for h, r, t in triples:
        rid = g.relations.setdefault(r, len(g.relations))
        for a, b in ((h, t), (t, h)):
            if (a, rid, b) in seen:
                continue
            seen.add((a, rid, b))
            g.adjacency.setdefault(a, []).append((rid, b))
    return g


@dataclass(frozen=True)
class HopSets:
    hops: tuple[tuple[str, ...], ...]

    def __len__(self) -> int:
        return len(self.hops)

    def __getitem__(self, k: int) -> tuple[str, ...]:
        return self.hops[k]


def stable_seed(*parts) -> int:
    """Process-independent 64-bit seed from arbitrary parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def hop_sets(graph: TripleGraph, sources: Iterable[str], n_hops: int, max_per_hop: int, seed: int) -> HopSets:
    """Breadth-first hop frontiers, each entity at its minimal hop.

    A frontier larger than ``max_per_hop`` is uniformly subsampled; only the
    kept entities are expanded for the next hop.  Entities lacking an
    embedding are neither kept nor expanded.
    """
    if n_hops < 1 or max_per_hop < 1:
        raise ValueError("n_hops and max_per_hop must be >= 1")
    src = [s for s in dict.fromkeys(sources) if s in graph.adjacency]
    rng = np.random.default_rng(seed)
    visited = set(src)
    frontier = src
    hops = []
    for _ in range(n_hops):
        nxt: dict[str, None] = {}
        for e in frontier:
            for n in graph.neighbors(e):
                if n not in visited and n in graph.embeddings:
                    nxt[n] = None
        layer = list(nxt)
        visited.update(layer)
        if len(layer) > max_per_hop:
            keep = np.sort(rng.choice(len(layer), size=max_per_hop, replace=False))
            layer = [layer[i] for i in keep]
        hops.append(tuple(layer))
        frontier = layer
    return HopSets(tuple(hops))


def gather_embeddings(graph: TripleGraph, hops: HopSets, dim: int | None = None) -> list[np.ndarray]:
    dim = dim if dim is not None else (graph.entity_dim or 0)
    out = []
    for hop in hops.hops:
        mat = np.zeros((len(hop), dim))
        for i, e in enumerate(hop):
            vec = graph.embeddings.get(e)
            if vec is None:
                raise InvariantError(f"entity {e!r} in hop set has no embedding")
            mat[i] = vec
        out.append(mat)
    return out
