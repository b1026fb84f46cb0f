"""Capped k-hop neighbourhoods and their padded node sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph, Triplet

BLANK = -1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SubgraphCaps:
    max_context_entities: int = 140
    max_neighbors_per_relation: int = 40
    hops: int = 3

    def __post_init__(self):
        if min(self.max_context_entities, self.max_neighbors_per_relation, self.hops) < 1:
            raise ConfigError("subgraph caps must be positive")


# (max_context_entities, max_neighbors_per_relation, hops); None hops = rule length
DATASET_CAPS = {
    "umls": (140, 40, None),
    "fb15k-237": (70, 40, 1),
    "wn18rr": (40, 10, 2),
}


def caps_for(dataset: str, rule_length: int) -> SubgraphCaps:
    ctx, nbr, hops = DATASET_CAPS.get(dataset.lower(), (140, 40, None))
    return SubgraphCaps(ctx, nbr, rule_length if hops is None else hops)


@dataclass
class Subgraph:
    nodes: np.ndarray      # entity ids, head first, discovery order
    distance: np.ndarray   # hop count per node
    edges: np.ndarray      # (m, 3) rows of (src index, base relation, dst index)

    def __len__(self) -> int:
        return int(self.nodes.size)


@dataclass
class NodeSequence:
    tokens: np.ndarray     # entity id or BLANK
    distances: np.ndarray  # hop label, BLANK where padded
    mask: np.ndarray       # True on real tokens


def _seed(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def extract_subgraph(kg: KnowledgeGraph, head: int, caps: SubgraphCaps,
                     query_mask: Triplet | None = None, seed=0) -> Subgraph:
    """Breadth-first neighbourhood of ``head`` under the per-relation and total caps.

    Both stored and inverse directions are traversed. A relation fanning out
    to more than ``max_neighbors_per_relation`` nodes from one source is
    subsampled uniformly; when the total cap cuts a frontier, a uniform subset
    of the newly discovered nodes fills the remaining slots.
    """
    if not 0 <= head < kg.num_entities:
        raise IndexError(f"head {head} outside entity vocabulary")
    rng = _seed(seed)
    cap = caps.max_neighbors_per_relation
    nb = kg.num_base
    mh = mr = mt = -1
    if query_mask is not None:
        mh, mr, mt = query_mask
        if mr >= nb and mr != kg.self_loop:  # normalise to the stored direction
            mh, mr, mt = mt, mr - nb, mh

    visited = np.zeros(kg.num_entities, dtype=bool)
    visited[head] = True
    nodes, dist = [np.array([head])], [np.array([0])]
    total = 1
    frontier = np.array([head])
    for hop in range(1, caps.hops + 1):
        if total >= caps.max_context_entities or frontier.size == 0:
            break
        starts, stops = kg.out_ptr[frontier], kg.out_ptr[frontier + 1]
        lens = stops - starts
        if lens.sum() == 0:
            break
        idx = np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
        src, rel, dst = kg.out_src[idx], kg.out_rel[idx], kg.out_dst[idx]
        if query_mask is not None:
            keep = ~(((src == mh) & (rel == mr) & (dst == mt))
                     | ((src == mt) & (rel == mr + nb) & (dst == mh)))
            src, rel, dst = src[keep], rel[keep], dst[keep]
        # per (source, relation) fan-out cap
        group = src * kg.num_relations + rel
        bounds = np.flatnonzero(np.diff(group)) + 1
        gstart = np.concatenate([[0], bounds])
        gsize = np.diff(np.concatenate([gstart, [group.size]]))
        if gsize.size and gsize.max() > cap:
            keep = np.ones(group.size, dtype=bool)
            for s, n in zip(gstart[gsize > cap], gsize[gsize > cap]):
                drop = rng.choice(n, size=n - cap, replace=False)
                keep[s + drop] = False
            dst = dst[keep]
        fresh = dst[~visited[dst]]
        _, first = np.unique(fresh, return_index=True)
        fresh = fresh[np.sort(first)]
        room = caps.max_context_entities - total
        if fresh.size > room:
            pick = np.sort(rng.choice(fresh.size, size=room, replace=False))
            fresh = fresh[pick]
        visited[fresh] = True
        nodes.append(fresh)
        dist.append(np.full(fresh.size, hop))
        total += fresh.size
        frontier = fresh

    nodes_arr = np.concatenate(nodes)
    pos = np.full(kg.num_entities, -1, dtype=np.int64)
    pos[nodes_arr] = np.arange(nodes_arr.size)
    h, r, t = kg.base_edges.T
    sel = (pos[h] >= 0) & (pos[t] >= 0)
    if query_mask is not None:
        sel &= ~((h == mh) & (r == mr) & (t == mt))
    edges = np.stack([pos[h[sel]], r[sel], pos[t[sel]]], axis=1)
    return Subgraph(nodes_arr, np.concatenate(dist), edges.reshape(-1, 3))


def to_node_sequence(sub: Subgraph, seq_len: int) -> NodeSequence:
    n = len(sub)
    if n > seq_len:
        raise ConfigError(f"subgraph has {n} nodes but the sequence holds {seq_len}")
    tokens = np.full(seq_len, BLANK, dtype=np.int64)
    distances = np.full(seq_len, BLANK, dtype=np.int64)
    tokens[:n] = sub.nodes
    distances[:n] = sub.distance
    return NodeSequence(tokens, distances, tokens != BLANK)
