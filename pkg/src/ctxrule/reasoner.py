"""Differentiable path reasoning over relation adjacency and the training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .kg import KnowledgeGraph, Triplet
from .numerics import hstack, spvm
from .subgraph import SubgraphCaps, extract_subgraph, to_node_sequence

GAMMA = 1e-20
# above this many floats the stacked per-relation product is split per relation
_STACK_LIMIT = 20_000_000


class RelationOperators:
    """All augmented relation matrices of a graph, self-loop last."""

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg
        self.n = kg.num_entities
        self.count = kg.num_relations
        self._stacked = hstack([kg.adjacency(r) for r in range(kg.num_relations - 1)])

    def masks_for(self, queries: Sequence[Triplet]) -> torch.Tensor:
        """Rows ``(batch, rel, row, col)`` for stored cells hidden by each query."""
        rows = []
        for b, q in enumerate(queries):
            for rel, i, j in self.kg.masked_cells(q):
                if (i, j) in self.kg.adjacency(rel):
                    rows.append((b, rel, i, j))
        return torch.tensor(rows, dtype=torch.long).reshape(-1, 4)

    def apply_all(self, z: torch.Tensor, masks: torch.Tensor | None = None) -> torch.Tensor:
        """``(b, A, n)`` per-relation products ``z M_r`` (never mixed)."""
        b = z.shape[0]
        per = spvm(z, self._stacked).view(b, self.count - 1, self.n)
        out = torch.cat([per, z.unsqueeze(1)], dim=1)
        if masks is not None and masks.numel():
            bi, ri, ii, ji = masks.unbind(1)
            out = out.index_put((bi, ri, ji), -z[bi, ii], accumulate=True)
        return out


def reasoning_step(z_prev: torch.Tensor, omega: torch.Tensor, ops: RelationOperators,
                   masks: torch.Tensor | None = None) -> torch.Tensor:
    """``z_t = sum_i omega_i (z_{t-1} M_i)`` for a single vector or a batch."""
    squeeze = z_prev.dim() == 1
    if squeeze:
        z_prev, omega = z_prev.unsqueeze(0), omega.unsqueeze(0)
    if z_prev.shape[-1] != ops.n or omega.shape[-1] != ops.count:
        raise ValueError("state or distribution size does not match the graph")
    b = z_prev.shape[0]
    if b * ops.count * ops.n <= _STACK_LIMIT:
        out = torch.einsum("ba,ban->bn", omega, ops.apply_all(z_prev, masks))
    else:
        out = omega[:, -1:] * z_prev
        for r in range(ops.count - 1):
            part = spvm(z_prev, ops.kg.adjacency(r))
            if masks is not None and masks.numel():
                sel = masks[masks[:, 1] == r]
                if sel.numel():
                    part = part.index_put((sel[:, 0], sel[:, 3]), -z_prev[sel[:, 0], sel[:, 2]],
                                          accumulate=True)
            out = out + omega[:, r:r + 1] * part
    return out.squeeze(0) if squeeze else out


def one_hot(heads: torch.Tensor, n: int, dtype=torch.float32) -> torch.Tensor:
    z = torch.zeros(heads.shape[0], n, dtype=dtype)
    z[torch.arange(heads.shape[0]), heads] = 1.0
    return z


def chain(ops: RelationOperators, heads: torch.Tensor, omegas: torch.Tensor,
          masks: torch.Tensor | None = None) -> torch.Tensor:
    """Run every step of ``omegas`` ``(b, T, A)`` from one-hot heads; returns ``z_T``."""
    z = one_hot(heads, ops.n, omegas.dtype)
    for t in range(omegas.shape[1]):
        z = reasoning_step(z, omegas[:, t], ops, masks)
    return z


def score(z_T: torch.Tensor, target, gamma: float = GAMMA) -> torch.Tensor:
    """``log(max(z_T[target], gamma))``; batched when ``target`` is a tensor."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if z_T.dim() == 1:
        val = z_T[target]
    else:
        val = z_T.gather(1, torch.as_tensor(target).view(-1, 1)).squeeze(1)
    return torch.log(torch.clamp(val, min=gamma))


# -- batching ----------------------------------------------------------------


@dataclass
class QueryBatch:
    queries: list[Triplet]       # (head, augmented relation, target)
    tokens: torch.Tensor
    distances: torch.Tensor
    mask: torch.Tensor
    edges: torch.Tensor          # (m, 4): batch, src pos, augmented rel, dst pos
    head_rel: torch.Tensor
    heads: torch.Tensor
    targets: torch.Tensor
    cell_masks: torch.Tensor | None

    def __len__(self) -> int:
        return len(self.queries)


def both_directions(kg: KnowledgeGraph, triples: Sequence[Triplet]) -> list[Triplet]:
    out = []
    for h, r, t in triples:
        out.append(Triplet(h, r, t))
        out.append(Triplet(t, kg.inverse(r), h))
    return out


def make_batch(kg: KnowledgeGraph, queries: Sequence[Triplet], caps: SubgraphCaps,
               ops: RelationOperators | None = None, masked: bool = False,
               seeds: Sequence | None = None) -> QueryBatch:
    """Extract, linearise and pad the context of each query head."""
    subs = []
    for k, q in enumerate(queries):
        seed = seeds[k] if seeds is not None else k
        subs.append(extract_subgraph(kg, q[0], caps, q if masked else None, seed))
    seq_len = max(len(s) for s in subs)
    seqs = [to_node_sequence(s, seq_len) for s in subs]
    nb = kg.num_base
    edge_rows = []
    for b, s in enumerate(subs):
        if len(s.edges):
            i, r, j = s.edges.T
            bb = np.full(i.size, b)
            edge_rows.append(np.stack([bb, i, r, j], 1))
            edge_rows.append(np.stack([bb, j, r + nb, i], 1))
    edges = np.concatenate(edge_rows) if edge_rows else np.zeros((0, 4), dtype=np.int64)
    cell_masks = None
    if masked:
        ops = ops or RelationOperators(kg)
        cell_masks = ops.masks_for(queries)
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    return QueryBatch(
        queries=[Triplet(*map(int, x)) for x in q],
        tokens=torch.from_numpy(np.stack([s.tokens for s in seqs])),
        distances=torch.from_numpy(np.stack([s.distances for s in seqs])),
        mask=torch.from_numpy(np.stack([s.mask for s in seqs])),
        edges=torch.from_numpy(edges.astype(np.int64)),
        head_rel=torch.from_numpy(q[:, 1].copy()),
        heads=torch.from_numpy(q[:, 0].copy()),
        targets=torch.from_numpy(q[:, 2].copy()),
        cell_masks=cell_masks,
    )


def batch_forward(model, ops: RelationOperators, batch: QueryBatch, steps: int):
    """Returns (z_T, omegas, chosen) for a prepared batch."""
    omegas, chosen = model(batch, steps)
    z = chain(ops, batch.heads, omegas, batch.cell_masks)
    return z, omegas, chosen


def batch_loss(queries: Sequence[Triplet], kg: KnowledgeGraph, model, steps: int,
               caps: SubgraphCaps, ops: RelationOperators | None = None, seeds=None,
               gamma: float = GAMMA) -> torch.Tensor:
    """Negative summed log score over the queries and their inverse direction,
    with each query's own edge hidden from context and reasoning."""
    ops = ops or RelationOperators(kg)
    expanded = both_directions(kg, queries)
    batch = make_batch(kg, expanded, caps, ops, masked=True, seeds=seeds)
    return loss_on(batch, model, ops, steps, gamma)


def loss_on(batch: QueryBatch, model, ops: RelationOperators, steps: int,
            gamma: float = GAMMA) -> torch.Tensor:
    z, _, _ = batch_forward(model, ops, batch, steps)
    return -score(z, batch.targets, gamma).sum()


@torch.no_grad()
def predict_all(head: int, rel: int, kg: KnowledgeGraph, model, steps: int,
                caps: SubgraphCaps, ops: RelationOperators | None = None, seed=0) -> torch.Tensor:
    """Scores for every entity as the answer to ``(head, rel, ?)``."""
    ops = ops or RelationOperators(kg)
    batch = make_batch(kg, [Triplet(head, rel, head)], caps, ops, seeds=[seed])
    z, _, _ = batch_forward(model, ops, batch, steps)
    return z[0]

