"""Relational-attention encoder and the relation-emitting decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .kg import KnowledgeGraph
from .numerics import ConstantSparse, NonFiniteError, check_finite, dropout, softmax


class DistributionError(AssertionError):
    pass


class _Counter:
    def __init__(self):
        self.value = 0


# every check_distribution call bumps this; acceptance runs assert it moved
DISTRIBUTION_CHECKS = _Counter()


def check_distribution(w: torch.Tensor, atol: float = 1e-6) -> torch.Tensor:
    """Assert each row of ``w`` is nonnegative and sums to one within ``atol``."""
    DISTRIBUTION_CHECKS.value += 1
    if not torch.isfinite(w).all():
        raise NonFiniteError("relation distribution has non-finite entries")
    if (w < 0).any():
        raise DistributionError("relation distribution has negative entries")
    err = (w.sum(dim=-1) - 1.0).abs().max().item() if w.numel() else 0.0
    if err > atol:
        raise DistributionError(f"relation distribution sums off by {err:.3g}")
    return w


@dataclass(frozen=True)
class ModelConfig:
    num_entities: int
    num_base_relations: int
    dim: int = 200
    heads: int = 4
    layers: int = 2
    max_hops: int = 3
    max_steps: int = 3
    dropout: float = 0.1
    ffn_mult: int = 2

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def num_relations(self) -> int:
        return 2 * self.num_base_relations + 1

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def type_weights(counts: np.ndarray) -> np.ndarray:
    """Row-normalise relation counts; rows without edges stay zero."""
    total = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, total, out=np.zeros_like(counts, dtype=np.float64), where=total > 0)


class RelationIncidence:
    """Edges of a padded batch as a constant sparse map between
    ``(batch, i, j)`` pairs and ``(batch, i, relation)`` slots."""

    def __init__(self, edges: torch.Tensor, batch: int, length: int, num_relations: int,
                 dtype: torch.dtype):
        b, i, r, j = edges.unbind(1)
        rows = (b * length + i) * length + j
        cols = (b * length + i) * num_relations + r
        self.shape = (batch, length, num_relations)
        self.op = ConstantSparse(rows, cols, (batch * length * length, batch * length * num_relations),
                                 dtype)


class Attention(nn.Module):
    """Multi-head attention; in self-attention mode edges add relation terms.

    For an edge ``(i, r, j)`` the key of ``j`` seen from ``i`` gains
    ``x_r W_K'`` and the value gains ``x_r W_V'``. Both are folded in through
    the query/relation products, so no per-pair vector is materialised.
    """

    def __init__(self, dim: int, heads: int, p: float, relational: bool = False):
        super().__init__()
        self.heads, self.dk, self.p = heads, dim // heads, p
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim)
        self.relational = relational
        if relational:
            self.wk_rel = nn.Linear(dim, dim, bias=False)
            self.wv_rel = nn.Linear(dim, dim, bias=False)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.dk).transpose(1, 2)

    def forward(self, x, memory=None, key_mask=None, causal=False, incidence=None, rel_table=None):
        mem = x if memory is None else memory
        q, k, v = self._split(self.wq(x)), self._split(self.wk(mem)), self._split(self.wv(mem))
        scores = q @ k.transpose(-1, -2)
        b, h, lq, lk = scores.shape
        use_rel = self.relational and incidence is not None
        if use_rel:
            nrel = rel_table.shape[0]
            kr = self.wk_rel(rel_table).view(nrel, h, self.dk)
            qr = torch.einsum("bhld,rhd->blrh", q, kr).reshape(-1, h)
            extra = incidence.op.mm(qr).view(b, lq, lk, h)
            scores = scores + extra.permute(0, 3, 1, 2)
        scores = scores / math.sqrt(self.dk)
        mask = None
        if key_mask is not None:
            mask = key_mask[:, None, None, :]
        if causal:
            tri = torch.ones(lq, lk, dtype=torch.bool, device=x.device).tril()
            mask = tri if mask is None else mask & tri
        if mask is not None:
            mask = mask.expand(b, h, lq, lk)
            if not mask.any(-1).all():
                raise ValueError("attention row with every key masked")
        alpha = dropout(softmax(scores, mask=mask), self.p, self.training)
        z = alpha @ v
        if use_rel:
            w = incidence.op.tmm(alpha.permute(0, 2, 3, 1).reshape(-1, h)).view(b, lq, nrel, h)
            vr = self.wv_rel(rel_table).view(nrel, h, self.dk)
            z = z + torch.einsum("blrh,rhd->bhld", w, vr)
        z = z.transpose(1, 2).reshape(b, lq, h * self.dk)
        return self.wo(z)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, p: float):
        super().__init__()
        self.l1, self.l2, self.p = nn.Linear(dim, hidden), nn.Linear(hidden, dim), p

    def forward(self, x):
        return self.l2(dropout(nn.functional.gelu(self.l1(x)), self.p, self.training))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.attn = Attention(d, cfg.heads, cfg.dropout, relational=True)
        self.ffn = FeedForward(d, cfg.ffn_mult * d, cfg.dropout)
        self.norm1, self.norm2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.p = cfg.dropout

    def forward(self, x, mask, incidence, rel_table):
        x = self.norm1(x + dropout(self.attn(x, key_mask=mask, incidence=incidence, rel_table=rel_table),
                                   self.p, self.training))
        return self.norm2(x + dropout(self.ffn(x), self.p, self.training))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.self_attn = Attention(d, cfg.heads, cfg.dropout)
        self.cross_attn = Attention(d, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(d, cfg.ffn_mult * d, cfg.dropout)
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.p = cfg.dropout

    def forward(self, y, context, ctx_mask):
        y = self.norm1(y + dropout(self.self_attn(y, causal=True), self.p, self.training))
        y = self.norm2(y + dropout(self.cross_attn(y, memory=context, key_mask=ctx_mask),
                                   self.p, self.training))
        return self.norm3(y + dropout(self.ffn(y), self.p, self.training))


class RuleModel(nn.Module):
    """Encoder over a head's context plus a decoder emitting one relation
    distribution per reasoning step."""

    def __init__(self, cfg: ModelConfig, dom_weights: np.ndarray, ran_weights: np.ndarray):
        super().__init__()
        self.cfg = cfg
        d, ne, nb, na = cfg.dim, cfg.num_entities, cfg.num_base_relations, cfg.num_relations
        # one extra row per table for BLANK
        self.entity = nn.Parameter(torch.randn(ne + 1, d) * d ** -0.5)
        self.domain = nn.Parameter(torch.randn(nb, d) * d ** -0.5)
        self.range = nn.Parameter(torch.randn(nb, d) * d ** -0.5)
        self.relation = nn.Parameter(torch.randn(na, d) * d ** -0.5)
        self.position = nn.Parameter(torch.randn(cfg.max_hops + 2, d) * d ** -0.5)
        self.step = nn.Parameter(torch.randn(cfg.max_steps + 1, d) * d ** -0.5)
        pad = np.zeros((1, nb))
        self.register_buffer("b_dom", torch.tensor(np.vstack([dom_weights, pad]), dtype=torch.float32))
        self.register_buffer("b_ran", torch.tensor(np.vstack([ran_weights, pad]), dtype=torch.float32))
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.mlp_hidden = nn.Linear(d, d)
        self.mlp_out = nn.Linear(d, na)

    @classmethod
    def for_graph(cls, kg: KnowledgeGraph, **kwargs) -> "RuleModel":
        cfg = ModelConfig(kg.num_entities, kg.num_base, **kwargs)
        return cls(cfg, type_weights(kg.dom_counts), type_weights(kg.ran_counts))

    # -- encoder -------------------------------------------------------------

    def embed_entity(self, ids: torch.Tensor) -> torch.Tensor:
        """Free embedding plus count-weighted domain and range type embeddings."""
        ids = torch.where(ids < 0, torch.full_like(ids, self.cfg.num_entities), ids)
        return self.b_dom[ids] @ self.domain + self.b_ran[ids] @ self.range + self.entity[ids]

    def encode(self, tokens, distances, mask, edges, rel_table=None):
        """Contextualise a padded node batch.

        ``edges`` rows are ``(batch, src, augmented relation, dst)`` over
        sequence positions. ``rel_table`` overrides the relation embeddings
        fed to the attention terms.
        """
        blank_pos = self.cfg.max_hops + 1
        pos = torch.where(distances < 0, torch.full_like(distances, blank_pos), distances)
        x = self.embed_entity(tokens) + self.position[pos]
        rel_table = self.relation if rel_table is None else rel_table
        incidence = None
        if edges is not None and edges.numel():
            b, n = tokens.shape
            incidence = RelationIncidence(edges, b, n, rel_table.shape[0], x.dtype)
        for layer in self.encoder:
            x = layer(x, mask, incidence, rel_table)
        return x

    # -- decoder -------------------------------------------------------------

    def decode_logits(self, rule_seq, context, ctx_mask):
        steps = rule_seq.shape[1]
        y = self.relation[rule_seq] + self.step[:steps]
        for layer in self.decoder:
            y = layer(y, context, ctx_mask)
        hidden = dropout(nn.functional.gelu(self.mlp_hidden(y[:, -1])), self.cfg.dropout, self.training)
        return self.mlp_out(hidden)

    def decode_step(self, rule_seq, context, ctx_mask):
        """Distribution over augmented relations for the next rule atom."""
        omega = softmax(check_finite(self.decode_logits(rule_seq, context, ctx_mask), "logits"))
        return check_distribution(omega)

    def unroll(self, head_rel, context, ctx_mask, steps: int):
        """Greedy decoding; returns (omegas ``(b, steps, A)``, chosen ``(b, steps)``).

        The argmax choice takes the lowest relation id on ties.
        """
        if steps < 1:
            raise ValueError("need at least one reasoning step")
        seq = head_rel.view(-1, 1)
        omegas, chosen = [], []
        for _ in range(steps):
            omega = self.decode_step(seq, context, ctx_mask)
            nxt = torch.argmax(omega, dim=-1)
            omegas.append(omega)
            chosen.append(nxt)
            seq = torch.cat([seq, nxt.view(-1, 1)], dim=1)
        return torch.stack(omegas, 1), torch.stack(chosen, 1)

    def forward(self, batch, steps: int):
        context = self.encode(batch.tokens, batch.distances, batch.mask, batch.edges)
        return self.unroll(batch.head_rel, context, batch.mask, steps)

    def arch(self) -> dict:
        return self.cfg.as_dict()
