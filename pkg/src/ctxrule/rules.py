"""Symbolic rules from per-query relation distributions, and their quality."""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph, ParseError, Triplet

MAX_LIVE_PATHS = 10_000


@dataclass(frozen=True)
class Rule:
    head_rel: int
    body: tuple[int, ...]
    confidence: float
    support: int = 1  # number of confidence observations

    def render(self, kg: KnowledgeGraph) -> str:
        return f"{kg.relation_name(self.head_rel)}(X,Y) <- " + ", ".join(
            kg.relation_name(r) for r in self.body)


@dataclass
class PathState:
    relations: tuple[int, ...]
    entities: tuple[int, ...]
    weight: float


def parse_rules(omegas, query: Triplet, kg: KnowledgeGraph, thr: float = 0.1,
                max_paths: int = MAX_LIVE_PATHS, return_paths: bool = False):
    """Walk the graph from the query head along relations whose max-scaled
    weight exceeds ``thr``; every surviving path yields ``(body, confidence)``.

    Self-loop atoms are stripped from bodies and paths that reduce to an empty
    body are dropped. Live paths are capped at ``max_paths``, keeping the
    highest-confidence ones.
    """
    if not 0 < thr <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    om = np.asarray(omegas, dtype=np.float64)
    paths = [PathState((), (query[0],), 1.0)]
    for w_t in om:
        scaled = w_t / w_t.max()
        picked = np.flatnonzero(scaled > thr)
        grown: list[PathState] = []
        for p in paths:
            last = p.entities[-1]
            for rel in picked:
                factor = float(scaled[rel])
                for n in kg.adjacency(int(rel)).row(last):
                    grown.append(PathState(p.relations + (int(rel),), p.entities + (int(n),),
                                           p.weight * factor))
        if len(grown) > max_paths:
            grown = heapq.nlargest(max_paths, grown, key=lambda s: s.weight)
        paths = grown
    if return_paths:
        return paths
    out = []
    for p in paths:
        body = tuple(r for r in p.relations if r != kg.self_loop)
        if body:
            out.append((body, p.weight))
    return out


class RuleTable:
    """Confidence observations per (head relation, body)."""

    def __init__(self):
        self.obs: dict[tuple[int, tuple[int, ...]], list[float]] = {}

    def add(self, head_rel: int, body: Sequence[int], confidence: float) -> None:
        self.obs.setdefault((head_rel, tuple(body)), []).append(confidence)

    def add_parsed(self, head_rel: int, parsed: Iterable[tuple[tuple[int, ...], float]]) -> None:
        for body, conf in parsed:
            self.add(head_rel, body, conf)

    def merge(self, other: "RuleTable") -> "RuleTable":
        for key, vals in other.obs.items():
            self.obs.setdefault(key, []).extend(vals)
        return self

    def __len__(self) -> int:
        return len(self.obs)


def aggregate(table: RuleTable) -> list[Rule]:
    """Mean confidence per rule, best first; ties go to more observations,
    then to the lexicographically smaller body."""
    rules = [Rule(h, body, float(np.mean(v)), len(v)) for (h, body), v in table.obs.items()]
    rules.sort(key=lambda r: (-r.confidence, -r.support, r.body, r.head_rel))
    return rules


def body_pairs(body: Sequence[int], kg: KnowledgeGraph) -> dict[int, set[int]]:
    """X -> every Y reachable along the body path."""
    out: dict[int, set[int]] = {}
    first = kg.adjacency(body[0])
    for x in range(kg.num_entities):
        frontier = set(first.row(x).tolist())
        for rel in body[1:]:
            if not frontier:
                break
            m = kg.adjacency(rel)
            nxt: set[int] = set()
            for u in frontier:
                nxt.update(m.row(u).tolist())
            frontier = nxt
        if frontier:
            out[x] = frontier
    return out


def standard_confidence(rule: Rule, kg: KnowledgeGraph) -> float | None:
    """Closed-world confidence; ``None`` when the body has no grounding."""
    if not rule.body:
        raise ValueError("rule body is empty")
    pairs = body_pairs(rule.body, kg)
    support = sum(len(ys) for ys in pairs.values())
    if support == 0:
        return None
    head = kg.adjacency(rule.head_rel)
    hits = sum(int(np.isin(head.row(x), list(ys)).sum()) for x, ys in pairs.items())
    return hits / support


def topk_average_sc(rules: Sequence[Rule], k: int, kg: KnowledgeGraph | None = None,
                    scores: Sequence[float | None] | None = None) -> float:
    """Mean standard confidence of the first ``k`` ranked rules whose score is defined."""
    if scores is None:
        if kg is None:
            raise ValueError("need the graph or precomputed scores")
        scores = [standard_confidence(r, kg) for r in rules]
    defined = [s for s in scores if s is not None][:k]
    if not defined:
        raise ValueError("no rule with a defined standard confidence")
    if len(defined) < k:
        warnings.warn(f"only {len(defined)} scored rules available for top-{k}", stacklevel=2)
    return float(np.mean(defined))


def write_rules(path: str | Path, rules: Iterable[Rule], kg: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rules:
            body = ",".join(kg.relation_name(b) for b in r.body)
            fh.write(f"{r.confidence:.6f}\t{kg.relation_name(r.head_rel)}\t{body}\n")


def read_rules(path: str | Path, kg: KnowledgeGraph) -> list[Rule]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[2]:
                raise ParseError(path, lineno, "expected confidence, head and body fields")
            try:
                conf = float(parts[0])
                head = kg.relation_id(parts[1])
                body = tuple(kg.relation_id(b) for b in parts[2].split(","))
            except (ValueError, KeyError) as exc:
                raise ParseError(path, lineno, str(exc)) from None
            out.append(Rule(head, body, conf))
    return out


def replay_path(path: PathState, kg: KnowledgeGraph) -> bool:
    """True if consecutive entities are linked by the path's relations."""
    return all((a, b) in kg.adjacency(r)
               for r, a, b in zip(path.relations, path.entities, path.entities[1:]))
