"""Filtered link-prediction ranking with random placement among ties."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph, Triplet


@dataclass(frozen=True)
class RankResult:
    query: Triplet
    rank: int


def filtered_rank(scores, target: int, known_answers: Iterable[int], seed=0) -> int:
    """Rank of ``target`` after dropping the other known answers.

    The target lands uniformly at random among the candidates sharing its
    score: ``1 + #better + U{0..#tied}``.
    """
    s = np.asarray(scores, dtype=np.float64)
    keep = np.ones(s.size, dtype=bool)
    known = np.fromiter((k for k in known_answers if k != target), dtype=np.int64)
    keep[known] = False
    keep[target] = False
    cand = s[keep]
    t = s[target]
    higher = int((cand > t).sum())
    ties = int((cand == t).sum())
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return 1 + higher + int(rng.integers(0, ties + 1))


def metrics(ranks: Sequence[RankResult | int]) -> dict[str, float]:
    if not ranks:
        raise ValueError("no ranks to summarise")
    r = np.array([x.rank if isinstance(x, RankResult) else x for x in ranks], dtype=np.float64)
    return {
        "MRR": float(np.mean(1.0 / r)),
        "Hits@1": float(np.mean(r <= 1)),
        "Hits@3": float(np.mean(r <= 3)),
        "Hits@10": float(np.mean(r <= 10)),
    }


def query_seed(base: int, index: int) -> np.random.Generator:
    return np.random.default_rng([base, index])


def rank_queries(kg: KnowledgeGraph, queries: Sequence[Triplet], score_rows, seed: int = 0,
                 offset: int = 0) -> list[RankResult]:
    """Rank each query's target in its score row (both arrays aligned)."""
    answers = kg.known_answers()
    out = []
    for k, (q, row) in enumerate(zip(queries, score_rows)):
        h, r, t = q
        rank = filtered_rank(row, t, answers.get((h, r), ()), query_seed(seed, offset + k))
        out.append(RankResult(Triplet(*q), rank))
    return out


def write_ranks(path: str | Path, kg: KnowledgeGraph, ranks: Sequence[RankResult]) -> None:
    ents = kg.entities.tokens
    with open(path, "w", encoding="utf-8") as fh:
        for res in ranks:
            h, r, t = res.query
            fh.write(f"{ents[h]}\t{kg.relation_name(r)}\t{ents[t]}\t{res.rank}\n")


def read_ranks(path: str | Path) -> list[tuple[str, str, str, int]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            h, r, t, k = line.split("\t")
            out.append((h, r, t, int(k)))
    return out


def write_metrics(path: str | Path, values: dict[str, float]) -> None:
    Path(path).write_text("".join(f"{k}={v:.6f}\n" for k, v in values.items()), encoding="utf-8")
