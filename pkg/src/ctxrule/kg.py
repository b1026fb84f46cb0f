"""Triple files, vocabularies and the augmented relation adjacency."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .numerics import SparseRelationMatrix

INVERSE_PREFIX = "inv_"
SELF_LOOP_NAME = "self_loop"

BUNDLED = Path(__file__).parent / "data"


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class Triplet(NamedTuple):
    head: int
    rel: int
    tail: int


class Vocab:
    """Insertion-ordered string <-> id mapping."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = []
        self.ids: dict[str, int] = {}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self.ids.get(token)
        if idx is None:
            idx = self.ids[token] = len(self.tokens)
            self.tokens.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.ids[token]

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def dump(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.split("\n") if line)


@dataclass
class TripletList:
    triplets: list[Triplet]
    entities: Vocab
    relations: Vocab
    # ids first registered by this split (not seen in any earlier split)
    new_entities: set[int] = field(default_factory=set)
    new_relations: set[int] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)


def load_split(path: str | Path, entities: Vocab | None = None,
               relations: Vocab | None = None) -> TripletList:
    """Read a ``head<TAB>relation<TAB>tail`` file, extending the given vocabularies."""
    entities = Vocab() if entities is None else entities
    relations = Vocab() if relations is None else relations
    n_ent, n_rel = len(entities), len(relations)
    out: list[Triplet] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            out.append(Triplet(entities.add(h), relations.add(r), entities.add(t)))
    return TripletList(out, entities, relations,
                       set(range(n_ent, len(entities))), set(range(n_rel, len(relations))))


@dataclass(frozen=True)
class DatasetStats:
    triplet_count: int
    entity_count: int
    relation_count: int

    @property
    def avg_degree(self) -> float:
        return 2.0 * self.triplet_count / self.entity_count if self.entity_count else 0.0


class KnowledgeGraph:
    """Immutable triple store over train adjacency.

    Relation ids are laid out as ``[r_1..r_R, inv r_1..inv r_R, self_loop]``.
    """

    def __init__(self, entities: Vocab, relations: Vocab, train: list[Triplet],
                 valid: list[Triplet] = (), test: list[Triplet] = (),
                 unseen_entities: Iterable[int] = ()):
        self.entities = entities
        self.relations = relations
        self.train = list(train)
        self.valid = list(valid)
        self.test = list(test)
        self.unseen_entities = frozenset(unseen_entities)
        self.num_entities = len(entities)
        self.num_base = len(relations)
        self.num_relations = 2 * self.num_base + 1
        self.self_loop = 2 * self.num_base

        n, nb = self.num_entities, self.num_base
        arr = np.array(self.train, dtype=np.int64).reshape(-1, 3)
        h, r, t = arr[:, 0], arr[:, 1], arr[:, 2]
        if arr.size:
            if h.min() < 0 or t.min() < 0 or max(h.max(), t.max()) >= n:
                raise IndexError("entity id outside vocabulary")
            if r.min() < 0 or r.max() >= nb:
                raise IndexError("relation id outside vocabulary")
        self.base_edges = arr
        mats = []
        for rel in range(nb):
            sel = r == rel
            mats.append(SparseRelationMatrix.from_pairs(n, h[sel], t[sel]))
        mats += [m.transpose() for m in mats]
        mats.append(SparseRelationMatrix.identity(n))
        self._adj = tuple(mats)

        # augmented out-edges grouped by source then relation (self-loop excluded)
        src = np.concatenate([h, t])
        rel = np.concatenate([r, r + nb])
        dst = np.concatenate([t, h])
        order = np.lexsort((dst, rel, src))
        self.out_src, self.out_rel, self.out_dst = src[order], rel[order], dst[order]
        self.out_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=self.out_ptr[1:])

        self.dom_counts = np.zeros((n, nb), dtype=np.float64)
        self.ran_counts = np.zeros((n, nb), dtype=np.float64)
        np.add.at(self.dom_counts, (h, r), 1.0)
        np.add.at(self.ran_counts, (t, r), 1.0)
        self._answers: dict[tuple[int, int], set[int]] | None = None

    # -- relation naming ---------------------------------------------------

    def inverse(self, rel: int) -> int:
        if rel == self.self_loop:
            return rel
        return rel + self.num_base if rel < self.num_base else rel - self.num_base

    def relation_name(self, rel: int) -> str:
        if rel == self.self_loop:
            return SELF_LOOP_NAME
        if rel >= self.num_base:
            return INVERSE_PREFIX + self.relations.tokens[rel - self.num_base]
        return self.relations.tokens[rel]

    def relation_names(self) -> list[str]:
        return [self.relation_name(r) for r in range(self.num_relations)]

    def relation_id(self, name: str) -> int:
        if name in self.relations:
            return self.relations[name]
        if name == SELF_LOOP_NAME:
            return self.self_loop
        if name.startswith(INVERSE_PREFIX) and name[len(INVERSE_PREFIX):] in self.relations:
            return self.relations[name[len(INVERSE_PREFIX):]] + self.num_base
        raise KeyError(f"unknown relation {name!r}")

    def entity_id(self, name: str) -> int:
        if name not in self.entities:
            raise KeyError(f"unknown entity {name!r}")
        return self.entities[name]

    # -- adjacency ---------------------------------------------------------

    def adjacency(self, rel: int) -> SparseRelationMatrix:
        return self._adj[rel]

    def masked_cells(self, exclude: Triplet | None) -> list[tuple[int, int, int]]:
        """(rel, row, col) cells hidden by masking ``exclude`` in either direction."""
        if exclude is None:
            return []
        h, r, t = exclude
        if r == self.self_loop:
            return []
        return [(r, h, t), (self.inverse(r), t, h)]

    def neighbors(self, e: int, rel: int, exclude: Triplet | None = None) -> np.ndarray:
        row = self._adj[rel].row(e)
        for mr, mh, mt in self.masked_cells(exclude):
            if mr == rel and mh == e:
                row = row[row != mt]
        return row

    def stats(self) -> DatasetStats:
        return DatasetStats(len(self.train) + len(self.valid) + len(self.test),
                            self.num_entities, self.num_base)

    def known_answers(self) -> dict[tuple[int, int], set[int]]:
        """Map (head, augmented relation) to every true tail across all splits."""
        if self._answers is None:
            ans: dict[tuple[int, int], set[int]] = {}
            for h, r, t in self.train + self.valid + self.test:
                ans.setdefault((h, r), set()).add(t)
                ans.setdefault((t, r + self.num_base), set()).add(h)
            self._answers = ans
        return self._answers


def adjacency_view(kg: KnowledgeGraph, rel: int, exclude: Triplet | None = None) -> SparseRelationMatrix:
    """The relation's matrix with the excluded triple (and its inverse) removed."""
    m = kg.adjacency(rel)
    for mr, mh, mt in kg.masked_cells(exclude):
        if mr == rel:
            m = m.without(mh, mt)
    return m


def build_graph(train: TripletList, valid: TripletList | None = None,
                test: TripletList | None = None) -> KnowledgeGraph:
    if not len(train):
        raise ValueError("training split is empty")
    unseen: set[int] = set()
    for split in (valid, test):
        if split is not None:
            unseen |= split.new_entities
    return KnowledgeGraph(train.entities, train.relations, train.triplets,
                          valid.triplets if valid is not None else [],
                          test.triplets if test is not None else [], unseen)


def load_dataset(directory: str | Path) -> KnowledgeGraph:
    """Load ``train.txt``, ``valid.txt`` and ``test.txt`` from a directory."""
    directory = Path(directory)
    train = load_split(directory / "train.txt")
    valid = load_split(directory / "valid.txt", train.entities, train.relations)
    test = load_split(directory / "test.txt", train.entities, train.relations)
    return build_graph(train, valid, test)


def dataset_dir(name: str) -> Path:
    """Resolve a bundled dataset name, honouring ``CTXRULE_<NAME>_DIR`` overrides."""
    override = os.environ.get(f"CTXRULE_{name.upper().replace('-', '_')}_DIR")
    if override:
        return Path(override)
    path = BUNDLED / name.lower()
    if not path.is_dir():
        raise FileNotFoundError(f"no bundled dataset {name!r}; pass a directory instead")
    return path


def graph_from_triples(train: Iterable[tuple[str, str, str]],
                       valid: Iterable[tuple[str, str, str]] = (),
                       test: Iterable[tuple[str, str, str]] = (),
                       entities: Iterable[str] = ()) -> KnowledgeGraph:
    """Build a graph from in-memory name triples; ``entities`` pre-registers ids."""
    ents, rels = Vocab(entities), Vocab()

    def encode(rows):
        return [Triplet(ents.add(h), rels.add(r), ents.add(t)) for h, r, t in rows]

    tr = encode(train)
    seen = len(ents)
    va, te = encode(valid), encode(test)
    return KnowledgeGraph(ents, rels, tr, va, te, range(seen, len(ents)))
