import numpy as np
import pytest
import torch

from ctxrule.kg import graph_from_triples


def random_graph(rng, n_ent, n_rel, n_edges, entities_only=True):
    """Random name-level KG with every entity registered."""
    ents = [f"e{i}" for i in range(n_ent)]
    rels = [f"r{i}" for i in range(n_rel)]
    triples = set()
    for _ in range(n_edges):
        triples.add((ents[rng.integers(n_ent)], rels[rng.integers(n_rel)], ents[rng.integers(n_ent)]))
    triples = sorted(triples)
    # make sure every relation name exists so the vocabulary size is fixed
    for r in rels:
        if not any(t[1] == r for t in triples):
            triples.append((ents[0], r, ents[1 % n_ent]))
    return graph_from_triples(triples, entities=ents)


@pytest.fixture
def chain_kg():
    # a -r-> b -r-> c
    return graph_from_triples([("a", "r", "b"), ("b", "r", "c")])


@pytest.fixture
def toy_kg():
    # five entities, three relations, with a planted composition s = p . q
    return graph_from_triples([
        ("a", "p", "b"), ("b", "q", "c"), ("a", "s", "c"),
        ("d", "p", "b"), ("d", "s", "c"), ("e", "q", "a"), ("c", "p", "e"),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def write_dataset(directory, train, valid, test):
    directory.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        (directory / f"{name}.txt").write_text("".join("\t".join(r) + "\n" for r in rows))
    return directory


def planted_triples(seed=0, n=16):
    """Random p and q edges, s = p . q on every grounded pair, plus unrelated noise n.

    Returns (train, valid, test) with a few s facts held out.
    """
    rng = np.random.default_rng(seed)
    ents = [f"e{i}" for i in range(n)]
    p = {(int(i), int(rng.integers(n))) for i in range(n)}
    q = {(int(i), int(rng.integers(n))) for i in range(n)}
    s = sorted({(x, y2) for x, y in p for z, y2 in q if z == y})
    noise = {(int(rng.integers(n)), int(rng.integers(n))) for _ in range(n)}
    base = [(ents[a], "p", ents[b]) for a, b in sorted(p)] + [(ents[a], "q", ents[b]) for a, b in sorted(q)]
    base += [(ents[a], "n", ents[b]) for a, b in sorted(noise)]
    facts = [(ents[a], "s", ents[b]) for a, b in s]
    order = rng.permutation(len(facts))
    held = [facts[i] for i in order[:4]]
    train = base + [facts[i] for i in order[4:]]
    return train, held[:2], held[2:]


# acceptance summary: one line per criterion, printed after the run
ACCEPTANCE_LINES = []


def report(name, ok, detail=""):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
