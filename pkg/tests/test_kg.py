import numpy as np
import pytest

from ctxrule.kg import (ParseError, Triplet, Vocab, adjacency_view, build_graph, dataset_dir,
                        graph_from_triples, load_dataset, load_split)


def write(path, lines):
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return path


def test_empty_file(tmp_path):
    split = load_split(write(tmp_path / "x.txt", []))
    assert len(split) == 0
    assert len(split.entities) == 0 and len(split.relations) == 0


def test_repeated_entity_registered_once(tmp_path):
    split = load_split(write(tmp_path / "x.txt", ["a\tr\tb", "a\ts\tc"]))
    assert len(split) == 2
    assert split.entities.tokens == ["a", "b", "c"]
    assert split.relations.tokens == ["r", "s"]


def test_malformed_line_reports_line_number(tmp_path):
    path = write(tmp_path / "x.txt", ["a\tr\tb", "a\tr"])
    with pytest.raises(ParseError) as exc:
        load_split(path)
    assert exc.value.lineno == 2


def test_trailing_newline_optional(tmp_path):
    path = tmp_path / "x.txt"
    path.write_text("a\tr\tb\nb\tr\tc", encoding="utf-8")
    assert len(load_split(path)) == 2


def test_unseen_entities_flagged(tmp_path):
    train = load_split(write(tmp_path / "train.txt", ["a\tr\tb"]))
    valid = load_split(write(tmp_path / "valid.txt", ["a\tr\tz"]), train.entities, train.relations)
    kg = build_graph(train, valid)
    z = kg.entity_id("z")
    assert z in kg.unseen_entities
    assert kg.adjacency(0).row(z).size == 0


def test_augmented_relation_count_single_triplet():
    kg = graph_from_triples([("a", "r", "b")])
    assert kg.num_relations == 3


def test_inverse_cell_is_transposed():
    kg = graph_from_triples([("a", "r", "b")])
    a, b = kg.entity_id("a"), kg.entity_id("b")
    inv = kg.relation_id("inv_r")
    assert (b, a) in kg.adjacency(inv)
    assert (a, b) not in kg.adjacency(inv)


def test_layout_and_names():
    kg = graph_from_triples([("a", "r", "b"), ("b", "s", "a")])
    assert kg.relation_names() == ["r", "s", "inv_r", "inv_s", "self_loop"]
    for rel in range(kg.num_relations):
        assert kg.relation_id(kg.relation_name(rel)) == rel


def test_transpose_symmetry_random(rng):
    from conftest import random_graph
    for _ in range(20):
        kg = random_graph(rng, 8, 3, 20)
        for r in range(kg.num_base):
            assert kg.adjacency(kg.inverse(r)) == kg.adjacency(r).transpose()
            np.testing.assert_array_equal(kg.adjacency(kg.inverse(r)).to_dense(),
                                          kg.adjacency(r).to_dense().T)


def test_adjacency_matches_train_split(rng):
    from conftest import random_graph
    kg = random_graph(rng, 7, 2, 15)
    dense = np.zeros((kg.num_base, kg.num_entities, kg.num_entities))
    for h, r, t in kg.train:
        dense[r, h, t] = 1
    for r in range(kg.num_base):
        np.testing.assert_array_equal(kg.adjacency(r).to_dense(), dense[r])


def test_self_loop_is_identity(toy_kg):
    np.testing.assert_array_equal(toy_kg.adjacency(toy_kg.self_loop).to_dense(),
                                  np.eye(toy_kg.num_entities))


def test_view_self_loop_never_excluded(toy_kg):
    q = toy_kg.train[0]
    assert adjacency_view(toy_kg, toy_kg.self_loop, q) == toy_kg.adjacency(toy_kg.self_loop)


def test_view_sole_edge_removed():
    kg = graph_from_triples([("a", "r", "b")])
    q = kg.train[0]
    assert adjacency_view(kg, 0, q).nnz == 0
    assert adjacency_view(kg, kg.inverse(0), q).nnz == 0


def test_view_other_edges_kept():
    kg = graph_from_triples([("a", "r", "b"), ("c", "r", "b")])
    a, b, c = (kg.entity_id(x) for x in "abc")
    view = adjacency_view(kg, 0, Triplet(a, 0, b))
    assert view.nnz == 1 and (c, b) in view
    # the inverse-direction query masks the same pair
    inv_view = adjacency_view(kg, 0, Triplet(b, kg.inverse(0), a))
    assert inv_view == view


def test_vocab_round_trip(tmp_path, toy_kg):
    toy_kg.entities.dump(tmp_path / "e.txt")
    toy_kg.relations.dump(tmp_path / "r.txt")
    e2, r2 = Vocab.load(tmp_path / "e.txt"), Vocab.load(tmp_path / "r.txt")
    assert e2.ids == toy_kg.entities.ids
    assert r2.ids == toy_kg.relations.ids


def test_bundled_umls_shape():
    kg = load_dataset(dataset_dir("umls"))
    assert kg.num_entities == 135
    assert kg.num_base == 46
    assert kg.num_relations == 93


def test_known_answers_cover_all_splits():
    kg = graph_from_triples([("a", "r", "b")], valid=[("a", "r", "c")], test=[("d", "r", "b")])
    a, b, c, d = (kg.entity_id(x) for x in "abcd")
    ans = kg.known_answers()
    assert ans[(a, 0)] == {b, c}
    assert ans[(b, kg.inverse(0))] == {a, d}
