import numpy as np
import pytest
import torch

from conftest import planted_triples, write_dataset
from ctxrule.cli import main
from ctxrule.config import RunConfig
from ctxrule.evaluate import metrics, rank_queries
from ctxrule.kg import load_dataset
from ctxrule.model import DISTRIBUTION_CHECKS
from ctxrule.numerics import load_tensors
from ctxrule.pipeline import build_model, decoder_outputs, load_trained, read_attention, read_sidecar, train
from ctxrule.reasoner import both_directions

SMALL = ["--dim", "8", "--heads", "2", "--layers", "1", "--batch-size", "16", "--rule-length", "2",
         "--dropout", "0"]


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    train_, valid, test = planted_triples(seed=5)
    return write_dataset(tmp_path_factory.mktemp("toy") / "toy", train_, valid, test)


@pytest.fixture(scope="module")
def trained(toy_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--dataset", str(toy_dir), "--out-dir", str(out), "--max-epochs", "3",
                 "--lr", "0.01"] + SMALL)
    assert code == 0
    return out


def cfg_for(toy_dir, out, **kw):
    args = dict(dataset=str(toy_dir), out_dir=str(out), dim=8, heads=2, layers=1, batch_size=16,
                rule_length=2, dropout=0.0)
    args.update(kw)
    return RunConfig(**args)


def test_prepare(toy_dir, tmp_path, capsys):
    assert main(["prepare", "--dataset", str(toy_dir), "--out-dir", str(tmp_path)]) == 0
    stats = dict(l.split("=") for l in (tmp_path / "stats.txt").read_text().splitlines())
    kg = load_dataset(toy_dir)
    assert int(stats["triplets"]) == len(kg.train) + len(kg.valid) + len(kg.test)
    assert int(stats["relations"]) == 4
    assert (tmp_path / "entities.txt").read_text().splitlines() == kg.entities.tokens
    assert (tmp_path / "config.txt").exists()


def test_train_outputs(trained):
    assert (trained / "model.rf1").exists()
    side = read_sidecar(trained / "model.rf1")
    assert side["dim"] == "8"
    log = (trained / "train.log").read_text().splitlines()
    assert len(log) == 3 and all("valid_mrr=" in line for line in log)
    assert "lr = 0.01" in (trained / "config.txt").read_text()


def test_evaluate_writes_metrics_and_is_repeatable(toy_dir, trained, tmp_path, capsys):
    args = ["evaluate", "--dataset", str(toy_dir), "--out-dir", str(tmp_path),
            "--checkpoint", str(trained / "model.rf1")] + SMALL
    assert main(args) == 0
    first = (tmp_path / "metrics_test.txt").read_text()
    assert main(args) == 0
    assert (tmp_path / "metrics_test.txt").read_text() == first
    assert first.startswith("MRR=")
    kg = load_dataset(toy_dir)
    assert len((tmp_path / "ranks_test.tsv").read_text().splitlines()) == 2 * len(kg.test)


def test_architecture_mismatch(toy_dir, trained, tmp_path, capsys):
    args = ["evaluate", "--dataset", str(toy_dir), "--out-dir", str(tmp_path),
            "--checkpoint", str(trained / "model.rf1")] + SMALL[:-2] + ["--dim", "16"]
    assert main(args) == 2
    assert capsys.readouterr().err.startswith("error: checkpoint:")


def test_config_error_category(capsys):
    assert main(["prepare", "--rule-length", "0"]) == 2
    assert capsys.readouterr().err.startswith("error: config:")


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("colour = blue\n")
    assert main(["prepare", "--config", str(tmp_path / "c.txt")]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_config_file_with_override(toy_dir, tmp_path):
    (tmp_path / "c.txt").write_text(f"dataset = {toy_dir}\nout_dir = {tmp_path / 'o'}\nseed = 4\n")
    assert main(["prepare", "--config", str(tmp_path / "c.txt"), "--seed", "9"]) == 0
    assert "seed = 9" in (tmp_path / "o" / "config.txt").read_text()


def test_mine_and_score_rules(toy_dir, trained, tmp_path, capsys):
    rules = tmp_path / "rules.tsv"
    assert main(["mine-rules", "--dataset", str(toy_dir), "--checkpoint", str(trained / "model.rf1"),
                 "--output", str(rules), "--out-dir", str(tmp_path)] + SMALL) == 0
    lines = rules.read_text().splitlines()
    assert lines
    confs = [float(l.split("\t")[0]) for l in lines]
    assert confs == sorted(confs, reverse=True)
    capsys.readouterr()
    assert main(["score-rules", "--dataset", str(toy_dir), "--rules", str(rules), "-k", "1", "100000"]) == 0
    captured = capsys.readouterr()
    assert "top1=" in captured.out and "top100000=" in captured.out
    assert "warning:" in captured.err


def test_threshold_one_gives_empty_rule_file(toy_dir, trained, tmp_path):
    rules = tmp_path / "rules.tsv"
    assert main(["mine-rules", "--dataset", str(toy_dir), "--checkpoint", str(trained / "model.rf1"),
                 "--output", str(rules), "--thr", "1.0", "--out-dir", str(tmp_path)] + SMALL) == 0
    assert rules.read_text() == ""


def test_tautological_rules_score_one(toy_dir, tmp_path, capsys):
    rules = tmp_path / "taut.tsv"
    rules.write_text("1.0\tp\tp\n0.9\tq\tq\n0.8\tinv_s\tinv_s\n")
    assert main(["score-rules", "--dataset", str(toy_dir), "--rules", str(rules), "-k", "3"]) == 0
    assert capsys.readouterr().out.strip() == "top3=1.000000"
    scored = (tmp_path / "taut.sc.tsv").read_text().splitlines()
    assert all(l.split("\t")[1] == "1.000000" for l in scored if not l.startswith("#"))


def test_bad_rule_file(toy_dir, tmp_path, capsys):
    rules = tmp_path / "bad.tsv"
    rules.write_text("1.0\tp\tp\nnot a rule\n")
    assert main(["score-rules", "--dataset", str(toy_dir), "--rules", str(rules)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: parse:") and ":2:" in err


def test_export_attention_round_trip(toy_dir, trained, tmp_path):
    kg = load_dataset(toy_dir)
    names = kg.entities.tokens
    chosen = kg.test + kg.valid
    lines = [f"{names[h]}\t{kg.relation_name(r)}\t{names[t]}" for h, r, t in chosen]
    (tmp_path / "q.tsv").write_text("\n".join(lines) + "\n")
    out = tmp_path / "att.tsv"
    assert main(["export-attention", "--dataset", str(toy_dir), "--checkpoint", str(trained / "model.rf1"),
                 "--triplets", str(tmp_path / "q.tsv"), "--output", str(out)] + SMALL) == 0
    header, keys, rows = read_attention(out)
    assert header == kg.relation_names()
    assert len(rows) == 2 * len(chosen)
    np.testing.assert_allclose(rows.sum(1), 1.0, atol=1e-6)
    assert (rows >= 0).all()
    _, model = load_trained(cfg_for(toy_dir, tmp_path), trained / "model.rf1", kg)
    expected = decoder_outputs(model, kg, chosen, cfg_for(toy_dir, tmp_path)).reshape(-1, kg.num_relations)
    np.testing.assert_allclose(rows, expected, atol=5e-7)


def test_export_unknown_entity(toy_dir, trained, tmp_path, capsys):
    (tmp_path / "q.tsv").write_text("nobody\tp\te1\n")
    assert main(["export-attention", "--dataset", str(toy_dir), "--checkpoint", str(trained / "model.rf1"),
                 "--triplets", str(tmp_path / "q.tsv"), "--output", str(tmp_path / "a.tsv")] + SMALL) == 2
    assert capsys.readouterr().err.startswith("error: input:")


def test_missing_checkpoint(toy_dir, tmp_path, capsys):
    assert main(["evaluate", "--dataset", str(toy_dir), "--checkpoint", str(tmp_path / "none.rf1")]) == 2
    assert capsys.readouterr().err.startswith("error: checkpoint:")


# -- training contracts ----------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters(toy_dir, tmp_path):
    cfg = cfg_for(toy_dir, tmp_path, lr=0.0, max_epochs=1)
    kg = load_dataset(toy_dir)
    before = {k: v.detach().clone() for k, v in build_model(cfg, kg).named_parameters()}
    res = train(cfg, kg)
    after = load_tensors(res.checkpoint)
    for name, value in before.items():
        assert torch.equal(after[name], value), name


def test_resume_reproduces_recorded_mrr(toy_dir, trained, tmp_path):
    cfg = cfg_for(toy_dir, tmp_path, lr=0.01, max_epochs=4)
    side = read_sidecar(trained / "model.rf1")
    res = train(cfg, resume=trained / "model.rf1")
    assert res.history[0]["resumed"]
    assert res.history[0]["valid_mrr"] == float(side["valid_mrr"])


def test_training_loss_decreases(toy_dir, tmp_path):
    losses = []
    cfg = cfg_for(toy_dir, tmp_path, lr=0.01, max_epochs=10, eval_every=10, batch_size=256)
    train(cfg, callback=lambda row: losses.append(row["loss"]))
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_checks_distributions(toy_dir, tmp_path):
    before = DISTRIBUTION_CHECKS.value
    train(cfg_for(toy_dir, tmp_path, max_epochs=1))
    assert DISTRIBUTION_CHECKS.value > before


def test_oracle_scores_rank_first(toy_dir):
    kg = load_dataset(toy_dir)
    queries = both_directions(kg, kg.test)
    rows = np.zeros((len(queries), kg.num_entities))
    rows[np.arange(len(queries)), [q.tail for q in queries]] = 1.0
    assert metrics(rank_queries(kg, queries, rows))["MRR"] == 1.0
