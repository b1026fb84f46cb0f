"""Command-line entry point: ``ctxrule <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import evaluate as ev
from .config import RunConfig
from .kg import ParseError
from .numerics import NonFiniteError
from .pipeline import (CheckpointError, TrainingError, decoder_outputs, evaluate_triples, load_kg,
                       load_trained, mine_rules, parse_triplet_names, train, write_attention)
from .rules import aggregate, read_rules, standard_confidence, topk_average_sc, write_rules
from .subgraph import ConfigError

log = logging.getLogger("ctxrule")

# exception type -> error category printed on failure
CATEGORIES = [
    (ConfigError, "config"),
    (ParseError, "parse"),
    (CheckpointError, "checkpoint"),
    ((TrainingError, NonFiniteError), "numeric"),
    ((FileNotFoundError, KeyError), "input"),
]

CONFIG_FLAGS = {
    "dataset": str, "out_dir": str, "rule_length": int, "dim": int, "layers": int, "heads": int,
    "dropout": float, "lr": float, "gamma": float, "max_context": int, "max_neighbors": int,
    "hops": int, "batch_size": int, "max_epochs": int, "patience": int, "eval_every": int,
    "thr": float, "seed": int, "dtype": str, "workers": int,
}


def resolve_config(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig.from_mapping(overrides)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    return out


def cmd_prepare(args) -> None:
    cfg = resolve_config(args)
    kg = load_kg(cfg)
    out = _out(cfg)
    kg.entities.dump(out / "entities.txt")
    kg.relations.dump(out / "relations.txt")
    st = kg.stats()
    (out / "stats.txt").write_text(
        f"triplets={st.triplet_count}\nentities={st.entity_count}\nrelations={st.relation_count}\n"
        f"augmented_relations={kg.num_relations}\navg_degree={st.avg_degree:.4f}\n"
        f"unseen_entities={len(kg.unseen_entities)}\n", encoding="utf-8")
    print(f"triplets={st.triplet_count} entities={st.entity_count} relations={st.relation_count} "
          f"avg_degree={st.avg_degree:.1f}")


def cmd_train(args) -> None:
    cfg = resolve_config(args)
    res = train(cfg, resume=args.resume)
    print(f"best_valid_mrr={res.best_mrr:.6f} best_epoch={res.best_epoch} checkpoint={res.checkpoint}")


def cmd_evaluate(args) -> None:
    cfg = resolve_config(args)
    kg, model = load_trained(cfg, args.checkpoint)
    triples = kg.test if args.split == "test" else kg.valid
    values, ranks = evaluate_triples(model, kg, triples, cfg)
    out = _out(cfg)
    ev.write_metrics(out / f"metrics_{args.split}.txt", values)
    ev.write_ranks(out / f"ranks_{args.split}.tsv", kg, ranks)
    print(" ".join(f"{k}={v:.4f}" for k, v in values.items()))


def cmd_mine_rules(args) -> None:
    cfg = resolve_config(args)
    kg, model = load_trained(cfg, args.checkpoint)
    triples = {"train": kg.train, "valid": kg.valid, "test": kg.test}[args.split]
    rules = aggregate(mine_rules(model, kg, triples, cfg))
    path = Path(args.output) if args.output else _out(cfg) / f"rules_{args.split}.tsv"
    write_rules(path, rules, kg)
    print(f"rules={len(rules)} file={path}")


def cmd_score_rules(args) -> None:
    cfg = resolve_config(args)
    kg = load_kg(cfg)
    rules = read_rules(args.rules, kg)
    scores = [standard_confidence(r, kg) for r in rules]
    lines = []
    for r, s in zip(rules, scores):
        body = ",".join(kg.relation_name(b) for b in r.body)
        lines.append(f"{r.confidence:.6f}\t{'NA' if s is None else f'{s:.6f}'}\t"
                     f"{kg.relation_name(r.head_rel)}\t{body}\n")
    summary = []
    for k in args.k:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            avg = topk_average_sc(rules, k, scores=scores)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        summary.append(f"top{k}={avg:.6f}")
    out = Path(args.output) if args.output else Path(args.rules).with_suffix(".sc.tsv")
    out.write_text("".join(lines) + "".join(f"# {s}\n" for s in summary), encoding="utf-8")
    print(" ".join(summary))


def cmd_export_attention(args) -> None:
    cfg = resolve_config(args)
    kg, model = load_trained(cfg, args.checkpoint)
    triples = parse_triplet_names(kg, Path(args.triplets).read_text(encoding="utf-8").splitlines())
    omegas = decoder_outputs(model, kg, triples, cfg)
    path = Path(args.output) if args.output else _out(cfg) / "attention.tsv"
    write_attention(path, kg, triples, omegas)
    print(f"triplets={len(triples)} file={path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxrule", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="key = value config file")
        for flag, typ in CONFIG_FLAGS.items():
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
        return p

    command("prepare", cmd_prepare, "load a dataset, dump vocabularies and statistics")
    p = command("train", cmd_train, "train a model")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = command("evaluate", cmd_evaluate, "filtered link prediction metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p = command("mine-rules", cmd_mine_rules, "decode and aggregate rules")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="train")
    p.add_argument("--output")
    p = command("score-rules", cmd_score_rules, "standard confidence of a rule file")
    p.add_argument("--rules", required=True)
    p.add_argument("-k", type=int, nargs="+", default=[50, 100, 200])
    p.add_argument("--output")
    p = command("export-attention", cmd_export_attention, "per-step relation distributions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--triplets", required=True, help="file of head<TAB>relation<TAB>tail lines")
    p.add_argument("--output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit category below
        for types, name in CATEGORIES:
            if isinstance(exc, types):
                print(f"error: {name}: {exc}", file=sys.stderr)
                return 2
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
