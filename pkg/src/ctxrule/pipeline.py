"""Training, evaluation, rule mining and export on top of the core modules."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import evaluate as ev
from .config import RunConfig, parse_kv
from .kg import KnowledgeGraph, Triplet, dataset_dir, load_dataset
from .model import RuleModel, check_distribution
from .numerics import NonFiniteError, OptimizerState, adam_step, load_tensors, save_tensors
from .reasoner import RelationOperators, batch_forward, both_directions, loss_on, make_batch
from .rules import RuleTable, aggregate, parse_rules

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


def load_kg(cfg: RunConfig) -> KnowledgeGraph:
    path = Path(cfg.dataset)
    return load_dataset(path if path.is_dir() else dataset_dir(cfg.dataset))


def build_model(cfg: RunConfig, kg: KnowledgeGraph) -> RuleModel:
    torch.manual_seed(cfg.seed)
    model = RuleModel.for_graph(kg, **cfg.model_kwargs())
    return model.to(DTYPES[cfg.dtype])


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, model: RuleModel, state: OptimizerState | None = None,
                    **meta) -> None:
    path = Path(path)
    tensors = dict(model.named_parameters())
    if state is not None:
        for name, m in state.m.items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = state.v[name]
    save_tensors(path, tensors)
    side = dict(format="rf1", **model.arch())
    if state is not None:
        side.update(adam_step=state.step, lr=state.lr)
    side.update(meta)
    path.with_suffix(".arch").write_text("".join(f"{k}={v}\n" for k, v in side.items()),
                                         encoding="utf-8")


def read_sidecar(path: str | Path) -> dict[str, str]:
    side = Path(path).with_suffix(".arch")
    if not side.exists():
        raise CheckpointError(f"missing architecture sidecar {side}")
    return parse_kv(side.read_text(encoding="utf-8"), str(side))


def load_checkpoint(path: str | Path, model: RuleModel,
                    state: OptimizerState | None = None) -> dict[str, str]:
    """Load parameters (and Adam moments) into ``model``; returns the sidecar."""
    side = read_sidecar(path)
    arch = model.arch()
    for key, value in arch.items():
        if key in side and str(value) != side[key]:
            raise CheckpointError(f"architecture mismatch on {key}: checkpoint {side[key]}, config {value}")
    tensors = load_tensors(path)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch on {name}")
            p.copy_(tensors[name].to(p.dtype))
    if state is not None:
        state.step = int(side.get("adam_step", 0))
        for name, p in params.items():
            if f"adam.m.{name}" in tensors:
                state.m[name] = tensors[f"adam.m.{name}"].to(p.dtype).clone()
                state.v[name] = tensors[f"adam.v.{name}"].to(p.dtype).clone()
    return side


# -- evaluation --------------------------------------------------------------


def _batches(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield i, items[i:i + size]


@torch.no_grad()
def predict_queries(model: RuleModel, kg: KnowledgeGraph, queries: Sequence[Triplet], cfg: RunConfig,
                    ops: RelationOperators | None = None, seed_base: int | None = None,
                    on_omegas: Callable | None = None):
    """Yield ``(offset, batch queries, z_T)`` with unmasked train adjacency."""
    ops = ops or RelationOperators(kg)
    caps = cfg.caps()
    base = cfg.seed if seed_base is None else seed_base
    was_training = model.training
    model.eval()
    try:
        for off, chunk in _batches(list(queries), cfg.batch_size):
            seeds = [ev.query_seed(base, off + k) for k in range(len(chunk))]
            batch = make_batch(kg, chunk, caps, ops, masked=False, seeds=seeds)
            z, omegas, _ = batch_forward(model, ops, batch, cfg.rule_length)
            if on_omegas is not None:
                on_omegas(off, chunk, omegas)
            yield off, chunk, z
    finally:
        model.train(was_training)


def evaluate_triples(model: RuleModel, kg: KnowledgeGraph, triples: Sequence[Triplet], cfg: RunConfig,
                     ops: RelationOperators | None = None) -> tuple[dict[str, float], list[ev.RankResult]]:
    """Filtered ranks for tail and inverse-tail queries of every triple."""
    queries = both_directions(kg, triples)
    ranks: list[ev.RankResult] = []
    for off, chunk, z in predict_queries(model, kg, queries, cfg, ops):
        ranks += ev.rank_queries(kg, chunk, z.double().numpy(), cfg.seed, off)
    return ev.metrics(ranks), ranks


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    best_mrr: float
    best_epoch: int
    epochs_run: int
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def train(cfg: RunConfig, kg: KnowledgeGraph | None = None, resume: str | Path | None = None,
          valid_triples: Sequence[Triplet] | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch training with query-edge masking and early stopping on
    validation MRR. Writes ``model.rf1``, ``train.log`` and ``config.txt``
    under ``cfg.out_dir``."""
    kg = kg or load_kg(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    model = build_model(cfg, kg)
    state = OptimizerState(lr=cfg.lr)
    best_mrr, best_epoch, start_epoch = -1.0, 0, 0
    if resume is not None:
        side = load_checkpoint(resume, model, state)
        state.lr = cfg.lr
        best_mrr = float(side.get("valid_mrr", -1.0))
        start_epoch = best_epoch = int(side.get("epoch", 0))
    ops = RelationOperators(kg)
    caps = cfg.caps()
    queries = both_directions(kg, kg.train)
    valid_triples = kg.valid if valid_triples is None else valid_triples
    params = dict(model.named_parameters())
    ckpt = out / "model.rf1"
    history: list[dict] = []
    rng = np.random.default_rng([cfg.seed, start_epoch])
    stale = 0
    if resume is not None:
        m, _ = evaluate_triples(model, kg, valid_triples, cfg, ops)
        history.append({"epoch": start_epoch, "resumed": True, "valid_mrr": m["MRR"]})
    with open(out / "train.log", "a", encoding="utf-8") as logfh:
        epoch = start_epoch
        for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
            model.train()
            order = rng.permutation(len(queries))
            total, t0 = 0.0, time.time()
            for off in range(0, len(order), cfg.batch_size):
                idx = order[off:off + cfg.batch_size]
                chunk = [queries[i] for i in idx]
                seeds = [np.random.default_rng([cfg.seed, epoch, int(i)]) for i in idx]
                batch = make_batch(kg, chunk, caps, ops, masked=True, seeds=seeds)
                loss = loss_on(batch, model, ops, cfg.rule_length, cfg.gamma)
                if not math.isfinite(loss.item()):
                    dump = out / "nonfinite_dump.rf1"
                    save_checkpoint(dump, model, state, epoch=epoch)
                    raise TrainingError(f"non-finite loss at epoch {epoch}; state dumped to {dump}")
                for p in params.values():
                    p.grad = None
                loss.backward()
                adam_step(params, {k: p.grad for k, p in params.items()}, state)
                total += loss.item()
            row = {"epoch": epoch, "loss": total / len(queries), "seconds": time.time() - t0}
            if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
                m, _ = evaluate_triples(model, kg, valid_triples, cfg, ops)
                row["valid_mrr"] = m["MRR"]
                if m["MRR"] > best_mrr:
                    best_mrr, best_epoch, stale = m["MRR"], epoch, 0
                    save_checkpoint(ckpt, model, state, epoch=epoch, valid_mrr=repr(m["MRR"]))
                else:
                    stale += 1
            history.append(row)
            logfh.write("\t".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                  for k, v in row.items()) + "\n")
            logfh.flush()
            log.info("epoch %d loss %.4f valid_mrr %s", epoch, row["loss"], row.get("valid_mrr"))
            if callback is not None:
                callback(row)
            if stale >= cfg.patience:
                break
    if best_mrr < 0:
        save_checkpoint(ckpt, model, state, epoch=epoch, valid_mrr=repr(best_mrr))
    return TrainResult(best_mrr, best_epoch, epoch - start_epoch, history, ckpt)


def load_trained(cfg: RunConfig, checkpoint: str | Path, kg: KnowledgeGraph | None = None):
    kg = kg or load_kg(cfg)
    model = build_model(cfg, kg)
    load_checkpoint(checkpoint, model)
    model.eval()
    return kg, model


# -- rule mining and export ---------------------------------------------------


def mine_rules(model: RuleModel, kg: KnowledgeGraph, triples: Sequence[Triplet], cfg: RunConfig,
               ops: RelationOperators | None = None) -> RuleTable:
    """Parse rules from the decoder output of every query (both directions)."""
    queries = both_directions(kg, triples)
    table = RuleTable()

    def collect(off, chunk, omegas):
        om = omegas.double().numpy()
        for q, w in zip(chunk, om):
            table.add_parsed(q[1], parse_rules(w, q, kg, cfg.thr))

    for _ in predict_queries(model, kg, queries, cfg, ops, on_omegas=collect):
        pass
    return table


@torch.no_grad()
def decoder_outputs(model: RuleModel, kg: KnowledgeGraph, triples: Sequence[Triplet],
                    cfg: RunConfig) -> np.ndarray:
    """``(len(triples), T, A)`` relation distributions, one query per triple."""
    rows = []

    def collect(off, chunk, omegas):
        check_distribution(omegas)
        rows.append(omegas.double().numpy())

    for _ in predict_queries(model, kg, list(triples), cfg, on_omegas=collect):
        pass
    return np.concatenate(rows) if rows else np.zeros((0, cfg.rule_length, kg.num_relations))


def write_attention(path: str | Path, kg: KnowledgeGraph, triples: Sequence[Triplet],
                    omegas: np.ndarray) -> None:
    ents = kg.entities.tokens
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("head\trelation\ttail\tstep\t" + "\t".join(kg.relation_names()) + "\n")
        for (h, r, t), steps in zip(triples, omegas):
            for s, row in enumerate(steps, 1):
                vals = "\t".join(f"{v:.9f}" for v in row)
                fh.write(f"{ents[h]}\t{kg.relation_name(r)}\t{ents[t]}\t{s}\t{vals}\n")


def read_attention(path: str | Path) -> tuple[list[str], list[tuple[str, str, str, int]], np.ndarray]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")[4:]
    keys, rows = [], []
    for line in lines[1:]:
        parts = line.split("\t")
        keys.append((parts[0], parts[1], parts[2], int(parts[3])))
        rows.append([float(v) for v in parts[4:]])
    return header, keys, np.array(rows)


def parse_triplet_names(kg: KnowledgeGraph, lines: Sequence[str]) -> list[Triplet]:
    out = []
    for line in lines:
        if not line.strip():
            continue
        h, r, t = line.rstrip("\r\n").split("\t")
        out.append(Triplet(kg.entity_id(h), kg.relation_id(r), kg.entity_id(t)))
    return out

