"""Run configuration: defaults, ``key = value`` files and overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .subgraph import DATASET_CAPS, ConfigError, SubgraphCaps


@dataclass
class RunConfig:
    dataset: str = "umls"          # bundled name or a directory with train/valid/test.txt
    out_dir: str = "runs/default"
    rule_length: int = 3
    dim: int = 200
    layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    lr: float = 1e-4
    gamma: float = 1e-20
    max_context: int = 0           # 0 = dataset preset
    max_neighbors: int = 0
    hops: int = 0
    batch_size: int = 64
    max_epochs: int = 1000
    patience: int = 20
    eval_every: int = 1
    thr: float = 0.1
    seed: int = 0
    dtype: str = "float32"
    workers: int = 1
    ffn_mult: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.rule_length < 1:
            raise ConfigError("rule_length must be at least 1")
        for name in ("dim", "layers", "heads", "gamma", "batch_size", "max_epochs",
                     "patience", "eval_every", "thr", "workers", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        # lr = 0 is allowed as a null-update run
        for name in ("lr", "max_context", "max_neighbors", "hops"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must not be negative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def dataset_key(self) -> str:
        return Path(self.dataset).name.lower()

    def caps(self) -> SubgraphCaps:
        ctx, nbr, hops = DATASET_CAPS.get(self.dataset_key, (140, 40, None))
        return SubgraphCaps(
            self.max_context or ctx,
            self.max_neighbors or nbr,
            self.hops or (self.rule_length if hops is None else hops),
        )

    def model_kwargs(self) -> dict:
        caps = self.caps()
        return dict(dim=self.dim, heads=self.heads, layers=self.layers, dropout=self.dropout,
                    max_hops=caps.hops, max_steps=self.rule_length, ffn_mult=self.ffn_mult)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def replace(self, **overrides: Any) -> "RunConfig":
        return dataclasses.replace(self, **overrides)

    @classmethod
    def from_file(cls, path: str | Path, **overrides: Any) -> "RunConfig":
        values = parse_kv(Path(path).read_text(encoding="utf-8"), str(path))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)


def _coerce(key: str, raw: Any, type_name: str) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type_name}") from None
    return raw


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
