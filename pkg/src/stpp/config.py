"""Run configuration: TOML/JSON file mirroring the training hyperparameter
table, with command-line overrides layered on top.

Keys may be written with hyphens or underscores. Validation collects every
problem before reporting, so a bad config fails with the complete list.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

try:
    import tomllib  # 3.11+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass
class RunConfig:
    epochs: int = 1000
    batch_size: int = 32
    sequence_length: int = 500
    input_length: int = 497
    output_length: int = 3
    attention_layers: int = 6
    attention_heads: int = 6
    embedding_dim: int = 64
    dropout_rate: float = 0.1
    learning_rate: float = 1e-3
    lambda1: float = 0.1
    lambda2: float = 0.1
    seed: int = 0
    time_flow: str = "softsign"
    ablation: str = "none"
    time_source: str = "true_times"
    patience: int = 50
    data: str | None = None
    output: str | None = None

    def validate(self) -> list[str]:
        problems = []
        if self.input_length + self.output_length != self.sequence_length:
            problems.append(
                f"input_length ({self.input_length}) + output_length ({self.output_length}) "
                f"!= sequence_length ({self.sequence_length})"
            )
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.attention_layers < 1:
            problems.append(f"attention_layers must be >= 1, got {self.attention_layers}")
        if self.attention_heads < 1:
            problems.append(f"attention_heads must be >= 1, got {self.attention_heads}")
        if self.embedding_dim < self.attention_heads:
            problems.append(
                f"embedding_dim ({self.embedding_dim}) smaller than attention_heads "
                f"({self.attention_heads})"
            )
        if self.lambda1 < 0 or self.lambda2 < 0:
            problems.append("lambda1 and lambda2 must be nonnegative")
        if self.time_flow not in ("softsign", "softplus"):
            problems.append(f"time_flow must be softsign or softplus, got {self.time_flow!r}")
        if self.ablation not in ("none", "zero_encoder", "zero_decoder"):
            problems.append(f"unknown ablation {self.ablation!r}")
        if self.time_source not in ("true_times", "sampled"):
            problems.append(f"unknown time_source {self.time_source!r}")
        return problems

    def to_dict(self) -> dict:
        return asdict(self)


class ConfigError(ValueError):
    """Raised with the full list of config validation failures."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _normalize_keys(doc: dict) -> dict:
    return {k.replace("-", "_"): v for k, v in doc.items()}


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values (TOML by suffix, else JSON) underneath explicit overrides."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        raw = path.read_bytes()
        if path.suffix.lower() == ".toml":
            doc = tomllib.loads(raw.decode("utf-8"))
        else:
            doc = json.loads(raw.decode("utf-8"))
        doc = _normalize_keys(doc)
    if overrides:
        doc.update({k: v for k, v in _normalize_keys(overrides).items() if v is not None})

    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    problems = [f"unknown config key {k!r}" for k in unknown]
    cfg = RunConfig(**{k: v for k, v in doc.items() if k in known})
    problems.extend(cfg.validate())
    if problems:
        raise ConfigError(problems)
    return cfg
