"""Shared schema checks and loading for the figure scripts."""

from __future__ import annotations

import json
from pathlib import Path

SUPPORTED_SCHEMA = 1


class SchemaError(ValueError):
    pass


def load_grid(path) -> dict:
    doc = json.loads(Path(path).read_text())
    meta = doc.get("meta", {})
    if meta.get("schema_version") != SUPPORTED_SCHEMA:
        raise SchemaError(
            f"{path}: grid schema {meta.get('schema_version')!r}, expected {SUPPORTED_SCHEMA}"
        )
    if "grid" not in doc or "event_index" not in doc:
        raise SchemaError(f"{path}: missing grid/event_index fields")
    if "logp" not in doc and "density_diff" not in doc:
        raise SchemaError(f"{path}: neither logp nor density_diff present")
    return doc


def load_prediction(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for field in ("t_hat", "true_t"):
        if field not in doc:
            raise SchemaError(f"{path}: prediction JSON missing {field!r}")
    if len(doc["t_hat"]) != len(doc["true_t"]):
        raise SchemaError(f"{path}: t_hat and true_t lengths differ")
    return doc
