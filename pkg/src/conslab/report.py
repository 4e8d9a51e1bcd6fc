"""Report assembly and deterministic JSON serialization.

Reports embed the run config, the seed, and a content hash of the resource;
re-running a command with the same inputs reproduces the report byte for
byte except the timestamp field.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from .errors import InputError
from .metrics import PredictionTable, RelationReport
from .resource import KBTuple, Relation, relation_to_dict

TIMESTAMP_FIELD = "timestamp"


def fingerprint_resource(
    relations: Sequence[Relation], tuples: Sequence[KBTuple] = ()
) -> str:
    """SHA-256 of a canonical serialization of relations and tuples."""
    payload = {
        "relations": [relation_to_dict(r) | {"candidates": list(r.candidates)} for r in sorted(relations, key=lambda r: r.relation_id)],
        "tuples": [
            [t.relation_id, t.subject, t.object]
            for t in sorted(tuples, key=lambda t: (t.relation_id, t.subject, t.object))
        ],
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def make_report(
    command: str,
    config: Mapping,
    model_id: str,
    seed: int,
    resource_fingerprint: str,
    relation_reports: Sequence[RelationReport],
    aggregates: Mapping,
) -> dict:
    return {
        "format": "conslab-report",
        "version": 1,
        "command": command,
        "config": dict(config),
        "model_id": model_id,
        "seed": seed,
        "resource_fingerprint": resource_fingerprint,
        TIMESTAMP_FIELD: timestamp(),
        "std_convention": "population",
        "relations": [r.as_dict() for r in sorted(relation_reports, key=lambda r: r.relation_id)],
        "aggregates": dict(aggregates),
    }


def write_json(obj: Mapping, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def read_json(path: str | Path) -> dict:
    file = Path(path)
    if not file.is_file():
        raise InputError(f"file not found: {file}")
    try:
        return json.loads(file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{file}: invalid JSON: {exc}") from exc


def predictions_dump(model_id: str, tables: Mapping[str, PredictionTable]) -> dict:
    """Per-tuple prediction rows, keyed for alignment across runs."""
    relations = {}
    for rid in sorted(tables):
        table = tables[rid]
        subjects = table.subjects or tuple(str(i) for i in range(table.n_tuples))
        relations[rid] = [
            {
                "subject": subj,
                "gold": gold,
                "predictions": list(row),
            }
            for subj, gold, row in zip(subjects, table.golds, table.predictions)
        ]
    return {
        "format": "conslab-predictions",
        "version": 1,
        "model_id": model_id,
        "relations": relations,
    }


def strip_timestamp(report: Mapping) -> dict:
    out = dict(report)
    out.pop(TIMESTAMP_FIELD, None)
    return out
