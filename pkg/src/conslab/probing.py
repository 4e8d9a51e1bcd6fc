"""Drives a scorer over a resource to produce prediction tables."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import InputError
from .metrics import PredictionTable, RelationReport, relation_report
from .resource import KBTuple, Relation, populate
from .scorer import Scorer, ScoreRequest, predicted_index


def build_prediction_table(
    scorer: Scorer, relation: Relation, tuples: Sequence[KBTuple]
) -> PredictionTable:
    """Score every (tuple, pattern) cell and record the argmax candidate."""
    if not relation.candidates:
        raise InputError(
            f"relation {relation.relation_id} has no candidate set; "
            "run build_candidates first"
        )
    if not tuples:
        raise InputError(f"no tuples for relation {relation.relation_id}")
    rows = []
    for t in tuples:
        row = []
        for j, pattern in enumerate(relation.patterns):
            cloze = populate(
                pattern, t.subject, scorer.mask_token,
                relation_id=relation.relation_id, pattern_index=j,
            )
            response = scorer.score(
                ScoreRequest(
                    text=cloze.text,
                    candidates=relation.candidates,
                    relation_id=relation.relation_id,
                )
            )
            row.append(relation.candidates[predicted_index(response)])
        rows.append(tuple(row))
    return PredictionTable(
        relation_id=relation.relation_id,
        cardinality=relation.cardinality,
        predictions=tuple(rows),
        golds=tuple(t.object for t in tuples),
        is_base=tuple(p.is_base for p in relation.patterns),
        lex_groups=tuple(p.lex_group for p in relation.patterns),
        syn_groups=tuple(p.syn_group for p in relation.patterns),
        subjects=tuple(t.subject for t in tuples),
    )


@dataclass
class ProbeResult:
    reports: list[RelationReport]
    tables: dict[str, PredictionTable]


def probe_suite(
    scorer: Scorer,
    relations: Sequence[Relation],
    tuples_by_relation: Mapping[str, Sequence[KBTuple]],
) -> ProbeResult:
    """Prediction tables and per-relation reports for every relation with tuples."""
    reports = []
    tables = {}
    for relation in sorted(relations, key=lambda r: r.relation_id):
        rel_tuples = tuples_by_relation.get(relation.relation_id)
        if not rel_tuples:
            continue
        table = build_prediction_table(scorer, relation, rel_tuples)
        tables[relation.relation_id] = table
        reports.append(relation_report(table))
    if not reports:
        raise InputError("no relation had any tuples to probe")
    return ProbeResult(reports=reports, tables=tables)


def query_count(relations: Sequence[Relation], tuples_by_relation: Mapping[str, Sequence[KBTuple]]) -> int:
    """Number of scorer calls a probe would issue."""
    return sum(
        len(tuples_by_relation.get(r.relation_id, ())) * len(r.patterns)
        for r in relations
    )
