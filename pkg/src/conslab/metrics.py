"""Consistency and knowledge measures over per-relation prediction tables.

Every metric is a plain function of an immutable ``PredictionTable``.
Undefined values are ``None`` (never zero-filled) and are excluded from
macro averages; micro aggregates pool the underlying counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConslabError
from .resource import Cardinality


class MetricError(ConslabError):
    """A metric was requested on a table that cannot support it."""


@dataclass(frozen=True)
class PredictionTable:
    """Predicted candidate strings for one relation, tuples x patterns."""

    relation_id: str
    cardinality: Cardinality
    predictions: tuple[tuple[str, ...], ...]  # rows: tuples, cols: patterns
    golds: tuple[str, ...]
    is_base: tuple[bool, ...]
    lex_groups: tuple[int, ...]
    syn_groups: tuple[int, ...]
    subjects: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        n = self.n_patterns
        if n == 0:
            raise MetricError(f"{self.relation_id}: table has no patterns")
        if len(self.golds) != len(self.predictions):
            raise MetricError(f"{self.relation_id}: golds do not match prediction rows")
        if any(len(row) != n for row in self.predictions):
            raise MetricError(f"{self.relation_id}: ragged prediction matrix")
        for meta in (self.is_base, self.lex_groups, self.syn_groups):
            if len(meta) != n:
                raise MetricError(f"{self.relation_id}: pattern metadata length mismatch")
        if self.subjects and len(self.subjects) != len(self.predictions):
            raise MetricError(f"{self.relation_id}: subjects do not match prediction rows")

    @property
    def n_patterns(self) -> int:
        return len(self.is_base)

    @property
    def n_tuples(self) -> int:
        return len(self.predictions)

    @property
    def pairs_per_tuple(self) -> int:
        n = self.n_patterns
        return n * (n - 1) // 2

    @property
    def pair_count(self) -> int:
        return self.n_tuples * self.pairs_per_tuple


def _id_matrix(table: PredictionTable) -> np.ndarray:
    """Map prediction strings to integer ids for vectorized comparison."""
    ids: dict[str, int] = {}
    out = np.empty((table.n_tuples, table.n_patterns), dtype=np.int64)
    for i, row in enumerate(table.predictions):
        for j, pred in enumerate(row):
            out[i, j] = ids.setdefault(pred, len(ids))
    return out


def _pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(n, k=1)
    return iu[0], iu[1]


def _agreement_counts(table: PredictionTable, rows: np.ndarray | None = None) -> tuple[int, int]:
    """(# agreeing tuple-pattern-pairs, # total pairs) over the given rows."""
    ids = _id_matrix(table)
    if rows is not None:
        ids = ids[rows]
    n = table.n_patterns
    if n < 2 or ids.shape[0] == 0:
        return 0, 0
    left, right = _pair_indices(n)
    agree = int((ids[:, left] == ids[:, right]).sum())
    return agree, ids.shape[0] * left.size


def consistency(table: PredictionTable) -> float | None:
    """Fraction of pattern pairs, over all tuples, predicting the same string.

    Undefined (None) for single-pattern relations.
    """
    if table.n_patterns < 2 or table.n_tuples == 0:
        return None
    agree, total = _agreement_counts(table)
    return agree / total


def accuracy(table: PredictionTable) -> float:
    """Fraction of tuples whose base-pattern prediction equals the gold."""
    base_cols = [j for j, b in enumerate(table.is_base) if b]
    if len(base_cols) != 1:
        raise MetricError(
            f"{table.relation_id}: expected exactly one base pattern, found {len(base_cols)}"
        )
    if table.n_tuples == 0:
        raise MetricError(f"{table.relation_id}: accuracy of an empty table is undefined")
    j = base_cols[0]
    correct = sum(row[j] == gold for row, gold in zip(table.predictions, table.golds))
    return correct / table.n_tuples


def consistent_acc(table: PredictionTable) -> float | None:
    """Fraction of tuples where every pattern predicts the gold object."""
    if table.n_patterns < 2 or table.n_tuples == 0:
        return None
    correct = sum(
        all(pred == gold for pred in row)
        for row, gold in zip(table.predictions, table.golds)
    )
    return correct / table.n_tuples


@dataclass(frozen=True)
class Extractability:
    succ_patt: float | None
    succ_objs: float | None
    know_const: float | None
    unk_const: float | None


def _known_rows(table: PredictionTable) -> np.ndarray:
    """Boolean mask of tuples predicted correctly by at least one pattern."""
    return np.array(
        [any(pred == gold for pred in row) for row, gold in zip(table.predictions, table.golds)],
        dtype=bool,
    )


def extractability(table: PredictionTable) -> Extractability:
    if table.n_patterns < 2 or table.n_tuples == 0:
        return Extractability(None, None, None, None)
    pattern_hits = [
        any(table.predictions[i][j] == table.golds[i] for i in range(table.n_tuples))
        for j in range(table.n_patterns)
    ]
    succ_patt = sum(pattern_hits) / table.n_patterns
    known = _known_rows(table)
    succ_objs = float(known.mean())
    know_agree, know_total = _agreement_counts(table, np.flatnonzero(known))
    unk_agree, unk_total = _agreement_counts(table, np.flatnonzero(~known))
    return Extractability(
        succ_patt=succ_patt,
        succ_objs=succ_objs,
        know_const=know_agree / know_total if know_total else None,
        unk_const=unk_agree / unk_total if unk_total else None,
    )


def determinism(table: PredictionTable) -> float | None:
    """Pairwise agreement for N-M relations, reported apart from consistency."""
    if table.cardinality is not Cardinality.N_TO_M:
        raise MetricError(
            f"{table.relation_id}: determinism applies only to N-M relations"
        )
    if table.n_patterns < 2 or table.n_tuples == 0:
        return None
    agree, total = _agreement_counts(table)
    return agree / total


def syntax_subsets(table: PredictionTable) -> tuple[float | None, float | None]:
    """Pairwise agreement restricted by pattern-group metadata.

    diff-syntax: pairs with equal lex group and different syn group;
    no-change: pairs with equal lex group and equal syn group.
    """
    ids = _id_matrix(table)
    diff_agree = diff_total = same_agree = same_total = 0
    n = table.n_patterns
    for a in range(n):
        for b in range(a + 1, n):
            if table.lex_groups[a] != table.lex_groups[b]:
                continue
            agree = int((ids[:, a] == ids[:, b]).sum())
            if table.syn_groups[a] != table.syn_groups[b]:
                diff_agree += agree
                diff_total += table.n_tuples
            else:
                same_agree += agree
                same_total += table.n_tuples
    return (
        diff_agree / diff_total if diff_total else None,
        same_agree / same_total if same_total else None,
    )


@dataclass(frozen=True)
class MetricCounts:
    """Raw counts needed to pool relations into micro aggregates."""

    agree_pairs: int = 0
    total_pairs: int = 0
    base_correct: int = 0
    all_correct: int = 0
    tuples: int = 0
    hit_patterns: int = 0
    total_patterns: int = 0
    known_tuples: int = 0
    know_agree: int = 0
    know_pairs: int = 0
    unk_agree: int = 0
    unk_pairs: int = 0
    det_agree: int = 0
    det_pairs: int = 0
    det_tuples: int = 0
    diff_syn_agree: int = 0
    diff_syn_total: int = 0
    no_change_agree: int = 0
    no_change_total: int = 0


@dataclass(frozen=True)
class RelationReport:
    relation_id: str
    cardinality: str
    n_patterns: int
    tuple_count: int
    pair_count: int
    consistency: float | None
    accuracy: float | None
    consistent_acc: float | None
    succ_patt: float | None
    succ_objs: float | None
    know_const: float | None
    unk_const: float | None
    determinism: float | None
    diff_syntax_consistency: float | None
    no_change_consistency: float | None
    counts: MetricCounts = field(default_factory=MetricCounts, repr=False)

    def as_dict(self) -> dict:
        return {
            "relation_id": self.relation_id,
            "cardinality": self.cardinality,
            "n_patterns": self.n_patterns,
            "tuple_count": self.tuple_count,
            "pair_count": self.pair_count,
            "consistency": self.consistency,
            "accuracy": self.accuracy,
            "consistent_acc": self.consistent_acc,
            "succ_patt": self.succ_patt,
            "succ_objs": self.succ_objs,
            "know_const": self.know_const,
            "unk_const": self.unk_const,
            "determinism": self.determinism,
            "diff_syntax_consistency": self.diff_syntax_consistency,
            "no_change_consistency": self.no_change_consistency,
        }


def relation_report(table: PredictionTable) -> RelationReport:
    """All metrics for one relation.

    N-1 relations get the consistency family; N-M relations get determinism
    only, everything else stays undefined.
    """
    n_m = table.cardinality is Cardinality.N_TO_M
    base = dict(
        relation_id=table.relation_id,
        cardinality=table.cardinality.value,
        n_patterns=table.n_patterns,
        tuple_count=table.n_tuples,
        pair_count=table.pair_count,
    )
    if n_m:
        det = determinism(table)
        agree, total = _agreement_counts(table)
        counts = MetricCounts(det_agree=agree, det_pairs=total, det_tuples=table.n_tuples)
        return RelationReport(
            **base,
            consistency=None, accuracy=None, consistent_acc=None,
            succ_patt=None, succ_objs=None, know_const=None, unk_const=None,
            determinism=det,
            diff_syntax_consistency=None, no_change_consistency=None,
            counts=counts,
        )

    cons = consistency(table)
    acc = accuracy(table)
    cacc = consistent_acc(table)
    extr = extractability(table)
    diff_syn, no_change = syntax_subsets(table)

    agree, total = _agreement_counts(table)
    known = _known_rows(table)
    know_agree, know_pairs = _agreement_counts(table, np.flatnonzero(known))
    unk_agree, unk_pairs = _agreement_counts(table, np.flatnonzero(~known))
    base_col = [j for j, b in enumerate(table.is_base) if b][0]
    base_correct = sum(
        row[base_col] == gold for row, gold in zip(table.predictions, table.golds)
    )
    all_correct = sum(
        all(pred == gold for pred in row)
        for row, gold in zip(table.predictions, table.golds)
    )
    pattern_hits = sum(
        any(table.predictions[i][j] == table.golds[i] for i in range(table.n_tuples))
        for j in range(table.n_patterns)
    )
    ids = _id_matrix(table)
    diff_syn_counts = [0, 0]
    no_change_counts = [0, 0]
    for a in range(table.n_patterns):
        for b in range(a + 1, table.n_patterns):
            if table.lex_groups[a] != table.lex_groups[b]:
                continue
            pair_agree = int((ids[:, a] == ids[:, b]).sum())
            target = diff_syn_counts if table.syn_groups[a] != table.syn_groups[b] else no_change_counts
            target[0] += pair_agree
            target[1] += table.n_tuples

    counts = MetricCounts(
        agree_pairs=agree,
        total_pairs=total,
        base_correct=base_correct,
        all_correct=all_correct,
        tuples=table.n_tuples,
        hit_patterns=pattern_hits if table.n_patterns >= 2 else 0,
        total_patterns=table.n_patterns if table.n_patterns >= 2 else 0,
        known_tuples=int(known.sum()) if table.n_patterns >= 2 else 0,
        know_agree=know_agree,
        know_pairs=know_pairs,
        unk_agree=unk_agree,
        unk_pairs=unk_pairs,
        diff_syn_agree=diff_syn_counts[0],
        diff_syn_total=diff_syn_counts[1],
        no_change_agree=no_change_counts[0],
        no_change_total=no_change_counts[1],
    )
    return RelationReport(
        **base,
        consistency=cons,
        accuracy=acc,
        consistent_acc=cacc,
        succ_patt=extr.succ_patt,
        succ_objs=extr.succ_objs,
        know_const=extr.know_const,
        unk_const=extr.unk_const,
        determinism=None,
        diff_syntax_consistency=diff_syn,
        no_change_consistency=no_change,
        counts=counts,
    )


MACRO_METRICS = (
    "consistency", "accuracy", "consistent_acc",
    "succ_patt", "succ_objs", "know_const", "unk_const",
    "determinism", "diff_syntax_consistency", "no_change_consistency",
)


@dataclass(frozen=True)
class MacroStat:
    mean: float
    std: float  # population standard deviation (divide by N)
    n: int

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n}


def _macro(values: list[float]) -> MacroStat | None:
    if not values:
        return None
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return MacroStat(mean=mean, std=math.sqrt(var), n=len(values))


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def aggregate(reports: Sequence[RelationReport], mode: str = "both") -> dict:
    """Suite-level aggregates.

    macro: unweighted mean and population std over relations with defined
    values, reduced in sorted relation-id order; micro: pooled counts.
    """
    if not reports:
        raise MetricError("cannot aggregate an empty report set")
    if mode not in ("macro", "micro", "both"):
        raise MetricError(f"unknown aggregation mode {mode!r}")
    ordered = sorted(reports, key=lambda r: r.relation_id)
    out: dict = {}
    if mode in ("macro", "both"):
        macro = {}
        for metric in MACRO_METRICS:
            values = [getattr(r, metric) for r in ordered]
            stat = _macro([v for v in values if v is not None])
            macro[metric] = stat.as_dict() if stat else None
        out["macro"] = macro
    if mode in ("micro", "both"):
        c = [r.counts for r in ordered]
        micro = {
            "consistency": _ratio(sum(x.agree_pairs for x in c), sum(x.total_pairs for x in c)),
            "accuracy": _ratio(sum(x.base_correct for x in c), sum(x.tuples for x in c)),
            "consistent_acc": _ratio(
                sum(x.all_correct for x in c if x.total_pairs),
                sum(x.tuples for x in c if x.total_pairs),
            ),
            "succ_patt": _ratio(sum(x.hit_patterns for x in c), sum(x.total_patterns for x in c)),
            "succ_objs": _ratio(
                sum(x.known_tuples for x in c if x.total_patterns),
                sum(x.tuples for x in c if x.total_patterns),
            ),
            "know_const": _ratio(sum(x.know_agree for x in c), sum(x.know_pairs for x in c)),
            "unk_const": _ratio(sum(x.unk_agree for x in c), sum(x.unk_pairs for x in c)),
            "determinism": _ratio(sum(x.det_agree for x in c), sum(x.det_pairs for x in c)),
            "diff_syntax_consistency": _ratio(
                sum(x.diff_syn_agree for x in c), sum(x.diff_syn_total for x in c)
            ),
            "no_change_consistency": _ratio(
                sum(x.no_change_agree for x in c), sum(x.no_change_total for x in c)
            ),
        }
        out["micro"] = micro
    return out
