"""Pattern resources, KB tuples, cloze population, and the synthetic desk-scale KB.

A resource is a directory with one JSON file per relation; tuples live in a
JSONL file. Lexical/syntactic group ids are annotations carried by the
resource files, not computed here.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import InputError

PLACEHOLDER_SUBJECT = "[X]"
PLACEHOLDER_OBJECT = "[Y]"


class ResourceError(InputError):
    """A resource or tuple file violates the documented schema."""


class Cardinality(Enum):
    N_TO_1 = "N1"
    N_TO_M = "NM"


@dataclass(frozen=True)
class Pattern:
    """A cloze template with one subject slot and one object slot."""

    template: str
    is_base: bool
    lex_group: int
    syn_group: int
    para_type: str | None = None


@dataclass(frozen=True)
class Relation:
    relation_id: str
    name: str
    cardinality: Cardinality
    patterns: tuple[Pattern, ...]
    candidates: tuple[str, ...] = ()

    @property
    def consistency_eligible(self) -> bool:
        """Pairwise agreement needs at least two patterns."""
        return len(self.patterns) >= 2

    @property
    def base_pattern_index(self) -> int:
        for i, p in enumerate(self.patterns):
            if p.is_base:
                return i
        raise ResourceError(f"relation {self.relation_id} has no base pattern")


@dataclass(frozen=True)
class KBTuple:
    relation_id: str
    subject: str
    object: str


@dataclass(frozen=True)
class PopulatedCloze:
    """A template with the subject filled in and the object slot masked."""

    text: str
    relation_id: str
    pattern_index: int
    subject: str


def _validate_pattern(template: str, where: str) -> None:
    for placeholder in (PLACEHOLDER_SUBJECT, PLACEHOLDER_OBJECT):
        n = template.count(placeholder)
        if n != 1:
            raise ResourceError(
                f"{where}: template {template!r} must contain exactly one "
                f"{placeholder!r}, found {n}"
            )


def _parse_relation(data: dict, where: str) -> Relation:
    for key in ("relation_id", "name", "cardinality", "patterns"):
        if key not in data:
            raise ResourceError(f"{where}: missing field {key!r}")
    try:
        cardinality = Cardinality(data["cardinality"])
    except ValueError:
        raise ResourceError(
            f"{where}: unknown cardinality {data['cardinality']!r} "
            f"(expected 'N1' or 'NM')"
        ) from None
    raw_patterns = data["patterns"]
    if not isinstance(raw_patterns, list) or not raw_patterns:
        raise ResourceError(f"{where}: 'patterns' must be a non-empty list")
    patterns = []
    for i, rp in enumerate(raw_patterns):
        pwhere = f"{where}, pattern {i}"
        for key in ("template", "is_base", "lex_group", "syn_group"):
            if key not in rp:
                raise ResourceError(f"{pwhere}: missing field {key!r}")
        _validate_pattern(rp["template"], pwhere)
        patterns.append(
            Pattern(
                template=rp["template"],
                is_base=bool(rp["is_base"]),
                lex_group=int(rp["lex_group"]),
                syn_group=int(rp["syn_group"]),
                para_type=rp.get("para_type"),
            )
        )
    n_base = sum(p.is_base for p in patterns)
    if n_base != 1:
        raise ResourceError(
            f"{where}: exactly one pattern must have is_base=true, found {n_base}"
        )
    return Relation(
        relation_id=str(data["relation_id"]),
        name=str(data["name"]),
        cardinality=cardinality,
        patterns=tuple(patterns),
    )


def load_resource(path: str | Path) -> list[Relation]:
    """Load and validate every relation file in a directory.

    Returns relations sorted by relation id so that downstream aggregation
    is order-stable.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise ResourceError(f"resource directory not found: {directory}")
    files = sorted(directory.glob("*.json"))
    if not files:
        raise ResourceError(f"no relation files (*.json) in {directory}")
    relations: dict[str, Relation] = {}
    for f in files:
        try:
            data = json.loads(f.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ResourceError(f"{f}: invalid JSON: {exc}") from exc
        relation = _parse_relation(data, str(f))
        if relation.relation_id in relations:
            raise ResourceError(f"{f}: duplicate relation id {relation.relation_id!r}")
        relations[relation.relation_id] = relation
    return [relations[rid] for rid in sorted(relations)]


@dataclass(frozen=True)
class ResourceStats:
    n_relations: int
    n_patterns: int
    min_patterns: int
    max_patterns: int
    avg_patterns: float
    avg_syn_groups: float
    avg_lex_groups: float

    def as_dict(self) -> dict:
        return {
            "n_relations": self.n_relations,
            "n_patterns": self.n_patterns,
            "min_patterns": self.min_patterns,
            "max_patterns": self.max_patterns,
            "avg_patterns": self.avg_patterns,
            "avg_syn_groups": self.avg_syn_groups,
            "avg_lex_groups": self.avg_lex_groups,
        }


def compute_stats(relations: Sequence[Relation]) -> ResourceStats:
    if not relations:
        raise ResourceError("cannot compute statistics of an empty resource")
    counts = [len(r.patterns) for r in relations]
    syn = [len({p.syn_group for p in r.patterns}) for r in relations]
    lex = [len({p.lex_group for p in r.patterns}) for r in relations]
    n = len(relations)
    return ResourceStats(
        n_relations=n,
        n_patterns=sum(counts),
        min_patterns=min(counts),
        max_patterns=max(counts),
        avg_patterns=sum(counts) / n,
        avg_syn_groups=sum(syn) / n,
        avg_lex_groups=sum(lex) / n,
    )


@dataclass
class TupleLoadResult:
    tuples: list[KBTuple]
    unknown_relation_count: int
    line_errors: list[str]

    def by_relation(self) -> dict[str, list[KBTuple]]:
        grouped: dict[str, list[KBTuple]] = {}
        for t in self.tuples:
            grouped.setdefault(t.relation_id, []).append(t)
        return grouped


def load_tuples(path: str | Path, relations: Sequence[Relation]) -> TupleLoadResult:
    """Load KB tuples from a JSONL file, collecting per-line errors.

    Lines referencing unknown relations are counted and dropped; malformed
    lines are reported in ``line_errors`` and loading continues.
    """
    file = Path(path)
    if not file.is_file():
        raise ResourceError(f"tuple file not found: {file}")
    known = {r.relation_id for r in relations}
    tuples: list[KBTuple] = []
    unknown = 0
    errors: list[str] = []
    with file.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: invalid JSON: {exc}")
                continue
            missing = [k for k in ("relation_id", "subject", "object") if k not in data]
            if missing:
                errors.append(f"line {lineno}: missing fields {missing}")
                continue
            subject = str(data["subject"])
            obj = str(data["object"])
            if not subject or not obj:
                errors.append(f"line {lineno}: empty subject or object")
                continue
            if PLACEHOLDER_OBJECT in subject:
                # A subject containing "[Y]" would leave two mask slots after
                # population.
                errors.append(
                    f"line {lineno}: subject {subject!r} contains {PLACEHOLDER_OBJECT!r}"
                )
                continue
            rid = str(data["relation_id"])
            if rid not in known:
                unknown += 1
                continue
            tuples.append(KBTuple(relation_id=rid, subject=subject, object=obj))
    return TupleLoadResult(tuples=tuples, unknown_relation_count=unknown, line_errors=errors)


def build_candidates(relation: Relation, tuples: Sequence[KBTuple]) -> Relation:
    """Fill the relation's candidate set with its deduplicated gold objects.

    Candidates are sorted lexicographically so argmax tie-breaking is
    reproducible.
    """
    if not tuples:
        raise ResourceError(
            f"relation {relation.relation_id}: cannot build candidates from zero tuples"
        )
    for t in tuples:
        if t.relation_id != relation.relation_id:
            raise ResourceError(
                f"tuple for {t.relation_id!r} passed to relation {relation.relation_id!r}"
            )
    candidates = tuple(sorted({t.object for t in tuples}))
    return replace(relation, candidates=candidates)


def populate(
    pattern: Pattern,
    subject: str,
    mask_token: str,
    relation_id: str = "",
    pattern_index: int = -1,
) -> PopulatedCloze:
    """Substitute the subject into [X] and the scorer's mask token into [Y]."""
    if not subject:
        raise ResourceError("cannot populate a pattern with an empty subject")
    text = pattern.template.replace(PLACEHOLDER_OBJECT, mask_token, 1)
    text = text.replace(PLACEHOLDER_SUBJECT, subject, 1)
    if PLACEHOLDER_SUBJECT in text or PLACEHOLDER_OBJECT in text:
        raise ResourceError(
            f"placeholder left in populated text {text!r} (subject {subject!r})"
        )
    if text.count(mask_token) != 1:
        raise ResourceError(
            f"populated text must contain exactly one {mask_token!r}: {text!r}"
        )
    return PopulatedCloze(
        text=text, relation_id=relation_id, pattern_index=pattern_index, subject=subject
    )


@dataclass
class FilterResult:
    kept: list[KBTuple]
    removed: int

    @property
    def retained(self) -> int:
        return len(self.kept)


def single_token_filter(
    tuples: Sequence[KBTuple],
    tokenizer_reports: Sequence[Mapping[str, bool]],
) -> FilterResult:
    """Keep tuples whose object every participating scorer sees as one token.

    ``tokenizer_reports`` holds one object-string -> verdict mapping per
    scorer. A missing verdict is an error, not a silent drop.
    """
    missing = sorted(
        {t.object for t in tuples if any(t.object not in rep for rep in tokenizer_reports)}
    )
    if missing:
        raise ResourceError(f"missing single-token verdicts for objects: {missing}")
    kept = [t for t in tuples if all(rep[t.object] for rep in tokenizer_reports)]
    return FilterResult(kept=kept, removed=len(tuples) - len(kept))


@dataclass(frozen=True)
class RelationSplit:
    train: tuple[Relation, ...]
    val: tuple[Relation, ...]
    test: tuple[Relation, ...]


def split_relations(
    relations: Sequence[Relation],
    train_ids: Iterable[str],
    val_ids: Iterable[str],
) -> RelationSplit:
    """Partition relations into train/val ids and everything-else test."""
    train_set = set(train_ids)
    val_set = set(val_ids)
    overlap = train_set & val_set
    if overlap:
        raise ResourceError(f"train/val relation ids overlap: {sorted(overlap)}")
    known = {r.relation_id for r in relations}
    unknown = (train_set | val_set) - known
    if unknown:
        raise ResourceError(f"unknown relation ids in split: {sorted(unknown)}")
    train = tuple(r for r in relations if r.relation_id in train_set)
    val = tuple(r for r in relations if r.relation_id in val_set)
    test = tuple(
        r for r in relations if r.relation_id not in train_set and r.relation_id not in val_set
    )
    return RelationSplit(train=train, val=val, test=test)


# ---------------------------------------------------------------------------
# Synthetic KB generation
# ---------------------------------------------------------------------------

_SYLLABLES = (
    "ba", "do", "fen", "gri", "ka", "lo", "mu", "nar", "pel", "qui",
    "ras", "sol", "tam", "ur", "vek", "wi", "xo", "yel", "zon", "chu",
)

# Two word-order shapes; the syn group id is the shape index.
_SHAPES = (
    "[X] {a} {b} [Y] .",
    "[Y] {b} {a} [X] .",
)


@dataclass(frozen=True)
class SynthKB:
    relations: tuple[Relation, ...]
    tuples: tuple[KBTuple, ...]
    vocabulary: tuple[str, ...]


def _pseudo_words(rng: random.Random, n: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        w = "".join(rng.choice(_SYLLABLES) for _ in range(2))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def generate_synth_kb(
    seed: int,
    n_relations: int,
    n_entities: int,
    n_patterns_per_relation: int,
) -> SynthKB:
    """Generate a deterministic toy knowledge base.

    Every relation is N-1 by construction: subjects map to objects through a
    single global assignment, so facts trained on one relation hold on all
    others (the relations are paraphrase families over the same facts).
    Patterns vary a shared filler vocabulary across two word-order shapes.
    """
    if n_relations < 1 or n_entities < 2 or n_patterns_per_relation < 1:
        raise ResourceError(
            "generate_synth_kb needs n_relations >= 1, n_entities >= 2, "
            "n_patterns_per_relation >= 1"
        )
    rng = random.Random(seed)
    fillers = _pseudo_words(rng, 24)
    entities = [f"Ent{k:02d}" for k in range(n_entities)]
    n_objects = max(2, n_entities // 6)
    objects = [f"Obj{m:02d}" for m in range(n_objects)]
    # Global subject -> object assignment shared by all relations.
    fact_of = {e: rng.choice(objects) for e in entities}

    relations: list[Relation] = []
    tuples: list[KBTuple] = []
    used_fillers: set[str] = set()
    for i in range(n_relations):
        rid = f"R{i:02d}"
        patterns = []
        for j in range(n_patterns_per_relation):
            lex = j // len(_SHAPES)
            syn = j % len(_SHAPES)
            a, b = rng.sample(fillers, 2)
            used_fillers.update((a, b))
            patterns.append(
                Pattern(
                    template=_SHAPES[syn].format(a=a, b=b),
                    is_base=(j == 0),
                    lex_group=lex,
                    syn_group=syn,
                )
            )
        relation = Relation(
            relation_id=rid,
            name=f"synthetic relation {i}",
            cardinality=Cardinality.N_TO_1,
            patterns=tuple(patterns),
        )
        n_subjects = max(2, round(0.8 * n_entities))
        subjects = sorted(rng.sample(entities, n_subjects))
        rel_tuples = [
            KBTuple(relation_id=rid, subject=s, object=fact_of[s]) for s in subjects
        ]
        relations.append(build_candidates(relation, rel_tuples))
        tuples.extend(rel_tuples)

    vocabulary = ("[MASK]", "<unk>") + tuple(
        sorted(set(entities) | set(objects) | used_fillers)
    )
    return SynthKB(
        relations=tuple(relations), tuples=tuple(tuples), vocabulary=vocabulary
    )


# ---------------------------------------------------------------------------
# Serialization of resources in the documented on-disk formats
# ---------------------------------------------------------------------------

def relation_to_dict(relation: Relation) -> dict:
    return {
        "relation_id": relation.relation_id,
        "name": relation.name,
        "cardinality": relation.cardinality.value,
        "patterns": [
            {
                "template": p.template,
                "is_base": p.is_base,
                "lex_group": p.lex_group,
                "syn_group": p.syn_group,
                "para_type": p.para_type,
            }
            for p in relation.patterns
        ],
    }


def write_resource(relations: Sequence[Relation], directory: str | Path) -> None:
    """Write one relation JSON file per relation into a directory."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for r in relations:
        path = out / f"{r.relation_id}.json"
        path.write_text(
            json.dumps(relation_to_dict(r), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


def write_tuples(tuples: Sequence[KBTuple], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in tuples:
            fh.write(
                json.dumps(
                    {"relation_id": t.relation_id, "subject": t.subject, "object": t.object},
                    sort_keys=True,
                )
                + "\n"
            )


def write_vocabulary(vocabulary: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("\n".join(vocabulary) + "\n", encoding="utf-8")


def read_vocabulary(path: str | Path) -> tuple[str, ...]:
    file = Path(path)
    if not file.is_file():
        raise ResourceError(f"vocabulary file not found: {file}")
    return tuple(
        line for line in file.read_text(encoding="utf-8").splitlines() if line
    )


def modal_object(tuples: Sequence[KBTuple], candidate_order: Sequence[str]) -> str:
    """Most frequent gold object; ties resolved by candidate order."""
    if not tuples:
        raise ResourceError("modal object of zero tuples is undefined")
    counts = Counter(t.object for t in tuples)
    order = {c: i for i, c in enumerate(candidate_order)}
    return max(counts, key=lambda obj: (counts[obj], -order.get(obj, len(order))))
