"""Independent brute-force enumerators used as oracles by the test suite.

Everything here is deliberately naive: explicit double loops over tuples and
pattern pairs, no numpy, no shared code with the production metrics module.
"""

from __future__ import annotations


def pairs(n: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n) for b in range(a + 1, n)]


def consistency(predictions, golds) -> float | None:
    n = len(predictions[0]) if predictions else 0
    if n < 2 or not predictions:
        return None
    agree = 0
    total = 0
    for row in predictions:
        for a, b in pairs(n):
            total += 1
            if row[a] == row[b]:
                agree += 1
    return agree / total


def accuracy(predictions, golds, is_base) -> float:
    base = [j for j, flag in enumerate(is_base) if flag]
    assert len(base) == 1
    j = base[0]
    correct = 0
    for row, gold in zip(predictions, golds):
        if row[j] == gold:
            correct += 1
    return correct / len(predictions)


def consistent_acc(predictions, golds) -> float | None:
    n = len(predictions[0]) if predictions else 0
    if n < 2 or not predictions:
        return None
    correct = 0
    for row, gold in zip(predictions, golds):
        if all(p == gold for p in row):
            correct += 1
    return correct / len(predictions)


def succ_patt(predictions, golds) -> float | None:
    n = len(predictions[0]) if predictions else 0
    if n < 2 or not predictions:
        return None
    hits = 0
    for j in range(n):
        if any(row[j] == gold for row, gold in zip(predictions, golds)):
            hits += 1
    return hits / n


def succ_objs(predictions, golds) -> float | None:
    n = len(predictions[0]) if predictions else 0
    if n < 2 or not predictions:
        return None
    hits = 0
    for row, gold in zip(predictions, golds):
        if any(p == gold for p in row):
            hits += 1
    return hits / len(predictions)


def _subset_consistency(predictions, keep_rows) -> float | None:
    rows = [row for row, keep in zip(predictions, keep_rows) if keep]
    if not rows:
        return None
    n = len(rows[0])
    if n < 2:
        return None
    agree = 0
    total = 0
    for row in rows:
        for a, b in pairs(n):
            total += 1
            if row[a] == row[b]:
                agree += 1
    return agree / total


def know_const(predictions, golds) -> float | None:
    n = len(predictions[0]) if predictions else 0
    if n < 2:
        return None
    known = [any(p == gold for p in row) for row, gold in zip(predictions, golds)]
    return _subset_consistency(predictions, known)


def unk_const(predictions, golds) -> float | None:
    n = len(predictions[0]) if predictions else 0
    if n < 2:
        return None
    unknown = [not any(p == gold for p in row) for row, gold in zip(predictions, golds)]
    return _subset_consistency(predictions, unknown)


def syntax_subsets(predictions, lex_groups, syn_groups) -> tuple[float | None, float | None]:
    n = len(lex_groups)
    diff_agree = diff_total = same_agree = same_total = 0
    for a, b in pairs(n):
        if lex_groups[a] != lex_groups[b]:
            continue
        for row in predictions:
            if syn_groups[a] != syn_groups[b]:
                diff_total += 1
                diff_agree += row[a] == row[b]
            else:
                same_total += 1
                same_agree += row[a] == row[b]
    return (
        diff_agree / diff_total if diff_total else None,
        same_agree / same_total if same_total else None,
    )


def pair_count(predictions) -> int:
    if not predictions:
        return 0
    n = len(predictions[0])
    return len(predictions) * len(pairs(n))
