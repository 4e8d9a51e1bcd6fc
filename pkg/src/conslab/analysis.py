"""Representation-space analysis and statistical tests.

Hand-rolled Lloyd k-means with seeded distinct-point initialization,
V-measure from natural-log conditional entropies, Spearman rank correlation
with average ranks on ties, and a two-sided McNemar test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConslabError
from .resource import KBTuple, Relation, populate
from .scorer import Scorer, ScoreRequest


class AnalysisError(ConslabError):
    pass


# ---------------------------------------------------------------------------
# KMeans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KMeansResult:
    assignment: tuple[int, ...]
    centroids: np.ndarray
    inertia: float
    iterations: int


def _inertia(points: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    return float(((points - centroids[assignment]) ** 2).sum())


def kmeans(vectors: Sequence[Sequence[float]] | np.ndarray, k: int, seed: int, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from k seeded distinct starting points.

    Runs until the assignment reaches a fixpoint or max_iter; empty clusters
    are re-seeded from the point farthest from its centroid. Inertia is
    checked to be non-increasing on every iteration.
    """
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise AnalysisError("vectors must form a nonempty 2-D array")
    n = points.shape[0]
    if k <= 0:
        raise AnalysisError("k must be positive")
    if k > n:
        raise AnalysisError(f"k={k} exceeds the number of points ({n})")
    if max_iter < 1:
        raise AnalysisError("max_iter must be at least 1")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    chosen: list[int] = []
    seen: set[bytes] = set()
    for idx in order:
        key = points[idx].tobytes()
        if key not in seen:
            seen.add(key)
            chosen.append(int(idx))
            if len(chosen) == k:
                break
    for idx in order:  # fewer distinct points than k: pad with duplicates
        if len(chosen) == k:
            break
        if int(idx) not in chosen:
            chosen.append(int(idx))
    centroids = points[chosen].copy()

    assignment = None
    prev_inertia = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignment = dists.argmin(axis=1)  # ties go to the lowest index
        for cluster in range(k):
            if not np.any(new_assignment == cluster):
                farthest = int(dists[np.arange(n), new_assignment].argmax())
                centroids[cluster] = points[farthest]
                new_assignment[farthest] = cluster
        cur_inertia = _inertia(points, centroids, new_assignment)
        if cur_inertia > prev_inertia + 1e-9:
            raise AnalysisError("k-means inertia increased; numerical invariant broken")
        prev_inertia = cur_inertia
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for cluster in range(k):
            members = points[assignment == cluster]
            if members.shape[0]:
                centroids[cluster] = members.mean(axis=0)
    final_inertia = _inertia(points, centroids, assignment)
    return KMeansResult(
        assignment=tuple(int(a) for a in assignment),
        centroids=centroids,
        inertia=final_inertia,
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# V-measure
# ---------------------------------------------------------------------------

def _entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    probs = counts[counts > 0] / total
    return float(-(probs * np.log(probs)).sum())


def v_measure(assignment: Sequence, labels: Sequence) -> float:
    """Harmonic mean of homogeneity and completeness (natural-log entropies)."""
    if len(assignment) != len(labels):
        raise AnalysisError("assignment and labels must have equal length")
    if not assignment:
        raise AnalysisError("cannot compute V-measure of an empty clustering")
    clusters = {c: i for i, c in enumerate(dict.fromkeys(assignment))}
    classes = {c: i for i, c in enumerate(dict.fromkeys(labels))}
    table = np.zeros((len(classes), len(clusters)), dtype=np.float64)
    for a, l in zip(assignment, labels):
        table[classes[l], clusters[a]] += 1

    h_class = _entropy(table.sum(axis=1))
    h_cluster = _entropy(table.sum(axis=0))
    n = table.sum()
    h_class_given_cluster = 0.0
    for j in range(table.shape[1]):
        col = table[:, j]
        h_class_given_cluster += (col.sum() / n) * _entropy(col)
    h_cluster_given_class = 0.0
    for i in range(table.shape[0]):
        row = table[i]
        h_cluster_given_class += (row.sum() / n) * _entropy(row)

    homogeneity = 1.0 if h_class == 0 else 1.0 - h_class_given_cluster / h_class
    completeness = 1.0 if h_cluster == 0 else 1.0 - h_cluster_given_class / h_cluster
    if homogeneity + completeness == 0:
        return 0.0
    return 2 * homogeneity * completeness / (homogeneity + completeness)


# ---------------------------------------------------------------------------
# Spearman rank correlation
# ---------------------------------------------------------------------------

def _average_ranks(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size, dtype=np.float64)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average of 1-based ranks
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation: Pearson correlation of average-rank vectors."""
    if len(x) != len(y):
        raise AnalysisError("inputs must have equal length")
    if len(x) < 3:
        raise AnalysisError("spearman needs at least 3 observations")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if denom == 0:
        raise AnalysisError("spearman is undefined for constant inputs")
    return float((dx * dy).sum()) / denom


# ---------------------------------------------------------------------------
# McNemar test
# ---------------------------------------------------------------------------

class McNemarMethod(Enum):
    MCNEMAR_CHI2 = "MCNEMAR_CHI2"
    MCNEMAR_EXACT = "MCNEMAR_EXACT"


@dataclass(frozen=True)
class SignificanceResult:
    statistic: float
    p_value: float
    method: McNemarMethod

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_value <= 1.0:
            raise AnalysisError("p-value outside [0, 1]")


# Discordant-pair count below which the exact binomial test is used.
EXACT_THRESHOLD = 20


def _chi2_sf_1df(x: float) -> float:
    # Survival function of chi-square with one degree of freedom.
    return math.erfc(math.sqrt(x / 2.0))


def _exact_two_sided_p(b: int, c: int) -> float:
    n = b + c
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return min(1.0, 2.0 * tail)


def mcnemar(b: int, c: int) -> SignificanceResult:
    """Two-sided McNemar test on the discordant-pair counts.

    The statistic is always the continuity-corrected chi-square value
    (max(|b-c|-1, 0)^2 / (b+c)), so equal counts give statistic 0 and p 1.
    The p-value uses the exact binomial when b + c < EXACT_THRESHOLD and the
    chi-square tail otherwise.
    """
    if b < 0 or c < 0:
        raise AnalysisError("discordant counts must be nonnegative")
    n = b + c
    if n == 0:
        return SignificanceResult(0.0, 1.0, McNemarMethod.MCNEMAR_EXACT)
    statistic = max(abs(b - c) - 1, 0) ** 2 / n
    if n < EXACT_THRESHOLD:
        return SignificanceResult(statistic, _exact_two_sided_p(b, c), McNemarMethod.MCNEMAR_EXACT)
    return SignificanceResult(statistic, _chi2_sf_1df(statistic), McNemarMethod.MCNEMAR_CHI2)


# ---------------------------------------------------------------------------
# Representation study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray  # one row per populated cloze
    pattern_labels: tuple[int, ...]
    subject_labels: tuple[str, ...]
    relation_id: str

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise AnalysisError("embedding vectors must be 2-D")
        if len(self.pattern_labels) != self.vectors.shape[0] or len(
            self.subject_labels
        ) != self.vectors.shape[0]:
            raise AnalysisError("labels must cover every embedding row")


@dataclass(frozen=True)
class RepresentationStudy:
    embeddings: EmbeddingSet
    pattern_vmeasure: float
    subject_vmeasure: float
    # V-measures of each clustering against the other labeling, for context.
    cross_vmeasures: dict


def representation_study(
    scorer: Scorer,
    relation: Relation,
    tuples: Sequence[KBTuple],
    seed: int = 0,
    max_iter: int = 100,
) -> RepresentationStudy:
    """Cluster mask-position hidden states by pattern count and subject count.

    pattern_vmeasure scores the k=#patterns clustering against pattern labels;
    subject_vmeasure scores the k=#subjects clustering against subject labels.
    """
    if not getattr(scorer, "supports_hidden", False):
        raise AnalysisError(
            f"scorer {scorer.model_id!r} does not export hidden states"
        )
    if not tuples:
        raise AnalysisError("representation study needs at least one tuple")
    vectors = []
    pattern_labels = []
    subject_labels = []
    for t in tuples:
        for j, pattern in enumerate(relation.patterns):
            cloze = populate(
                pattern, t.subject, scorer.mask_token,
                relation_id=relation.relation_id, pattern_index=j,
            )
            response = scorer.score(
                ScoreRequest(
                    text=cloze.text,
                    candidates=relation.candidates or (t.object,),
                    want_hidden=True,
                    relation_id=relation.relation_id,
                )
            )
            if response.hidden is None:
                raise AnalysisError(
                    f"scorer {scorer.model_id!r} returned no hidden state"
                )
            vectors.append(np.asarray(response.hidden, dtype=np.float64))
            pattern_labels.append(j)
            subject_labels.append(t.subject)
    embeddings = EmbeddingSet(
        vectors=np.vstack(vectors),
        pattern_labels=tuple(pattern_labels),
        subject_labels=tuple(subject_labels),
        relation_id=relation.relation_id,
    )
    n_patterns = len(relation.patterns)
    n_subjects = len(dict.fromkeys(subject_labels))
    by_patterns = kmeans(embeddings.vectors, n_patterns, seed=seed, max_iter=max_iter)
    by_subjects = kmeans(embeddings.vectors, n_subjects, seed=seed, max_iter=max_iter)
    return RepresentationStudy(
        embeddings=embeddings,
        pattern_vmeasure=v_measure(by_patterns.assignment, pattern_labels),
        subject_vmeasure=v_measure(by_subjects.assignment, subject_labels),
        cross_vmeasures={
            "k_patterns_vs_subject_labels": v_measure(by_patterns.assignment, subject_labels),
            "k_subjects_vs_pattern_labels": v_measure(by_subjects.assignment, pattern_labels),
        },
    )


def write_embeddings_tsv(embeddings: EmbeddingSet, path: str | Path) -> None:
    """One row per populated cloze: relation, pattern index, subject, vector."""
    dim = embeddings.vectors.shape[1]
    header = ["relation", "pattern_index", "subject"] + [f"v{i}" for i in range(dim)]
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row, pat, subj in zip(
            embeddings.vectors, embeddings.pattern_labels, embeddings.subject_labels
        ):
            cells = [embeddings.relation_id, str(pat), subj]
            cells.extend(repr(float(v)) for v in row)
            fh.write("\t".join(cells) + "\n")
