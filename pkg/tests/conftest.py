import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conslab.metrics import PredictionTable
from conslab.resource import Cardinality, generate_synth_kb


@pytest.fixture(scope="session")
def synth_kb():
    return generate_synth_kb(seed=11, n_relations=5, n_entities=50, n_patterns_per_relation=4)


@pytest.fixture
def tuples_by_relation(synth_kb):
    grouped = {}
    for t in synth_kb.tuples:
        grouped.setdefault(t.relation_id, []).append(t)
    return grouped


def make_table(
    predictions,
    golds,
    is_base=None,
    lex_groups=None,
    syn_groups=None,
    cardinality=Cardinality.N_TO_1,
    relation_id="T00",
    subjects=(),
):
    n = len(predictions[0])
    return PredictionTable(
        relation_id=relation_id,
        cardinality=cardinality,
        predictions=tuple(tuple(row) for row in predictions),
        golds=tuple(golds),
        is_base=tuple(is_base) if is_base is not None else tuple(j == 0 for j in range(n)),
        lex_groups=tuple(lex_groups) if lex_groups is not None else tuple(range(n)),
        syn_groups=tuple(syn_groups) if syn_groups is not None else tuple(range(n)),
        subjects=tuple(subjects),
    )


def random_table(rng: np.random.Generator, max_tuples=10, max_patterns=6, cardinality=Cardinality.N_TO_1):
    n_tuples = int(rng.integers(1, max_tuples + 1))
    n_patterns = int(rng.integers(1, max_patterns + 1))
    alphabet = ["A", "B", "C", "D", "E"]
    predictions = [
        [alphabet[int(rng.integers(0, len(alphabet)))] for _ in range(n_patterns)]
        for _ in range(n_tuples)
    ]
    golds = [alphabet[int(rng.integers(0, len(alphabet)))] for _ in range(n_tuples)]
    base = int(rng.integers(0, n_patterns))
    is_base = [j == base for j in range(n_patterns)]
    lex_groups = [int(rng.integers(0, 3)) for _ in range(n_patterns)]
    syn_groups = [int(rng.integers(0, 3)) for _ in range(n_patterns)]
    return make_table(
        predictions, golds, is_base, lex_groups, syn_groups, cardinality=cardinality
    )
