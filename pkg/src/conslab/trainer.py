"""Consistency-regularized continued training of the toy masked LM.

The objective is a weighted sum of a pairwise two-sided KL consistency term
over candidate-restricted distributions and a masked-LM cross-entropy term,
optimized with plain SGD. All gradients are analytic and checked against
finite differences by the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConslabError
from .resource import KBTuple, Relation, populate
from .scorer import MASK_TOKEN, PARAM_NAMES, ToyMLM, ToyScorer, tokenize

EPS = 1e-12  # floor inside KL logarithms


class TrainerError(ConslabError):
    pass


class TrainingDiverged(TrainerError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and ablation switches.

    The three booleans reach the ablations: use_consistency_loss=False drops
    the consistency term, restrict_to_candidates=False widens the predicted
    distributions to the full vocabulary, use_mlm_loss=False drops the
    masked-LM term.
    """

    lam: float
    epochs: int = 3
    tuples_per_batch: int = 8
    learning_rate: float = 0.05
    seed: int = 0
    restrict_to_candidates: bool = True
    use_consistency_loss: bool = True
    use_mlm_loss: bool = True
    mlm_mask_rate: float = 0.15
    average_pairs: bool = True

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise TrainerError("lambda must be nonnegative")
        if self.tuples_per_batch < 1:
            raise TrainerError("tuples_per_batch must be at least 1")
        if self.epochs < 1:
            raise TrainerError("epochs must be at least 1")
        if not 0.0 <= self.mlm_mask_rate < 1.0:
            raise TrainerError("mlm_mask_rate must lie in [0, 1)")


@dataclass(frozen=True)
class CandidateDistribution:
    """Softmax over a relation's candidate set for one pattern."""

    probabilities: np.ndarray
    candidates: tuple[str, ...]
    pattern_index: int = -1

    def __post_init__(self) -> None:
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or p.size != len(self.candidates):
            raise TrainerError("probabilities must align with the candidate set")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise TrainerError("probabilities must be finite and nonnegative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise TrainerError("probabilities must sum to 1 within 1e-9")


def _sym_kl(p: np.ndarray, q: np.ndarray) -> float:
    # KL(P||Q) + KL(Q||P) written as sum_i (p_i - q_i)(log p_i - log q_i):
    # every summand is nonnegative even in floating point.
    lp = np.log(np.maximum(p, EPS))
    lq = np.log(np.maximum(q, EPS))
    return float(((p - q) * (lp - lq)).sum())


def consistency_loss(distributions: Sequence[CandidateDistribution]) -> float:
    """Sum of two-sided KL divergences over all pattern pairs.

    Pair terms are sorted before summation (with exact fsum) so the result
    is bitwise invariant under permutations of the input sequence.
    """
    if len(distributions) < 2:
        raise TrainerError("consistency loss needs at least two distributions")
    first = distributions[0].candidates
    for d in distributions[1:]:
        if d.candidates != first:
            raise TrainerError("all distributions must share one candidate set")
    probs = [np.asarray(d.probabilities, dtype=np.float64) for d in distributions]
    terms = [
        _sym_kl(probs[n], probs[m])
        for n in range(len(probs))
        for m in range(n + 1, len(probs))
    ]
    return math.fsum(sorted(terms))


# ---------------------------------------------------------------------------
# Analytic gradients
# ---------------------------------------------------------------------------

def zero_grads(model: ToyMLM) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(model.params[name]) for name in PARAM_NAMES}


def backward(
    model: ToyMLM, cache: Mapping[str, np.ndarray], dlogits: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate parameter gradients for one sequence given dL/dlogits."""
    p = model.params
    ids = cache["ids"]
    n = ids.size
    dh2 = dlogits @ p["w_out"].T
    grads["w_out"] += cache["h2"].T @ dlogits
    grads["b_out"] += dlogits.sum(axis=0)

    # feed-forward block with residual: h2 = h1 + tanh(h1 W1 + b1) W2 + b2
    dz2 = dh2
    dh1 = dh2.copy()
    grads["w_ff2"] += cache["f1"].T @ dz2
    grads["b_ff2"] += dz2.sum(axis=0)
    df1 = dz2 @ p["w_ff2"].T
    dz1 = df1 * (1.0 - cache["f1"] ** 2)
    grads["w_ff1"] += cache["h1"].T @ dz1
    grads["b_ff1"] += dz1.sum(axis=0)
    dh1 += dz1 @ p["w_ff1"].T

    # attention block with residual: h1 = x + (softmax(q k^T / sqrt(d)) v) Wo
    do = dh1
    dx = dh1.copy()
    grads["w_o"] += cache["ctx"].T @ do
    dctx = do @ p["w_o"].T
    dattn = dctx @ cache["v"].T
    dv = cache["attn"].T @ dctx
    attn = cache["attn"]
    dscores = attn * (dattn - (dattn * attn).sum(axis=1, keepdims=True))
    scale = 1.0 / np.sqrt(model.dim)
    dq = dscores @ cache["k"] * scale
    dk = dscores.T @ cache["q"] * scale
    grads["w_q"] += cache["x"].T @ dq
    grads["w_k"] += cache["x"].T @ dk
    grads["w_v"] += cache["x"].T @ dv
    dx += dq @ p["w_q"].T + dk @ p["w_k"].T + dv @ p["w_v"].T

    grads["pos_emb"][:n] += dx
    np.add.at(grads["tok_emb"], ids, dx)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def _consistency_value_and_dlogits(
    rows: list[np.ndarray], average_pairs: bool
) -> tuple[float, list[np.ndarray]]:
    """Pairwise sym-KL of softmaxed logit rows plus d/dlogits for each row."""
    k = len(rows)
    logps = [_log_softmax(z) for z in rows]
    ps = [np.exp(lp) for lp in logps]
    dls = [np.zeros_like(z) for z in rows]
    terms = []
    for n in range(k):
        for m in range(n + 1, k):
            kl_nm = float(np.dot(ps[n], logps[n] - logps[m]))
            kl_mn = float(np.dot(ps[m], logps[m] - logps[n]))
            terms.append(kl_nm + kl_mn)
            dls[n] += ps[n] * ((logps[n] - logps[m]) - kl_nm) + (ps[n] - ps[m])
            dls[m] += ps[m] * ((logps[m] - logps[n]) - kl_mn) + (ps[m] - ps[n])
    value = math.fsum(sorted(terms))
    if average_pairs:
        n_pairs = k * (k - 1) // 2
        value /= n_pairs
        dls = [d / n_pairs for d in dls]
    return value, dls


def mlm_loss(model: ToyMLM, masked_pattern_text: str, target_token: str) -> float:
    """Cross-entropy over the full vocabulary at the single masked position."""
    if target_token not in model.vocab:
        raise TrainerError(f"target token {target_token!r} not in vocabulary")
    tokens = tokenize(masked_pattern_text)
    mask_positions = [i for i, t in enumerate(tokens) if t == MASK_TOKEN]
    if len(mask_positions) != 1:
        raise TrainerError(
            f"expected exactly one masked position, found {len(mask_positions)}"
        )
    ids = [model.token_id(t) for t in tokens]
    cache = model.forward_all(ids)
    logp = _log_softmax(cache["logits"][mask_positions[0]])
    return float(-logp[model.vocab.index(target_token)])


@dataclass
class CombinedLoss:
    total: float
    l_c: float
    l_mlm: float
    grads: dict[str, np.ndarray]


def _cloze_ids(model: ToyMLM, relation: Relation, pattern_index: int, subject: str) -> tuple[list[int], int]:
    cloze = populate(
        relation.patterns[pattern_index], subject, MASK_TOKEN,
        relation_id=relation.relation_id, pattern_index=pattern_index,
    )
    tokens = tokenize(cloze.text)
    mask_positions = [i for i, t in enumerate(tokens) if t == MASK_TOKEN]
    if len(mask_positions) != 1:
        raise TrainerError(f"populated text {cloze.text!r} has {len(mask_positions)} masks")
    return [model.token_id(t) for t in tokens], mask_positions[0]


def combined_loss(
    model: ToyMLM,
    relation: Relation,
    tuple_batch: Sequence[KBTuple],
    config: TrainConfig,
    rng: np.random.Generator,
) -> CombinedLoss:
    """Loss and full analytic gradients for one same-relation batch.

    The consistency term averages over tuples (and, by default, over pattern
    pairs); the MLM term averages over one example per tuple-pattern with the
    object slot always masked and other tokens masked at ``mlm_mask_rate``.
    """
    if not tuple_batch:
        raise TrainerError("empty tuple batch")
    for t in tuple_batch:
        if t.relation_id != relation.relation_id:
            raise TrainerError("batch must come from a single relation")
    n_patterns = len(relation.patterns)
    if config.use_consistency_loss and n_patterns < 2:
        raise TrainerError(
            f"relation {relation.relation_id} has {n_patterns} pattern(s); "
            "the consistency loss needs at least 2"
        )
    if not relation.candidates:
        raise TrainerError(f"relation {relation.relation_id} has no candidate set")

    grads = zero_grads(model)
    cand_ids = None
    if config.restrict_to_candidates:
        helper = ToyScorer(model)
        cand_ids = np.array([helper.candidate_id(c) for c in relation.candidates])

    l_c = 0.0
    want_consistency_grads = config.use_consistency_loss and config.lam > 0.0
    if config.use_consistency_loss:
        for t in tuple_batch:
            rows = []
            caches = []
            positions = []
            for j in range(n_patterns):
                ids, mask_pos = _cloze_ids(model, relation, j, t.subject)
                cache = model.forward_all(ids)
                caches.append(cache)
                positions.append(mask_pos)
                row = cache["logits"][mask_pos]
                rows.append(row[cand_ids] if cand_ids is not None else row.copy())
            value, drows = _consistency_value_and_dlogits(rows, config.average_pairs)
            l_c += value / len(tuple_batch)
            if want_consistency_grads:
                coeff = config.lam / len(tuple_batch)
                for j in range(n_patterns):
                    dlogits = np.zeros_like(caches[j]["logits"])
                    if cand_ids is not None:
                        dlogits[positions[j], cand_ids] = coeff * drows[j]
                    else:
                        dlogits[positions[j]] = coeff * drows[j]
                    backward(model, caches[j], dlogits, grads)

    l_mlm = 0.0
    if config.use_mlm_loss:
        n_examples = len(tuple_batch) * n_patterns
        for t in tuple_batch:
            target_id = model.token_id(t.object)
            if model.vocab[target_id] != t.object:
                raise TrainerError(f"object {t.object!r} not in vocabulary")
            for j in range(n_patterns):
                ids, mask_pos = _cloze_ids(model, relation, j, t.subject)
                ids = list(ids)
                targets = [(mask_pos, target_id)]
                for pos in range(len(ids)):
                    if pos == mask_pos:
                        continue
                    if rng.random() < config.mlm_mask_rate:
                        targets.append((pos, ids[pos]))
                        ids[pos] = model.mask_id
                cache = model.forward_all(ids)
                dlogits = np.zeros_like(cache["logits"])
                example_loss = 0.0
                for pos, tid in targets:
                    logp = _log_softmax(cache["logits"][pos])
                    example_loss += -float(logp[tid])
                    soft = np.exp(logp)
                    soft[tid] -= 1.0
                    dlogits[pos] += soft / len(targets)
                example_loss /= len(targets)
                l_mlm += example_loss / n_examples
                backward(model, cache, dlogits / n_examples, grads)

    total = config.lam * l_c + l_mlm
    return CombinedLoss(total=total, l_c=l_c, l_mlm=l_mlm, grads=grads)


def sgd_step(model: ToyMLM, grads: Mapping[str, np.ndarray], learning_rate: float) -> None:
    for name in PARAM_NAMES:
        model.params[name] -= learning_rate * grads[name]


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    loss: float | None = None
    l_c: float | None = None
    l_mlm: float | None = None
    val_consistency: float | None = None
    val_accuracy: float | None = None
    val_consistent_acc: float | None = None

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "loss": self.loss,
            "l_c": self.l_c,
            "l_mlm": self.l_mlm,
            "val_consistency": self.val_consistency,
            "val_accuracy": self.val_accuracy,
            "val_consistent_acc": self.val_consistent_acc,
        }


@dataclass
class TrainResult:
    model: ToyMLM
    best_epoch: int
    log: list[TrainLogRecord]


def _validate_macro(model: ToyMLM, relations: Sequence[Relation], tuples_by_relation: Mapping[str, Sequence[KBTuple]]) -> tuple[float | None, float | None, float | None]:
    from .metrics import aggregate, relation_report
    from .probing import build_prediction_table

    scorer = ToyScorer(model)
    reports = []
    for r in relations:
        rel_tuples = tuples_by_relation.get(r.relation_id, [])
        if not rel_tuples:
            continue
        reports.append(relation_report(build_prediction_table(scorer, r, rel_tuples)))
    if not reports:
        return None, None, None
    macro = aggregate(reports, mode="macro")["macro"]

    def mean(metric: str) -> float | None:
        stat = macro[metric]
        return stat["mean"] if stat else None

    return mean("consistency"), mean("accuracy"), mean("consistent_acc")


def train(
    model: ToyMLM,
    train_relations: Sequence[Relation],
    val_relations: Sequence[Relation],
    tuples: Sequence[KBTuple],
    config: TrainConfig,
) -> TrainResult:
    """SGD training loop, deterministic in the config seed.

    Batches of ``tuples_per_batch`` same-relation tuples are drawn round-robin
    across the train relations with a per-epoch seeded shuffle. The returned
    model is the checkpoint of the epoch with the best validation
    consistent-acc (earlier epoch wins ties); without validation relations it
    is the final model.
    """
    train_ids = {r.relation_id for r in train_relations}
    val_ids = {r.relation_id for r in val_relations}
    if train_ids & val_ids:
        raise TrainerError("train and validation relation sets must be disjoint")
    if not train_relations:
        raise TrainerError("no train relations")

    by_relation: dict[str, list[KBTuple]] = {}
    for t in tuples:
        by_relation.setdefault(t.relation_id, []).append(t)
    for r in train_relations:
        if not by_relation.get(r.relation_id):
            raise TrainerError(f"no tuples for train relation {r.relation_id}")

    model = model.copy()
    rng = np.random.default_rng(config.seed)
    ordered_train = sorted(train_relations, key=lambda r: r.relation_id)
    log: list[TrainLogRecord] = []
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_metric = -math.inf
    best_epoch = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        batches_per_relation: dict[str, list[list[KBTuple]]] = {}
        for r in ordered_train:
            pool = list(by_relation[r.relation_id])
            order = rng.permutation(len(pool))
            shuffled = [pool[i] for i in order]
            batches_per_relation[r.relation_id] = [
                shuffled[i : i + config.tuples_per_batch]
                for i in range(0, len(shuffled), config.tuples_per_batch)
            ]
        max_batches = max(len(b) for b in batches_per_relation.values())
        for round_idx in range(max_batches):
            for r in ordered_train:
                rel_batches = batches_per_relation[r.relation_id]
                if round_idx >= len(rel_batches):
                    continue
                step += 1
                result = combined_loss(model, r, rel_batches[round_idx], config, rng)
                if not math.isfinite(result.total):
                    raise TrainingDiverged(step)
                sgd_step(model, result.grads, config.learning_rate)
                log.append(
                    TrainLogRecord(
                        epoch=epoch, step=step,
                        loss=result.total, l_c=result.l_c, l_mlm=result.l_mlm,
                    )
                )
        val_cons, val_acc, val_cacc = _validate_macro(model, val_relations, by_relation)
        log.append(
            TrainLogRecord(
                epoch=epoch, step=step,
                val_consistency=val_cons, val_accuracy=val_acc,
                val_consistent_acc=val_cacc,
            )
        )
        selector = val_cacc if val_cacc is not None else (0.0 if val_relations else None)
        if selector is None:
            # no validation set: keep the latest parameters
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_epoch = epoch
        elif selector > best_metric:
            best_metric = selector
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_epoch = epoch
    return TrainResult(model=ToyMLM(model.vocab, best_params), best_epoch=best_epoch, log=log)


def select_lambda(grid: Sequence[float], val_metric_logs: Mapping[float, float]) -> float:
    """Pick the lambda with the best validation consistent-acc; ties go small."""
    if not grid:
        raise TrainerError("empty lambda grid")
    missing = [lam for lam in grid if lam not in val_metric_logs]
    if missing:
        raise TrainerError(f"no validation metric recorded for lambda(s) {missing}")
    return min(grid, key=lambda lam: (-val_metric_logs[lam], lam))
