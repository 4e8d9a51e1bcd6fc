import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conslab.resource import Cardinality, KBTuple, Pattern, Relation
from conslab.scorer import PARAM_NAMES, ToyMLM
from conslab.trainer import (
    CandidateDistribution,
    TrainConfig,
    TrainerError,
    TrainingDiverged,
    combined_loss,
    consistency_loss,
    mlm_loss,
    select_lambda,
    sgd_step,
    train,
)


def dist(probs, candidates=("a", "b"), pattern_index=0):
    return CandidateDistribution(
        probabilities=np.asarray(probs, dtype=np.float64),
        candidates=candidates,
        pattern_index=pattern_index,
    )


class TestConsistencyLoss:
    def test_identical_distributions_give_zero(self):
        q = dist([0.3, 0.7])
        assert consistency_loss([q, q, q, q]) == 0.0

    def test_hand_evaluated_ln3(self):
        value = consistency_loss([dist([0.75, 0.25]), dist([0.25, 0.75])])
        assert abs(value - math.log(3)) < 1e-9

    def test_three_patterns_sum_three_pair_terms(self):
        a, b, c = dist([0.6, 0.4]), dist([0.5, 0.5]), dist([0.2, 0.8])
        total = consistency_loss([a, b, c])
        by_pairs = (
            consistency_loss([a, b]) + consistency_loss([a, c]) + consistency_loss([b, c])
        )
        assert total == pytest.approx(by_pairs, abs=1e-12)

    def test_sequence_permutation_is_bitwise_invariant(self):
        rng = np.random.default_rng(4)
        ds = [dist(rng.dirichlet([1, 1, 1]), candidates=("a", "b", "c")) for _ in range(5)]
        reference = consistency_loss(ds)
        for _ in range(10):
            perm = [ds[i] for i in rng.permutation(len(ds))]
            assert consistency_loss(perm) == reference

    def test_common_candidate_permutation_invariance(self):
        rng = np.random.default_rng(8)
        p, q = rng.dirichlet([1] * 4), rng.dirichlet([1] * 4)
        base = consistency_loss(
            [dist(p, candidates=("a", "b", "c", "d")), dist(q, candidates=("a", "b", "c", "d"))]
        )
        perm = [2, 0, 3, 1]
        permuted = consistency_loss(
            [dist(p[perm], candidates=("c", "a", "d", "b")),
             dist(q[perm], candidates=("c", "a", "d", "b"))]
        )
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_fewer_than_two_rejected(self):
        with pytest.raises(TrainerError, match="at least two"):
            consistency_loss([dist([0.5, 0.5])])

    def test_mismatched_candidate_sets_rejected(self):
        with pytest.raises(TrainerError, match="candidate set"):
            consistency_loss([dist([0.5, 0.5]), dist([0.5, 0.5], candidates=("x", "y"))])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=80, deadline=None)
    def test_nonnegative_and_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        cands = tuple(f"c{i}" for i in range(k))
        value = consistency_loss([dist(p, cands), dist(q, cands)])
        assert value >= 0.0
        assert consistency_loss([dist(p, cands), dist(p, cands)]) == 0.0
        if np.max(np.abs(p - q)) > 1e-9:
            assert value > 0.0

    def test_distribution_validation(self):
        with pytest.raises(TrainerError, match="sum to 1"):
            dist([0.5, 0.6])
        with pytest.raises(TrainerError, match="finite"):
            dist([1.5, -0.5])


VOCAB = ("[MASK]", "<unk>", "SubjA", "SubjB", "likes", "near", "ObjA", "ObjB",
         "extra1", "extra2", "extra3", "extra4")


def fixture_relation():
    return Relation(
        "rf", "fixture", Cardinality.N_TO_1,
        (
            Pattern("[X] likes [Y] .", True, 0, 0),
            Pattern("[Y] near [X] .", False, 0, 1),
        ),
        candidates=("ObjA", "ObjB"),
    )


def fixture_tuples():
    return [KBTuple("rf", "SubjA", "ObjA"), KBTuple("rf", "SubjB", "ObjB")]


def fixture_model(seed=3, dim=4, hidden_dim=5, max_len=8):
    assert len(VOCAB) == 12
    return ToyMLM.init(VOCAB, dim=dim, hidden_dim=hidden_dim, max_len=max_len, seed=seed)


class TestMlmLoss:
    def test_uniform_model_gives_log_v(self):
        vocab = ("[MASK]", "<unk>") + tuple(f"w{i}" for i in range(98))
        zeros = {
            name: np.zeros_like(arr)
            for name, arr in ToyMLM.init(vocab, dim=4, hidden_dim=4, max_len=4, seed=0).params.items()
        }
        model = ToyMLM(vocab, zeros)
        assert mlm_loss(model, "w0 [MASK] w1", "w5") == pytest.approx(math.log(100), abs=1e-12)

    def test_confident_model_near_zero(self):
        model = fixture_model()
        target = "ObjA"
        tid = model.vocab.index(target)
        model.params["b_out"][:] = -50.0
        model.params["b_out"][tid] = 50.0
        assert mlm_loss(model, "SubjA likes [MASK] .", target) < 1e-6

    def test_unknown_target_rejected(self):
        with pytest.raises(TrainerError, match="not in vocabulary"):
            mlm_loss(fixture_model(), "SubjA likes [MASK] .", "Zurich")


class TestCombinedLoss:
    def test_gradient_matches_central_finite_differences(self):
        model = fixture_model()
        relation = fixture_relation()
        tuples = fixture_tuples()
        config = TrainConfig(lam=0.7, mlm_mask_rate=0.25, seed=0)

        def loss_at(params):
            rng = np.random.default_rng(99)
            return combined_loss(ToyMLM(model.vocab, params), relation, tuples, config, rng).total

        rng = np.random.default_rng(99)
        result = combined_loss(model, relation, tuples, config, rng)
        step = 1e-5
        for name in PARAM_NAMES:
            grad = result.grads[name]
            it = np.nditer(grad, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                plus = {k: v.copy() for k, v in model.params.items()}
                plus[name][idx] += step
                minus = {k: v.copy() for k, v in model.params.items()}
                minus[name][idx] -= step
                fd = (loss_at(plus) - loss_at(minus)) / (2 * step)
                denom = max(abs(grad[idx]), 1e-8)
                assert abs(fd - grad[idx]) / denom < 1e-4, (name, idx)

    def test_lambda_zero_equals_pure_mlm_bitwise(self):
        model = fixture_model()
        relation = fixture_relation()
        tuples = fixture_tuples()
        lam0 = TrainConfig(lam=0.0, seed=0)
        no_consistency = TrainConfig(lam=0.5, use_consistency_loss=False, seed=0)
        out_a = combined_loss(model, relation, tuples, lam0, np.random.default_rng(7))
        out_b = combined_loss(model, relation, tuples, no_consistency, np.random.default_rng(7))
        for name in PARAM_NAMES:
            assert np.array_equal(out_a.grads[name], out_b.grads[name])
        model_a, model_b = model.copy(), model.copy()
        sgd_step(model_a, out_a.grads, 0.05)
        sgd_step(model_b, out_b.grads, 0.05)
        for name in PARAM_NAMES:
            assert np.array_equal(model_a.params[name], model_b.params[name])
        assert out_a.total == out_a.l_mlm

    def test_no_mlm_gives_pure_consistency(self):
        model = fixture_model()
        out = combined_loss(
            model, fixture_relation(), fixture_tuples(),
            TrainConfig(lam=0.5, use_mlm_loss=False, seed=0),
            np.random.default_rng(0),
        )
        assert out.l_mlm == 0.0
        assert out.total == 0.5 * out.l_c

    def test_untyped_widens_distribution_support(self):
        model = fixture_model()
        typed = combined_loss(
            model, fixture_relation(), fixture_tuples(),
            TrainConfig(lam=1.0, use_mlm_loss=False, seed=0),
            np.random.default_rng(0),
        )
        untyped = combined_loss(
            model, fixture_relation(), fixture_tuples(),
            TrainConfig(lam=1.0, use_mlm_loss=False, restrict_to_candidates=False, seed=0),
            np.random.default_rng(0),
        )
        assert typed.l_c != untyped.l_c
        # candidate restriction keeps non-candidate token embedding rows inert
        cand_rows = {model.vocab.index("ObjA"), model.vocab.index("ObjB")}
        inert = [i for i in range(len(model.vocab)) if i not in cand_rows]
        assert np.any(untyped.grads["w_out"][:, inert] != 0)
        assert np.all(typed.grads["w_out"][:, inert] == 0)

    def test_single_pattern_with_consistency_rejected(self):
        single = Relation(
            "rs", "one", Cardinality.N_TO_1,
            (Pattern("[X] likes [Y] .", True, 0, 0),),
            candidates=("ObjA",),
        )
        with pytest.raises(TrainerError, match="at least 2"):
            combined_loss(
                fixture_model(), single, [KBTuple("rs", "SubjA", "ObjA")],
                TrainConfig(lam=0.5, seed=0), np.random.default_rng(0),
            )

    def test_mixed_relation_batch_rejected(self):
        with pytest.raises(TrainerError, match="single relation"):
            combined_loss(
                fixture_model(), fixture_relation(),
                [KBTuple("other", "SubjA", "ObjA")],
                TrainConfig(lam=0.5, seed=0), np.random.default_rng(0),
            )


class TestTrain:
    def _kb(self):
        from conslab.resource import generate_synth_kb

        return generate_synth_kb(seed=11, n_relations=3, n_entities=12, n_patterns_per_relation=4)

    def test_zero_learning_rate_is_identity(self):
        kb = self._kb()
        model = ToyMLM.init(kb.vocabulary, dim=8, hidden_dim=8, max_len=12, seed=0)
        config = TrainConfig(lam=0.5, epochs=2, learning_rate=0.0, seed=5)
        result = train(model, kb.relations[:1], kb.relations[1:2], kb.tuples, config)
        for name in PARAM_NAMES:
            assert np.array_equal(result.model.params[name], model.params[name])

    def test_two_runs_same_seed_identical(self):
        kb = self._kb()
        model = ToyMLM.init(kb.vocabulary, dim=8, hidden_dim=8, max_len=12, seed=0)
        config = TrainConfig(lam=0.5, epochs=2, learning_rate=0.05, seed=5)
        a = train(model, kb.relations[:1], kb.relations[1:2], kb.tuples, config)
        b = train(model, kb.relations[:1], kb.relations[1:2], kb.tuples, config)
        for name in PARAM_NAMES:
            assert np.array_equal(a.model.params[name], b.model.params[name])
        assert [r.as_dict() for r in a.log] == [r.as_dict() for r in b.log]

    def test_overlapping_splits_rejected(self):
        kb = self._kb()
        model = ToyMLM.init(kb.vocabulary, dim=8, hidden_dim=8, max_len=12, seed=0)
        with pytest.raises(TrainerError, match="disjoint"):
            train(model, kb.relations[:1], kb.relations[:1], kb.tuples,
                  TrainConfig(lam=0.5, seed=0))

    def test_divergence_reports_step(self):
        kb = self._kb()
        model = ToyMLM.init(kb.vocabulary, dim=8, hidden_dim=8, max_len=12, seed=0)
        model.params["tok_emb"][:] = 1e200  # attention scores overflow to nan
        config = TrainConfig(lam=0.5, epochs=1, learning_rate=0.05, seed=5)
        with pytest.raises(TrainingDiverged, match="step 1") as excinfo:
            with np.errstate(over="ignore", invalid="ignore"):
                train(model, kb.relations[:1], [], kb.tuples, config)
        assert excinfo.value.step == 1

    def test_log_shape(self):
        kb = self._kb()
        model = ToyMLM.init(kb.vocabulary, dim=8, hidden_dim=8, max_len=12, seed=0)
        config = TrainConfig(lam=0.5, epochs=2, tuples_per_batch=4, learning_rate=0.01, seed=5)
        result = train(model, kb.relations[:1], kb.relations[1:2], kb.tuples, config)
        epoch_records = [r for r in result.log if r.val_consistent_acc is not None]
        step_records = [r for r in result.log if r.loss is not None]
        assert len(epoch_records) == 2
        assert all(math.isfinite(r.loss) for r in step_records)
        assert result.best_epoch in (1, 2)


class TestSelectLambda:
    def test_single_element(self):
        assert select_lambda([0.5], {0.5: 0.2}) == 0.5

    def test_argmax(self):
        assert select_lambda([0.1, 0.5, 1.0], {0.1: 0.30, 0.5: 0.33, 1.0: 0.31}) == 0.5

    def test_tie_prefers_smaller(self):
        assert select_lambda([1.0, 0.5, 0.1], {0.1: 0.3, 0.5: 0.3, 1.0: 0.3}) == 0.1

    def test_empty_grid_rejected(self):
        with pytest.raises(TrainerError, match="empty"):
            select_lambda([], {})

    def test_missing_log_rejected(self):
        with pytest.raises(TrainerError, match="0.5"):
            select_lambda([0.1, 0.5], {0.1: 0.3})
