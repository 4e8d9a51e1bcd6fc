import json
import math
import random

CLOZE = "the capital of wales is [MASK]"
CANDIDATES = ["cardiff", "london", "paris"]


class TestHello:
    def test_fields_present_and_mask_nonempty(self, bridge):
        hello = bridge.request({"type": "hello"})
        assert hello["model_id"]
        assert hello["mask_token"] == "[MASK]"
        assert hello["vocab_size"] == 28
        assert isinstance(hello["space_sensitive"], bool)


class TestScore:
    def test_response_length_and_order(self, bridge):
        response = bridge.request(
            {"type": "score", "text": CLOZE, "candidates": CANDIDATES, "want_hidden": False}
        )
        assert len(response["log_probs"]) == 3
        singles = [
            bridge.request({"type": "score", "text": CLOZE, "candidates": [c]})["log_probs"][0]
            for c in CANDIDATES
        ]
        assert response["log_probs"] == singles

    def test_duplicate_candidates_equal(self, bridge):
        response = bridge.request(
            {"type": "score", "text": CLOZE, "candidates": ["cardiff", "cardiff"]}
        )
        assert response["log_probs"][0] == response["log_probs"][1]

    def test_full_vocabulary_softmax_normalized(self, bridge):
        response = bridge.request(
            {"type": "score", "text": CLOZE, "candidates": ["cardiff"], "want_norm": True}
        )
        assert abs(response["norm"] - 1.0) < 1e-6

    def test_log_probs_are_log_scale(self, bridge):
        response = bridge.request({"type": "score", "text": CLOZE, "candidates": CANDIDATES})
        assert all(lp < 0.0 for lp in response["log_probs"])
        assert sum(math.exp(lp) for lp in response["log_probs"]) < 1.0 + 1e-9

    def test_multi_token_candidate_marked_null(self, bridge):
        response = bridge.request(
            {"type": "score", "text": CLOZE, "candidates": ["cardiff", "luxembourg city"]}
        )
        assert response["log_probs"][0] is not None
        assert response["log_probs"][1] is None

    def test_mask_count_errors(self, bridge):
        no_mask = bridge.request({"type": "score", "text": "the capital", "candidates": ["paris"]})
        assert no_mask["type"] == "error"
        two = bridge.request(
            {"type": "score", "text": "[MASK] of [MASK]", "candidates": ["paris"]}
        )
        assert two["type"] == "error"

    def test_hidden_vector_when_requested(self, bridge):
        response = bridge.request(
            {"type": "score", "text": CLOZE, "candidates": ["cardiff"], "want_hidden": True}
        )
        assert len(response["hidden"]) == 32
        without = bridge.request({"type": "score", "text": CLOZE, "candidates": ["cardiff"]})
        assert "hidden" not in without

    def test_deterministic(self, bridge):
        message = {"type": "score", "text": CLOZE, "candidates": CANDIDATES, "want_hidden": True}
        a = bridge.request(message)
        b = bridge.request(message)
        assert a["log_probs"] == b["log_probs"]
        assert a["hidden"] == b["hidden"]


class TestTokenizeCheck:
    def test_verdicts_echo_order(self, bridge):
        words = ["cardiff", "london", "paris", "tokyo", "france",
                 "luxembourg city", "born", "plays", "obj00", "ent03"]
        response = bridge.request({"type": "tokenize_check", "words": words})
        assert len(response["single"]) == 10
        assert response["single"][5] is False
        assert all(response["single"][i] for i in range(10) if i != 5)

    def test_empty_string_false(self, bridge):
        response = bridge.request({"type": "tokenize_check", "words": [""]})
        assert response["single"] == [False]

    def test_unknown_word_false(self, bridge):
        response = bridge.request({"type": "tokenize_check", "words": ["zzzqqq"]})
        assert response["single"] == [False]


class TestRobustness:
    def test_malformed_json_keeps_loop_alive(self, bridge):
        error = bridge.send_raw("{broken json")
        assert error["type"] == "error"
        assert bridge.alive()
        hello = bridge.request({"type": "hello"})
        assert hello["model_id"]

    def test_unknown_type_is_error(self, bridge):
        response = bridge.request({"type": "finetune"})
        assert response["type"] == "error"

    def test_fuzz_1000_requests_round_trip(self, bridge):
        rng = random.Random(0)
        words = ["cardiff", "paris", "obj01", "ent02", "x y", ""]
        for _ in range(1000):
            kind = rng.random()
            if kind < 0.3:
                response = bridge.request({"type": "hello"})
                assert response["type"] == "hello"
            elif kind < 0.6:
                sample = [rng.choice(words) for _ in range(rng.randint(1, 5))]
                response = bridge.request({"type": "tokenize_check", "words": sample})
                assert len(response["single"]) == len(sample)
            else:
                candidates = [rng.choice(words[:4]) for _ in range(rng.randint(1, 4))]
                response = bridge.request(
                    {"type": "score", "text": CLOZE, "candidates": candidates}
                )
                assert len(response["log_probs"]) == len(candidates)
        assert bridge.alive()
