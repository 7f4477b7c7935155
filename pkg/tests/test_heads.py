"""Score/level mapping, pooled heads, and instruction-record rendering."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from angioqa import autograd as ag
from angioqa.errors import DomainError, UsageError
from angioqa.heads import (
    LEVELS,
    LevelDistribution,
    init_head_params,
    level_logits,
    level_of_score,
    records_for_triplet,
    render_instruction,
    score_of_logits,
    write_instruction_jsonl,
)


class TestScoreOfLogits:
    def test_one_hot_hits_midpoints(self):
        # +800 saturates the softmax to an exact one-hot in float64
        for i, expected in enumerate((10.0, 30.0, 50.0, 70.0, 90.0)):
            logits = np.zeros(5)
            logits[i] = 800.0
            assert score_of_logits(logits) == expected

    def test_uniform_is_fifty(self):
        assert score_of_logits(np.zeros(5)) == pytest.approx(50.0, abs=1e-9)

    def test_hand_expectation(self):
        probs = np.array([0.1, 0.1, 0.2, 0.4, 0.2])
        assert score_of_logits(np.log(probs)) == pytest.approx(60.0, abs=1e-9)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            logits = rng.normal(size=5) * 3
            base = score_of_logits(logits)
            assert score_of_logits(logits + 17.3) == pytest.approx(base, abs=1e-9)

    @given(st.lists(st.floats(-30, 30), min_size=5, max_size=5))
    @settings(max_examples=200, deadline=None)
    def test_range_is_10_to_90(self, logits):
        score = score_of_logits(np.array(logits))
        assert 10.0 <= score <= 90.0

    def test_accepts_tensor(self):
        assert score_of_logits(ag.constant([[0.0] * 5])) == pytest.approx(50.0)


class TestLevelOfScore:
    @pytest.mark.parametrize("score,level", [
        (0.0, "bad"), (19.999, "bad"),
        (20.0, "poor"), (39.999, "poor"),
        (40.0, "fair"), (59.999, "fair"),
        (60.0, "good"), (79.999, "good"),
        (80.0, "excellent"), (100.0, "excellent"),
    ])
    def test_boundaries(self, score, level):
        assert level_of_score(score) == level

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            level_of_score(-0.1)
        with pytest.raises(DomainError):
            level_of_score(100.1)

    def test_roundtrip_through_one_hot(self):
        for i, level in enumerate(LEVELS):
            logits = np.full(5, -800.0)
            logits[i] = 800.0
            assert level_of_score(score_of_logits(logits)) == level


class TestLevelDistribution:
    def test_validates_sum(self):
        with pytest.raises(DomainError):
            LevelDistribution(np.array([0.5, 0.5, 0.5, 0.0, 0.0]))

    def test_from_logits_normalizes(self):
        dist = LevelDistribution.from_logits([1.0, 2.0, 3.0, 4.0, 5.0])
        assert dist.probs.sum() == pytest.approx(1.0, abs=1e-12)


class TestLevelLogitsHead:
    def test_zero_tokens_zero_bias(self):
        rng = np.random.default_rng(1)
        head = init_head_params(8, rng).vmc
        out = level_logits(ag.constant(np.zeros((6, 8))), head)
        np.testing.assert_array_equal(out.data, np.zeros((1, 5)))

    def test_single_token_pooling_is_identity(self):
        rng = np.random.default_rng(2)
        head = init_head_params(8, rng).vmc
        token = rng.normal(size=(1, 8))
        out = level_logits(ag.constant(token), head)
        np.testing.assert_allclose(out.data, token @ head.weight.data + head.bias.data,
                                   atol=1e-12)

    def test_head_gradient(self):
        rng = np.random.default_rng(3)
        heads = init_head_params(8, rng)
        tokens = ag.constant(rng.normal(size=(6, 8)))
        params = {"w": heads.oq.weight, "b": heads.oq.bias}
        report = ag.grad_check(
            lambda: ag.cross_entropy(level_logits(tokens, heads.oq), 3), params)
        assert report.max_rel_error < 1e-4

    def test_cross_entropy_finite_for_extreme_logits(self):
        loss = ag.cross_entropy(ag.constant([[500.0, -500.0, 0.0, 0.0, 0.0]]), 1)
        assert np.isfinite(loss.item())


class TestInstructions:
    def test_deterministic_for_seed(self):
        a = render_instruction("vmc", "good", 1234, "t00001")
        b = render_instruction("vmc", "good", 1234, "t00001")
        assert a == b

    def test_oq_excellent_suffix(self):
        for seed in range(10):
            rec = render_instruction("oq", "excellent", seed)
            assert rec.assistant_text.endswith("is excellent.")
            assert rec.assistant_text.startswith("The overall quality of this image")

    def test_placeholder_matches_metric(self):
        assert "<img1>" in render_instruction("vmc", "fair", 0).user_text
        assert "<img2>" in render_instruction("vbd", "fair", 0).user_text
        assert "<img3>" in render_instruction("oq", "fair", 0).user_text

    def test_paraphrase_census(self):
        for metric in ("vmc", "vbd", "oq"):
            seen = {render_instruction(metric, "good", seed).user_text
                    for seed in range(1000)}
            assert len(seen) >= 3  # every pool entry appears

    def test_unknown_metric(self):
        with pytest.raises(UsageError):
            render_instruction("sharpness", "good", 0)

    def test_jsonl_round_trip(self, tmp_path):
        records = records_for_triplet("t00042",
                                      {"vmc": "good", "vbd": "poor", "oq": "fair"},
                                      seed=7)
        path = tmp_path / "records.jsonl"
        write_instruction_jsonl(path, records)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 3
        parsed = [json.loads(line) for line in lines]
        assert [p["metric"] for p in parsed] == ["VMC", "VBD", "OQ"]
        assert parsed[0]["level"] == "good"
        assert parsed[0]["triplet_id"] == "t00042"
        assert all(set(p) == {"metric", "user", "assistant", "triplet_id", "level"}
                   for p in parsed)
