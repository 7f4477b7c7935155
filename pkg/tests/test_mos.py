"""Subjective pipeline: normalization, rescale, screening, MOS, and the
reliability gate, verified against brute-force oracles."""

import json

import numpy as np
import pytest

from angioqa.errors import (
    DataError,
    DegenerateRaterError,
    InsufficientDataError,
    MissingDataError,
)
from angioqa.mos import (
    RatingRecord,
    compute_mos,
    coverage_check,
    dedupe_ratings,
    load_ratings,
    normalize_subject,
    read_mos_csv,
    reliability_gate,
    rescale,
    screen_subjects,
    write_mos_csv,
)

from oracles import bt500_reject_bruteforce, mos_pipeline_bruteforce

METRICS = ("vmc", "vbd", "oq")


def records_from_table(table):
    """{metric: {image: {subject: score}}} -> flat RatingRecord list."""
    records = []
    for metric, images in table.items():
        for image, scores in images.items():
            for subject, score in scores.items():
                records.append(RatingRecord(subject, image, metric, score))
    return records


def random_table(rng, n_subjects, n_images):
    subjects = [f"s{i}" for i in range(n_subjects)]
    images = [f"img{j:03d}" for j in range(n_images)]
    return {m: {img: {s: float(rng.uniform(0, 100)) for s in subjects}
                for img in images} for m in METRICS}


def planted_outlier_table(seed, n_honest=12, n_images=20, dev=28.0, noise=15.0):
    """Honest raters spread uniformly around a consensus; one planted rater
    deviates by +/-dev on 8 images (4 high, 4 low) in every channel."""
    rng = np.random.default_rng(seed)
    consensus = {m: rng.uniform(35, 65, n_images) for m in METRICS}
    plant = rng.choice(n_images, size=8, replace=False)
    high, low = set(plant[:4]), set(plant[4:])
    table = {}
    for m in METRICS:
        images = {}
        for j in range(n_images):
            c = consensus[m][j]
            scores = {f"h{i}": float(np.clip(c + rng.uniform(-noise, noise), 0, 100))
                      for i in range(n_honest)}
            if j in high:
                p = c + dev
            elif j in low:
                p = c - dev
            else:
                p = c + rng.uniform(-noise / 3, noise / 3)
            scores["planted"] = float(np.clip(p, 0, 100))
            images[f"img{j:02d}"] = scores
        table[m] = images
    return table


class TestNormalizeSubject:
    def test_hand_case(self):
        np.testing.assert_allclose(normalize_subject([40, 60, 80]), [-1, 0, 1],
                                   atol=1e-12)

    def test_zero_mean(self):
        rng = np.random.default_rng(0)
        z = normalize_subject(rng.uniform(0, 100, size=17))
        assert abs(z.mean()) < 1e-12

    def test_constant_rater_raises(self):
        with pytest.raises(DegenerateRaterError):
            normalize_subject([50, 50, 50])

    def test_single_score_raises(self):
        with pytest.raises(DegenerateRaterError):
            normalize_subject([50])


class TestRescale:
    def test_midpoint(self):
        assert rescale(0.0) == 50.0

    def test_endpoints(self):
        assert rescale(3.0) == 100.0
        assert rescale(-3.0) == 0.0

    def test_hand_case(self):
        assert rescale(-1.0) == pytest.approx(100.0 / 3.0, abs=1e-12)

    def test_clamps(self):
        assert rescale(10.0) == 100.0
        assert rescale(-10.0) == 0.0


class TestScreening:
    def test_identical_scores_no_rejections(self):
        table = {m: {f"i{j}": {f"s{k}": 60.0 for k in range(4)} for j in range(5)}
                 for m in METRICS}
        report = screen_subjects(records_from_table(table))
        assert report.rejected == []
        assert report.low_power  # 4 < 8 subjects

    def test_needs_two_subjects(self):
        records = [RatingRecord("s0", f"i{j}", m, 50.0)
                   for j in range(3) for m in METRICS]
        with pytest.raises(InsufficientDataError):
            screen_subjects(records)

    def test_needs_two_images(self):
        records = [RatingRecord(f"s{i}", "i0", m, 50.0)
                   for i in range(3) for m in METRICS]
        with pytest.raises(InsufficientDataError):
            screen_subjects(records)

    def test_matches_oracle_on_random_tables(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            table = random_table(rng, int(rng.integers(2, 9)), int(rng.integers(2, 15)))
            subjects = sorted({s for imgs in table.values()
                               for sc in imgs.values() for s in sc})
            report = screen_subjects(records_from_table(table))
            assert set(report.rejected) == bt500_reject_bruteforce(table, subjects)

    def test_planted_outlier_rejected(self):
        table = planted_outlier_table(seed=0)
        report = screen_subjects(records_from_table(table))
        assert "planted" in report.rejected
        assert all(s.startswith("h") for s in report.kept)

    def test_planted_outlier_census(self):
        """Acceptance-style sweep: planted rejected and honest retained in
        >= 95/100 seeded trials."""
        rejected_planted = 0
        honest_all_kept = 0
        for seed in range(100):
            table = planted_outlier_table(seed)
            report = screen_subjects(records_from_table(table))
            if "planted" in report.rejected:
                rejected_planted += 1
            if not (set(report.rejected) - {"planted"}):
                honest_all_kept += 1
        assert rejected_planted >= 95
        assert honest_all_kept >= 95


class TestMos:
    def test_two_rescaled_values_mean(self):
        # two raters with opposite orderings: rescaled z of +/-1 each
        records = []
        for metric in METRICS:
            for subj, scores in (("a", [40, 60]), ("b", [60, 40])):
                for img, score in zip(["i0", "i1"], scores):
                    records.append(RatingRecord(subj, img, metric, score))
        mos_records, _ = compute_mos(records)
        by_id = {m.triplet_id: m for m in mos_records}
        # z = -0.707, +0.707 per rater (n-1 std of two values), means cancel to 50
        assert by_id["i0"].mos_vmc == pytest.approx(50.0, abs=1e-9)
        assert by_id["i1"].mos_oq == pytest.approx(50.0, abs=1e-9)
        assert by_id["i0"].n_subjects == 2

    def test_pipeline_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            table = random_table(rng, int(rng.integers(2, 6)), int(rng.integers(2, 21)))
            mos_records, _ = compute_mos(records_from_table(table))
            expected = mos_pipeline_bruteforce(table)
            for rec in mos_records:
                assert rec.mos_vmc == pytest.approx(expected[rec.triplet_id]["vmc"], abs=1e-9)
                assert rec.mos_vbd == pytest.approx(expected[rec.triplet_id]["vbd"], abs=1e-9)
                assert rec.mos_oq == pytest.approx(expected[rec.triplet_id]["oq"], abs=1e-9)

    def test_subject_relabeling_invariance(self):
        rng = np.random.default_rng(3)
        table = random_table(rng, 4, 6)
        base, _ = compute_mos(records_from_table(table))
        relabeled = {m: {img: {f"renamed_{s}": v for s, v in scores.items()}
                         for img, scores in images.items()}
                     for m, images in table.items()}
        perm, _ = compute_mos(records_from_table(relabeled))
        for x, y in zip(base, perm):
            assert x.mos_vmc == pytest.approx(y.mos_vmc, abs=1e-12)
            assert x.mos_oq == pytest.approx(y.mos_oq, abs=1e-12)

    def test_per_subject_shift_invariance(self):
        rng = np.random.default_rng(4)
        table = random_table(rng, 4, 6)
        # keep raw scores in range after the shift
        table = {m: {img: {s: v * 0.5 + 20 for s, v in sc.items()}
                     for img, sc in images.items()} for m, images in table.items()}
        base, _ = compute_mos(records_from_table(table))
        shifted = {m: {img: {s: (v + 10 if s == "s0" else v) for s, v in sc.items()}
                       for img, sc in images.items()} for m, images in table.items()}
        out, _ = compute_mos(records_from_table(shifted))
        for x, y in zip(base, out):
            assert x.mos_vmc == pytest.approx(y.mos_vmc, abs=1e-9)

    def test_missing_triplet_raises(self):
        rng = np.random.default_rng(5)
        table = random_table(rng, 3, 4)
        with pytest.raises(MissingDataError, match="img999"):
            compute_mos(records_from_table(table),
                        expected_triplets=[*table["vmc"].keys(), "img999"])

    def test_planted_outlier_excluded_from_mos(self):
        table = planted_outlier_table(seed=0)
        mos_records, report = compute_mos(records_from_table(table))
        assert "planted" in report.rejected
        assert all(rec.n_subjects == 12 for rec in mos_records)


class TestReliabilityGate:
    def test_perfect_agreement(self):
        ref = np.linspace(0, 100, 50)
        gate = reliability_gate(ref, ref)
        assert gate.plcc == 1.0 and gate.srcc == 1.0 and gate.passed

    def test_reversed_fails(self):
        ref = np.linspace(0, 100, 50)
        gate = reliability_gate(ref[::-1], ref)
        assert gate.plcc == -1.0 and gate.srcc == -1.0 and not gate.passed

    def test_noisy_rater_passes_census(self):
        passes = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            ref = rng.uniform(0, 100, 200)
            rater = ref + rng.normal(0, 5, 200)
            if reliability_gate(rater, ref).passed:
                passes += 1
        assert passes >= 99

    def test_needs_three_pairs(self):
        with pytest.raises(InsufficientDataError):
            reliability_gate([1, 2], [1, 2])


class TestRatingsLog:
    def test_round_trip_and_dedupe(self, tmp_path):
        path = tmp_path / "ratings.jsonl"
        lines = [
            {"subject_id": "a", "triplet_id": "t0", "metric": "vmc", "score": 10.0},
            {"subject_id": "a", "triplet_id": "t0", "metric": "vmc", "score": 90.0},
            {"subject_id": "b", "triplet_id": "t0", "metric": "oq", "score": 40.0},
        ]
        path.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
        records = load_ratings(path)
        assert len(records) == 3
        deduped = dedupe_ratings(records)
        assert len(deduped) == 2
        scores = {(r.subject_id, r.metric): r.score for r in deduped}
        assert scores[("a", "vmc")] == 90.0  # last record wins

    def test_malformed_line_names_line(self, tmp_path):
        path = tmp_path / "ratings.jsonl"
        good = json.dumps({"subject_id": "a", "triplet_id": "t0",
                           "metric": "vmc", "score": 10.0})
        path.write_text("\n".join([good] * 16 + ["{broken"]) + "\n")
        with pytest.raises(DataError, match="line 17"):
            load_ratings(path)

    def test_out_of_range_score_rejected(self, tmp_path):
        path = tmp_path / "ratings.jsonl"
        path.write_text(json.dumps({"subject_id": "a", "triplet_id": "t0",
                                    "metric": "vmc", "score": 150.0}) + "\n")
        with pytest.raises(DataError, match="line 1"):
            load_ratings(path)

    def test_coverage_check(self):
        records = [RatingRecord(s, t, m, 50.0)
                   for s in ("a", "b") for t in ("t0", "t1") for m in METRICS]
        report = coverage_check(records)
        assert report.complete
        assert report.expected_records == 12
        partial = coverage_check(records[:-1])
        assert not partial.complete
        assert ("b", "t1", "oq") in partial.missing

    def test_mos_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        table = random_table(rng, 3, 5)
        mos_records, _ = compute_mos(records_from_table(table))
        path = tmp_path / "mos.csv"
        write_mos_csv(path, mos_records)
        loaded = read_mos_csv(path)
        assert len(loaded) == len(mos_records)
        by_id = {m.triplet_id: m for m in mos_records}
        for rec in loaded:
            assert rec.mos_vmc == by_id[rec.triplet_id].mos_vmc  # repr round-trips
