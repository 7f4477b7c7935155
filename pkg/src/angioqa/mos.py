"""Subjective-score pipeline: ratings log -> screening -> per-subject
normalization -> rescale to [0, 100] -> per-triplet MOS.

Screening follows the ITU-R BT.500 outlier-rejection procedure, run
independently per metric channel; a subject rejected in any channel is
dropped entirely. Normalization is the per-subject z-score with sample
(n-1) standard deviation, then a fixed affine map of +/-3 sigma onto
[0, 100] with clamping.

The ratings log is JSONL, one record per line:
    {"subject_id": ..., "triplet_id": ..., "metric": "vmc", "score": ..., "timestamp": ...}
Re-submissions append; readers keep the last record per (subject, triplet,
metric), so replaying a log after a crash reproduces the same MOS.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    DegenerateRaterError,
    InsufficientDataError,
    MissingDataError,
)
from .heads import METRICS
from .metrics import plcc, srcc

__all__ = [
    "RatingRecord",
    "SubjectStats",
    "MosRecord",
    "ScreeningReport",
    "GateResult",
    "load_ratings",
    "append_rating",
    "dedupe_ratings",
    "screen_subjects",
    "normalize_subject",
    "rescale",
    "compute_mos",
    "reliability_gate",
    "coverage_check",
    "write_mos_csv",
    "read_mos_csv",
]

# Subject counts below this leave the BT.500 Gaussian test with little power.
LOW_POWER_SUBJECTS = 8


@dataclass(frozen=True)
class RatingRecord:
    subject_id: str
    triplet_id: str
    metric: str
    score: float
    timestamp: float = 0.0

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "triplet_id": self.triplet_id,
            "metric": self.metric,
            "score": self.score,
            "timestamp": self.timestamp,
        }


@dataclass
class SubjectStats:
    subject_id: str
    metric: str
    mean: float
    std: float  # sample (n-1) standard deviation
    n: int


@dataclass
class MosRecord:
    triplet_id: str
    mos_vmc: float
    mos_vbd: float
    mos_oq: float
    n_subjects: int


@dataclass
class ScreeningReport:
    kept: list[str]
    rejected: list[str]
    # (subject, metric, P, Q, exceed_ratio, balance_ratio) per rejection decision
    details: list[tuple[str, str, int, int, float, float]] = field(default_factory=list)
    low_power: bool = False
    n_subjects: int = 0
    n_images: int = 0

    def summary(self) -> str:
        lines = [f"screening: {self.n_subjects} subjects, {self.n_images} images"]
        if self.low_power:
            lines.append(f"  note: fewer than {LOW_POWER_SUBJECTS} subjects; "
                         "outlier test has low power")
        if not self.rejected:
            lines.append("  no outlier subjects detected")
        for subj, metric, p, q, er, br in self.details:
            lines.append(f"  rejected {subj} (channel {metric}): P={p} Q={q} "
                         f"exceed={er:.3f} balance={br:.3f}")
        return "\n".join(lines)


@dataclass
class GateResult:
    plcc: float
    srcc: float
    passed: bool


def _parse_record(obj: dict, where: str) -> RatingRecord:
    try:
        subject = str(obj["subject_id"])
        triplet = str(obj["triplet_id"])
        metric = str(obj["metric"]).lower()
        score = float(obj["score"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: bad rating record ({exc})") from None
    if metric not in METRICS:
        raise DataError(f"{where}: unknown metric {metric!r}")
    if not 0.0 <= score <= 100.0 or not math.isfinite(score):
        raise DataError(f"{where}: score {score} outside [0, 100]")
    return RatingRecord(subject, triplet, metric, score,
                        float(obj.get("timestamp", 0.0)))


def load_ratings(path) -> list[RatingRecord]:
    """Parse a JSONL ratings log; errors name the offending line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: not valid JSON ({exc.msg})") from None
            records.append(_parse_record(obj, f"line {lineno}"))
    return records


def append_rating(path, record: RatingRecord) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_json()) + "\n")
        fh.flush()


def dedupe_ratings(records: list[RatingRecord]) -> list[RatingRecord]:
    """Keep the last record per (subject, triplet, metric), in log order."""
    latest: dict[tuple[str, str, str], RatingRecord] = {}
    for rec in records:
        latest[(rec.subject_id, rec.triplet_id, rec.metric)] = rec
    return list(latest.values())


def _channel_tables(records: list[RatingRecord]):
    """dict[metric][triplet][subject] = score, over deduplicated records."""
    tables: dict[str, dict[str, dict[str, float]]] = {m: {} for m in METRICS}
    for rec in dedupe_ratings(records):
        tables[rec.metric].setdefault(rec.triplet_id, {})[rec.subject_id] = rec.score
    return tables


def screen_subjects(records: list[RatingRecord]) -> ScreeningReport:
    """BT.500 outlier rejection, per metric channel.

    Per image: mean, sample std and kurtosis beta2 = m4/m2^2 over subjects;
    bounds are mean +/- 2 std when 2 <= beta2 <= 4 (treated as Gaussian),
    else mean +/- sqrt(20) std. Per subject, P counts scores strictly above
    the upper bound and Q strictly below the lower bound across images;
    the subject is rejected in the channel iff (P+Q)/n_images > 0.05 and
    |P-Q|/(P+Q) < 0.3. Rejection in any channel drops the subject entirely.
    """
    tables = _channel_tables(records)
    subjects = sorted({r.subject_id for r in records})
    images = sorted({r.triplet_id for r in records})
    if len(subjects) < 2:
        raise InsufficientDataError("screening needs at least 2 subjects")
    if len(images) < 2:
        raise InsufficientDataError("screening needs at least 2 images")

    rejected: set[str] = set()
    details = []
    for metric in METRICS:
        table = tables[metric]
        if not table:
            continue
        counts: dict[str, tuple[int, int]] = {s: (0, 0) for s in subjects}
        n_images = len(table)
        for scores_by_subject in table.values():
            values = np.array(list(scores_by_subject.values()), dtype=np.float64)
            if values.size < 2:
                continue
            mean = float(values.mean())
            std = float(values.std(ddof=1))
            if std == 0.0:
                continue  # zero spread: strict comparisons can never trip
            centered = values - values.mean()
            m2 = float((centered ** 2).mean())
            m4 = float((centered ** 4).mean())
            beta2 = m4 / (m2 * m2)
            k = 2.0 if 2.0 <= beta2 <= 4.0 else math.sqrt(20.0)
            upper = mean + k * std
            lower = mean - k * std
            for subj, score in scores_by_subject.items():
                p, q = counts[subj]
                if score > upper:
                    p += 1
                if score < lower:
                    q += 1
                counts[subj] = (p, q)
        for subj, (p, q) in counts.items():
            total = p + q
            if total == 0:
                continue
            exceed_ratio = total / n_images
            balance_ratio = abs(p - q) / total
            if exceed_ratio > 0.05 and balance_ratio < 0.3:
                rejected.add(subj)
                details.append((subj, metric, p, q, exceed_ratio, balance_ratio))

    kept = [s for s in subjects if s not in rejected]
    return ScreeningReport(
        kept=kept,
        rejected=sorted(rejected),
        details=details,
        low_power=len(subjects) < LOW_POWER_SUBJECTS,
        n_subjects=len(subjects),
        n_images=len(images),
    )


def normalize_subject(scores) -> np.ndarray:
    """Per-subject z-scores with sample (n-1) standard deviation."""
    values = np.asarray(scores, dtype=np.float64)
    if values.size < 2:
        raise DegenerateRaterError("normalization needs at least 2 scores")
    mu = values.mean()
    sigma = values.std(ddof=1)
    if sigma == 0.0:
        raise DegenerateRaterError("subject has zero score spread (sigma = 0)")
    return (values - mu) / sigma


def rescale(z) -> np.ndarray | float:
    """Map z-scores onto [0, 100] via the fixed +/-3 sigma affine span."""
    scaled = (np.asarray(z, dtype=np.float64) + 3.0) * (100.0 / 6.0)
    clipped = np.clip(scaled, 0.0, 100.0)
    return float(clipped) if clipped.ndim == 0 else clipped


def compute_mos(records: list[RatingRecord],
                expected_triplets: list[str] | None = None,
                ) -> tuple[list[MosRecord], ScreeningReport]:
    """Full pipeline: screen -> normalize per subject/channel -> rescale ->
    mean per (triplet, metric).

    ``n_subjects`` counts the distinct kept subjects that rated the triplet.
    A triplet (from ``expected_triplets`` or seen in the log) left without
    ratings in some channel raises MissingDataError naming it.
    """
    report = screen_subjects(records)
    kept = set(report.kept)
    if not kept:
        raise DataError("screening rejected every subject")
    deduped = [r for r in dedupe_ratings(records) if r.subject_id in kept]

    # rescaled[metric][triplet][subject]
    rescaled: dict[str, dict[str, dict[str, float]]] = {m: {} for m in METRICS}
    by_subject: dict[tuple[str, str], list[RatingRecord]] = {}
    for rec in deduped:
        by_subject.setdefault((rec.subject_id, rec.metric), []).append(rec)
    for (subject, metric), recs in by_subject.items():
        z = normalize_subject([r.score for r in recs])
        z_hat = rescale(z)
        for rec, value in zip(recs, z_hat):
            rescaled[metric].setdefault(rec.triplet_id, {})[subject] = float(value)

    triplets = sorted({r.triplet_id for r in deduped})
    if expected_triplets is not None:
        missing = sorted(set(expected_triplets) - set(triplets))
        if missing:
            raise MissingDataError(f"no ratings for triplet(s): {', '.join(missing)}")
        triplets = sorted(expected_triplets)

    out = []
    for triplet in triplets:
        means = {}
        contributors: set[str] = set()
        for metric in METRICS:
            cell = rescaled[metric].get(triplet)
            if not cell:
                raise MissingDataError(
                    f"no {metric} ratings for triplet {triplet} after screening")
            means[metric] = float(np.mean(list(cell.values())))
            contributors.update(cell.keys())
        out.append(MosRecord(triplet, means["vmc"], means["vbd"], means["oq"],
                             len(contributors)))
    return out, report


def reliability_gate(rater_scores, reference_scores, threshold: float = 0.7) -> GateResult:
    """Passed iff both PLCC and SRCC against the reference exceed the threshold."""
    rater = np.asarray(rater_scores, dtype=np.float64)
    reference = np.asarray(reference_scores, dtype=np.float64)
    if rater.size < 3:
        raise InsufficientDataError("reliability gate needs at least 3 paired scores")
    p = plcc(rater, reference)
    s = srcc(rater, reference)
    return GateResult(p, s, p > threshold and s > threshold)


@dataclass
class CoverageReport:
    n_subjects: int
    n_triplets: int
    expected_records: int
    actual_records: int
    missing: list[tuple[str, str, str]]

    @property
    def complete(self) -> bool:
        return self.actual_records == self.expected_records


def coverage_check(records: list[RatingRecord], max_listed: int = 50) -> CoverageReport:
    """Validate subjects x triplets x 3 record-count arithmetic and report gaps."""
    deduped = dedupe_ratings(records)
    subjects = sorted({r.subject_id for r in deduped})
    triplets = sorted({r.triplet_id for r in deduped})
    have = {(r.subject_id, r.triplet_id, r.metric) for r in deduped}
    missing = []
    for s in subjects:
        for t in triplets:
            for m in METRICS:
                if (s, t, m) not in have:
                    missing.append((s, t, m))
                    if len(missing) >= max_listed:
                        break
            if len(missing) >= max_listed:
                break
        if len(missing) >= max_listed:
            break
    return CoverageReport(
        n_subjects=len(subjects),
        n_triplets=len(triplets),
        expected_records=len(subjects) * len(triplets) * len(METRICS),
        actual_records=len(deduped),
        missing=missing,
    )


MOS_CSV_HEADER = "triplet_id,mos_vmc,mos_vbd,mos_oq,n_subjects"


def write_mos_csv(path, records: list[MosRecord]) -> None:
    """Stable, diffable CSV; float fields use repr so values round-trip."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MOS_CSV_HEADER + "\n")
        for rec in sorted(records, key=lambda r: r.triplet_id):
            fh.write(f"{rec.triplet_id},{rec.mos_vmc!r},{rec.mos_vbd!r},"
                     f"{rec.mos_oq!r},{rec.n_subjects}\n")


def read_mos_csv(path) -> list[MosRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != MOS_CSV_HEADER:
            raise DataError(f"unexpected MOS CSV header: {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise DataError(f"line {lineno}: expected 5 fields")
            out.append(MosRecord(parts[0], float(parts[1]), float(parts[2]),
                                 float(parts[3]), int(parts[4])))
    return out
