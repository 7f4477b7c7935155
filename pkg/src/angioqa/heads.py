"""Five-level quality heads: logits over {bad..excellent} per metric,
score <-> level mapping, and instruction-record rendering.

The continuous 0-100 scale is split into five equal intervals; each level's
weight is its interval midpoint, so the softmax-expectation score always
lies in [10, 90].
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DomainError, UsageError

__all__ = [
    "LEVELS",
    "LEVEL_MIDPOINTS",
    "METRICS",
    "LevelDistribution",
    "MetricHeadParams",
    "HeadParams",
    "init_head_params",
    "level_logits",
    "score_of_logits",
    "level_of_score",
    "level_index_of_score",
    "InstructionRecord",
    "render_instruction",
    "records_for_triplet",
    "write_instruction_jsonl",
]

LEVELS = ("bad", "poor", "fair", "good", "excellent")
LEVEL_MIDPOINTS = (10.0, 30.0, 50.0, 70.0, 90.0)
METRICS = ("vmc", "vbd", "oq")

# Image placeholder slot per metric: vmc -> <img1>, vbd -> <img2>, oq -> <img3>.
_IMAGE_TAG = {"vmc": "<img1>", "vbd": "<img2>", "oq": "<img3>"}

_ASSISTANT_TEMPLATE = {
    "vmc": "The vessel morphology consistency of this image is {level}.",
    "vbd": "The vessel branch detection of this image is {level}.",
    "oq": "The overall quality of this image is {level}.",
}

# First entry per metric is the canonical phrasing; the rest are paraphrases
# drawn at random as augmentation.
_USER_PARAPHRASES = {
    "vmc": (
        "{img}As an experienced interventional radiologist, how would you rate "
        "the vessel morphology consistency of this image?",
        "{img}How consistent is the vessel morphology in this image with the "
        "reference angiography?",
        "{img}Please rate the structural fidelity and continuity of the major "
        "vessels shown here.",
        "{img}Judging as a vascular specialist, what is your rating of this "
        "image's vessel morphology consistency?",
    ),
    "vbd": (
        "{img}From your perspective as an interventional radiologist, how do "
        "you assess the vessel branch detection in this image?",
        "{img}How well are the vascular branches rendered in this image?",
        "{img}Please rate the correctness of branch count and orientation in "
        "this image.",
        "{img}As a specialist reading angiograms, how would you score the "
        "branch structures here?",
    ),
    "oq": (
        "{img}With your experience in interventional radiology, please provide "
        "your evaluation of the overall quality of this image.",
        "{img}How would you rate the overall quality of this image?",
        "{img}Considering structure and artifacts together, what is your "
        "overall quality rating for this image?",
        "{img}Please give an overall quality judgement for this angiography "
        "image.",
    ),
}


@dataclass
class LevelDistribution:
    """Probabilities over the five levels, ordered bad..excellent."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (5,):
            raise UsageError(f"level distribution needs 5 probabilities, got {self.probs.shape}")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise DomainError("level probabilities must lie in [0, 1]")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise DomainError("level probabilities must sum to 1")

    @classmethod
    def from_logits(cls, logits) -> "LevelDistribution":
        z = np.asarray(logits, dtype=np.float64).reshape(-1)
        z = z - z.max()
        e = np.exp(z)
        return cls(e / e.sum())

    def score(self) -> float:
        return float(np.dot(self.probs, LEVEL_MIDPOINTS))


@dataclass
class MetricHeadParams:
    weight: Tensor  # (d, 5)
    bias: Tensor    # (1, 5)


@dataclass
class HeadParams:
    """Three independent pooled linear heads, one per metric."""

    vmc: MetricHeadParams
    vbd: MetricHeadParams
    oq: MetricHeadParams

    def head(self, metric: str) -> MetricHeadParams:
        if metric not in METRICS:
            raise UsageError(f"unknown metric {metric!r}")
        return getattr(self, metric)

    def named_parameters(self, prefix: str = "head") -> dict[str, Tensor]:
        out = {}
        for metric in METRICS:
            h = getattr(self, metric)
            out[f"{prefix}.{metric}.weight"] = h.weight
            out[f"{prefix}.{metric}.bias"] = h.bias
        return out


def init_head_params(dim: int, rng: np.random.Generator) -> HeadParams:
    # pooled branch tokens are attention means and arrive well below unit
    # variance; the larger head scale keeps early logits informative
    def one():
        w = ag.parameter(rng.normal(0.0, 2.0 / np.sqrt(dim), size=(dim, 5)))
        b = ag.parameter(np.zeros((1, 5)))
        return MetricHeadParams(w, b)

    return HeadParams(one(), one(), one())


def level_logits(branch_tokens: Tensor, head: MetricHeadParams) -> Tensor:
    """Mean-pool token rows, then affine map to 5 level logits (shape (1, 5))."""
    pooled = ag.mean_rows(branch_tokens)
    return ag.add(ag.matmul(pooled, head.weight), head.bias)


def score_of_logits(logits) -> float:
    """Softmax-expectation score: sum of level probabilities times interval
    midpoints. Always in [10, 90]."""
    if isinstance(logits, Tensor):
        logits = logits.data
    dist = LevelDistribution.from_logits(logits)
    return dist.score()


def level_index_of_score(score: float) -> int:
    score = float(score)
    if not 0.0 <= score <= 100.0:
        raise DomainError(f"score {score} outside [0, 100]")
    if score == 100.0:
        return 4
    return int(score // 20.0)


def level_of_score(score: float) -> str:
    """Map a 0-100 score to its level: [0,20) bad, ... [80,100] excellent."""
    return LEVELS[level_index_of_score(score)]


@dataclass
class InstructionRecord:
    metric: str
    user_text: str
    assistant_text: str
    triplet_id: str
    level: str

    def __post_init__(self):
        if self.metric not in METRICS:
            raise UsageError(f"unknown metric {self.metric!r}")
        if self.level not in LEVELS:
            raise UsageError(f"unknown level {self.level!r}")
        tag = _IMAGE_TAG[self.metric]
        if self.user_text.count(tag) != 1:
            raise UsageError(f"user text must contain exactly one {tag}")

    def to_json(self) -> dict:
        return {
            "metric": self.metric.upper(),
            "user": self.user_text,
            "assistant": self.assistant_text,
            "triplet_id": self.triplet_id,
            "level": self.level,
        }


def render_instruction(metric: str, level: str, paraphrase_seed: int,
                       triplet_id: str = "") -> InstructionRecord:
    """Build one instruction record; the user phrasing is drawn from the
    metric's paraphrase pool, deterministically for a given seed."""
    metric = metric.lower()
    if metric not in METRICS:
        raise UsageError(f"unknown metric {metric!r}")
    if level not in LEVELS:
        raise UsageError(f"unknown level {level!r}")
    pool = _USER_PARAPHRASES[metric]
    idx = random.Random(paraphrase_seed).randrange(len(pool))
    user = pool[idx].format(img=_IMAGE_TAG[metric])
    assistant = _ASSISTANT_TEMPLATE[metric].format(level=level)
    return InstructionRecord(metric, user, assistant, triplet_id, level)


def records_for_triplet(triplet_id: str, levels: dict[str, str],
                        seed: int) -> list[InstructionRecord]:
    """One record per metric for a triplet; seeds derived per metric so the
    three paraphrase draws are independent but reproducible."""
    records = []
    for i, metric in enumerate(METRICS):
        records.append(render_instruction(metric, levels[metric], seed * 3 + i, triplet_id))
    return records


def write_instruction_jsonl(path, records: list[InstructionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")
