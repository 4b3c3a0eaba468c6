"""Maximum-log-likelihood retrieval and rejection-aware classification.

Candidates are ordered by the active score: the text distribution's
log-density at each image for text-to-image, the per-text log-density of
the query image for image-to-text (where differing concentrations can
reorder candidates relative to plain cosine), and whatever kernel the
model uses for classification.  Ties break deterministically by ascending
candidate index.

Rejection rules for zero-shot classification:

- ``dummy``     reject iff the designated none-of-the-above prompt wins;
                otherwise the prediction is reported in the index space
                with the dummy removed, so it agrees with a plain argmax
                over the real classes.
- ``threshold`` reject iff the best raw score is below the threshold.
- ``margin``    reject iff best minus runner-up is below the margin.
- ``none``      plain argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .directional import GaussParams, PsParams, VmfParams, gauss_log_pdf
from .objective import batch_from_params, kernel_matrix

RULES = ("dummy", "threshold", "margin", "none")


@dataclass
class Ranking:
    """Candidates in descending score order (ties by ascending index)."""

    query_index: int
    ordered_candidates: list  # [(candidate_index, score), ...]

    @property
    def top(self) -> int:
        return self.ordered_candidates[0][0]

    def top_k(self, k: int) -> list:
        return self.ordered_candidates[:k]


@dataclass
class ClassifyDecision:
    """predicted is a class index, or None when the active rule rejects."""

    predicted: int | None
    scores: np.ndarray
    rule: str

    @property
    def rejected(self) -> bool:
        return self.predicted is None


def rank_scores(scores: np.ndarray, query_index: int = 0) -> Ranking:
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return Ranking(
        query_index=query_index,
        ordered_candidates=[(int(i), float(scores[i])) for i in order],
    )


def _dist_scores(dist, points: np.ndarray) -> np.ndarray:
    """Log-density of a single distribution at each candidate point."""
    return kernel_matrix(batch_from_params([dist]), points)[0]


def candidate_scores(dists, point: np.ndarray) -> np.ndarray:
    """Log-density of one point under each of a homogeneous list of
    distributions (or cosine against plain unit vectors)."""
    return kernel_matrix(batch_from_params(list(dists)), point)[:, 0]


def retrieve_t2i(text_dist, images, query_index: int = 0) -> Ranking:
    """Order image candidates by the text distribution's log-density."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 1:
        images = images[None, :]
    if images.shape[0] == 0:
        raise ValueError("empty candidate list")
    return rank_scores(_dist_scores(text_dist, images), query_index)


def retrieve_i2t(text_dists, image: np.ndarray, query_index: int = 0) -> Ranking:
    """Order text candidates by their log-density at the query image."""
    if len(text_dists) == 0:
        raise ValueError("empty candidate list")
    return rank_scores(candidate_scores(text_dists, image), query_index)


def apply_rejection_rule(scores: np.ndarray, rule: str, dummy_index: int | None = None,
                         threshold: float | None = None, margin: float | None = None) -> ClassifyDecision:
    """Apply a rejection rule to a per-class score vector."""
    scores = np.asarray(scores, dtype=np.float64)
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}, expected one of {RULES}")
    best = int(np.argmax(scores))

    if rule == "none":
        return ClassifyDecision(predicted=best, scores=scores, rule=rule)

    if rule == "dummy":
        if dummy_index is None:
            raise ValueError("rule 'dummy' requires dummy_index")
        if not (0 <= dummy_index < scores.shape[0]):
            raise ValueError(f"dummy_index {dummy_index} out of range for {scores.shape[0]} classes")
        if best == dummy_index:
            return ClassifyDecision(predicted=None, scores=scores, rule=rule)
        predicted = best if best < dummy_index else best - 1
        return ClassifyDecision(predicted=predicted, scores=scores, rule=rule)

    if rule == "threshold":
        if threshold is None:
            raise ValueError("rule 'threshold' requires a threshold")
        if scores[best] < threshold:
            return ClassifyDecision(predicted=None, scores=scores, rule=rule)
        return ClassifyDecision(predicted=best, scores=scores, rule=rule)

    if margin is None:
        raise ValueError("rule 'margin' requires a margin")
    if scores.shape[0] < 2:
        return ClassifyDecision(predicted=best, scores=scores, rule=rule)
    runner_up = float(np.partition(scores, -2)[-2])
    if float(scores[best]) - runner_up < margin:
        return ClassifyDecision(predicted=None, scores=scores, rule=rule)
    return ClassifyDecision(predicted=best, scores=scores, rule=rule)


def classify(image: np.ndarray, class_dists, rule: str = "none", dummy_index: int | None = None,
             threshold: float | None = None, margin: float | None = None) -> ClassifyDecision:
    """Score one image against per-class distributions and apply a rule."""
    scores = candidate_scores(class_dists, image)
    return apply_rejection_rule(scores, rule, dummy_index=dummy_index,
                                threshold=threshold, margin=margin)
