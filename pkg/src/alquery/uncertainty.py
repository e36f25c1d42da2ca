"""Image uncertainty scoring and candidate-pool selection (stage 1).

An image's uncertainty is the sum over its detected objects of a per-object
uncertainty, each weighted by the difficulty coefficient of the object's
predicted class. Supported per-object measures: ``entropy`` (nats),
``posterior`` (1 - max prob) and ``margin`` (1 - gap between the two
largest probs); all are >= 0 and larger means more uncertain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .difficulty import DifficultyCoefficients
from .records import DetectionRecord

MEASURES = ("entropy", "posterior", "margin")

DEFAULT_DELTA = 4.0


def object_uncertainty(probs, measure: str = "entropy") -> float:
    """Uncertainty of one probability vector under the chosen measure."""
    p = np.asarray(probs, dtype=np.float64)
    if measure == "entropy":
        return float(-np.sum(np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)))
    if measure == "posterior":
        return 1.0 - float(p.max())
    if measure == "margin":
        if p.size < 2:
            raise ValueError("margin needs a probability vector of length >= 2")
        top2 = np.partition(p, -2)[-2:]
        return 1.0 - float(top2[1] - top2[0])
    raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")


def image_uncertainty(
    record: DetectionRecord,
    coeffs: DifficultyCoefficients | None = None,
    measure: str = "entropy",
) -> float:
    """Difficulty-weighted sum of per-object uncertainties; 0 for empty records.

    ``coeffs=None`` uses weight 1 for every class (the plain summed-entropy
    baseline when measure is entropy).
    """
    total = 0.0
    for obj in record.objects:
        weight = 1.0 if coeffs is None else coeffs.weight_of(obj.class_id)
        total += weight * object_uncertainty(obj.probs, measure)
    return total


@dataclass
class UncertaintyReport:
    """Per-image uncertainty plus the unweighted per-object values behind it."""

    scores: dict[str, float]
    object_scores: dict[str, list[float]]

    def ranked(self) -> list[tuple[str, float]]:
        """(image_id, uncertainty) pairs, most uncertain first, ties by id."""
        return sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))


def score_images(
    records: Iterable[DetectionRecord],
    coeffs: DifficultyCoefficients | None = None,
    measure: str = "entropy",
) -> UncertaintyReport:
    scores: dict[str, float] = {}
    object_scores: dict[str, list[float]] = {}
    for record in records:
        per_object = [object_uncertainty(o.probs, measure) for o in record.objects]
        if coeffs is None:
            total = sum(per_object)
        else:
            total = sum(
                coeffs.weight_of(o.class_id) * u for o, u in zip(record.objects, per_object)
            )
        scores[record.image_id] = total
        object_scores[record.image_id] = per_object
    return UncertaintyReport(scores=scores, object_scores=object_scores)


def select_candidate_pool(
    report: UncertaintyReport,
    unlabelled_ids: Iterable[str],
    budget: int,
    delta: float = DEFAULT_DELTA,
) -> list[str]:
    """Top ``round(delta * budget)`` unlabelled ids by uncertainty, descending.

    Saturates at the unlabelled set size. Ties break towards the
    lexicographically smaller image id so runs are reproducible.
    """
    ids = sorted(set(unlabelled_ids))
    if not ids:
        raise ValueError("unlabelled set is empty")
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if delta < 1.0:
        raise ValueError(f"delta must be >= 1, got {delta!r}")
    missing = [i for i in ids if i not in report.scores]
    if missing:
        raise ValueError(f"no uncertainty score for unlabelled ids {missing[:5]}")
    pool_size = min(int(math.floor(delta * budget + 0.5)), len(ids))
    ids.sort(key=lambda i: (-report.scores[i], i))
    return ids[:pool_size]
