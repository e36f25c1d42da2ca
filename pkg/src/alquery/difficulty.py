"""Per-class detection difficulty tracking and sampling-time difficulty coefficients.

During training every matched prediction contributes a difficulty value
``q = 1 - prob^xi * iou^(1-xi)`` that blends classification and
localisation quality. A per-class exponential moving average tracks these
values; the momentum of a class decays geometrically while the class is
absent from batches so that rarely seen classes keep adapting at a similar
pace. At sampling time the tracked difficulties map to multiplicative
uncertainty weights in ``[1, 1+beta]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .records import MatchEvent

DEFAULT_M0 = 0.99
DEFAULT_XI = 0.6
DEFAULT_ALPHA = 0.3
DEFAULT_BETA = 0.2


@dataclass
class DifficultyState:
    """Per-class difficulty EMA values and their momenta."""

    difficulties: np.ndarray
    momenta: np.ndarray
    m0: float = DEFAULT_M0
    xi: float = DEFAULT_XI

    def __post_init__(self):
        self.difficulties = np.asarray(self.difficulties, dtype=np.float64)
        self.momenta = np.asarray(self.momenta, dtype=np.float64)
        if self.difficulties.ndim != 1 or self.difficulties.shape != self.momenta.shape:
            raise ValueError("difficulties and momenta must be flat vectors of equal length")
        if not 0.0 < self.m0 < 1.0:
            raise ValueError(f"m0 must lie in (0, 1), got {self.m0!r}")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError(f"xi must lie in [0, 1], got {self.xi!r}")

    @property
    def num_classes(self) -> int:
        return self.difficulties.size

    @classmethod
    def fresh(cls, num_classes: int, m0: float = DEFAULT_M0, xi: float = DEFAULT_XI):
        """State at the start of an AL round: all difficulties 1, momenta m0."""
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        return cls(np.ones(num_classes), np.full(num_classes, m0), m0=m0, xi=xi)

    def to_dict(self) -> dict:
        return {
            "difficulties": self.difficulties.tolist(),
            "momenta": self.momenta.tolist(),
            "m0": self.m0,
            "xi": self.xi,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DifficultyState":
        try:
            return cls(
                difficulties=payload["difficulties"],
                momenta=payload["momenta"],
                m0=float(payload["m0"]),
                xi=float(payload["xi"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid difficulty state: {exc}") from exc


def save_difficulty_state(state: DifficultyState, path, extra: dict | None = None) -> None:
    payload = state.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_difficulty_state(path) -> DifficultyState:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: difficulty state must be a JSON object")
    return DifficultyState.from_dict(payload)


@dataclass(frozen=True)
class DifficultyCoefficients:
    """Per-class uncertainty weights ``w = 1 + alpha*beta*ln(1 + gamma*d)``."""

    weights: np.ndarray
    alpha: float
    beta: float
    gamma: float

    def weight_of(self, class_id: int) -> float:
        if not 0 <= class_id < self.weights.size:
            raise ValueError(f"class id {class_id} out of range [0, {self.weights.size})")
        return float(self.weights[class_id])


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) axis-aligned boxes.

    Returns 0 when the union is empty. Raises on inverted corners.
    """
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    if ax2 < ax1 or ay2 < ay1:
        raise ValueError(f"inverted corners in box {box_a!r}")
    if bx2 < bx1 or by2 < by1:
        raise ValueError(f"inverted corners in box {box_b!r}")
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def object_difficulty(prob: float, iou: float, xi: float = DEFAULT_XI) -> float:
    """Training difficulty ``1 - prob^xi * iou^(1-xi)`` of one matched box.

    Python's 0**0 == 1 gives the right endpoint behaviour at xi in {0, 1}.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must lie in [0, 1], got {prob!r}")
    if not 0.0 <= iou <= 1.0:
        raise ValueError(f"iou must lie in [0, 1], got {iou!r}")
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must lie in [0, 1], got {xi!r}")
    return 1.0 - prob**xi * iou ** (1.0 - xi)


def update_difficulties(state: DifficultyState, matches: Iterable[MatchEvent]) -> DifficultyState:
    """Fold one training batch into the per-class EMAs.

    Classes present in the batch move towards their mean difficulty and get
    their momentum reset to m0; absent classes keep their difficulty and
    have their momentum multiplied by m0. Returns a new state.
    """
    per_class: dict[int, list[float]] = {}
    for event in matches:
        if not 0 <= event.class_id < state.num_classes:
            raise ValueError(
                f"class id {event.class_id} out of range [0, {state.num_classes})"
            )
        q = object_difficulty(event.prob, event.iou, state.xi)
        per_class.setdefault(event.class_id, []).append(q)

    diffs = state.difficulties.copy()
    momenta = state.momenta * state.m0
    for class_id, qs in per_class.items():
        m = state.momenta[class_id]
        diffs[class_id] = m * diffs[class_id] + (1.0 - m) * (sum(qs) / len(qs))
        momenta[class_id] = state.m0
    return DifficultyState(diffs, momenta, m0=state.m0, xi=state.xi)


def difficulty_coefficients(
    state: DifficultyState, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA
) -> DifficultyCoefficients:
    """Map tracked difficulties to uncertainty weights ``1 + alpha*beta*ln(1 + gamma*d)``.

    ``gamma = e^(1/alpha) - 1``, so the weights span exactly [1, 1+beta] as
    d spans [0, 1]. The d=1 endpoint is pinned to 1+beta because the
    exp/log round trip is not always float-exact.
    """
    if alpha <= 0.0:
        raise ValueError(f"alpha must be > 0, got {alpha!r}")
    if beta <= 0.0:
        raise ValueError(f"beta must be > 0, got {beta!r}")
    gamma = math.expm1(1.0 / alpha)
    d = state.difficulties
    weights = np.where(d == 1.0, 1.0 + beta, 1.0 + alpha * beta * np.log1p(gamma * d))
    return DifficultyCoefficients(weights=weights, alpha=alpha, beta=beta, gamma=gamma)
