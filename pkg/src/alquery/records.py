"""Detection dumps, training-event streams, and round-state bookkeeping.

File formats (all NDJSON, one JSON object per line):

detections::

    {"image_id": "...", "objects": [{"feature": [...], "class": 3,
     "score": 0.91, "probs": [...]}, ...]}

  Optional per-image keys ``global_feature`` (one vector) and
  ``fpn_features`` (list of vectors) back the whole-image similarity
  baselines; unknown keys are ignored.

training events::

    {"iter": 17, "matches": [{"class": 3, "prob": 0.8, "iou": 0.7}, ...]}

Round state is a single JSON document with ``round``, ``labelled_ids``,
``unlabelled_ids``, ``budget`` and ``config``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

DEFAULT_M_CAP = 100

_PROB_SUM_TOL = 1e-6


class IngestError(ValueError):
    """A dump line violates the NDJSON schema; message names file and line."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


@dataclass(frozen=True)
class DetectedObject:
    """One detected object: unit-norm feature, predicted class, score, class probs."""

    feature: np.ndarray
    class_id: int
    score: float
    probs: np.ndarray


@dataclass(frozen=True)
class DetectionRecord:
    """All detections of one image, sorted by descending score and capped."""

    image_id: str
    objects: tuple[DetectedObject, ...]
    global_feature: np.ndarray | None = None
    fpn_features: tuple[np.ndarray, ...] | None = None

    def class_set(self) -> set[int]:
        return {o.class_id for o in self.objects}


@dataclass(frozen=True)
class MatchEvent:
    """A prediction/ground-truth match seen during training."""

    class_id: int
    prob: float
    iou: float


@dataclass
class RoundState:
    """Labelled/unlabelled partition of the training set at one AL round."""

    round: int
    labelled_ids: set[str]
    unlabelled_ids: set[str]
    budget: int
    config: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.round < 0:
            raise ValueError(f"round must be >= 0, got {self.round}")
        if self.budget <= 0:
            raise ValueError(f"budget must be > 0, got {self.budget}")
        overlap = self.labelled_ids & self.unlabelled_ids
        if overlap:
            raise ValueError(f"labelled and unlabelled sets overlap: {sorted(overlap)[:5]}")


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("zero-norm feature")
    out = vec / norm
    out.flags.writeable = False
    return out


def _as_vector(raw, what: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what} must be a non-empty flat list of numbers")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


def make_object(feature, class_id: int, score: float, probs) -> DetectedObject:
    """Validate raw object fields and build a normalized DetectedObject."""
    feat = _unit(_as_vector(feature, "feature"))
    prob_vec = _as_vector(probs, "probs")
    if np.any(prob_vec < 0.0) or np.any(prob_vec > 1.0):
        raise ValueError("probs entries must lie in [0, 1]")
    if abs(float(prob_vec.sum()) - 1.0) > _PROB_SUM_TOL:
        raise ValueError(f"probs must sum to 1, got {float(prob_vec.sum())!r}")
    if not isinstance(class_id, int) or isinstance(class_id, bool) or class_id < 0:
        raise ValueError(f"class must be a non-negative integer, got {class_id!r}")
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise ValueError(f"score must be numeric, got {score!r}")
    score = float(score)
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {score!r}")
    prob_vec.flags.writeable = False
    return DetectedObject(feature=feat, class_id=class_id, score=score, probs=prob_vec)


def make_record(
    image_id: str,
    objects: Iterable[DetectedObject],
    m_cap: int = DEFAULT_M_CAP,
    global_feature=None,
    fpn_features=None,
) -> DetectionRecord:
    """Order objects by descending score, keep at most ``m_cap``, freeze the record."""
    if m_cap < 1:
        raise ValueError(f"m_cap must be >= 1, got {m_cap}")
    ranked = sorted(objects, key=lambda o: -o.score)[:m_cap]
    gf = None if global_feature is None else _unit(_as_vector(global_feature, "global_feature"))
    fpn = None
    if fpn_features is not None:
        fpn = tuple(_unit(_as_vector(level, "fpn_features level")) for level in fpn_features)
        if not fpn:
            raise ValueError("fpn_features must contain at least one level")
    return DetectionRecord(
        image_id=image_id, objects=tuple(ranked), global_feature=gf, fpn_features=fpn
    )


def _parse_detection_line(payload, m_cap: int) -> DetectionRecord:
    if not isinstance(payload, dict):
        raise ValueError("line is not a JSON object")
    image_id = payload.get("image_id")
    if not isinstance(image_id, str) or not image_id:
        raise ValueError("missing or invalid 'image_id'")
    raw_objects = payload.get("objects")
    if not isinstance(raw_objects, list):
        raise ValueError("missing or invalid 'objects' list")
    objects = []
    for k, raw in enumerate(raw_objects):
        if not isinstance(raw, dict):
            raise ValueError(f"object {k} is not a JSON object")
        try:
            objects.append(
                make_object(raw.get("feature"), raw.get("class"), raw.get("score"), raw.get("probs"))
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"object {k}: {exc}") from exc
    return make_record(
        image_id,
        objects,
        m_cap=m_cap,
        global_feature=payload.get("global_feature"),
        fpn_features=payload.get("fpn_features"),
    )


def ingest_detections(path, m_cap: int = DEFAULT_M_CAP) -> list[DetectionRecord]:
    """Read a detection dump into validated, normalized records.

    Features are re-normalized to unit L2 norm, objects are sorted by
    descending score and truncated to ``m_cap``. Record order is file order.
    Raises IngestError naming the offending line on any schema violation,
    on inconsistent feature/probs dimensions, and on duplicate image ids.
    """
    records: list[DetectionRecord] = []
    seen: set[str] = set()
    feat_dim = None
    prob_dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                raise IngestError(path, line_no, "blank line")
            try:
                payload = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise IngestError(path, line_no, f"invalid JSON: {exc.msg}") from exc
            try:
                record = _parse_detection_line(payload, m_cap)
            except ValueError as exc:
                raise IngestError(path, line_no, str(exc)) from exc
            if record.image_id in seen:
                raise IngestError(path, line_no, f"duplicate image_id {record.image_id!r}")
            seen.add(record.image_id)
            for obj in record.objects:
                if feat_dim is None:
                    feat_dim = obj.feature.size
                    prob_dim = obj.probs.size
                if obj.feature.size != feat_dim:
                    raise IngestError(
                        path, line_no,
                        f"feature dimension {obj.feature.size} != {feat_dim} seen earlier",
                    )
                if obj.probs.size != prob_dim:
                    raise IngestError(
                        path, line_no,
                        f"probs length {obj.probs.size} != {prob_dim} seen earlier",
                    )
            records.append(record)
    return records


def write_detections(records: Iterable[DetectionRecord], path) -> None:
    """Write records back out in the dump format (one image per line)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            payload = {
                "image_id": rec.image_id,
                "objects": [
                    {
                        "feature": obj.feature.tolist(),
                        "class": obj.class_id,
                        "score": obj.score,
                        "probs": obj.probs.tolist(),
                    }
                    for obj in rec.objects
                ],
            }
            if rec.global_feature is not None:
                payload["global_feature"] = rec.global_feature.tolist()
            if rec.fpn_features is not None:
                payload["fpn_features"] = [level.tolist() for level in rec.fpn_features]
            fh.write(json.dumps(payload) + "\n")


def _parse_event_line(payload) -> tuple[int, list[MatchEvent]]:
    if not isinstance(payload, dict):
        raise ValueError("line is not a JSON object")
    iteration = payload.get("iter")
    if not isinstance(iteration, int) or isinstance(iteration, bool) or iteration < 0:
        raise ValueError("missing or invalid 'iter'")
    raw_matches = payload.get("matches")
    if not isinstance(raw_matches, list):
        raise ValueError("missing or invalid 'matches' list")
    matches = []
    for k, raw in enumerate(raw_matches):
        if not isinstance(raw, dict):
            raise ValueError(f"match {k} is not a JSON object")
        class_id = raw.get("class")
        if not isinstance(class_id, int) or isinstance(class_id, bool) or class_id < 0:
            raise ValueError(f"match {k}: class must be a non-negative integer")
        prob = raw.get("prob")
        iou_val = raw.get("iou")
        for name, value in (("prob", prob), ("iou", iou_val)):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ValueError(f"match {k}: missing or non-numeric '{name}'")
            if not 0.0 <= float(value) <= 1.0:
                raise ValueError(f"match {k}: {name} must lie in [0, 1]")
        matches.append(MatchEvent(class_id=class_id, prob=float(prob), iou=float(iou_val)))
    return iteration, matches


def read_match_events(path) -> Iterator[tuple[int, list[MatchEvent]]]:
    """Stream (iteration, matches) pairs from a training-event dump."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                raise IngestError(path, line_no, "blank line")
            try:
                payload = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise IngestError(path, line_no, f"invalid JSON: {exc.msg}") from exc
            try:
                yield _parse_event_line(payload)
            except ValueError as exc:
                raise IngestError(path, line_no, str(exc)) from exc


def write_match_events(events: Iterable[tuple[int, list[MatchEvent]]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for iteration, matches in events:
            payload = {
                "iter": iteration,
                "matches": [
                    {"class": m.class_id, "prob": m.prob, "iou": m.iou} for m in matches
                ],
            }
            fh.write(json.dumps(payload) + "\n")


def advance_round(state: RoundState, queries) -> RoundState:
    """Move queried ids from unlabelled to labelled and bump the round counter.

    ``queries`` may be a QuerySet or any iterable of image ids. The input
    state is left untouched.
    """
    ids = list(getattr(queries, "ids", queries))
    if len(ids) != len(set(ids)):
        raise ValueError("query ids contain duplicates")
    if len(ids) > state.budget:
        raise ValueError(f"{len(ids)} queries exceed budget {state.budget}")
    for image_id in ids:
        if image_id in state.labelled_ids:
            raise ValueError(f"query id {image_id!r} is already labelled")
        if image_id not in state.unlabelled_ids:
            raise ValueError(f"unknown query id {image_id!r}")
    return RoundState(
        round=state.round + 1,
        labelled_ids=state.labelled_ids | set(ids),
        unlabelled_ids=state.unlabelled_ids - set(ids),
        budget=state.budget,
        config=dict(state.config),
    )


def save_round_state(state: RoundState, path) -> None:
    state.validate()
    payload = {
        "round": state.round,
        "labelled_ids": sorted(state.labelled_ids),
        "unlabelled_ids": sorted(state.unlabelled_ids),
        "budget": state.budget,
        "config": state.config,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_round_state(path) -> RoundState:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise ValueError(f"{path}: round state must be a JSON object")
    try:
        state = RoundState(
            round=int(payload["round"]),
            labelled_ids=set(payload["labelled_ids"]),
            unlabelled_ids=set(payload["unlabelled_ids"]),
            budget=int(payload["budget"]),
            config=payload.get("config", {}),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: invalid round state: {exc}") from exc
    state.validate()
    return state
