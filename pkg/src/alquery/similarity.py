"""Pairwise similarity of multi-instance images.

The matching similarity (``ccms``) matches every object to its most
similar same-class counterpart in the other image (shifted cosine, in
[0, 2]), averages the per-object match values weighted by detection
scores, and symmetrizes the two directed values. ``kl`` keeps the same
matching/weighting scheme but scores object pairs by
``exp(-sym_KL(probs_a, probs_b))`` for detectors whose features are not
comparable across images. ``global`` and ``fpn`` are the whole-image
cosine baselines.

The scalar ops here are straightforward reference implementations; the
matrix builder runs on the kernels in ``alquery._kernels``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .records import DetectionRecord

KINDS = ("ccms", "global", "fpn", "kl")

PROB_FLOOR = 1e-8

_HEADER = struct.Struct("<II")


@dataclass
class SimilarityMatrix:
    """Dense symmetric image-pair similarities over an ordered id list."""

    values: np.ndarray
    ids: list[str]

    @property
    def n(self) -> int:
        return len(self.ids)

    def save(self, path) -> None:
        """Binary dump: little-endian header (u32 n, u32 reserved) + row-major
        float32 values, with the id list in a ``<path>.ids.json`` sidecar."""
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(self.n, 0))
            fh.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
        Path(str(path) + ".ids.json").write_text(
            json.dumps(self.ids) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "SimilarityMatrix":
        path = Path(path)
        blob = path.read_bytes()
        if len(blob) < _HEADER.size:
            raise ValueError(f"{path}: truncated similarity dump")
        n, _reserved = _HEADER.unpack_from(blob)
        expected = _HEADER.size + 4 * n * n
        if len(blob) != expected:
            raise ValueError(f"{path}: expected {expected} bytes for n={n}, got {len(blob)}")
        values = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(n, n)
        ids = json.loads(Path(str(path) + ".ids.json").read_text(encoding="utf-8"))
        if len(ids) != n:
            raise ValueError(f"{path}: sidecar id list has {len(ids)} entries, expected {n}")
        return cls(values=values.astype(np.float64), ids=list(ids))


def ccms_directed(a: DetectionRecord, b: DetectionRecord) -> float:
    """Score-weighted mean over a's objects of their best same-class match in b.

    Each match contributes cosine+1; objects without a same-class
    counterpart contribute 0. Returns 0 when a has no objects or only
    zero-score ones.
    """
    if not a.objects:
        return 0.0
    total_score = sum(o.score for o in a.objects)
    if total_score <= 0.0:
        return 0.0
    acc = 0.0
    for oa in a.objects:
        best = 0.0
        for ob in b.objects:
            if ob.class_id == oa.class_id:
                val = float(oa.feature @ ob.feature) + 1.0
                if val > best:
                    best = val
        acc += oa.score * best
    # unit-norm dots can overshoot 1 by an ulp; keep the stated [0, 2] range
    return min(acc / total_score, 2.0)


def ccms(a: DetectionRecord, b: DetectionRecord) -> float:
    """Symmetric matching similarity: mean of the two directed values."""
    return 0.5 * (ccms_directed(a, b) + ccms_directed(b, a))


def global_similarity(a, b) -> float:
    """Shifted cosine (cos+1 in [0, 2]) of two whole-image feature vectors."""
    fa = np.asarray(a, dtype=np.float64)
    fb = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(fa))
    nb = float(np.linalg.norm(fb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("global similarity is undefined for zero vectors")
    cos = float(fa @ fb) / (na * nb)
    return min(max(cos + 1.0, 0.0), 2.0)


def _floored_probs(probs: np.ndarray) -> np.ndarray:
    p = np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR)
    return p / p.sum()


def kl_pair_affinity(probs_a, probs_b) -> float:
    """``exp(-sym_KL)`` of two probability vectors, floored and renormalized."""
    pa = _floored_probs(probs_a)
    pb = _floored_probs(probs_b)
    kl_sym = 0.5 * float(np.sum((pa - pb) * (np.log(pa) - np.log(pb))))
    return min(float(np.exp(-kl_sym)), 1.0)


def kl_similarity(a: DetectionRecord, b: DetectionRecord) -> float:
    """Matching similarity with KL affinities instead of feature cosines."""

    def directed(src: DetectionRecord, dst: DetectionRecord) -> float:
        if not src.objects:
            return 0.0
        total_score = sum(o.score for o in src.objects)
        if total_score <= 0.0:
            return 0.0
        acc = 0.0
        for oa in src.objects:
            best = 0.0
            for ob in dst.objects:
                if ob.class_id == oa.class_id:
                    val = kl_pair_affinity(oa.probs, ob.probs)
                    if val > best:
                        best = val
            acc += oa.score * best
        return acc / total_score

    return 0.5 * (directed(a, b) + directed(b, a))


def image_global_feature(record: DetectionRecord) -> np.ndarray:
    """Whole-image feature: the dumped one, else the mean object feature."""
    if record.global_feature is not None:
        return record.global_feature
    if not record.objects:
        raise ValueError(
            f"image {record.image_id!r} has no objects and no global feature"
        )
    mean = np.mean([o.feature for o in record.objects], axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise ValueError(f"image {record.image_id!r} has a zero mean feature")
    return mean / norm


def _symmetrize(values: np.ndarray) -> np.ndarray:
    upper = np.triu(values, 1)
    return upper + upper.T + np.diag(np.diag(values))


def _whole_image_matrix(pool: Sequence[DetectionRecord], kind: str) -> np.ndarray:
    if kind == "global":
        feats = np.stack([image_global_feature(r) for r in pool])
        values = feats @ feats.T + 1.0
    else:
        counts = {len(r.fpn_features) for r in pool if r.fpn_features is not None}
        if any(r.fpn_features is None for r in pool):
            missing = [r.image_id for r in pool if r.fpn_features is None]
            raise ValueError(f"fpn similarity needs fpn_features; missing for {missing[:5]}")
        if len(counts) != 1:
            raise ValueError(f"inconsistent fpn level counts: {sorted(counts)}")
        levels = counts.pop()
        values = np.zeros((len(pool), len(pool)))
        for level in range(levels):
            feats = np.stack([r.fpn_features[level] for r in pool])
            values += feats @ feats.T + 1.0
        values /= levels
    values = np.clip(values, 0.0, 2.0)
    np.fill_diagonal(values, 2.0)
    return _symmetrize(values)


def similarity_matrix(pool: Sequence[DetectionRecord], kind: str = "ccms") -> SimilarityMatrix:
    """All-pairs similarity over a pool of records.

    Bit-exact symmetric; matching kinds get diagonal 2 (ccms) / 1 (kl) for
    non-empty images and 0 for empty ones, per the self-match value of the
    underlying measure.
    """
    pool = list(pool)
    if not pool:
        raise ValueError("similarity matrix needs a non-empty pool")
    if kind not in KINDS:
        raise ValueError(f"unknown similarity kind {kind!r}; expected one of {KINDS}")
    ids = [r.image_id for r in pool]
    if kind in ("global", "fpn"):
        return SimilarityMatrix(values=_whole_image_matrix(pool, kind), ids=ids)

    feats, classes, scores, offsets = _kernels.flatten_pool(pool)
    if kind == "ccms":
        values = _kernels.ccms_matrix(feats, classes, scores, offsets)
        self_sim = 2.0
    else:
        probs = np.stack([o.probs for r in pool for o in r.objects]) if offsets[-1] else np.zeros((0, 1))
        probs = np.maximum(probs, PROB_FLOOR)
        probs /= probs.sum(axis=1, keepdims=True)
        probs = np.ascontiguousarray(probs)
        values = _kernels.kl_matrix(probs, np.ascontiguousarray(np.log(probs)), classes, scores, offsets)
        self_sim = 1.0
    for i, record in enumerate(pool):
        values[i, i] = self_sim if record.objects else 0.0
    return SimilarityMatrix(values=values, ids=ids)
