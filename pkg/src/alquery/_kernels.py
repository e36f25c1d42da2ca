"""Similarity-matrix kernels: compiled extension when available, numpy otherwise.

The pairwise matching-similarity fill is the hot loop of the whole engine
(O(n^2 * M^2 * d) over the candidate pool), so it is implemented twice:
once in Cython (``alquery._simkern``) and once in blocked numpy. The
compiled path is picked at import time; set ``ALQUERY_PURE=1`` to force
the numpy fallback. Both operate on a flattened pool layout:

    feats   (T, d) float64, all objects of all images concatenated
    classes (T,)   int32
    scores  (T,)   float64
    offsets (n+1,) int64, image i owns objects [offsets[i], offsets[i+1])

Kernels fill the strict upper triangle and mirror it; diagonals are owned
by the caller.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _simkern
except ImportError:  # not built; numpy path below covers everything
    _simkern = None

_FORCE_PURE = os.environ.get("ALQUERY_PURE", "").lower() in {"1", "true", "yes"}


def backend() -> str:
    """Name of the active kernel backend: 'compiled' or 'numpy'."""
    return "compiled" if (_simkern is not None and not _FORCE_PURE) else "numpy"


def flatten_pool(pool) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate the objects of a record pool into the flat kernel layout."""
    feats = []
    classes = []
    scores = []
    offsets = np.zeros(len(pool) + 1, dtype=np.int64)
    for i, record in enumerate(pool):
        offsets[i + 1] = offsets[i] + len(record.objects)
        for obj in record.objects:
            feats.append(obj.feature)
            classes.append(obj.class_id)
            scores.append(obj.score)
    if feats:
        feat_mat = np.ascontiguousarray(np.stack(feats), dtype=np.float64)
    else:
        feat_mat = np.zeros((0, 1), dtype=np.float64)
    return (
        feat_mat,
        np.asarray(classes, dtype=np.int32),
        np.asarray(scores, dtype=np.float64),
        offsets,
    )


def _directed_numpy(aff: np.ndarray, same: np.ndarray, ta: np.ndarray, tb: np.ndarray, cap: float):
    """Both directed match similarities for one image pair.

    ``aff`` is the (Ma, Mb) object-pair affinity, ``same`` the same-class
    mask; unmatched objects contribute 0. ``cap`` bounds each directed
    value at the affinity's mathematical maximum (ulp guard).
    """
    masked = np.where(same, aff, 0.0)
    den_a = ta.sum()
    den_b = tb.sum()
    s_ab = min(float(ta @ masked.max(axis=1)) / den_a, cap) if den_a > 0.0 else 0.0
    s_ba = min(float(tb @ masked.max(axis=0)) / den_b, cap) if den_b > 0.0 else 0.0
    return s_ab, s_ba


def _ccms_matrix_numpy(feats, classes, scores, offsets) -> np.ndarray:
    n = offsets.size - 1
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        a0, a1 = offsets[i], offsets[i + 1]
        if a0 == a1:
            continue
        fa, ca, ta = feats[a0:a1], classes[a0:a1], scores[a0:a1]
        for j in range(i + 1, n):
            b0, b1 = offsets[j], offsets[j + 1]
            if b0 == b1:
                continue
            same = ca[:, None] == classes[b0:b1][None, :]
            if not same.any():
                continue
            aff = fa @ feats[b0:b1].T + 1.0
            s_ab, s_ba = _directed_numpy(aff, same, ta, scores[b0:b1], 2.0)
            out[i, j] = out[j, i] = 0.5 * (s_ab + s_ba)
    return out


def _kl_matrix_numpy(probs, logs, classes, scores, offsets) -> np.ndarray:
    n = offsets.size - 1
    self_dot = np.einsum("ij,ij->i", probs, logs) if probs.size else np.zeros(0)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        a0, a1 = offsets[i], offsets[i + 1]
        if a0 == a1:
            continue
        pa, la, ca, ta = probs[a0:a1], logs[a0:a1], classes[a0:a1], scores[a0:a1]
        for j in range(i + 1, n):
            b0, b1 = offsets[j], offsets[j + 1]
            if b0 == b1:
                continue
            same = ca[:, None] == classes[b0:b1][None, :]
            if not same.any():
                continue
            # sym KL(u, v) = sum((p_u - p_v) * (log p_u - log p_v)) / 2
            cross = pa @ logs[b0:b1].T + (probs[b0:b1] @ la.T).T
            kl_sym = 0.5 * (self_dot[a0:a1][:, None] + self_dot[b0:b1][None, :] - cross)
            aff = np.exp(-kl_sym)
            s_ab, s_ba = _directed_numpy(aff, same, ta, scores[b0:b1], 1.0)
            out[i, j] = out[j, i] = 0.5 * (s_ab + s_ba)
    return out


def ccms_matrix(feats, classes, scores, offsets) -> np.ndarray:
    """Pairwise matching-similarity matrix over a flattened pool (diag zero)."""
    if backend() == "compiled":
        return _simkern.ccms_matrix(feats, classes, scores, offsets)
    return _ccms_matrix_numpy(feats, classes, scores, offsets)


def kl_matrix(probs, logs, classes, scores, offsets) -> np.ndarray:
    """Pairwise KL-affinity matching matrix over a flattened pool (diag zero)."""
    if backend() == "compiled":
        return _simkern.kl_matrix(probs, logs, classes, scores, offsets)
    return _kl_matrix_numpy(probs, logs, classes, scores, offsets)
