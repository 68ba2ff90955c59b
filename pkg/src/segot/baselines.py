"""Baselines: keypoint voting over masks, and mutual-nearest cosine matching."""

from __future__ import annotations

import logging

import numpy as np

from segot.errors import ValidationError
from segot.structures import MaskSet

log = logging.getLogger(__name__)


def _owner_map(masks: MaskSet) -> np.ndarray:
    """Lowest mask index covering each pixel, -1 where no mask does."""
    m = masks.masks & masks.valid[:, None, None]
    covered = m.any(0)
    first = m.argmax(0)
    return np.where(covered, first, -1)


def vote_match(masks_a, masks_b, keypoints):
    """Segment correspondence by keypoint voting.

    ``keypoints`` is a sequence of ((x0, y0), (x1, y1)) integer pixel pairs.
    Returns the M x N vote matrix and an assignment vector with -1 for sources
    that received no vote. Overlapping masks resolve to their lowest index;
    ties in a row go to the lowest target index.
    """
    masks_a = masks_a if isinstance(masks_a, MaskSet) else MaskSet(masks_a)
    masks_b = masks_b if isinstance(masks_b, MaskSet) else MaskSet(masks_b)
    kp = np.asarray(keypoints, dtype=np.int64).reshape(-1, 2, 2)
    (ha, wa), (hb, wb) = masks_a.hw, masks_b.hw
    x0, y0, x1, y1 = kp[:, 0, 0], kp[:, 0, 1], kp[:, 1, 0], kp[:, 1, 1]
    if ((x0 < 0) | (x0 >= wa) | (y0 < 0) | (y0 >= ha) | (x1 < 0) | (x1 >= wb) | (y1 < 0) | (y1 >= hb)).any():
        raise ValidationError("keypoint coordinates fall outside the image bounds")
    m = _owner_map(masks_a)[y0, x0]
    n = _owner_map(masks_b)[y1, x1]
    ok = (m >= 0) & (n >= 0)
    V = np.zeros((masks_a.count, masks_b.count), dtype=np.int64)
    np.add.at(V, (m[ok], n[ok]), 1)
    assignment = np.where(V.sum(1) > 0, V.argmax(1) if V.shape[1] else -1, -1)
    return V, assignment.astype(np.int64)


def mutual_cosine_match(G1, G2):
    """Pairs (i, j) that are each other's best cosine match.

    Zero-norm descriptors never take part; returns a sorted list of (i, j) and
    the cosine matrix used.
    """
    A = np.asarray(G1, dtype=np.float64)
    B = np.asarray(G2, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValidationError(f"descriptor sets must share a dimension, got {A.shape} and {B.shape}")
    na, nb = np.linalg.norm(A, axis=1), np.linalg.norm(B, axis=1)
    ok_a, ok_b = na > 0, nb > 0
    if not (ok_a.all() and ok_b.all()):
        log.warning("excluding %d zero-norm descriptor(s)", int((~ok_a).sum() + (~ok_b).sum()))
    sim = (A / np.where(ok_a, na, 1)[:, None]) @ (B / np.where(ok_b, nb, 1)[:, None]).T
    sim[~ok_a, :] = -np.inf
    sim[:, ~ok_b] = -np.inf
    if not (ok_a.any() and ok_b.any()):
        return [], sim
    row_best = sim.argmax(1)
    col_best = sim.argmax(0)
    pairs = [(int(i), int(row_best[i])) for i in np.flatnonzero(ok_a) if col_best[row_best[i]] == i]
    return pairs, sim
