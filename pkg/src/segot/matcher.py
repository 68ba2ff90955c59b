"""Affinity, learnable dustbin and log-domain Sinkhorn matching of segment descriptors.

The dustbin row stands for M2 identical "no match" slots and the dustbin column
for M1 of them, so Sinkhorn runs on the implicit square matrix of size
(M1 + M2) x (M1 + M2), which can be made exactly doubly stochastic.  A
:class:`TransportPlan` stores one representative entry per dustbin copy; see
:meth:`TransportPlan.expanded` and :meth:`TransportPlan.masses`.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from segot.errors import NumericError, ValidationError
from segot.features import SegmentDescriptors

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.1
DEFAULT_ITERATIONS = 50
DEFAULT_ALPHA = 1.0


@dataclass(frozen=True)
class MatcherConfig:
    tau: float = DEFAULT_TAU
    iterations: int = DEFAULT_ITERATIONS
    normalize: bool = True
    mutual_check: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"temperature must be positive, got {self.tau}")
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")


def dustbin_weights(m1: int, m2: int):
    """Multiplicities of the rows and columns of an augmented (m1+1) x (m2+1) matrix."""
    rows = np.ones(m1 + 1)
    cols = np.ones(m2 + 1)
    rows[-1] = max(m2, 1)
    cols[-1] = max(m1, 1)
    return rows, cols


@dataclass(frozen=True)
class TransportPlan:
    """Soft assignment over M1 + 1 rows and M2 + 1 columns, the last of each being the dustbin."""

    P: np.ndarray

    @property
    def m1(self) -> int:
        return self.P.shape[0] - 1

    @property
    def m2(self) -> int:
        return self.P.shape[1] - 1

    @property
    def weights(self):
        return dustbin_weights(self.m1, self.m2)

    def row_sums(self) -> np.ndarray:
        """Row sums of the expanded square plan (one value per distinct row)."""
        return self.P @ self.weights[1]

    def col_sums(self) -> np.ndarray:
        return self.weights[0] @ self.P

    def masses(self) -> np.ndarray:
        """Total mass moved between each segment and the dustbin (entries of real rows/cols sum to 1)."""
        r, c = self.weights
        return self.P * r[:, None] * c[None, :]

    def expanded(self) -> np.ndarray:
        """The explicit square matrix with dustbin rows and columns repeated."""
        r, c = self.weights
        rows = np.repeat(np.arange(self.m1 + 1), r.astype(int))
        cols = np.repeat(np.arange(self.m2 + 1), c.astype(int))
        return self.P[np.ix_(rows, cols)]

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.P, dtype="<f8").tobytes()).hexdigest()


@dataclass(frozen=True)
class MatchResult:
    """Per source slot: target slot index or None, and the plan entry behind the decision."""

    assignment: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    def to_json(self, plan: TransportPlan | None = None) -> dict:
        doc = {"assignment": list(self.assignment), "scores": [float(s) for s in self.scores]}
        if plan is not None:
            doc["plan_checksum"] = plan.checksum()
        return doc


def l2_normalize(G):
    """Row-normalize; zero rows stay zero. Returns (normalized, norms)."""
    G = np.asarray(G, dtype=np.float64)
    norms = np.linalg.norm(G, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return G / safe[:, None], norms


def _descriptor_rows(G):
    if isinstance(G, SegmentDescriptors):
        return G.compact()[0]
    return np.asarray(G, dtype=np.float64)


def affinity(G1, G2, normalize=True) -> np.ndarray:
    """Dot-product affinity between the valid rows of two descriptor sets."""
    A, B = _descriptor_rows(G1), _descriptor_rows(G2)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValidationError(f"descriptor sets must share a dimension, got {A.shape} and {B.shape}")
    if normalize:
        A, na = l2_normalize(A)
        B, nb = l2_normalize(B)
        n_zero = int((na == 0).sum() + (nb == 0).sum())
        if n_zero:
            log.warning("%d zero-norm descriptor(s) treated as zero similarity", n_zero)
    return A @ B.T


def augment_dustbin(S, alpha) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise NumericError("affinity matrix contains non-finite values")
    m1, m2 = S.shape
    St = np.full((m1 + 1, m2 + 1), float(alpha))
    St[:m1, :m2] = S
    return St


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def sinkhorn_iterates(St, tau, iterations):
    """Log-domain Sinkhorn; returns the final log-plan and the list of intermediate log-plans.

    history[2t] is the input to the t-th row normalization and history[2t+1]
    the input to the t-th column normalization.
    """
    St = np.asarray(St, dtype=np.float64)
    if not np.all(np.isfinite(St)):
        raise NumericError("augmented affinity contains non-finite values")
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    r, c = dustbin_weights(St.shape[0] - 1, St.shape[1] - 1)
    log_r, log_c = np.log(r)[:, None], np.log(c)[None, :]
    Z = St / tau
    history = []
    for _ in range(iterations):
        history.append(Z)
        Z = Z - _lse(Z + log_c, 1)
        history.append(Z)
        Z = Z - _lse(Z + log_r, 0)
    if not np.all(np.isfinite(Z)):
        raise NumericError("Sinkhorn produced non-finite values")
    return Z, history


def sinkhorn_log(St, tau=DEFAULT_TAU, iterations=DEFAULT_ITERATIONS) -> TransportPlan:
    """``iterations`` rounds of row-then-column normalization of exp(St / tau)."""
    Z, _ = sinkhorn_iterates(St, tau, iterations)
    return TransportPlan(np.exp(Z))


def discretize(plan: TransportPlan, mutual_check=False) -> MatchResult:
    """Row-wise argmax over all columns; the dustbin winning means no match.

    The dustbin competes with a single copy's entry, so ``alpha`` plays the role of
    one more candidate logit rather than being scaled by the number of copies.
    """
    P = plan.P
    m1, m2 = plan.m1, plan.m2
    if m2 == 0:
        return MatchResult([None] * m1, [float(p) for p in P[:m1, 0]])
    best = P[:m1].argmax(1)
    col_best = P[:m1, :m2].argmax(0) if m1 else np.zeros(m2, dtype=int)
    assignment, scores = [], []
    for i, j in enumerate(best):
        j = int(j)
        if j == m2 or (mutual_check and col_best[j] != i):
            assignment.append(None)
        else:
            assignment.append(j)
        scores.append(float(P[i, j]))
    return MatchResult(assignment, scores)


def match_segments(G1, G2, config: MatcherConfig = MatcherConfig(), alpha=DEFAULT_ALPHA):
    """affinity -> dustbin -> Sinkhorn -> argmax.

    Padded (invalid) slots are removed before matching; the returned plan is over
    valid segments only while the assignment is indexed by slot and maps invalid
    sources to None.
    """
    if isinstance(G1, SegmentDescriptors):
        A, idx1, n1 = *G1.compact(), G1.count
    else:
        A = np.asarray(G1, dtype=np.float64)
        idx1, n1 = np.arange(len(A)), len(A)
    if isinstance(G2, SegmentDescriptors):
        B, idx2 = G2.compact()
    else:
        B = np.asarray(G2, dtype=np.float64)
        idx2 = np.arange(len(B))
    S = affinity(A, B, config.normalize)
    plan = sinkhorn_log(augment_dustbin(S, alpha), config.tau, config.iterations)
    compact = discretize(plan, config.mutual_check)
    assignment: list = [None] * n1
    scores = [0.0] * n1
    for k, i in enumerate(idx1):
        j = compact.assignment[k]
        assignment[i] = None if j is None else int(idx2[j])
        scores[i] = compact.scores[k]
    return plan, MatchResult(assignment, scores)
