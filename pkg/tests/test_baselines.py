import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segot.baselines import mutual_cosine_match, vote_match
from segot.errors import ValidationError


def reference_vote(masks_a, masks_b, kps):
    M, N = len(masks_a), len(masks_b)
    V = [[0] * N for _ in range(M)]
    for (x0, y0), (x1, y1) in kps:
        m = next((k for k in range(M) if masks_a[k][y0][x0]), None)
        n = next((k for k in range(N) if masks_b[k][y1][x1]), None)
        if m is not None and n is not None:
            V[m][n] += 1
    C = []
    for m in range(M):
        if sum(V[m]) == 0:
            C.append(-1)
        else:
            best = 0
            for n in range(N):
                if V[m][n] > V[m][best]:
                    best = n
            C.append(best)
    return V, C


def random_instance(rng):
    h, w = rng.integers(2, 10, 2)
    M, N = rng.integers(1, 6, 2)
    ma = rng.random((M, h, w)) < 0.3
    mb = rng.random((N, h, w)) < 0.3
    K = rng.integers(0, 30)
    kps = [((int(rng.integers(w)), int(rng.integers(h))), (int(rng.integers(w)), int(rng.integers(h))))
           for _ in range(K)]
    return ma, mb, kps


def test_hand_trace():
    ma = np.zeros((2, 1, 2), bool)
    ma[0, 0, 0] = ma[1, 0, 1] = True
    mb = ma.copy()
    V, C = vote_match(ma, mb, [((0, 0), (1, 0)), ((0, 0), (1, 0)), ((1, 0), (0, 0))])
    assert C.tolist() == [1, 0]
    assert V.tolist() == [[0, 2], [1, 0]]


def test_zero_votes_and_off_mask():
    ma = np.zeros((2, 2, 2), bool)
    ma[0, 0, 0] = True
    mb = np.ones((1, 2, 2), bool)
    V, C = vote_match(ma, mb, [((1, 1), (0, 0)), ((0, 0), (1, 1))])
    assert C.tolist() == [0, -1] and V.sum() == 1


def test_out_of_bounds_keypoint():
    with pytest.raises(ValidationError):
        vote_match(np.ones((1, 2, 2), bool), np.ones((1, 2, 2), bool), [((2, 0), (0, 0))])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_vote_matches_reference(seed):
    ma, mb, kps = random_instance(np.random.default_rng(seed))
    V, C = vote_match(ma, mb, kps)
    Vr, Cr = reference_vote(ma.tolist(), mb.tolist(), kps)
    assert V.tolist() == Vr and C.tolist() == Cr


def test_vote_order_invariant():
    rng = np.random.default_rng(9)
    ma, mb, kps = random_instance(rng)
    a = vote_match(ma, mb, kps)
    b = vote_match(ma, mb, [kps[k] for k in rng.permutation(len(kps))])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_mutual_identity_and_permutation():
    G = np.eye(4)
    assert mutual_cosine_match(G, G)[0] == [(0, 0), (1, 1), (2, 2), (3, 3)]
    perm = [2, 0, 3, 1]
    pairs, _ = mutual_cosine_match(G, G[perm])
    assert pairs == [(i, perm.index(i)) for i in range(4)]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_mutual_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    cos = [[float(A[i] @ B[j] / np.linalg.norm(A[i]) / np.linalg.norm(B[j])) for j in range(6)] for i in range(6)]
    ref = []
    for i in range(6):
        j = max(range(6), key=lambda k: (cos[i][k], -k))
        if max(range(6), key=lambda k: (cos[k][j], -k)) == i:
            ref.append((i, j))
    pairs, _ = mutual_cosine_match(A, B)
    assert pairs == ref
    assert len({j for _, j in pairs}) == len(pairs)


def test_mutual_zero_rows_excluded(caplog):
    A = np.array([[0.0, 0.0], [1.0, 0.0]])
    pairs, _ = mutual_cosine_match(A, np.eye(2))
    assert pairs == [(1, 0)] and "zero-norm" in caplog.text
