import csv
import math

import numpy as np
import pytest

from segot.features import HeadParams
from segot.matcher import MatcherConfig, TransportPlan, augment_dustbin, sinkhorn_log
from segot.structures import GtAssignment, MaskSet
from segot.synth import SceneConfig, gen_pair
from segot.training import (LR0, LR_MIN, OptimState, TrainConfig, adamw_step, assignment_loss,
                            batch_loss_and_grads, cosine_lr, load_checkpoint, loss_backward,
                            pair_loss_and_grads, save_checkpoint, train_head, write_trace)


def fd_grad(f, x, eps=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += eps
        minus[idx] -= eps
        g[idx] = (f(plus) - f(minus)) / (2 * eps)
    return g


def random_gt(rng, m1, m2):
    k = rng.integers(0, min(m1, m2) + 1)
    rows = rng.permutation(m1)[:k]
    cols = rng.permutation(m2)[:k]
    ua = sorted(set(range(m1)) - set(rows.tolist()))
    ub = sorted(set(range(m2)) - set(cols.tolist()))
    return GtAssignment(tuple(zip(rows.tolist(), cols.tolist())), tuple(ua), tuple(ub))


def test_loss_zero_on_certain_plan():
    P = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert assignment_loss(TransportPlan(P), GtAssignment(((0, 0),), (), ())) == 0.0


def test_loss_single_match():
    P = np.array([[math.exp(-1), 0.2, 0.1], [0.1, 0.1, 0.1]])
    assert assignment_loss(TransportPlan(P), GtAssignment(((0, 0),), (), ())) == pytest.approx(1.0, abs=1e-12)


def test_loss_hand_sum():
    rng = np.random.default_rng(0)
    plan = sinkhorn_log(rng.uniform(-2, 2, (5, 6)), 0.5, 30)
    gt = GtAssignment(((0, 1), (2, 3)), (1, 3), (0, 2, 4))
    P = plan.P
    ref = -(math.log(P[0, 1]) + math.log(P[2, 3]) + math.log(P[1, 5] * 4) + math.log(P[3, 5] * 4)
            + math.log(P[4, 0] * 5) + math.log(P[4, 2] * 5) + math.log(P[4, 4] * 5))
    assert assignment_loss(plan, gt) == pytest.approx(ref, abs=1e-9)


def test_empty_gt_zero():
    loss, g, ga = loss_backward(np.zeros((3, 4)), GtAssignment((), (), ()), 0.1, 5)
    assert loss == 0.0 and not g.any() and ga == 0.0


@pytest.mark.parametrize("tau,iters", [(0.5, 10), (0.1, 50), (1.0, 5)])
def test_gradient_matches_finite_differences(tau, iters):
    rng = np.random.default_rng(int(tau * 100) + iters)
    St = rng.uniform(-1, 1, (3, 4))
    gt = random_gt(rng, 2, 3)
    loss, g, _ = loss_backward(St, gt, tau, iters)
    fd = fd_grad(lambda x: assignment_loss(sinkhorn_log(x, tau, iters), gt), St)
    assert np.abs(g - fd).max() <= 1e-3 * np.abs(fd).max()


def test_alpha_gradient_is_border_sum():
    rng = np.random.default_rng(5)
    S = rng.uniform(-1, 1, (3, 4))
    gt = random_gt(rng, 3, 4)

    def f(a):
        return assignment_loss(sinkhorn_log(augment_dustbin(S, a), 0.2, 20), gt)

    _, _, ga = loss_backward(augment_dustbin(S, 0.3), gt, 0.2, 20)
    assert ga == pytest.approx((f(0.3 + 1e-5) - f(0.3 - 1e-5)) / 2e-5, rel=1e-5)


def test_shift_invariance():
    rng = np.random.default_rng(6)
    St = rng.uniform(-1, 1, (4, 4))
    gt = random_gt(rng, 3, 3)
    a = loss_backward(St, gt, 0.3, 20)
    b = loss_backward(St + 2.5, gt, 0.3, 20)
    assert a[0] == pytest.approx(b[0], abs=1e-10)
    np.testing.assert_allclose(a[1], b[1], atol=1e-10)


def _tiny_pair(rng):
    masks = np.zeros((2, 2, 2), bool)
    masks[0, 0] = True
    masks[1, 1] = True
    return rng.standard_normal((1, 1, 3)), rng.standard_normal((1, 1, 3)), MaskSet(masks), MaskSet(masks[::-1])


def test_head_gradient_finite_differences():
    rng = np.random.default_rng(7)
    params = HeadParams.init(3, dim_out=2, patch_size=2, hidden=4, seed=1)
    pa, pb, ma, mb = _tiny_pair(rng)
    gt = GtAssignment(((0, 1),), (1,), (0,))
    cfg = MatcherConfig(tau=0.5, iterations=10)
    _, grads = pair_loss_and_grads(params, 0.2, pa, pb, ma, mb, gt, cfg)
    for name in HeadParams.NAMES:
        fd = fd_grad(lambda x: pair_loss_and_grads(params.replace(**{name: x}), 0.2, pa, pb, ma, mb, gt, cfg)[0],
                     getattr(params, name), eps=1e-5)
        assert np.abs(grads[name] - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())


def test_zero_head_gradients_only_through_dustbin():
    params = HeadParams.zeros(3, 2, 2, 4)
    rng = np.random.default_rng(8)
    pa, pb, ma, mb = _tiny_pair(rng)
    _, grads = pair_loss_and_grads(params, 0.5, pa, pb, ma, mb, GtAssignment(((0, 1),), (1,), (0,)))
    for name in HeadParams.NAMES:
        assert not np.any(grads[name])
    assert grads["alpha"] != 0


def test_batch_of_two_identical_pairs_doubles():
    sp = gen_pair(SceneConfig(patch_size=2, seed=3), 1).pair
    params = HeadParams.init(sp.patches_a.shape[2], dim_out=4, patch_size=2, seed=0)
    l1, g1 = batch_loss_and_grads(params, 1.0, [sp])
    l2, g2 = batch_loss_and_grads(params, 1.0, [sp, sp])
    assert l2 == pytest.approx(2 * l1)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)


def test_adamw_fixed_point_and_first_step():
    state = OptimState(weight_decay=0.0, total_steps=10)
    out = adamw_step({"w": np.array([1.5])}, {"w": np.array([0.0])}, state)
    assert out["w"][0] == 1.5
    state = OptimState(total_steps=10)
    out = adamw_step({"x": np.array(0.0)}, {"x": np.array(1.0)}, state)
    assert float(out["x"]) == pytest.approx(-1e-4, rel=1e-6)


def test_adamw_alpha_not_decayed():
    state = OptimState(weight_decay=0.5, lr0=0.1, total_steps=10)
    out = adamw_step({"alpha": np.array(2.0), "w": np.array(2.0)}, {"alpha": np.array(0.0), "w": np.array(0.0)},
                     state)
    assert float(out["alpha"]) == 2.0 and float(out["w"]) < 2.0


def test_adamw_quadratic_descends():
    state = OptimState(lr0=0.05, lr_min=0.05, weight_decay=0.0, total_steps=100)
    x = np.array(3.0)
    losses = []
    for _ in range(100):
        x = adamw_step({"x": x}, {"x": 2 * x}, state)["x"]
        losses.append(float(x * x))
    assert all(b < a for a, b in zip(losses[5:], losses[6:]) if a > 1e-6)


def test_cosine_schedule():
    assert cosine_lr(0, 100) == LR0
    assert cosine_lr(100, 100) == pytest.approx(LR_MIN, abs=1e-18)
    assert cosine_lr(50, 100) == pytest.approx((LR0 + LR_MIN) / 2)
    assert cosine_lr(150, 100) == pytest.approx(LR_MIN, abs=1e-18)


def test_zero_steps_returns_init():
    res = train_head(TrainConfig(steps=0))
    init = HeadParams.init(32, 24, 2, seed=0)
    for name in HeadParams.NAMES:
        assert np.array_equal(getattr(res.params, name), getattr(init, name))
    assert res.alpha == 1.0 and res.trace == []


def test_training_is_deterministic():
    cfg = TrainConfig(steps=3, batch_size=2, train_pairs=4)
    a, b = train_head(cfg), train_head(cfg)
    assert [r["loss"] for r in a.trace] == [r["loss"] for r in b.trace]


def test_checkpoint_and_trace(tmp_path):
    res = train_head(TrainConfig(steps=2, batch_size=1, train_pairs=2))
    save_checkpoint(tmp_path, res.params, res.alpha, seed=0, steps=2)
    params, alpha, meta = load_checkpoint(tmp_path)
    assert meta["steps"] == 2 and meta["dim_in"] == 32
    np.testing.assert_allclose(params.w1, res.params.w1, rtol=1e-6)
    assert alpha == pytest.approx(res.alpha, rel=1e-6)
    write_trace(tmp_path / "trace.csv", res.trace)
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert [r["step"] for r in rows] == ["0", "1"] and set(rows[0]) == {"step", "lr", "loss"}
