import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segot.errors import ValidationError
from segot.mapping import (Detection, FusionConfig, MapObject, UnionFind, backproject, build_map_pairwise,
                           eval_instance_ap, export_map, fuse, fused_sim, greedy_associate, gt_instances,
                           load_sequence, nn_ratio, pointcloud_iou, running_mean, save_sequence, semantic_sim,
                           voxel_downsample)
from segot.structures import CameraPose, Intrinsics, MaskSet
from segot.synth import BoxWorldConfig, Frame, gen_sequence

IDENTITY = CameraPose(np.eye(3), np.zeros(3))


def test_backproject_examples():
    mask = np.zeros((5, 5), bool)
    mask[2, 2] = True
    pts = backproject(mask, np.full((5, 5), 2.0), Intrinsics(10, 10, 2, 2), IDENTITY)
    assert pts.tolist() == [[0.0, 0.0, 2.0]]
    mask = np.zeros((6, 6), bool)
    mask[4, 3] = True
    assert backproject(mask, np.ones((6, 6)), Intrinsics(1, 1, 0, 0), IDENTITY).tolist() == [[3.0, 4.0, 1.0]]


def test_backproject_loop_oracle():
    rng = np.random.default_rng(0)
    mask = rng.random((7, 9)) < 0.5
    depth = rng.uniform(0.5, 3, (7, 9))
    depth[0, :] = 0.0
    intr = Intrinsics(5.0, 6.0, 4.2, 3.1)
    R = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    R *= np.sign(np.linalg.det(R))
    pose = CameraPose(R, rng.standard_normal(3))
    ref = []
    for v in range(7):
        for u in range(9):
            d = depth[v, u]
            if mask[v, u] and d > 0:
                p = np.array([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d])
                ref.append(R @ p + pose.translation)
    np.testing.assert_allclose(backproject(mask, depth, intr, pose), np.array(ref), atol=1e-9)


def test_nn_ratio_examples():
    P = np.random.default_rng(1).random((50, 3))
    assert nn_ratio(P, P, 1e-6) == 1.0
    assert nn_ratio(P, P + 10 * 0.01 + 1.0, 0.01) == 0.0
    assert nn_ratio(P, np.zeros((0, 3)), 0.1) == 0.0
    with pytest.raises(ValidationError):
        nn_ratio(np.zeros((0, 3)), P, 0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.3))
def test_nn_ratio_brute_force_and_monotone(seed, tol):
    rng = np.random.default_rng(seed)
    A, B = rng.random((200, 3)), rng.random((300, 3))
    d = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)).min(1)
    assert nn_ratio(A, B, tol) == np.mean(d <= tol)
    assert nn_ratio(A, B, tol * 1.5) >= nn_ratio(A, B, tol)


def test_semantic_and_fused_examples():
    e = np.eye(3)
    assert semantic_sim(e[0], e[0]) == 1.0
    assert semantic_sim(e[0], e[1]) == 0.5
    assert semantic_sim(e[0], -e[0]) == 0.0
    assert semantic_sim(3 * e[0], e[0]) == 1.0
    with pytest.raises(ValidationError):
        semantic_sim(np.zeros(3), e[0])
    assert fused_sim(1, 0, 0.3) == pytest.approx(0.3)
    assert fused_sim(0.8, 0.8, 0.5) == pytest.approx(0.8)
    assert fused_sim(0, 1, 0.1) == pytest.approx(0.9)


def test_config_validation():
    with pytest.raises(ValidationError):
        FusionConfig(blend=0.6)
    with pytest.raises(ValidationError):
        FusionConfig(voxel=0.0)
    assert FusionConfig().nn == pytest.approx(0.02)


def _cloud(n=10, shift=0.0):
    return np.stack([np.arange(n) * 0.1 + shift, np.zeros(n), np.zeros(n)], 1)


def test_associate_empty_map():
    dets = [Detection(np.eye(2)[0], _cloud())]
    assert greedy_associate(dets, []) == [None]


def test_associate_merges_above_threshold():
    cos = 0.8
    f = np.array([cos, np.sqrt(1 - cos**2)])
    obj = MapObject(np.array([1.0, 0.0]), _cloud())
    det = Detection(f, _cloud())
    assert fused_sim(semantic_sim(f, obj.descriptor), 1.0, 0.3) == pytest.approx(0.97)
    assert greedy_associate([det], [obj], FusionConfig(blend=0.3, sim_threshold=0.96)) == [0]


def test_associate_new_object_below_threshold():
    obj = MapObject(np.array([1.0, 0.0]), _cloud())
    pts = _cloud()
    pts[7:, 1] = 1.0  # three of ten points far from the object, box still overlapping
    det = Detection(np.array([1.0, 0.0]), pts)
    cfg = FusionConfig(blend=0.5, sim_threshold=0.90)
    assert fused_sim(1.0, nn_ratio(pts, obj.points, cfg.nn), 0.5) == pytest.approx(0.85)
    assert greedy_associate([det], [obj], cfg) == [None]


def test_associate_gates_by_bounding_box():
    obj = MapObject(np.array([1.0, 0.0]), _cloud())
    det = Detection(np.array([1.0, 0.0]), _cloud(shift=5.0))
    assert greedy_associate([det], [obj], FusionConfig(sim_threshold=0.3)) == [None]


def test_fuse_examples():
    obj = MapObject(np.array([1.0, 0.0]), _cloud())
    same = fuse(obj, Detection(np.array([1.0, 0.0]), _cloud()), 0.01)
    assert same.descriptor.tolist() == [1.0, 0.0] and same.n == 2
    det = Detection(np.array([0.0, 1.0]), _cloud())
    assert running_mean(obj, det).tolist() == [0.5, 0.5]
    np.testing.assert_allclose(fuse(obj, det, 0.01).descriptor, [np.sqrt(0.5)] * 2)


def test_fuse_running_mean_closed_form():
    rng = np.random.default_rng(2)
    fs = rng.standard_normal((4, 5))
    obj = MapObject(fs[0], _cloud())
    for f in fs[1:]:
        mean = running_mean(obj, Detection(f, _cloud()))
        obj = MapObject(mean, obj.points, obj.n + 1)
    np.testing.assert_allclose(obj.descriptor, fs.mean(0), atol=1e-12)
    assert obj.n == 4


def test_fuse_dimension_mismatch():
    with pytest.raises(ValidationError):
        fuse(MapObject(np.ones(2), _cloud()), Detection(np.ones(3), _cloud()), 0.01)


def test_voxel_examples():
    v = 0.01
    out = voxel_downsample(np.array([[0.002, 0.002, 0.002], [0.003, 0.002, 0.002]]), v)
    np.testing.assert_allclose(out, [[0.0025, 0.002, 0.002]])
    pts = np.arange(10)[:, None] * np.array([[0.025, 0.0, 0.0]]) + 0.001
    assert len(voxel_downsample(pts, v)) == 10
    with pytest.raises(ValidationError):
        voxel_downsample(pts, 0.0)


def test_voxel_hash_oracle_and_idempotence():
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.2, 0.2, (1000, 3))
    out = voxel_downsample(pts, 0.05)
    groups = {}
    for p in pts:
        groups.setdefault(tuple(np.floor(p / 0.05).astype(int)), []).append(p)
    ref = sorted(tuple(np.mean(g, 0)) for g in groups.values())
    np.testing.assert_allclose(sorted(map(tuple, out)), ref, atol=1e-12)
    np.testing.assert_allclose(voxel_downsample(out, 0.05), out, atol=1e-12)


def test_iou_examples(caplog):
    a = np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [2.5, 0.5, 0.5], [3.5, 0.5, 0.5]])
    assert pointcloud_iou(a, a, 1.0) == 1.0
    assert pointcloud_iou(a, a + 10, 1.0) == 0.0
    assert pointcloud_iou(a, a[:2], 1.0) == 0.5
    assert pointcloud_iou(a[:3], a[1:], 1.0) == pointcloud_iou(a[1:], a[:3], 1.0)
    assert pointcloud_iou(np.zeros((0, 3)), np.zeros((0, 3)), 1.0) == 0.0
    assert "empty" in caplog.text


def test_union_find_order_independent():
    links = [(1, 2), (3, 4), (2, 3), (5, 6)]
    comps = []
    for perm in ([0, 1, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]):
        uf = UnionFind(range(8))
        for k in perm:
            uf.union(*links[k])
        comps.append(uf.components())
    assert comps[0] == comps[1] == comps[2] == [[0], [1, 2, 3, 4], [5, 6], [7]]


def _slab_frame(shift_cols, latent=(1.0, 0.0)):
    """One 10-pixel-wide mask at depth 2 with pixel pitch 0.1 m, camera moved by ``shift_cols`` pixels."""
    h, w = 4, 20
    masks = np.zeros((1, h, w), bool)
    masks[0, :, 5:15] = True
    feats = np.zeros((h, w, 2), np.float32)
    feats[masks[0]] = latent
    pose = CameraPose(np.eye(3), np.array([0.1 * shift_cols, 0.0, 0.0]))
    return Frame(feats, MaskSet(masks), np.full((h, w), 2.0, np.float32), pose,
                 Intrinsics(20.0, 20.0, 9.5, 1.5), (0,))


def test_iou_filter_rejects_low_overlap_link():
    cfg = FusionConfig(iou_voxel=0.1, iou_threshold=0.5)
    far = build_map_pairwise([_slab_frame(0), _slab_frame(4)], cfg)
    assert len(far.links) == 0 and len(far.rejected) == 1
    assert far.rejected[0][2] == pytest.approx(6 / 14)
    assert len(far.objects) == 2
    near = build_map_pairwise([_slab_frame(0), _slab_frame(2)], cfg)
    assert len(near.links) == 1 and len(near.objects) == 1 and near.objects[0].n == 2


def test_two_identical_frames():
    frames, _ = gen_sequence(BoxWorldConfig(yaws=(20.0, 20.0), translation_jitter=0.0), 0)
    imap = build_map_pairwise(frames)
    gt = gt_instances(frames, 0.01)
    assert len(imap.objects) == len(gt) == len(frames[0].object_ids)
    ap, ap50 = eval_instance_ap([o.points for o in imap.objects], list(gt.values()), 0.05)
    assert ap == ap50 == 1.0


@pytest.mark.parametrize("seed", range(4))
def test_six_frame_sequence_closure(seed):
    frames, _ = gen_sequence(BoxWorldConfig(), seed)
    seen = [set(f.object_ids) for f in frames]
    revisited = [k for k in seen[0] if any(k not in s for s in seen[1:-1]) and k in seen[-1]]
    assert revisited, "sequence must contain an object that leaves and re-enters view"
    imap = build_map_pairwise(frames)
    gt = gt_instances(frames, 0.01)
    assert len(imap.objects) == len(gt)
    _, ap50 = eval_instance_ap([o.points for o in imap.objects], list(gt.values()), 0.05)
    assert ap50 == 1.0


def test_pair_order_invariance():
    frames, _ = gen_sequence(BoxWorldConfig(), 1)
    pairs = [(i, j) for i in range(6) for j in range(i + 1, 6)]
    a = build_map_pairwise(frames)
    b = build_map_pairwise(frames, pairs=[(j, i) for i, j in reversed(pairs)])
    assert [o.members for o in a.objects] == [o.members for o in b.objects]


def test_ap_examples():
    cells = [np.array([[x + 0.5, 0.5, 0.5] for x in range(k, k + 21)]) for k in (0, 100, 200, 300)]
    assert eval_instance_ap(cells, cells, 1.0) == (1.0, 1.0)
    halves = [h for c in cells for h in (c[:10], c[10:20])]
    assert eval_instance_ap(halves, cells, 1.0)[1] == 0.0
    assert eval_instance_ap(cells[:2], cells, 1.0)[1] == 0.5
    with pytest.raises(ValidationError):
        eval_instance_ap(cells, [], 1.0)


def test_sequence_io_and_export(tmp_path):
    frames, _ = gen_sequence(BoxWorldConfig(yaws=(0.0, 10.0)), 0)
    path = save_sequence(tmp_path, frames)
    back = load_sequence(path)
    assert len(back) == 2 and back[1].object_ids == frames[1].object_ids
    assert np.array_equal(back[0].masks.masks, frames[0].masks.masks)
    imap = build_map_pairwise(back)
    (tmp_path / "map").mkdir()
    export = export_map(tmp_path / "map", imap)
    doc = json.loads(export.read_text())
    assert len(doc) == len(imap.objects) and {"descriptor", "n", "object_id"} <= set(doc[0])
