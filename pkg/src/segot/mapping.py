"""Object-level 3D mapping: back-projection, similarity, association, fusion and AP."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from segot.errors import ValidationError
from segot.evaluation import ScoredPrediction, auprc
from segot.features import aggregate_sum
from segot.matcher import DEFAULT_ALPHA, MatcherConfig, l2_normalize, match_segments
from segot.structures import MAX_SEGMENTS, CameraPose, Intrinsics, MaskSet
from segot.synth import Frame
from segot.tensor_io import load_tensor, save_tensor, write_json

log = logging.getLogger(__name__)

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


@dataclass(frozen=True)
class FusionConfig:
    blend: float = 0.3
    sim_threshold: float = 0.93
    voxel: float = 0.01
    nn_tolerance: float | None = None
    iou_threshold: float = 0.5
    iou_voxel: float = 0.05

    def __post_init__(self):
        if not 0.1 <= self.blend <= 0.5:
            raise ValidationError(f"blend must lie in [0.1, 0.5], got {self.blend}")
        if self.voxel <= 0 or self.iou_voxel <= 0 or self.nn <= 0:
            raise ValidationError("voxel sizes and nn tolerance must be positive")
        if not 0 < self.iou_threshold <= 1 or not 0 < self.sim_threshold <= 1:
            raise ValidationError("thresholds must lie in (0, 1]")

    @property
    def nn(self) -> float:
        return 2 * self.voxel if self.nn_tolerance is None else self.nn_tolerance


def backproject(mask, depth, intrinsics: Intrinsics, pose: CameraPose) -> np.ndarray:
    """World points of the masked pixels with positive finite depth (N x 3)."""
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=np.float64)
    if mask.shape != depth.shape:
        raise ValidationError(f"mask {mask.shape} and depth {depth.shape} differ in shape")
    sel = mask & np.isfinite(depth) & (depth > 0)
    v, u = np.nonzero(sel)
    d = depth[v, u]
    cam = np.stack([(u - intrinsics.cx) * d / intrinsics.fx, (v - intrinsics.cy) * d / intrinsics.fy, d], 1)
    return cam @ pose.rotation.T + pose.translation


def nn_ratio(candidate, reference, tolerance) -> float:
    """Fraction of candidate points with a reference point within ``tolerance``."""
    candidate = np.asarray(candidate, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(candidate) == 0:
        raise ValidationError("candidate cloud is empty")
    if len(reference) == 0:
        return 0.0
    dist, _ = cKDTree(reference).query(candidate, k=1)
    return float(np.mean(dist <= tolerance))


def semantic_sim(fa, fb) -> float:
    """Cosine similarity mapped from [-1, 1] to [0, 1]."""
    fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0 or nb == 0:
        raise ValidationError("zero descriptor")
    return 0.5 * float(fa @ fb) / (na * nb) + 0.5


def fused_sim(s_sem, s_geo, blend) -> float:
    return blend * s_sem + (1 - blend) * s_geo


def voxel_keys(points, size):
    return np.floor(np.asarray(points, dtype=np.float64) / size).astype(np.int64)


def voxel_downsample(points, size) -> np.ndarray:
    """Replace the points of each occupied grid cell by their centroid (cells in sorted order)."""
    if size <= 0:
        raise ValidationError("voxel size must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return points
    _, inverse, counts = np.unique(voxel_keys(points, size), axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def _occupancy(points, size):
    keys = voxel_keys(np.asarray(points).reshape(-1, 3), size)
    return set(map(tuple, keys.tolist()))


def pointcloud_iou(pa, pb, size) -> float:
    """IoU of the voxel occupancy sets of two clouds."""
    if size <= 0:
        raise ValidationError("voxel size must be positive")
    oa, ob = _occupancy(pa, size), _occupancy(pb, size)
    union = oa | ob
    if not union:
        log.warning("IoU of two empty clouds is 0")
        return 0.0
    return len(oa & ob) / len(union)


@dataclass
class MapObject:
    descriptor: np.ndarray
    points: np.ndarray
    n: int = 1
    members: list = field(default_factory=list)

    @property
    def bounds(self):
        return self.points.min(0), self.points.max(0)


@dataclass(frozen=True)
class Detection:
    descriptor: np.ndarray
    points: np.ndarray
    key: tuple = ()


def _unit(f):
    f = np.asarray(f, dtype=np.float64)
    n = np.linalg.norm(f)
    return f / n if n > 0 else f


def fuse(obj: MapObject, det: Detection, voxel) -> MapObject:
    """Running-average descriptor (renormalized), merged and downsampled cloud, n + 1."""
    if np.shape(obj.descriptor) != np.shape(det.descriptor):
        raise ValidationError("descriptor dimensions differ")
    mean = (obj.n * np.asarray(obj.descriptor) + np.asarray(det.descriptor)) / (obj.n + 1)
    points = voxel_downsample(np.concatenate([obj.points, det.points]), voxel)
    return MapObject(_unit(mean), points, obj.n + 1, obj.members + [det.key])


def running_mean(obj: MapObject, det: Detection) -> np.ndarray:
    """Descriptor update before renormalization."""
    return (obj.n * np.asarray(obj.descriptor) + np.asarray(det.descriptor)) / (obj.n + 1)


def _boxes_overlap(a, b):
    (alo, ahi), (blo, bhi) = a, b
    return bool(np.all(alo <= bhi) and np.all(blo <= ahi))


def greedy_associate(detections, objects, config: FusionConfig = FusionConfig()):
    """For each detection, the index of the map object to merge into, or None for a new object.

    Only objects whose bounding box intersects the detection's are scored.
    """
    decisions = []
    for det in detections:
        box = (det.points.min(0), det.points.max(0))
        best, best_sim = None, -np.inf
        for k, obj in enumerate(objects):
            if not _boxes_overlap(box, obj.bounds):
                continue
            s = fused_sim(semantic_sim(det.descriptor, obj.descriptor),
                          nn_ratio(det.points, obj.points, config.nn), config.blend)
            if s > best_sim:
                best, best_sim = k, s
        decisions.append(best if best is not None and best_sim >= config.sim_threshold else None)
    return decisions


# ---------------------------------------------------------------------------
# pairwise map building


class UnionFind:
    def __init__(self, keys):
        self.parent = {k: k for k in keys}

    def find(self, k):
        root = k
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[k] != root:
            self.parent[k], k = root, self.parent[k]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            lo, hi = min(ra, rb), max(ra, rb)
            self.parent[hi] = lo

    def components(self):
        groups = {}
        for k in sorted(self.parent):
            groups.setdefault(self.find(k), []).append(k)
        return [groups[r] for r in sorted(groups)]


@dataclass
class InstanceMap:
    objects: list
    links: list
    rejected: list


def frame_detections(frame, voxel):
    """Normalized sum-pooled descriptor and downsampled world cloud per valid mask slot."""
    desc = aggregate_sum(frame.features, frame.masks)
    unit, _ = l2_normalize(desc.G)
    dets = {}
    for slot in np.flatnonzero(desc.valid):
        pts = backproject(frame.masks.masks[slot], frame.depth, frame.intrinsics, frame.pose)
        dets[int(slot)] = (unit[slot], voxel_downsample(pts, voxel))
    return desc, dets


def build_map_pairwise(frames, config: FusionConfig = FusionConfig(),
                       matcher: MatcherConfig = MatcherConfig(), alpha=DEFAULT_ALPHA,
                       pairs=None) -> InstanceMap:
    """Match every frame pair, keep links passing the point-cloud IoU check, fuse components.

    Nodes are (frame, slot) keys. The result does not depend on the order of ``pairs``.
    """
    described = [frame_detections(f, config.voxel) for f in frames]
    keys = [(f, s) for f, (_, dets) in enumerate(described) for s in dets]
    pairs = sorted(itertools.combinations(range(len(frames)), 2) if pairs is None else
                   (tuple(sorted(p)) for p in pairs))
    links, rejected = [], []
    for fa, fb in pairs:
        (da, deta), (db, detb) = described[fa], described[fb]
        if not deta or not detb:
            continue
        _, result = match_segments(da, db, matcher, alpha)
        for i, j in enumerate(result.assignment):
            if j is None:
                continue
            iou = pointcloud_iou(deta[i][1], detb[j][1], config.iou_voxel)
            link = ((fa, i), (fb, j), iou)
            (links if iou >= config.iou_threshold else rejected).append(link)
    links.sort()
    uf = UnionFind(keys)
    for a, b, _ in links:
        uf.union(a, b)
    objects = []
    for comp in uf.components():
        f, s = comp[0]
        desc, pts = described[f][1][s]
        obj = MapObject(desc, pts, 1, [comp[0]])
        for f, s in comp[1:]:
            d, p = described[f][1][s]
            obj = fuse(obj, Detection(d, p, (f, s)), config.voxel)
        objects.append(obj)
    return InstanceMap(objects, links, rejected)


def gt_instances(frames, voxel):
    """Ground-truth clouds per global object id, from each frame's ``object_ids``."""
    clouds = {}
    for frame in frames:
        for slot, oid in enumerate(frame.object_ids):
            if not frame.masks.valid[slot]:
                continue
            pts = backproject(frame.masks.masks[slot], frame.depth, frame.intrinsics, frame.pose)
            clouds.setdefault(oid, []).append(pts)
    return {oid: voxel_downsample(np.concatenate(p), voxel) for oid, p in sorted(clouds.items())}


def eval_instance_ap(predicted, gt, voxel, scores=None):
    """Class-agnostic AP over IoU thresholds 0.50:0.05:0.95 and AP@50.

    ``predicted`` and ``gt`` are lists of point clouds; instance IoU is voxel
    occupancy IoU at ``voxel``. At each threshold, prediction/gt pairs are
    matched greedily by descending IoU with each side used once; predictions
    are then ranked by ``scores`` (default: point count).
    """
    predicted, gt = list(predicted), list(gt)
    if not gt:
        raise ValidationError("ground truth has no instances")
    if scores is None:
        scores = [len(p) for p in predicted]
    iou = np.array([[pointcloud_iou(p, g, voxel) for g in gt] for p in predicted]).reshape(len(predicted), len(gt))
    order = sorted(((iou[p, g], p, g) for p in range(len(predicted)) for g in range(len(gt))),
                   key=lambda x: (-x[0], x[1], x[2]))
    per_threshold = {}
    for thr in AP_THRESHOLDS:
        used_p, used_g = set(), set()
        for value, p, g in order:
            if value < thr:
                break
            if p in used_p or g in used_g:
                continue
            used_p.add(p)
            used_g.add(g)
        preds = [ScoredPrediction(p, -1, float(scores[p]), p in used_p) for p in range(len(predicted))]
        per_threshold[float(thr)] = auprc(preds, len(gt)) if preds else 0.0
    return float(np.mean(list(per_threshold.values()))), per_threshold[0.5]


# ---------------------------------------------------------------------------
# files


def save_sequence(directory, frames, name="seq") -> Path:
    """Write per-frame tensors and a JSON array manifest ``<name>.json``."""
    directory = Path(directory)
    entries = []
    for k, f in enumerate(frames):
        stem = f"{name}_{k:03d}"
        save_tensor(directory / f"{stem}_features.sgt", np.asarray(f.features, dtype=np.float32))
        save_tensor(directory / f"{stem}_masks.sgt", f.masks.masks.astype(np.uint8))
        save_tensor(directory / f"{stem}_depth.sgt", np.asarray(f.depth, dtype=np.float32))
        entries.append({
            "features": f"{stem}_features.sgt",
            "masks": f"{stem}_masks.sgt",
            "valid": [bool(v) for v in f.masks.valid],
            "depth": f"{stem}_depth.sgt",
            "pose": f.pose.to_json(),
            "intrinsics": f.intrinsics.to_json(),
            "object_ids": [int(i) for i in f.object_ids],
        })
    path = directory / f"{name}.json"
    write_json(path, entries)
    return path


def load_sequence(manifest_path):
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        try:
            entries = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{manifest_path}: malformed JSON: {exc}") from exc
    if not isinstance(entries, list) or len(entries) < 1:
        raise ValidationError(f"{manifest_path}: expected a non-empty JSON array of frames")
    base = manifest_path.parent
    frames = []
    for k, e in enumerate(entries):
        for key in ("features", "masks", "valid", "depth", "pose", "intrinsics"):
            if key not in e:
                raise ValidationError(f"{manifest_path}: frame {k} lacks {key!r}")
        paths = {key: base / e[key] for key in ("features", "masks", "depth")}
        for key, path in paths.items():
            if not path.exists():
                raise FileNotFoundError(f"frame {k} {key}: {path} does not exist")
        feats, masks, depth = (load_tensor(paths[key]) for key in ("features", "masks", "depth"))
        if feats.ndim != 3 or masks.ndim != 3 or depth.ndim != 2:
            raise ValidationError(f"frame {k}: expected HxWxD features, MxHxW masks, HxW depth")
        if feats.shape[:2] != masks.shape[1:] or depth.shape != feats.shape[:2]:
            raise ValidationError(f"frame {k}: features, masks and depth disagree in size")
        if masks.shape[0] > MAX_SEGMENTS or len(e["valid"]) != masks.shape[0]:
            raise ValidationError(f"frame {k}: bad mask slot count or validity flags")
        if not np.isin(masks, (0, 1)).all():
            raise ValidationError(f"frame {k}: masks contain values other than 0/1")
        ids = tuple(e.get("object_ids", ()))
        if ids and len(ids) != masks.shape[0]:
            raise ValidationError(f"frame {k}: object_ids length differs from mask count")
        frames.append(Frame(feats, MaskSet(masks.astype(bool), np.array(e["valid"], dtype=bool)), depth,
                            CameraPose.from_json(e["pose"]), Intrinsics.from_json(e["intrinsics"]), ids))
    return frames


def export_map(directory, instance_map: InstanceMap) -> Path:
    """One SGT1 point tensor per object plus ``map.json`` listing descriptor, n and object id."""
    directory = Path(directory)
    doc = []
    for k, obj in enumerate(instance_map.objects):
        rel = f"object_{k:04d}.sgt"
        pts = np.asarray(obj.points, dtype=np.float32).reshape(-1, 3)
        if len(pts):
            save_tensor(directory / rel, pts)
        doc.append({"object_id": k, "n": obj.n, "descriptor": [float(x) for x in obj.descriptor],
                    "points": rel if len(pts) else None, "members": [list(m) for m in obj.members]})
    path = directory / "map.json"
    write_json(path, doc)
    return path
