"""Seeded synthetic pairs and box-world sequences with exact ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from segot.errors import ValidationError
from segot.structures import MAX_SEGMENTS, CameraPose, GtAssignment, Intrinsics, MaskSet
from segot.tensor_io import Pair

LAYOUTS = ("rectangles", "voronoi")


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the synthetic pair generator.

    ``signal_dim`` is the rank of the subspace that carries segment identity;
    ``nuisance`` is the scale of a per-view, per-segment offset in its
    orthogonal complement (a stand-in for view-dependent appearance). The
    subspace itself is fixed by ``seed`` and shared by every pair.
    """

    height: int = 32
    width: int = 32
    min_segments: int = 6
    max_segments: int = 12
    layout: str = "voronoi"
    latent_dim: int = 32
    signal_dim: int | None = None
    noise: float = 0.5
    nuisance: float = 0.0
    drop: float = 0.2
    min_angle: float = 0.0
    max_angle: float = 180.0
    patch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValidationError("image size must be at least 8x8")
        if not 1 <= self.min_segments <= self.max_segments <= MAX_SEGMENTS:
            raise ValidationError(f"segment count range must lie within 1..{MAX_SEGMENTS}")
        if self.layout not in LAYOUTS:
            raise ValidationError(f"layout must be one of {LAYOUTS}")
        if self.noise < 0 or self.nuisance < 0:
            raise ValidationError("noise scales must be non-negative")
        if not 0 <= self.drop < 1:
            raise ValidationError("drop fraction must lie in [0, 1)")
        if not 0 <= self.min_angle <= self.max_angle <= 180:
            raise ValidationError("angle range must lie within [0, 180]")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValidationError("image size must be a multiple of the patch size")
        sd = self.latent_dim if self.signal_dim is None else self.signal_dim
        if not 1 <= sd <= self.latent_dim:
            raise ValidationError("signal_dim must lie in 1..latent_dim")
        if self.nuisance > 0 and sd == self.latent_dim:
            raise ValidationError("nuisance needs signal_dim < latent_dim")

    @property
    def signal_rank(self) -> int:
        return self.latent_dim if self.signal_dim is None else self.signal_dim

    def bases(self):
        """Orthonormal bases (latent_dim x r) of the signal subspace and its complement."""
        rng = np.random.default_rng([self.seed, 0xBA5E])
        Q, _ = np.linalg.qr(rng.normal(size=(self.latent_dim, self.latent_dim)))
        return Q[:, : self.signal_rank], Q[:, self.signal_rank :]


@dataclass(frozen=True)
class SynthPair:
    pair: Pair
    latents: np.ndarray
    ids_a: np.ndarray
    ids_b: np.ndarray


def _unit_rows(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def voronoi_layout(rng, h, w, n):
    if n > h * w:
        raise ValidationError(f"cannot place {n} segments in a {h}x{w} image")
    seeds = rng.choice(h * w, size=n, replace=False)
    sy, sx = np.divmod(seeds, w)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[..., None] - sy) ** 2 + (xx[..., None] - sx) ** 2
    return d2.argmin(-1)


def rectangle_layout(rng, h, w, n):
    """Grid of jittered, disjoint rectangles; uncovered pixels are -1."""
    cols = math.ceil(math.sqrt(n * w / h))
    rows = math.ceil(n / cols)
    ch, cw = h // rows, w // cols
    if ch < 2 or cw < 2:
        raise ValidationError(f"cannot place {n} rectangles in a {h}x{w} image")
    labels = np.full((h, w), -1)
    cells = rng.permutation(rows * cols)[:n]
    for k, cell in enumerate(cells):
        r, c = divmod(int(cell), cols)
        y0 = r * ch + rng.integers(0, max(ch // 4, 1))
        x0 = c * cw + rng.integers(0, max(cw // 4, 1))
        y1 = (r + 1) * ch - rng.integers(0, max(ch // 4, 1))
        x1 = (c + 1) * cw - rng.integers(0, max(cw // 4, 1))
        labels[y0:max(y1, y0 + 1), x0:max(x1, x0 + 1)] = k
    return labels


def _layout(rng, config, n):
    fn = voronoi_layout if config.layout == "voronoi" else rectangle_layout
    return fn(rng, config.height, config.width, n)


def _patch_owner(labels, s):
    """Most frequent label in each s x s patch (lowest label on ties, -1 counts as a label)."""
    h, w = labels.shape
    blocks = labels.reshape(h // s, s, w // s, s).transpose(0, 2, 1, 3).reshape(h // s, w // s, s * s)
    candidates = np.arange(-1, labels.max() + 1)
    counts = (blocks[..., None] == candidates).sum(2)
    return candidates[counts.argmax(-1)]


def _render(rng, labels, appearance, noise):
    """appearance[k] at pixels owned by k, plus i.i.d. gaussian noise; -1 pixels get noise only."""
    dim = appearance.shape[1]
    out = np.zeros(labels.shape + (dim,))
    owned = labels >= 0
    out[owned] = appearance[labels[owned]]
    if noise > 0:
        out += noise * rng.normal(size=out.shape)
    return out


def random_rotation_pair(rng, min_angle, max_angle):
    """Two rotations whose geodesic distance is uniform in [min_angle, max_angle] degrees."""
    ra = Rotation.random(random_state=rng)
    axis = _unit_rows(rng, 1, 3)[0]
    theta = math.radians(rng.uniform(min_angle, max_angle))
    rb = ra * Rotation.from_rotvec(axis * theta)
    return ra.as_matrix(), rb.as_matrix()


def gen_pair(config: SceneConfig = SceneConfig(), seed: int = 0) -> SynthPair:
    rng = np.random.default_rng([config.seed, seed])
    m = int(rng.integers(config.min_segments, config.max_segments + 1))
    n_drop = int(round(config.drop * m))
    if m > config.height * config.width // 4:
        raise ValidationError(f"{m} segments do not fit a {config.height}x{config.width} image")

    # global ids: 0..m-1 appear in view a, the last n_drop of a are missing from b,
    # m..m+n_drop-1 appear only in b
    total = m + n_drop
    signal, complement = config.bases()
    latents = _unit_rows(rng, total, config.signal_rank) @ signal.T

    ids_a = rng.permutation(m)
    shown_b = np.concatenate([np.arange(m - n_drop), np.arange(m, total)])
    ids_b = rng.permutation(shown_b)

    s = config.patch_size
    views = {}
    for side, ids in (("a", ids_a), ("b", ids_b)):
        appearance = latents[ids]
        if config.nuisance > 0:
            offsets = _unit_rows(rng, len(ids), complement.shape[1]) @ complement.T
            appearance = appearance + config.nuisance * offsets
        labels = _layout(rng, config, len(ids))
        feats = _render(rng, labels, appearance, config.noise)
        patches = _render(rng, _patch_owner(labels, s), appearance, config.noise)
        masks = labels[None] == np.arange(len(ids))[:, None, None]
        views[side] = (feats.astype(np.float32), patches.astype(np.float32), MaskSet(masks))

    pos_b = {int(g): j for j, g in enumerate(ids_b)}
    matches, unmatched_a = [], []
    for i, g in enumerate(ids_a):
        if int(g) in pos_b:
            matches.append((i, pos_b[int(g)]))
        else:
            unmatched_a.append(i)
    unmatched_b = [j for j, g in enumerate(ids_b) if g >= m]
    gt = GtAssignment(tuple(matches), tuple(unmatched_a), tuple(unmatched_b))

    Ra, Rb = random_rotation_pair(rng, config.min_angle, config.max_angle)
    pair = Pair(
        features_a=views["a"][0],
        features_b=views["b"][0],
        masks_a=views["a"][2],
        masks_b=views["b"][2],
        patches_a=views["a"][1],
        patches_b=views["b"][1],
        gt=gt,
        pose_a=CameraPose(Ra, np.zeros(3)),
        pose_b=CameraPose(Rb, np.zeros(3)),
        name=f"pair_{seed:05d}",
    )
    return SynthPair(pair, latents, ids_a, ids_b)


# ---------------------------------------------------------------------------
# box world


@dataclass(frozen=True)
class BoxWorldConfig:
    """Axis-aligned boxes around a camera that pans away from them and back.

    Camera frame: x right, y down, z forward. Cameras sit near the world origin
    and yaw about the world y axis through ``yaws`` (degrees), so objects leave
    the field of view and re-enter it later in the sequence.
    """

    height: int = 192
    width: int = 192
    focal: float = 120.0
    n_objects: int = 8
    yaws: tuple = (0.0, 25.0, 50.0, 75.0, 40.0, 5.0)
    min_distance: float = 2.0
    max_distance: float = 3.5
    min_half_size: float = 0.2
    max_half_size: float = 0.35
    descriptor_dim: int = 24
    noise: float = 0.05
    min_pixels: int = 12
    translation_jitter: float = 0.05
    full_view_only: bool = True
    seed: int = 0

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0)


@dataclass(frozen=True)
class Frame:
    features: np.ndarray
    masks: MaskSet
    depth: np.ndarray
    pose: CameraPose
    intrinsics: Intrinsics
    object_ids: tuple = field(default=())


def yaw_rotation(deg):
    return Rotation.from_euler("y", deg, degrees=True).as_matrix()


def _ray_box(origin, dirs, lo, hi):
    """Entry parameter of rays origin + s*dirs into box [lo, hi]; inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def place_boxes(config: BoxWorldConfig, rng):
    """Box centers on a ring spanning the panned field of view, with no overlaps."""
    half_fov = math.degrees(math.atan(config.width / 2.0 / config.focal))
    lo_az = min(config.yaws) - half_fov * 0.8
    hi_az = max(config.yaws) + half_fov * 0.8
    azimuths = np.linspace(lo_az, hi_az, config.n_objects) + rng.uniform(-3, 3, config.n_objects)
    boxes = []
    for az in azimuths:
        d = rng.uniform(config.min_distance, config.max_distance)
        half = rng.uniform(config.min_half_size, config.max_half_size, 3)
        a = math.radians(az)
        center = np.array([d * math.sin(a), rng.uniform(-0.3, 0.3), d * math.cos(a)])
        boxes.append((center - half, center + half))
    return boxes


def render_frame(boxes, R, t, config: BoxWorldConfig):
    """Per-pixel owning box (-1 for none) and z-depth for a world-from-camera pose."""
    intr = config.intrinsics
    v, u = np.mgrid[0 : config.height, 0 : config.width].astype(np.float64)
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1)
    d_world = d_cam @ R.T
    best = np.full(u.shape, np.inf)
    owner = np.full(u.shape, -1)
    for k, (lo, hi) in enumerate(boxes):
        s = _ray_box(t, d_world, lo, hi)
        closer = s < best
        best[closer] = s[closer]
        owner[closer] = k
    depth = np.where(np.isfinite(best), best, 0.0)
    return owner, depth


def gen_sequence(config: BoxWorldConfig = BoxWorldConfig(), seed: int = 0):
    """Frames of a box world plus the per-object descriptor latents.

    Each frame's masks hold the objects covering at least ``min_pixels`` pixels
    (and, with ``full_view_only``, not cut by the image border);
    ``Frame.object_ids`` gives the global object id of each mask slot.
    """
    if len(config.yaws) < 2:
        raise ValidationError("a sequence needs at least two frames")
    rng = np.random.default_rng([config.seed, seed])
    boxes = place_boxes(config, rng)
    latents = _unit_rows(rng, config.n_objects, config.descriptor_dim)
    frames = []
    for yaw in config.yaws:
        R = yaw_rotation(yaw)
        t = rng.uniform(-1, 1, 3) * config.translation_jitter
        owner, depth = render_frame(boxes, R, t, config)
        ids = [k for k in range(config.n_objects) if (owner == k).sum() >= config.min_pixels]
        if config.full_view_only:
            border = np.concatenate([owner[0], owner[-1], owner[:, 0], owner[:, -1]])
            ids = [k for k in ids if k not in border]
        masks = np.stack([owner == k for k in ids]) if ids else np.zeros((0,) + owner.shape, bool)
        slot = np.full(owner.shape, -1)
        for n, k in enumerate(ids):
            slot[owner == k] = n
        appearance = latents[ids] if ids else np.zeros((0, config.descriptor_dim))
        feats = _render(rng, slot, appearance, config.noise)
        frames.append(
            Frame(
                features=feats.astype(np.float32),
                masks=MaskSet(masks, np.ones(len(ids), bool)),
                depth=depth.astype(np.float32),
                pose=CameraPose(R, t),
                intrinsics=config.intrinsics,
                object_ids=tuple(ids),
            )
        )
    return frames, latents
