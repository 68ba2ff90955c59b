"""Segment-feature head (patch grid -> pixel features) and mask aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from segot.errors import ValidationError
from segot.structures import MaskSet

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class HeadParams:
    """Two-layer per-patch perceptron followed by a pixel shuffle of factor ``patch_size``.

    w1: (dim_in, hidden), b1: (hidden,), w2: (hidden, s*s*dim_out), b2: (s*s*dim_out,).
    The output vector of a patch is laid out as (dy, dx, channel), row-major.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    patch_size: int
    dim_out: int

    NAMES = ("w1", "b1", "w2", "b2")

    def __post_init__(self):
        s, d = self.patch_size, self.dim_out
        if s < 1 or d < 1:
            raise ValidationError("patch_size and dim_out must be >= 1")
        dim_in, hidden = np.shape(self.w1)
        expect = {"b1": (hidden,), "w2": (hidden, s * s * d), "b2": (s * s * d,)}
        for name, shape in expect.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValidationError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        for name in self.NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} contains non-finite values")

    @property
    def dim_in(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.NAMES}

    def replace(self, **arrays) -> HeadParams:
        merged = self.arrays() | arrays
        return HeadParams(**merged, patch_size=self.patch_size, dim_out=self.dim_out)

    @classmethod
    def init(cls, dim_in, dim_out=24, patch_size=16, hidden=None, seed=0) -> HeadParams:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
        hidden = 4 * dim_out if hidden is None else hidden
        rng = np.random.default_rng(seed)
        width = patch_size * patch_size * dim_out
        k1, k2 = 1.0 / math.sqrt(dim_in), 1.0 / math.sqrt(hidden)
        return cls(
            w1=rng.uniform(-k1, k1, (dim_in, hidden)),
            b1=rng.uniform(-k1, k1, hidden),
            w2=rng.uniform(-k2, k2, (hidden, width)),
            b2=rng.uniform(-k2, k2, width),
            patch_size=patch_size,
            dim_out=dim_out,
        )

    @classmethod
    def zeros(cls, dim_in, dim_out, patch_size, hidden) -> HeadParams:
        width = patch_size * patch_size * dim_out
        return cls(np.zeros((dim_in, hidden)), np.zeros(hidden), np.zeros((hidden, width)), np.zeros(width),
                   patch_size, dim_out)


def _check_patches(patches, params):
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3:
        raise ValidationError(f"patch grid must be Hp x Wp x C, got shape {patches.shape}")
    if patches.shape[2] != params.dim_in:
        raise ValidationError(f"patch grid has {patches.shape[2]} channels, head expects {params.dim_in}")
    return patches


def pixel_shuffle(out, s, d):
    """(Hp, Wp, s*s*d) -> (Hp*s, Wp*s, d)."""
    hp, wp = out.shape[:2]
    return out.reshape(hp, wp, s, s, d).transpose(0, 2, 1, 3, 4).reshape(hp * s, wp * s, d)


def pixel_unshuffle(fmap, s):
    """Inverse of :func:`pixel_shuffle`."""
    h, w, d = fmap.shape
    return fmap.reshape(h // s, s, w // s, s, d).transpose(0, 2, 1, 3, 4).reshape(h // s, w // s, s * s * d)


def head_forward(patches, params: HeadParams, return_cache=False):
    """Map a (Hp, Wp, dim_in) patch grid to a (Hp*s, Wp*s, dim_out) feature map."""
    patches = _check_patches(patches, params)
    pre = patches @ params.w1 + params.b1
    hid = gelu(pre)
    out = hid @ params.w2 + params.b2
    fmap = pixel_shuffle(out, params.patch_size, params.dim_out)
    if return_cache:
        return fmap, (patches, pre, hid)
    return fmap


def head_backward(grad_fmap, params: HeadParams, cache) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/d(feature map) and the cache from ``head_forward``."""
    patches, pre, hid = cache
    g_out = pixel_unshuffle(np.asarray(grad_fmap, dtype=np.float64), params.patch_size)
    flat_hid = hid.reshape(-1, hid.shape[-1])
    flat_g = g_out.reshape(-1, g_out.shape[-1])
    g_hid = flat_g @ params.w2.T
    g_pre = g_hid * gelu_grad(pre.reshape(-1, pre.shape[-1]))
    flat_in = patches.reshape(-1, patches.shape[-1])
    return {
        "w1": flat_in.T @ g_pre,
        "b1": g_pre.sum(0),
        "w2": flat_hid.T @ flat_g,
        "b2": flat_g.sum(0),
    }


@dataclass(frozen=True)
class SegmentDescriptors:
    """M x D descriptors; rows flagged invalid are exactly zero."""

    G: np.ndarray
    valid: np.ndarray

    @property
    def count(self) -> int:
        return self.G.shape[0]

    @property
    def dim(self) -> int:
        return self.G.shape[1]

    def compact(self):
        """Valid rows and their slot indices."""
        idx = np.flatnonzero(self.valid)
        return self.G[idx], idx


def _flatten(features, masks):
    if not isinstance(masks, MaskSet):
        masks = MaskSet(masks)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ValidationError(f"feature map must be H x W x D, got shape {features.shape}")
    if features.shape[:2] != masks.hw:
        raise ValidationError(f"feature map is {features.shape[:2]} but masks are {masks.hw}")
    m_flat = masks.masks.reshape(masks.count, features.shape[0] * features.shape[1]).astype(np.float64)
    return features.reshape(-1, features.shape[2]), m_flat, masks


def aggregate_sum(features, masks) -> SegmentDescriptors:
    """Sum-pool pixel features inside each mask (G = M_flat @ P_flat)."""
    p_flat, m_flat, masks = _flatten(features, masks)
    valid = masks.valid & (m_flat.sum(1) > 0)
    G = (m_flat * valid[:, None]) @ p_flat
    return SegmentDescriptors(G, valid)


def aggregate_mean(features, masks) -> SegmentDescriptors:
    """Masked average pooling; empty or padded slots yield zero rows."""
    p_flat, m_flat, masks = _flatten(features, masks)
    counts = m_flat.sum(1)
    valid = masks.valid & (counts > 0)
    G = (m_flat * valid[:, None]) @ p_flat
    G[valid] /= counts[valid, None]
    return SegmentDescriptors(G, valid)
