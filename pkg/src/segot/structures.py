"""Plain data containers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from segot.errors import ValidationError

MAX_SEGMENTS = 100


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(R)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_json(cls, obj) -> CameraPose:
        return cls(np.array(obj["rotation"], dtype=np.float64), np.array(obj["translation"], dtype=np.float64))

    def to_json(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}


def check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValidationError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol:
        raise ValidationError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValidationError("rotation determinant is not +1")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def from_json(cls, obj) -> Intrinsics:
        return cls(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]))

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class GtAssignment:
    """Ground-truth matches plus the segments without a counterpart in either image."""

    matches: tuple[tuple[int, int], ...] = ()
    unmatched_a: tuple[int, ...] = ()
    unmatched_b: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "matches", tuple((int(i), int(j)) for i, j in self.matches))
        object.__setattr__(self, "unmatched_a", tuple(int(i) for i in self.unmatched_a))
        object.__setattr__(self, "unmatched_b", tuple(int(j) for j in self.unmatched_b))
        src = [i for i, _ in self.matches] + list(self.unmatched_a)
        dst = [j for _, j in self.matches] + list(self.unmatched_b)
        if len(set(src)) != len(src):
            raise ValidationError("a source index appears more than once in the ground truth")
        if len(set(dst)) != len(dst):
            raise ValidationError("a target index appears more than once in the ground truth")
        if any(i < 0 for i in src) or any(j < 0 for j in dst):
            raise ValidationError("ground-truth indices must be non-negative")

    def check_bounds(self, m1: int, m2: int):
        for i, j in self.matches:
            if i >= m1 or j >= m2:
                raise ValidationError(f"ground-truth match ({i}, {j}) out of range for {m1}x{m2} segments")
        for i in self.unmatched_a:
            if i >= m1:
                raise ValidationError(f"unmatched source {i} out of range ({m1} segments)")
        for j in self.unmatched_b:
            if j >= m2:
                raise ValidationError(f"unmatched target {j} out of range ({m2} segments)")

    @property
    def is_empty(self) -> bool:
        return not (self.matches or self.unmatched_a or self.unmatched_b)

    @classmethod
    def from_json(cls, obj) -> GtAssignment:
        return cls(
            tuple(tuple(m) for m in obj.get("matches", [])),
            tuple(obj.get("unmatched_a", [])),
            tuple(obj.get("unmatched_b", [])),
        )

    def to_json(self) -> dict:
        return {
            "matches": [list(m) for m in self.matches],
            "unmatched_a": list(self.unmatched_a),
            "unmatched_b": list(self.unmatched_b),
        }


@dataclass(frozen=True)
class MaskSet:
    """M binary masks at pixel resolution; ``valid`` separates padding slots from real segments."""

    masks: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3:
            raise ValidationError(f"masks must be M x H x W, got shape {masks.shape}")
        if masks.dtype != bool and not np.isin(masks, (0, 1)).all():
            raise ValidationError("mask values must be 0 or 1")
        masks = np.array(masks, dtype=bool)
        valid = masks.any(axis=(1, 2)) if self.valid is None else np.array(self.valid, dtype=bool)
        if valid.shape != (len(masks),):
            raise ValidationError(f"validity flags have length {valid.size}, expected {len(masks)}")
        masks.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "valid", valid)

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]
