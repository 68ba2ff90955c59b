"""Segment-weighted proportional yaw control."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segot.errors import ValidationError

DEFAULT_TEMPERATURE = 5.0
DEFAULT_GAIN = 0.4


@dataclass(frozen=True)
class NavSegment:
    x: float
    p: float


@dataclass(frozen=True)
class NavConfig:
    width: float
    tau: float = DEFAULT_TEMPERATURE
    gain: float = DEFAULT_GAIN

    def __post_init__(self):
        if not self.tau > 0 or not self.gain > 0:
            raise ValidationError("temperature and gain must be positive")
        if not self.width >= 2:
            raise ValidationError(f"image width must be >= 2, got {self.width}")

    @property
    def center(self) -> float:
        return self.width / 2.0


def softmax_weights(path_lengths, tau=DEFAULT_TEMPERATURE) -> np.ndarray:
    """Softmax of -tau * p_hat, with p_hat the per-frame min-max normalized path lengths.

    Equal path lengths give uniform weights.
    """
    p = np.asarray(path_lengths, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValidationError("need at least one segment")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValidationError("path lengths must be finite and non-negative")
    span = p.max() - p.min()
    p_hat = (p - p.min()) / span if span > 0 else np.zeros_like(p)
    logits = -tau * p_hat
    e = np.exp(logits - logits.max())
    return e / e.sum()


def yaw(segments, config: NavConfig) -> float:
    """K / W * sum_i w_i (x_i - W/2)."""
    segments = [s if isinstance(s, NavSegment) else NavSegment(*s) for s in segments]
    if not segments:
        raise ValidationError("need at least one segment")
    x = np.array([s.x for s in segments], dtype=np.float64)
    if np.any(x < 0) or np.any(x >= config.width):
        raise ValidationError("segment centers must lie in [0, width)")
    w = softmax_weights([s.p for s in segments], config.tau)
    return float(config.gain / config.width * np.sum(w * (x - config.center)))
