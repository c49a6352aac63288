"""SpecAugment-style masking of feature matrices at training time."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SpecAugmentConfig:
    enabled: bool = True
    num_time_masks: int = 2
    max_time_mask_width: int = 15
    num_freq_masks: int = 2
    max_freq_mask_width: int = 8
    mask_value: float = 0.0

    def validate(self):
        for v in (self.num_time_masks, self.max_time_mask_width,
                  self.num_freq_masks, self.max_freq_mask_width):
            if v < 0:
                raise ValueError("SpecAugment counts and widths must be >= 0")


def _mask_spans(gen, count, max_width, dim):
    spans = []
    width_cap = min(max_width, dim)
    for _ in range(count):
        width = int(gen.integers(0, width_cap + 1))
        start = int(gen.integers(0, dim - width + 1))
        spans.append((start, width))
    return spans


def spec_augment(features: np.ndarray, cfg: SpecAugmentConfig, gen) -> np.ndarray:
    """Mask random time and frequency bands of a [T, F] matrix.

    Each mask covers a contiguous span of width drawn uniformly from
    [0, max_width] (clamped to the axis size), set to ``mask_value``.
    Returns a copy; the input is untouched. Disabled config is the exact
    identity. Time masks are drawn before frequency masks.
    """
    if not cfg.enabled:
        return features
    cfg.validate()
    t, f = features.shape
    out = features.copy()
    for start, width in _mask_spans(gen, cfg.num_time_masks, cfg.max_time_mask_width, t):
        out[start:start + width, :] = cfg.mask_value
    for start, width in _mask_spans(gen, cfg.num_freq_masks, cfg.max_freq_mask_width, f):
        out[:, start:start + width] = cfg.mask_value
    return out
