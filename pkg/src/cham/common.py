"""Run context and frame-mask helpers shared by model components."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class RunContext:
    """Carries training mode and the dropout stream through a forward pass.

    The generator is consumed sequentially; the op order of a forward
    pass is fixed, so a given (seed, epoch, batch) context reproduces
    the same masks every run.
    """

    train: bool = False
    rng: np.random.Generator | None = None

    def dropout(self, x, p):
        if not self.train or p <= 0.0:
            return x
        if self.rng is None:
            raise ValueError("training context needs an rng for dropout")
        return T.dropout(x, p, self.rng)


EVAL = RunContext(train=False)


def zero_padded(x, mask):
    """Zero out padded time steps of [B, T, ...] given a [B, T] mask.

    Time-mixing ops (convolutions, pooling) read neighbouring frames, so
    padded positions must hold zeros before each one; this is what makes
    a padded batch compute exactly what the unpadded utterances would.
    """
    m = mask.astype(np.float64)
    m = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    return T.mul(x, T.constant(m))


def mask_fill(x, mask, value):
    """Replace padded time steps with ``value`` (for max pooling)."""
    m = mask.astype(np.float64)
    m = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    filler = (1.0 - m) * value
    return T.add(T.mul(x, T.constant(m)), T.constant(filler))


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """A downsampled frame is valid iff its stride window held a valid frame."""
    if factor == 1:
        return mask.copy()
    b, t = mask.shape
    t_out = -(-t // factor)
    padded = np.zeros((b, t_out * factor), dtype=bool)
    padded[:, :t] = mask
    return padded.reshape(b, t_out, factor).any(axis=2)
