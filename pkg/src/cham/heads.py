"""Upsampling output heads and frame-classification losses.

Each head restores the original frame count with a transposed
convolution whose filter width equals the stride equals the time
reduction factor, trims any overshoot on the right, and projects onto
the label set. Intermediate heads (tapped from inner blocks) insert a
single hidden projection before the label layer; the final head does
not. Head parameters can be shared: one transposed-convolution kernel
for all heads, and one hidden projection for the intermediate heads.

Losses average the negative log-probability of the aligned label over
valid frames; the focal variant scales each frame by (1 - p)^gamma so
confidently correct frames contribute less.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .common import RunContext
from .tensor import ConfigError, TensorError


@dataclass
class HeadConfig:
    intermediate_positions: tuple = (4, 8)
    mlp_dim: int = 512
    share_transposed_conv: bool = True
    share_mlp: bool = False
    focal_gamma: float = 2.0
    intermediate_loss_scale: float = 0.3

    def validate(self, num_blocks=None):
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if self.intermediate_loss_scale < 0:
            raise ConfigError("intermediate_loss_scale must be >= 0")
        if any(p < 1 for p in self.intermediate_positions):
            raise ConfigError("intermediate positions are 1-indexed block numbers")
        if len(set(self.intermediate_positions)) != len(self.intermediate_positions):
            raise ConfigError("duplicate intermediate positions")
        if num_blocks is not None:
            bad = [p for p in self.intermediate_positions if p >= num_blocks]
            if bad:
                raise ConfigError(
                    f"intermediate positions {bad} must be < num_blocks ({num_blocks})"
                )


class UpsamplingHead:
    def __init__(self, store, name, cfg: HeadConfig, model_dim, num_labels,
                 factor, intermediate):
        self.factor = factor
        self.intermediate = intermediate
        d = model_dim
        tconv_name = "heads/shared" if cfg.share_transposed_conv else f"heads/{name}"
        # weight decay applies to transposed-conv kernels and nothing else
        self.tconv_k = store.param(f"{tconv_name}/tconv_kernel", (factor, d, d),
                                   ("glorot", d, d), decay=True)
        self.tconv_b = store.param(f"{tconv_name}/tconv_bias", (d,), ("zeros",))
        label_in = d
        if intermediate:
            mlp_name = "heads/shared" if cfg.share_mlp else f"heads/{name}"
            self.mlp_w = store.param(f"{mlp_name}/mlp_w", (d, cfg.mlp_dim),
                                     ("glorot", d, cfg.mlp_dim))
            self.mlp_b = store.param(f"{mlp_name}/mlp_b", (cfg.mlp_dim,), ("zeros",))
            label_in = cfg.mlp_dim
        self.label_w = store.param(f"heads/{name}/label_w", (label_in, num_labels),
                                   ("glorot", label_in, num_labels))
        self.label_b = store.param(f"heads/{name}/label_b", (num_labels,), ("zeros",))

    def forward(self, block_out, num_frames, ctx: RunContext):
        """[B, T', D] -> label logits [B, num_frames, num_labels]."""
        up = T.add(T.transposed_conv1d(block_out, self.tconv_k, stride=self.factor),
                   self.tconv_b)
        t_up = up.shape[1]
        if t_up < num_frames:
            raise TensorError(
                f"upsampled length {t_up} cannot be cropped up to {num_frames}"
            )
        if t_up > num_frames:
            up = T.narrow(up, 1, 0, num_frames)
        if self.intermediate:
            up = T.swish(T.linear(up, self.mlp_w, self.mlp_b))
        return T.linear(up, self.label_w, self.label_b)


def build_heads(store, cfg: HeadConfig, model_dim, num_labels, factor):
    heads = {"final": UpsamplingHead(store, "final", cfg, model_dim, num_labels,
                                     factor, intermediate=False)}
    for pos in cfg.intermediate_positions:
        heads[f"inter{pos}"] = UpsamplingHead(store, f"inter{pos}", cfg, model_dim,
                                              num_labels, factor, intermediate=True)
    return heads


def _masked_mean_nll(weighted_logp, mask):
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum()
    if n <= 0:
        raise TensorError("loss over a batch with no valid frames")
    return T.scale(T.sum_(T.mul(weighted_logp, T.constant(m))), -1.0 / n)


def cross_entropy(logits, alignment, mask):
    """Mean negative log-probability of the aligned label over valid frames."""
    logp = T.gather_last(T.log_softmax(logits), alignment)
    return _masked_mean_nll(logp, mask)


def focal_loss(logits, alignment, mask, gamma):
    """Cross-entropy with each frame scaled by (1 - p_target)^gamma.

    gamma == 0 is routed through plain cross-entropy so the two are
    identical, gradients included.
    """
    if gamma < 0:
        raise ConfigError("focal gamma must be >= 0")
    if gamma == 0:
        return cross_entropy(logits, alignment, mask)
    logp = T.gather_last(T.log_softmax(logits), alignment)
    weight = T.pow_const(T.sub(1.0, T.exp(logp)), gamma)
    return _masked_mean_nll(T.mul(weight, logp), mask)


def total_loss(final, intermediates, scale):
    """final + scale * sum(intermediate losses)."""
    out = final
    for loss in intermediates.values():
        out = T.add(out, T.scale(loss, scale))
    return out


def frame_errors(logits, alignment, mask):
    """(wrong, total) over valid frames by greedy label choice."""
    pred = logits.data.argmax(axis=-1)
    wrong = int(((pred != alignment) & mask).sum())
    return wrong, int(mask.sum())
