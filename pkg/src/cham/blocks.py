"""Conformer block stack: macaron feed-forwards, relative-position
self-attention, depthwise convolution module, and an optional skip path
feeding the front-end output into every block.

Per block: x + 0.5*FFN(x) -> + MHSA -> + Conv -> + 0.5*FFN -> LayerNorm.
Attention scores depend on content and the clamped query-key distance
only. Padded frames are excluded from attention and zeroed before any
op that mixes time, so batch padding never influences valid frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .common import RunContext, zero_padded
from .tensor import ConfigError


@dataclass
class BlockConfig:
    model_dim: int = 512
    heads: int = 8
    ffn_dim: int = 2048
    depthwise_kernel: int = 8
    dropout: float = 0.1
    num_blocks: int = 12
    long_skip: bool = True
    relpos_clamp: int = 64

    def validate(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by {self.heads} heads"
            )
        if self.depthwise_kernel < 1:
            raise ConfigError("depthwise_kernel must be >= 1")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.relpos_clamp < 1:
            raise ConfigError("relpos_clamp must be >= 1")


def _layer_norm_params(store, name, dim):
    gain = store.param(f"{name}/ln_gain", (dim,), ("ones",))
    bias = store.param(f"{name}/ln_bias", (dim,), ("zeros",))
    return gain, bias


class FeedForward:
    """LayerNorm -> Linear -> Swish -> Dropout -> Linear -> Dropout."""

    def __init__(self, store, name, dim, hidden, p):
        self.p = p
        self.ln = _layer_norm_params(store, name, dim)
        self.w1 = store.param(f"{name}/w1", (dim, hidden), ("glorot", dim, hidden))
        self.b1 = store.param(f"{name}/b1", (hidden,), ("zeros",))
        self.w2 = store.param(f"{name}/w2", (hidden, dim), ("glorot", hidden, dim))
        self.b2 = store.param(f"{name}/b2", (dim,), ("zeros",))

    def forward(self, x, ctx: RunContext):
        h = T.layer_norm(x, *self.ln)
        h = T.swish(T.linear(h, self.w1, self.b1))
        h = ctx.dropout(h, self.p)
        h = T.linear(h, self.w2, self.b2)
        return ctx.dropout(h, self.p)


class RelPosSelfAttention:
    """Multi-head self-attention with clamped relative position scores.

    The score for query i and key j is (q_i . k_j + q_i . r[i-j]) scaled
    by 1/sqrt(head_dim), where r is a learned table indexed by the
    distance i-j clamped to +/-clamp. Invalid keys get -inf.
    """

    def __init__(self, store, name, dim, heads, clamp, p):
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.clamp = clamp
        self.p = p
        self.ln = _layer_norm_params(store, name, dim)
        for proj in ("q", "k", "v", "o"):
            setattr(self, f"w{proj}", store.param(
                f"{name}/w{proj}", (dim, dim), ("glorot", dim, dim)))
            setattr(self, f"b{proj}", store.param(
                f"{name}/b{proj}", (dim,), ("zeros",)))
        self.rel = store.param(
            f"{name}/relpos", (2 * clamp + 1, self.head_dim), ("normal", 0.02))
        self.last_attn_probs = None

    def _heads(self, x, b, t):
        return T.transpose(T.reshape(x, (b, t, self.heads, self.head_dim)),
                           (0, 2, 1, 3))

    def forward(self, x, mask, ctx: RunContext):
        b, t, _ = x.shape
        xn = T.layer_norm(x, *self.ln)
        q = self._heads(T.linear(xn, self.wq, self.bq), b, t)
        k = self._heads(T.linear(xn, self.wk, self.bk), b, t)
        v = self._heads(T.linear(xn, self.wv, self.bv), b, t)

        content = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))  # [B, h, T, T]
        rel_scores = T.matmul(q, T.transpose(self.rel, (1, 0)))  # [B, h, T, 2c+1]
        offsets = np.arange(t)[:, None] - np.arange(t)[None, :]
        idx = np.clip(offsets, -self.clamp, self.clamp) + self.clamp
        logits = T.scale(T.add(content, T.gather_rel(rel_scores, idx)),
                         1.0 / math.sqrt(self.head_dim))

        key_mask = mask[:, None, None, :]
        probs = T.masked_softmax(logits, key_mask)
        self.last_attn_probs = probs.data.copy()
        probs = ctx.dropout(probs, self.p)

        out = T.matmul(probs, v)  # [B, h, T, dh]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, self.dim))
        out = T.linear(out, self.wo, self.bo)
        out = ctx.dropout(out, self.p)
        return zero_padded(out, mask)


class ConvModule:
    """LayerNorm -> pointwise (2x, GLU) -> depthwise -> norm -> Swish ->
    pointwise -> Dropout. Normalization inside is a layer norm so results
    do not depend on batch composition."""

    def __init__(self, store, name, dim, kernel, p):
        self.p = p
        self.ln_in = _layer_norm_params(store, f"{name}/in", dim)
        self.pw1_w = store.param(f"{name}/pw1_w", (dim, 2 * dim),
                                 ("glorot", dim, 2 * dim))
        self.pw1_b = store.param(f"{name}/pw1_b", (2 * dim,), ("zeros",))
        self.dw = store.param(f"{name}/dw_kernel", (kernel, dim),
                              ("glorot", kernel, kernel))
        self.dw_b = store.param(f"{name}/dw_bias", (dim,), ("zeros",))
        self.ln_mid = _layer_norm_params(store, f"{name}/mid", dim)
        self.pw2_w = store.param(f"{name}/pw2_w", (dim, dim), ("glorot", dim, dim))
        self.pw2_b = store.param(f"{name}/pw2_b", (dim,), ("zeros",))

    def forward(self, x, mask, ctx: RunContext):
        h = T.layer_norm(x, *self.ln_in)
        h = T.glu(T.linear(h, self.pw1_w, self.pw1_b))
        h = zero_padded(h, mask)  # depthwise windows must not read padding
        h = T.add(T.depthwise_conv1d(h, self.dw), self.dw_b)
        h = T.swish(T.layer_norm(h, *self.ln_mid))
        h = T.linear(h, self.pw2_w, self.pw2_b)
        return ctx.dropout(h, self.p)


class ConformerBlock:
    def __init__(self, store, name, cfg: BlockConfig):
        d = cfg.model_dim
        self.ffn1 = FeedForward(store, f"{name}/ffn1", d, cfg.ffn_dim, cfg.dropout)
        self.mhsa = RelPosSelfAttention(store, f"{name}/mhsa", d, cfg.heads,
                                        cfg.relpos_clamp, cfg.dropout)
        self.conv = ConvModule(store, f"{name}/conv", d, cfg.depthwise_kernel,
                               cfg.dropout)
        self.ffn2 = FeedForward(store, f"{name}/ffn2", d, cfg.ffn_dim, cfg.dropout)
        self.ln_out = _layer_norm_params(store, f"{name}/out", d)

    def forward(self, x, mask, ctx: RunContext, skip=None):
        if skip is not None:
            x = T.add(x, skip)
        x = T.add(x, T.scale(self.ffn1.forward(x, ctx), 0.5))
        x = T.add(x, self.mhsa.forward(x, mask, ctx))
        x = T.add(x, self.conv.forward(x, mask, ctx))
        x = T.add(x, T.scale(self.ffn2.forward(x, ctx), 0.5))
        return T.layer_norm(x, *self.ln_out)


class ConformerStack:
    """L blocks; with the long skip enabled, one shared projection of the
    front-end output is added to every block's input."""

    def __init__(self, store, cfg: BlockConfig):
        cfg.validate()
        self.cfg = cfg
        self.blocks = [
            ConformerBlock(store, f"blocks/block{i:02d}", cfg)
            for i in range(cfg.num_blocks)
        ]
        if cfg.long_skip:
            d = cfg.model_dim
            self.skip_w = store.param("longskip/w", (d, d), ("glorot", d, d))
            self.skip_b = store.param("longskip/b", (d,), ("zeros",))

    def forward(self, x, mask, ctx: RunContext, frontend_out=None, taps=()):
        """Returns (final output, {1-indexed block position: output})."""
        skip = None
        if self.cfg.long_skip:
            if frontend_out is None:
                raise ConfigError("long skip is enabled but no front-end output given")
            skip = T.linear(frontend_out, self.skip_w, self.skip_b)
        tapped = {}
        for i, block in enumerate(self.blocks):
            x = block.forward(x, mask, ctx, skip=skip)
            if (i + 1) in taps:
                tapped[i + 1] = x
        return x, tapped
