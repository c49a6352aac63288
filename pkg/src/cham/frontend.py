"""Convolutional and recurrent front ends with time downsampling.

The default front end is a four-layer VGG-style stack with Swish
activations, a max pool over the feature axis between the first two
convolutions, and the time stride carried by either the second or the
fourth convolution. A BLSTM front end with time max pooling is the
alternative. Both project onto the model dimension and guarantee an
output length of ceil(T / factor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .common import RunContext, downsample_mask, mask_fill, zero_padded
from .tensor import ConfigError, TensorError


@dataclass
class FrontendConfig:
    variant: str = "vgg"  # "vgg" | "blstm_maxpool"
    conv_filters: tuple = (32, 64, 64, 32)
    kernel_size: int = 3
    feature_pool: int = 2
    downsample_factor: int = 3
    downsample_layer: str = "layer4"  # "layer2" | "layer4"
    blstm_hidden: int = 512
    dropout: float = 0.1

    def validate(self):
        if self.variant not in ("vgg", "blstm_maxpool"):
            raise ConfigError(f"unknown frontend variant {self.variant!r}")
        if self.downsample_factor < 1:
            raise ConfigError("downsample_factor must be >= 1")
        if self.downsample_layer not in ("layer2", "layer4"):
            raise ConfigError(f"unknown downsample_layer {self.downsample_layer!r}")
        if len(self.conv_filters) != 4 or any(f < 1 for f in self.conv_filters):
            raise ConfigError("conv_filters must be four positive counts")


class VggFrontend:
    def __init__(self, store, cfg: FrontendConfig, feature_dim: int, model_dim: int):
        cfg.validate()
        self.cfg = cfg
        self.feature_dim = feature_dim
        k = cfg.kernel_size
        chans = (1,) + tuple(cfg.conv_filters)
        self.kernels = []
        self.biases = []
        for i in range(4):
            cin, cout = chans[i], chans[i + 1]
            fan = k * k
            self.kernels.append(store.param(
                f"frontend/conv{i + 1}/kernel", (k, k, cin, cout),
                ("glorot", fan * cin, fan * cout),
            ))
            self.biases.append(store.param(
                f"frontend/conv{i + 1}/bias", (cout,), ("zeros",),
            ))
        pooled = -(-feature_dim // cfg.feature_pool)
        flat = pooled * cfg.conv_filters[3]
        self.proj_w = store.param(
            "frontend/proj/w", (flat, model_dim), ("glorot", flat, model_dim)
        )
        self.proj_b = store.param("frontend/proj/b", (model_dim,), ("zeros",))

    def _stride_for(self, layer_idx):
        cfg = self.cfg
        carried = 2 if cfg.downsample_layer == "layer2" else 4
        return cfg.downsample_factor if layer_idx == carried else 1

    def forward(self, feats, mask, ctx: RunContext):
        """[B, T, F] -> ([B, ceil(T/factor), D], downsampled mask)."""
        if feats.shape[1] == 0:
            raise TensorError("frontend on empty (zero-length) input")
        if feats.shape[2] != self.feature_dim:
            raise TensorError(
                f"expected {self.feature_dim} features, got {feats.shape[2]}"
            )
        b, t, f = feats.shape
        x = T.reshape(zero_padded(feats, mask), (b, t, f, 1))
        cur_mask = mask
        for i in range(4):
            stride = self._stride_for(i + 1)
            x = T.conv2d(x, self.kernels[i], stride_t=stride)
            x = T.add(x, self.biases[i])
            if i < 3:
                x = T.swish(x)
            if stride > 1:
                cur_mask = downsample_mask(cur_mask, stride)
            if i == 0:
                x = T.max_pool_feature(x, self.cfg.feature_pool)
            x = zero_padded(x, cur_mask)
        bb, tt, ff, cc = x.shape
        x = T.reshape(x, (bb, tt, ff * cc))
        x = T.linear(x, self.proj_w, self.proj_b)
        x = ctx.dropout(x, self.cfg.dropout)
        return zero_padded(x, cur_mask), cur_mask


_GATES = 4  # input, forget, cell, output


class _LstmDirection:
    def __init__(self, store, name, in_dim, hidden):
        self.hidden = hidden
        self.wx = store.param(f"{name}/wx", (in_dim, _GATES * hidden),
                              ("glorot", in_dim, hidden))
        self.wh = store.param(f"{name}/wh", (hidden, _GATES * hidden),
                              ("glorot", hidden, hidden))
        self.b = store.param(f"{name}/b", (_GATES * hidden,), ("zeros",))

    def forward(self, x):
        """Unidirectional pass over [B, T, F] -> [B, T, H]."""
        b, t, _ = x.shape
        h = self.hidden
        pre = T.linear(x, self.wx, self.b)  # [B, T, 4H]
        h_t = T.constant(np.zeros((b, h)))
        c_t = T.constant(np.zeros((b, h)))
        outs = []
        for step in range(t):
            gates = T.add(T.reshape(T.narrow(pre, 1, step, 1), (b, _GATES * h)),
                          T.matmul(h_t, self.wh))
            i_g = T.sigmoid(T.narrow(gates, 1, 0, h))
            f_g = T.sigmoid(T.narrow(gates, 1, h, h))
            g_g = T.tanh(T.narrow(gates, 1, 2 * h, h))
            o_g = T.sigmoid(T.narrow(gates, 1, 3 * h, h))
            c_t = T.add(T.mul(f_g, c_t), T.mul(i_g, g_g))
            h_t = T.mul(o_g, T.tanh(c_t))
            outs.append(T.reshape(h_t, (b, 1, h)))
        return T.concat(outs, axis=1)


def _reverse_index(mask: np.ndarray) -> np.ndarray:
    """Per-row index that reverses the valid prefix and fixes the padding."""
    b, t = mask.shape
    lengths = mask.sum(axis=1)
    idx = np.tile(np.arange(t), (b, 1))
    rev = lengths[:, None] - 1 - idx
    return np.where(idx < lengths[:, None], rev, idx).astype(np.int64)


class BlstmMaxpoolFrontend:
    """One BLSTM layer, then time max pooling by the downsampling factor.

    The backward direction runs over each utterance's valid frames in
    reverse (padding excluded), so batch padding cannot leak into the
    recurrent state.
    """

    def __init__(self, store, cfg: FrontendConfig, feature_dim: int, model_dim: int):
        cfg.validate()
        self.cfg = cfg
        self.feature_dim = feature_dim
        h = cfg.blstm_hidden
        self.fwd = _LstmDirection(store, "frontend/blstm/fwd", feature_dim, h)
        self.bwd = _LstmDirection(store, "frontend/blstm/bwd", feature_dim, h)
        self.proj_w = store.param("frontend/proj/w", (2 * h, model_dim),
                                  ("glorot", 2 * h, model_dim))
        self.proj_b = store.param("frontend/proj/b", (model_dim,), ("zeros",))

    def forward(self, feats, mask, ctx: RunContext):
        if feats.shape[1] == 0:
            raise TensorError("frontend on empty (zero-length) input")
        if feats.shape[2] != self.feature_dim:
            raise TensorError(
                f"expected {self.feature_dim} features, got {feats.shape[2]}"
            )
        x = zero_padded(feats, mask)
        rev_idx = _reverse_index(mask)
        h_fwd = self.fwd.forward(x)
        h_bwd = T.gather_time(self.bwd.forward(T.gather_time(x, rev_idx)), rev_idx)
        h = T.concat([h_fwd, h_bwd], axis=2)
        factor = self.cfg.downsample_factor
        pooled = T.max_pool_time(mask_fill(h, mask, -1e30), factor)
        out_mask = downsample_mask(mask, factor)
        out = T.linear(pooled, self.proj_w, self.proj_b)
        out = ctx.dropout(out, self.cfg.dropout)
        return zero_padded(out, out_mask), out_mask


def build_frontend(store, cfg: FrontendConfig, feature_dim: int, model_dim: int):
    if cfg.variant == "vgg":
        return VggFrontend(store, cfg, feature_dim, model_dim)
    return BlstmMaxpoolFrontend(store, cfg, feature_dim, model_dim)
