"""Conformer blocks: module contracts, residual collapse, relative
positions, and padding invariance."""

import numpy as np
import pytest

from cham import tensor as T
from cham.blocks import BlockConfig, ConformerBlock, ConformerStack
from cham.common import EVAL
from cham.params import ParamStore
from cham.tensor import ConfigError, Tensor

from conftest import check_gradients


def _cfg(**kw):
    base = dict(model_dim=8, heads=2, ffn_dim=12, depthwise_kernel=3,
                dropout=0.0, num_blocks=2, long_skip=False, relpos_clamp=16)
    base.update(kw)
    return BlockConfig(**base)


def _block(seed=1, **kw):
    store = ParamStore(seed=seed)
    return store, ConformerBlock(store, "blocks/block00", _cfg(**kw))


def _data(b=1, t=6, d=8, seed=0):
    g = np.random.default_rng(seed)
    return Tensor(g.normal(size=(b, t, d))), np.ones((b, t), bool)


def _reference_layer_norm(x, eps=T.LAYER_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class TestFeedForwardModule:
    def test_zero_weights_make_residual_identity(self):
        store, block = _block()
        x, _ = _data()
        store.get("blocks/block00/ffn1/w2").data[:] = 0.0
        out = T.add(x, T.scale(block.ffn1.forward(x, EVAL), 0.5))
        assert np.array_equal(out.data, x.data)

    def test_half_step_scaling_is_linear_in_branch(self):
        store, block = _block()
        x, _ = _data()
        first = T.add(x, T.scale(block.ffn1.forward(x, EVAL), 0.5)).data - x.data
        store.get("blocks/block00/ffn1/w2").data *= 2.0
        store.get("blocks/block00/ffn1/b2").data *= 2.0
        second = T.add(x, T.scale(block.ffn1.forward(x, EVAL), 0.5)).data - x.data
        assert np.allclose(second, 2.0 * first, atol=1e-12)

    def test_gradient(self):
        store, block = _block(seed=3)
        x, _ = _data(seed=4)

        def make_loss():
            return T.sum_(T.mul(block.ffn1.forward(x, EVAL),
                                T.constant(np.arange(48.).reshape(1, 6, 8))))

        names = [n for n in store.names() if "/ffn1/" in n]
        check_gradients(make_loss, [store.get(n) for n in names], context="ffn")


class TestAttentionModule:
    def test_single_frame_attends_to_itself_fully(self):
        store, block = _block()
        x, mask = _data(t=1)
        block.mhsa.forward(x, mask, EVAL)
        assert np.allclose(block.mhsa.last_attn_probs, 1.0, atol=1e-15)

    def test_zero_output_projection_is_residual_identity(self):
        store, block = _block()
        x, mask = _data()
        store.get("blocks/block00/mhsa/wo").data[:] = 0.0
        out = T.add(x, block.mhsa.forward(x, mask, EVAL))
        assert np.array_equal(out.data, x.data)

    def test_rows_over_valid_frames_sum_to_one(self):
        store, block = _block()
        x, mask = _data(b=2, t=7, seed=2)
        mask[1, 4:] = False
        block.mhsa.forward(x, mask, EVAL)
        probs = block.mhsa.last_attn_probs
        sums = probs.sum(axis=-1)  # [B, h, T]
        assert np.max(np.abs(sums[0] - 1.0)) < 1e-10
        assert np.max(np.abs(sums[1, :, :4] - 1.0)) < 1e-10
        assert not probs[1, :, :, 4:].any()  # no weight on padded keys

    def test_scores_depend_on_distance_only(self):
        # constant input: the pre-softmax score matrix must be constant
        # along every diagonal (same content, same relative offset)
        store, block = _block(seed=5)
        d, t = 8, 6
        x = Tensor(np.tile(np.random.default_rng(3).normal(size=(1, 1, d)), (1, t, 1)))
        mhsa = block.mhsa
        xn = T.layer_norm(x, *mhsa.ln)
        q = mhsa._heads(T.linear(xn, mhsa.wq, mhsa.bq), 1, t).data[0]
        k = mhsa._heads(T.linear(xn, mhsa.wk, mhsa.bk), 1, t).data[0]
        rel = q @ mhsa.rel.data.T  # [h, T, 2c+1]
        idx = np.clip(np.arange(t)[:, None] - np.arange(t)[None, :],
                      -mhsa.clamp, mhsa.clamp) + mhsa.clamp
        rows = np.arange(t)[:, None]
        for h in range(mhsa.heads):
            logits = q[h] @ k[h].T + rel[h][rows, idx]
            for delta in range(-(t - 1), t):
                diag = np.diagonal(logits, offset=delta)
                assert np.max(np.abs(diag - diag[0])) < 1e-10, (h, delta)


class TestConvModule:
    def test_zero_final_pointwise_is_residual_identity(self):
        store, block = _block()
        x, mask = _data()
        store.get("blocks/block00/conv/pw2_w").data[:] = 0.0
        out = T.add(x, block.conv.forward(x, mask, EVAL))
        assert np.array_equal(out.data, x.data)

    @pytest.mark.parametrize("kernel", [6, 8, 16, 32])
    def test_length_preserved_for_kernel_sweep(self, kernel):
        store = ParamStore(seed=2)
        block = ConformerBlock(store, "blocks/block00", _cfg(depthwise_kernel=kernel))
        x, mask = _data(t=9, seed=6)
        out = block.conv.forward(x, mask, EVAL)
        assert out.shape == x.shape

    def test_gradient(self):
        store, block = _block(seed=7)
        x, mask = _data(seed=8)
        w = np.random.default_rng(9).normal(size=(1, 6, 8))

        def make_loss():
            return T.sum_(T.mul(block.conv.forward(x, mask, EVAL), T.constant(w)))

        names = [n for n in store.names() if "/conv/" in n]
        check_gradients(make_loss, [store.get(n) for n in names], context="conv")


def _zero_projections(store):
    """Zero every branch output projection so residuals collapse."""
    for name in store.names():
        if name.endswith(("ffn1/w2", "ffn1/b2", "ffn2/w2", "ffn2/b2",
                          "mhsa/wo", "mhsa/bo", "conv/pw2_w", "conv/pw2_b")):
            store.get(name).data[:] = 0.0
        if name.startswith("longskip/"):
            store.get(name).data[:] = 0.0


class TestBlockAndStack:
    def test_residual_collapse_single_block(self):
        store, block = _block(seed=9)
        _zero_projections(store)
        x, mask = _data(seed=10)
        out = block.forward(x, mask, EVAL)
        assert np.max(np.abs(out.data - _reference_layer_norm(x.data))) < 1e-10

    def test_residual_collapse_stack(self):
        store = ParamStore(seed=11)
        stack = ConformerStack(store, _cfg(num_blocks=3, long_skip=True))
        _zero_projections(store)
        x, mask = _data(seed=12)
        out, _ = stack.forward(x, mask, EVAL, frontend_out=x)
        expected = x.data
        for _ in range(3):
            expected = _reference_layer_norm(expected)
        assert np.max(np.abs(out.data - expected)) < 1e-10

    def test_long_skip_changes_wiring(self):
        x, mask = _data(seed=13)
        outs = {}
        for flag in (False, True):
            store = ParamStore(seed=14)
            stack = ConformerStack(store, _cfg(long_skip=flag))
            out, _ = stack.forward(x, mask, EVAL,
                                   frontend_out=x if flag else None)
            outs[flag] = out.data
        assert not np.allclose(outs[False], outs[True], atol=1e-6)

    def test_long_skip_requires_frontend_out(self):
        store = ParamStore(seed=15)
        stack = ConformerStack(store, _cfg(long_skip=True))
        x, mask = _data()
        with pytest.raises(ConfigError):
            stack.forward(x, mask, EVAL)

    def test_deterministic_forward(self):
        x, mask = _data(seed=16)
        runs = []
        for _ in range(2):
            store = ParamStore(seed=17)
            stack = ConformerStack(store, _cfg())
            out, _ = stack.forward(x, mask, EVAL)
            runs.append(out.data)
        assert np.array_equal(runs[0], runs[1])

    def test_taps_return_inner_outputs(self):
        store = ParamStore(seed=18)
        stack = ConformerStack(store, _cfg(num_blocks=3))
        x, mask = _data(seed=19)
        out, tapped = stack.forward(x, mask, EVAL, taps=(1, 2))
        assert set(tapped) == {1, 2}
        only_first = stack.blocks[0].forward(x, mask, EVAL)
        assert np.array_equal(tapped[1].data, only_first.data)

    def test_time_shift_equivariance(self):
        # same content placed at two offsets inside a padded buffer gives
        # identical outputs at the matching positions (clamp >= T)
        t_valid, shift = 7, 4
        total = t_valid + shift
        store = ParamStore(seed=20)
        stack = ConformerStack(store, _cfg(num_blocks=2, relpos_clamp=32))
        g = np.random.default_rng(21)
        content = g.normal(size=(t_valid, 8))

        x1 = np.zeros((1, total, 8))
        x1[0, :t_valid] = content
        m1 = np.zeros((1, total), bool)
        m1[0, :t_valid] = True
        out1, _ = stack.forward(Tensor(x1), m1, EVAL)

        x2 = np.zeros((1, total, 8))
        x2[0, shift:] = content
        m2 = np.zeros((1, total), bool)
        m2[0, shift:] = True
        out2, _ = stack.forward(Tensor(x2), m2, EVAL)

        assert np.max(np.abs(out2.data[0, shift:] - out1.data[0, :t_valid])) < 1e-10

    def test_mask_invariance(self):
        # junk in padded positions cannot influence valid outputs
        store = ParamStore(seed=22)
        stack = ConformerStack(store, _cfg(num_blocks=2))
        g = np.random.default_rng(23)
        x = g.normal(size=(2, 9, 8))
        mask = np.ones((2, 9), bool)
        mask[0, 6:] = False
        mask[1, 3:] = False
        out_a, _ = stack.forward(Tensor(x), mask, EVAL)
        x_junk = x.copy()
        x_junk[~mask] = g.normal(size=(int((~mask).sum()), 8)) * 100.0
        out_b, _ = stack.forward(Tensor(x_junk), mask, EVAL)
        assert np.max(np.abs(out_b.data[mask] - out_a.data[mask])) < 1e-10

    def test_block_gradient(self):
        store, block = _block(seed=24, depthwise_kernel=3)
        x = Tensor(np.random.default_rng(25).normal(size=(1, 5, 8)),
                   requires_grad=True, name="x")
        mask = np.ones((1, 5), bool)
        w = np.random.default_rng(26).normal(size=(1, 5, 8))

        def make_loss():
            return T.sum_(T.mul(block.forward(x, mask, EVAL), T.constant(w)))

        tensors = [x] + [store.get(n) for n in store.names()]
        check_gradients(make_loss, tensors, context="block")
