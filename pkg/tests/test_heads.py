"""Upsampling heads, loss definitions, and parameter sharing."""

import math

import numpy as np
import pytest

from cham import tensor as T
from cham.common import EVAL
from cham.heads import (HeadConfig, UpsamplingHead, build_heads, cross_entropy,
                        focal_loss, frame_errors, total_loss)
from cham.params import ParamStore, census
from cham.tensor import Tensor, TensorError

from conftest import check_gradients

LN_9001 = 9.105090961257085  # high-precision ln(9001)
QUARTER_LN2 = 0.17328679513998632  # -(0.5)^2 * ln(0.5)


def _head_cfg(**kw):
    base = dict(intermediate_positions=(1,), mlp_dim=6,
                share_transposed_conv=True, share_mlp=False,
                focal_gamma=2.0, intermediate_loss_scale=0.3)
    base.update(kw)
    return HeadConfig(**base)


def _nll_oracle(logits, labels):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]


class TestHeadForward:
    def _head(self, factor, intermediate=False, dim=6, labels=5, seed=1):
        store = ParamStore(seed=seed)
        head = UpsamplingHead(store, "final", _head_cfg(mlp_dim=dim), dim, labels,
                              factor, intermediate=intermediate)
        return store, head

    def test_exact_multiple_no_crop(self, rng):
        _, head = self._head(factor=3)
        out = head.forward(Tensor(rng.normal(size=(1, 10, 6))), 30, EVAL)
        assert out.shape == (1, 30, 5)

    def test_crop_from_right(self, rng):
        _, head = self._head(factor=3)
        x = Tensor(rng.normal(size=(1, 11, 6)))
        full = head.forward(x, 33, EVAL)
        cropped = head.forward(x, 31, EVAL)
        assert cropped.shape == (1, 31, 5)
        assert np.array_equal(cropped.data, full.data[:, :31])

    def test_factor_one_preserves_length(self, rng):
        _, head = self._head(factor=1)
        out = head.forward(Tensor(rng.normal(size=(2, 9, 6))), 9, EVAL)
        assert out.shape == (2, 9, 5)

    def test_cannot_crop_upward(self, rng):
        _, head = self._head(factor=3)
        with pytest.raises(TensorError):
            head.forward(Tensor(rng.normal(size=(1, 9, 6))), 30, EVAL)

    def test_length_round_trip_sweep(self, rng):
        for factor in range(1, 6):
            _, head = self._head(factor=factor)
            for t in (1, 2, 3, 7, 29, 30, 31, 97):
                t_down = -(-t // factor)
                out = head.forward(Tensor(rng.normal(size=(1, t_down, 6))), t, EVAL)
                assert out.shape[1] == t, (factor, t)

    def test_intermediate_head_has_hidden_projection(self, rng):
        store, head = self._head(factor=2, intermediate=True)
        assert "heads/final/mlp_w" in store.names()
        out = head.forward(Tensor(rng.normal(size=(1, 4, 6))), 8, EVAL)
        assert out.shape == (1, 8, 5)


class TestCrossEntropy:
    def test_uniform_logits_9001_labels(self):
        logits = Tensor(np.zeros((1, 4, 9001)))
        labels = np.array([[0, 17, 9000, 42]])
        mask = np.ones((1, 4), bool)
        assert abs(cross_entropy(logits, labels, mask).item() - LN_9001) < 1e-12

    def test_confident_correct_is_zero(self):
        logits = np.zeros((1, 3, 5))
        labels = np.array([[1, 4, 2]])
        logits[0, np.arange(3), labels[0]] = 1e3
        loss = cross_entropy(Tensor(logits), labels, np.ones((1, 3), bool)).item()
        assert loss == 0.0

    def test_masked_frames_excluded(self, rng):
        logits = rng.normal(size=(2, 6, 7))
        labels = rng.integers(0, 7, size=(2, 6))
        mask = np.ones((2, 6), bool)
        mask[0, 4:] = False
        mask[1, 2:] = False
        got = cross_entropy(Tensor(logits), labels, mask).item()
        per_frame = _nll_oracle(logits, labels)
        expected = per_frame[mask].mean()
        assert abs(got - expected) < 1e-12

    def test_matches_oracle_on_random_inputs(self, rng):
        logits = rng.normal(size=(3, 5, 11)) * 3
        labels = rng.integers(0, 11, size=(3, 5))
        mask = np.ones((3, 5), bool)
        got = cross_entropy(Tensor(logits), labels, mask).item()
        assert abs(got - _nll_oracle(logits, labels).mean()) < 1e-12


class TestFocalLoss:
    def test_gamma_zero_equals_cross_entropy(self, rng):
        logits = Tensor(rng.normal(size=(4, 250, 9)))
        labels = rng.integers(0, 9, size=(4, 250))
        mask = rng.random((4, 250)) > 0.2
        ce = cross_entropy(logits, labels, mask).item()
        fl = focal_loss(logits, labels, mask, gamma=0.0).item()
        assert abs(ce - fl) < 1e-12

    def test_gamma_zero_gradients_identical(self, rng):
        logits_data = rng.normal(size=(1, 5, 4))
        labels = rng.integers(0, 4, size=(1, 5))
        mask = np.ones((1, 5), bool)
        a = Tensor(logits_data, requires_grad=True)
        T.backward(cross_entropy(a, labels, mask))
        b = Tensor(logits_data, requires_grad=True)
        T.backward(focal_loss(b, labels, mask, gamma=0.0))
        assert np.array_equal(a.grad, b.grad)

    def test_half_probability_spot_value(self):
        logits = Tensor(np.zeros((1, 1, 2)))  # p_target = 0.5
        labels = np.array([[1]])
        loss = focal_loss(logits, labels, np.ones((1, 1), bool), gamma=2.0).item()
        assert abs(loss - QUARTER_LN2) < 1e-10

    def test_perfect_prediction_is_zero(self):
        logits = np.zeros((1, 2, 3))
        labels = np.array([[0, 2]])
        logits[0, [0, 1], [0, 2]] = 1e3
        loss = focal_loss(Tensor(logits), labels, np.ones((1, 2), bool), 2.0).item()
        assert loss == 0.0

    def test_never_exceeds_cross_entropy(self, rng):
        for gamma in (0.5, 1.0, 2.0, 4.0):
            logits = Tensor(rng.normal(size=(2, 40, 6)) * 2)
            labels = rng.integers(0, 6, size=(2, 40))
            mask = np.ones((2, 40), bool)
            ce = cross_entropy(logits, labels, mask).item()
            fl = focal_loss(logits, labels, mask, gamma).item()
            assert fl <= ce + 1e-12

    def test_loss_nonnegative(self, rng):
        logits = Tensor(rng.normal(size=(1, 30, 5)))
        labels = rng.integers(0, 5, size=(1, 30))
        mask = np.ones((1, 30), bool)
        for gamma in (0.0, 2.0):
            assert focal_loss(logits, labels, mask, gamma).item() >= 0.0

    def test_gradient(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 5)), requires_grad=True, name="logits")
        labels = rng.integers(0, 5, size=(1, 4))
        mask = np.ones((1, 4), bool)
        check_gradients(lambda: focal_loss(x, labels, mask, 2.0), [x],
                        context="focal")


class TestTotalLoss:
    def test_zero_scale_is_final_only(self, rng):
        final = Tensor(np.array(1.25))
        inters = {4: Tensor(np.array(0.5)), 8: Tensor(np.array(0.75))}
        assert total_loss(final, inters, 0.0).item() == 1.25

    def test_stated_combination(self):
        final = Tensor(np.array(1.0))
        inters = {4: Tensor(np.array(0.5)), 8: Tensor(np.array(0.25))}
        got = total_loss(final, inters, 0.3).item()
        assert abs(got - (1.0 + 0.3 * 0.75)) < 1e-15

    def test_intermediate_gradient_flows_when_final_blocked(self, rng):
        # only the intermediate loss contributes; upstream weights still learn
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="w")
        x = T.matmul(Tensor(rng.normal(size=(2, 3))), w)
        inter_logits = T.reshape(x, (1, 2, 3))
        labels = np.array([[0, 2]])
        mask = np.ones((1, 2), bool)
        inter = cross_entropy(inter_logits, labels, mask)
        final = Tensor(np.array(0.0))  # blocked: no graph into w
        T.backward(total_loss(final, {1: inter}, 0.3))
        assert w.grad is not None and np.abs(w.grad).max() > 0


class TestSharing:
    def _build(self, share_tconv, share_mlp, seed=5):
        store = ParamStore(seed=seed)
        cfg = _head_cfg(intermediate_positions=(1, 2),
                        share_transposed_conv=share_tconv, share_mlp=share_mlp)
        heads = build_heads(store, cfg, model_dim=6, num_labels=5, factor=2)
        return store, heads

    def test_unique_counts(self):
        store_on, _ = self._build(True, True)
        kernels_on = [n for n in store_on.names() if n.endswith("tconv_kernel")]
        mlps_on = [n for n in store_on.names() if n.endswith("mlp_w")]
        assert len(kernels_on) == 1 and len(mlps_on) == 1
        assert store_on.uses(kernels_on[0]) == 3
        assert store_on.uses(mlps_on[0]) == 2

        store_off, _ = self._build(False, False)
        assert len([n for n in store_off.names() if n.endswith("tconv_kernel")]) == 3
        assert len([n for n in store_off.names() if n.endswith("mlp_w")]) == 2

    def test_census_reflects_sharing_exactly(self):
        on = census(self._build(True, True)[0])
        off = census(self._build(False, False)[0])
        kernel = 2 * 6 * 6 + 6  # tconv kernel + bias
        mlp = 6 * 6 + 6
        assert off.unique_total - on.unique_total == 2 * kernel + mlp
        assert on.with_reuse_total == off.with_reuse_total

    def test_shared_gradient_is_sum_of_unshared(self, rng):
        # oracle: three independent heads evaluated at equal weights
        store_s, heads_s = self._build(True, False, seed=6)
        store_u, heads_u = self._build(False, False, seed=6)
        shared_k = store_s.get("heads/shared/tconv_kernel")
        shared_b = store_s.get("heads/shared/tconv_bias")
        for name in store_u.names():
            if name.endswith("tconv_kernel"):
                store_u.get(name).data = shared_k.data.copy()
            if name.endswith("tconv_bias"):
                store_u.get(name).data = shared_b.data.copy()
            # head-specific layers already match: same init stream per name

        x = Tensor(rng.normal(size=(1, 4, 6)))
        labels = rng.integers(0, 5, size=(1, 8))
        mask = np.ones((1, 8), bool)

        def loss_for(heads):
            parts = [cross_entropy(h.forward(x, 8, EVAL), labels, mask)
                     for h in heads.values()]
            out = parts[0]
            for p in parts[1:]:
                out = T.add(out, p)
            return out

        store_s.zero_grads()
        T.backward(loss_for(heads_s))
        store_u.zero_grads()
        T.backward(loss_for(heads_u))

        summed = sum(store_u.get(n).grad for n in store_u.names()
                     if n.endswith("tconv_kernel"))
        assert np.allclose(shared_k.grad, summed, atol=1e-12)


def test_frame_errors_counts_wrong_valid_frames():
    logits = Tensor(np.array([[[2.0, 0.0], [0.0, 2.0], [2.0, 0.0]]]))
    labels = np.array([[0, 0, 0]])
    mask = np.array([[True, True, False]])
    assert frame_errors(logits, labels, mask) == (1, 2)


def test_spot_constants_against_stdlib():
    assert abs(LN_9001 - math.log(9001)) < 1e-15
    assert abs(QUARTER_LN2 - 0.25 * math.log(2)) < 1e-15
