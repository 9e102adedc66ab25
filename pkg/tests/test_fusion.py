import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhsum import numcore as nc
from mhsum.fusion import (
    ConfidenceEmbed, align_hypothesis, attention_fuse, confidence_embed, fuse_head, init_fusion_params, posterior_fuse,
)
from mhsum.numcore import Graph, Tensor


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


class TestConfidenceEmbed:
    def test_hand_value(self):
        ce = ConfidenceEmbed(Tensor(np.array([1.0, 2.0])), Tensor(np.array([0.5, 0.0])))
        out = confidence_embed(Tensor(np.array([[1.0, 2.0]])), np.array([0.5]), ce)
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]])

    def test_zero_init_is_identity(self):
        e = rand(np.random.default_rng(0), 4, 3)
        out = confidence_embed(e, np.full(4, 0.3), ConfidenceEmbed.zeros(3))
        np.testing.assert_array_equal(out.data, e.data)

    def test_shape_mismatch(self):
        with pytest.raises(nc.ShapeError):
            confidence_embed(Tensor(np.ones((3, 2))), np.ones(4), ConfidenceEmbed.zeros(2))


class TestPosteriorFuse:
    def test_hand_value(self):
        embeds = Tensor(np.array([[[1.0]], [[0.0]]]))  # N=2, M=1, B=1
        out = posterior_fuse(embeds, np.array([[0.4], [0.6]]))
        assert out.data[0, 0] == pytest.approx(0.4)

    def test_single_hypothesis_unit_posterior_is_exact(self):
        e = rand(np.random.default_rng(1), 1, 5, 4)
        out = posterior_fuse(e, np.ones((1, 5)))
        assert out.data.tobytes() == e.data[0].tobytes()

    def test_raw_weights_are_not_renormalized(self):
        e = Tensor(np.ones((2, 1, 1)))
        p = np.array([[0.5], [0.3]])
        assert posterior_fuse(e, p).data[0, 0] == pytest.approx(0.8)
        assert posterior_fuse(e, p, renormalize=True).data[0, 0] == pytest.approx(1.0)

    def test_misaligned_raises(self):
        with pytest.raises(nc.ShapeError):
            posterior_fuse(Tensor(np.ones((2, 3, 4))), np.ones((2, 4)))

    def test_non_positive_posterior_raises(self):
        with pytest.raises(ValueError):
            posterior_fuse(Tensor(np.ones((2, 1, 1))), np.array([[1.0], [0.0]]))


class TestAttentionFuse:
    def test_identical_hypotheses_give_uniform_weights(self):
        rng = np.random.default_rng(2)
        e1 = rand(rng, 6, 8)
        params = init_fusion_params(4, 8)
        out, alpha = attention_fuse(e1, [e1] * 3, params)
        assert np.abs(alpha - 1 / 3).max() < 1e-9
        aligned, _ = align_hypothesis(e1, e1, params)
        np.testing.assert_allclose(out.data, aligned.data, atol=1e-12)

    def test_single_head_matches_head_function(self):
        rng = np.random.default_rng(3)
        e1, e2 = rand(rng, 5, 6), rand(rng, 7, 6)
        params = init_fusion_params(1, 6)
        out, _ = attention_fuse(e1, [e1, e2], params)
        head, _ = fuse_head(e1, [e1, e2], params, 0)
        assert out.data.tobytes() == head.data.tobytes()

    def test_output_shapes(self):
        rng = np.random.default_rng(4)
        e1 = rand(rng, 2, 5, 6)
        hyps = [e1, rand(rng, 2, 9, 6), rand(rng, 2, 3, 6)]
        out, alpha = attention_fuse(e1, hyps, init_fusion_params(4, 6, mode="random", out_dim=3))
        assert out.shape == (2, 5, 6)
        assert alpha.shape == (2, 5, 4, 3)
        np.testing.assert_allclose(alpha.sum(-1), 1.0, atol=1e-12)

    def test_permuting_other_hypotheses_permutes_weights(self):
        rng = np.random.default_rng(5)
        e1, e2, e3 = rand(rng, 4, 6), rand(rng, 4, 6), rand(rng, 4, 6)
        params = init_fusion_params(2, 6, mode="random", seed=1)
        out_a, alpha_a = attention_fuse(e1, [e1, e2, e3], params)
        out_b, alpha_b = attention_fuse(e1, [e1, e3, e2], params)
        np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-12)
        np.testing.assert_allclose(alpha_a[..., [0, 2, 1]], alpha_b, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 10.0))
    def test_cosine_weights_ignore_key_scale(self, seed, c):
        rng = np.random.default_rng(seed)
        e1, en = rand(rng, 4, 6), rand(rng, 5, 6)
        params = init_fusion_params(1, 6)
        _, w = align_hypothesis(e1, en, params)
        _, w_scaled = align_hypothesis(e1, Tensor(en.data * c), params)
        np.testing.assert_allclose(w.data, w_scaled.data, atol=1e-10)

    def test_key_mask_blocks_padding(self):
        rng = np.random.default_rng(6)
        e1, en = rand(rng, 3, 4), rand(rng, 5, 4)
        mask = np.array([False, False, False, True, True])
        _, w = align_hypothesis(e1, en, init_fusion_params(1, 4), key_mask=mask)
        assert w.data[:, 3:].max() < 1e-300

    def test_one_best_usually_gets_most_weight(self):
        # with identity init the 1-best is closest to its own query, so it
        # should win a clear majority of positions (chance is 1/5)
        rng = np.random.default_rng(7)
        wins, total = 0, 0
        params = init_fusion_params(1, 16)
        for _ in range(20):
            e1 = rand(rng, 10, 16)
            noisy = [Tensor(e1.data + rng.normal(scale=1.0, size=e1.shape)) for _ in range(4)]
            _, alpha = attention_fuse(e1, [e1] + noisy, params)
            wins += (alpha[:, 0].argmax(-1) == 0).sum()
            total += alpha.shape[0]
        assert wins / total > 0.6

    def test_temperature_sharpens_alignment(self):
        rng = np.random.default_rng(8)
        e1 = rand(rng, 12, 8)
        plain = align_hypothesis(e1, e1, init_fusion_params(1, 8))[1]
        sharp_params = init_fusion_params(1, 8, learn_temperature=True, temperature_init=20.0)
        sharp = align_hypothesis(e1, e1, sharp_params)[1]
        assert np.exp(sharp_params.align_scale.data) == pytest.approx(20.0)
        assert sharp_params.combine_scale.data == 0.0
        # bounded cosine scores cannot single out the matching row on their own
        assert np.diag(plain.data).min() < 0.5 < np.diag(sharp.data).min()

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            init_fusion_params(1, 4, learn_temperature=True, temperature_init=0.0)

    def test_empty_list_raises(self):
        with pytest.raises(ValueError):
            attention_fuse(Tensor(np.ones((2, 3))), [], init_fusion_params(1, 3))

    def test_identity_init_needs_square(self):
        with pytest.raises(ValueError):
            init_fusion_params(2, 4, out_dim=3)


def _fusion_inputs(seed):
    rng = np.random.default_rng(seed)
    e1 = rand(rng, 3, 4)
    e2 = rand(rng, 4, 4)
    params = init_fusion_params(2, 4, mode="random", seed=seed)
    return rng, e1, e2, params


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_confidence_embed(self, seed):
        rng = np.random.default_rng(seed)
        e, w, b = rand(rng, 3, 4), rand(rng, 4), rand(rng, 4)
        p = rng.uniform(0.1, 1, size=3)
        r = rng.normal(size=(3, 4))
        f = lambda e, w, b: nc.tensor_sum(nc.mul(confidence_embed(e, p, ConfidenceEmbed(w, b)), Tensor(r)))  # noqa: E731
        assert nc.grad_check(f, [e, w, b]) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_posterior_fuse(self, seed):
        rng = np.random.default_rng(seed)
        e = rand(rng, 3, 2, 4)
        p = Tensor(rng.uniform(0.1, 1, size=(3, 2)))
        r = rng.normal(size=(2, 4))
        f = lambda e, p: nc.tensor_sum(nc.mul(posterior_fuse(e, p), Tensor(r)))  # noqa: E731
        assert nc.grad_check(f, [e, p]) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_align_hypothesis(self, seed):
        rng, e1, e2, params = _fusion_inputs(seed)
        r = rng.normal(size=(3, 4))
        f = lambda e1, e2, wq, wk, wv: nc.tensor_sum(nc.mul(align_hypothesis(e1, e2, params)[0], Tensor(r)))  # noqa: E731
        assert nc.grad_check(f, [e1, e2, params.wq[0], params.wk[0], params.wv[0]]) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_attention_fuse(self, seed):
        rng, e1, e2, params = _fusion_inputs(seed)
        r = rng.normal(size=(3, 4))
        f = lambda e1, e2, *w: nc.tensor_sum(nc.mul(attention_fuse(e1, [e1, e2], params)[0], Tensor(r)))  # noqa: E731
        weights = list(params.named().values())
        assert nc.grad_check(f, [e1, e2] + weights) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_fuse_with_temperatures(self, seed):
        rng = np.random.default_rng(seed)
        e1, e2 = rand(rng, 3, 4), rand(rng, 4, 4)
        params = init_fusion_params(2, 4, mode="random", seed=seed, learn_temperature=True, temperature_init=3.0,
                                    combine_temperature_init=2.0)
        r = rng.normal(size=(3, 4))
        f = lambda e1, e2, *w: nc.tensor_sum(nc.mul(attention_fuse(e1, [e1, e2], params)[0], Tensor(r)))  # noqa: E731
        assert nc.grad_check(f, [e1, e2] + list(params.named().values())) < 1e-4


def test_weights_are_detached_arrays():
    e1 = Tensor(np.eye(3))
    with Graph():
        _, alpha = attention_fuse(e1, [e1], init_fusion_params(1, 3))
    assert isinstance(alpha, np.ndarray)
