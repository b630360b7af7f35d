"""Attention mechanics, capture/injection hooks, and the eps predictor."""

import numpy as np
import pytest

from sdlab import autodiff as ad
from sdlab.autodiff import Field, Tape
from sdlab.attention import (COND, CROSS, SELF, UNCOND, AttentionLayer,
                             AttentionTape, Conditioning, InjectionPlan, attend,
                             steps_active)
from sdlab.denoiser import Denoiser, cfg_eps, denoise, time_embedding
from sdlab.errors import DimensionError, InjectionError


def identity_layer():
    layer = AttentionLayer("unit", query_dim=2, embed_dim=2, d=2, heads=1, value_dim=2)
    layer.wq.data = np.eye(2, dtype=np.float32)
    layer.wk.data = np.eye(2, dtype=np.float32)
    layer.wv.data = np.eye(2, dtype=np.float32)
    return layer


def rand_cond(rng, length=4, dim=64, requires_grad=False):
    key = Field(rng.standard_normal((length, dim)).astype(np.float32))
    val = Field(rng.standard_normal((length, dim)).astype(np.float32),
                requires_grad=requires_grad)
    return Conditioning(key, val)


class TestAttend:
    def test_identity_maps_hand_softmax(self):
        layer = identity_layer()
        f = Field([[1.0, 0.0]])
        tokens = Field(np.eye(2, dtype=np.float32))
        out, amap = attend(f, Conditioning(tokens, tokens), layer)
        assert amap.shape == (1, 1, 2)
        assert np.allclose(amap.data[0, 0], [0.6698, 0.3302], atol=1e-3)
        assert np.allclose(out.data[0], [0.6698, 0.3302], atol=1e-3)

    def test_key_equals_value_is_plain_cross_attention(self):
        rng = np.random.default_rng(0)
        layer = AttentionLayer("x", 8, 8, 4, 2, 8, rng)
        f = Field(rng.standard_normal((5, 8)).astype(np.float32))
        emb = Field(rng.standard_normal((3, 8)).astype(np.float32))
        out1, m1 = attend(f, Conditioning(emb, emb), layer)
        out2, m2 = attend(f, Conditioning(emb, emb), layer)
        assert np.array_equal(out1.data, out2.data)
        assert np.array_equal(m1.data, m2.data)

    def test_single_token_gives_all_ones_column(self):
        rng = np.random.default_rng(1)
        layer = AttentionLayer("x", 8, 8, 4, 1, 8, rng)
        f = Field(rng.standard_normal((5, 8)).astype(np.float32))
        emb = Field(rng.standard_normal((1, 8)).astype(np.float32))
        out, amap = attend(f, Conditioning(emb, emb), layer)
        assert np.array_equal(amap.data, np.ones((1, 5, 1), dtype=np.float32))
        expected = emb.data @ layer.wv.data
        assert np.allclose(out.data, np.repeat(expected, 5, axis=0), atol=1e-6)

    def test_value_swap_changes_out_never_map(self):
        rng = np.random.default_rng(2)
        layer = AttentionLayer("x", 8, 8, 4, 2, 8, rng)
        f = Field(rng.standard_normal((6, 8)).astype(np.float32))
        e1 = Field(rng.standard_normal((3, 8)).astype(np.float32))
        e2 = Field(rng.standard_normal((3, 8)).astype(np.float32))
        out_a, map_a = attend(f, Conditioning(e1, e1), layer)
        out_b, map_b = attend(f, Conditioning(e1, e2), layer)
        assert np.array_equal(map_a.data, map_b.data)
        assert not np.array_equal(out_a.data, out_b.data)

    def test_key_swap_changes_map_stays_row_stochastic(self):
        rng = np.random.default_rng(3)
        layer = AttentionLayer("x", 8, 8, 4, 2, 8, rng)
        f = Field(rng.standard_normal((6, 8)).astype(np.float32))
        e1 = Field(rng.standard_normal((3, 8)).astype(np.float32))
        e2 = Field(rng.standard_normal((3, 8)).astype(np.float32))
        _, map_a = attend(f, Conditioning(e1, e1), layer)
        _, map_b = attend(f, Conditioning(e2, e1), layer)
        assert not np.array_equal(map_a.data, map_b.data)
        assert np.abs(map_b.data.sum(-1) - 1.0).max() < 1e-5

    def test_width_mismatch_raises(self):
        layer = identity_layer()
        with pytest.raises(DimensionError):
            attend(Field(np.zeros((2, 3))), Conditioning(Field(np.eye(2)), Field(np.eye(2))), layer)


class TestInjectionPlanAndTape:
    def test_plan_validates_fractions(self):
        with pytest.raises(InjectionError):
            InjectionPlan(replace_cross_until=1.5)

    def test_steps_active_boundaries(self):
        assert steps_active(0.0, 30) == 0
        assert steps_active(1.0, 30) == 30
        assert steps_active(0.5, 30) == 15
        assert steps_active(0.6, 30) == 18  # guards float noise in 0.6 * 30
        assert steps_active(0.55, 30) == 17

    def test_tape_slicing(self):
        tape = AttentionTape()
        m = Field(np.ones((2, 4, 4)))
        tape.put("enc16", 3, COND, CROSS, m)
        tape.put("enc8", 3, COND, CROSS, m)
        tape.put("enc16", 3, COND, SELF, m)
        tape.put("enc16", 2, COND, CROSS, m)
        got = tape.maps_at(3, COND, CROSS)
        assert sorted(got) == ["enc16", "enc8"]
        assert tape.timesteps() == [2, 3]


@pytest.fixture(scope="module")
def model():
    return Denoiser(seed=0)


@pytest.fixture(scope="module")
def cond_pair():
    rng = np.random.default_rng(5)
    return rand_cond(rng), rand_cond(rng)


class TestDenoise:
    def test_shape_contract(self, model, cond_pair):
        cond, _ = cond_pair
        z = Field(np.random.default_rng(0).standard_normal((32, 32, 3)).astype(np.float32))
        eps = denoise(model, z, 5, cond)
        assert eps.shape == (32, 32, 3)

    def test_bad_input_shape_rejected(self, model, cond_pair):
        cond, _ = cond_pair
        with pytest.raises(DimensionError):
            denoise(model, Field(np.zeros((16, 16, 3))), 5, cond)

    def test_captured_maps_are_row_stochastic(self, model, cond_pair):
        cond, _ = cond_pair
        z = Field(np.random.default_rng(1).standard_normal((32, 32, 3)).astype(np.float32))
        tape = AttentionTape()
        denoise(model, z, 7, cond, tape=tape)
        assert len(tape) == 8  # 4 sites x (self, cross)
        for (_, t, branch, _), m in tape.maps.items():
            assert t == 7 and branch == COND
            assert (m.data >= 0).all()
            assert np.abs(m.data.sum(-1) - 1.0).max() < 1e-5

    def test_self_override_is_bit_exact_noop(self, model, cond_pair):
        cond, _ = cond_pair
        z = Field(np.random.default_rng(2).standard_normal((32, 32, 3)).astype(np.float32))
        tape = AttentionTape()
        base = denoise(model, z, 3, cond, tape=tape)
        overrides = {(layer, kind): m for (layer, t, b, kind), m in tape.maps.items()}
        again = denoise(model, z, 3, cond, overrides=overrides)
        assert np.array_equal(base.data, again.data)

    def test_override_geometry_mismatch_raises(self, model, cond_pair):
        cond, _ = cond_pair
        z = Field(np.zeros((32, 32, 3), dtype=np.float32))
        with pytest.raises(InjectionError):
            denoise(model, z, 3, cond, overrides={("enc16", CROSS): np.ones((2, 3, 3))})
        with pytest.raises(InjectionError):
            denoise(model, z, 3, cond, overrides={("nowhere", CROSS): np.ones((2, 3, 3))})

    def test_feature_capture_and_override(self, model, cond_pair):
        cond, _ = cond_pair
        z = Field(np.random.default_rng(3).standard_normal((32, 32, 3)).astype(np.float32))
        sink = {}
        base = denoise(model, z, 4, cond, feature_sink=sink)
        assert sorted(sink) == ["dec16", "dec8"]
        again = denoise(model, z, 4, cond, feature_overrides=sink)
        assert np.array_equal(base.data, again.data)
        with pytest.raises(InjectionError):
            denoise(model, z, 4, cond, feature_overrides={"dec8": np.zeros((2, 2, 2))})


class TestCfgEps:
    def test_w1_is_conditional_only_bit_exact(self, model, cond_pair):
        cond, uncond = cond_pair
        z = Field(np.random.default_rng(4).standard_normal((32, 32, 3)).astype(np.float32))
        a = cfg_eps(model, z, 5, cond, uncond, 1.0)
        b = denoise(model, z, 5, cond)
        assert np.array_equal(a.data, b.data)

    def test_w0_is_unconditional_exactly(self, model, cond_pair):
        cond, uncond = cond_pair
        z = Field(np.random.default_rng(5).standard_normal((32, 32, 3)).astype(np.float32))
        a = cfg_eps(model, z, 5, cond, uncond, 0.0)
        b = denoise(model, z, 5, uncond)
        assert np.array_equal(a.data, b.data)

    def test_guidance_formula(self, model, cond_pair):
        cond, uncond = cond_pair
        z = Field(np.random.default_rng(6).standard_normal((32, 32, 3)).astype(np.float32))
        w = 7.5
        mixed = cfg_eps(model, z, 5, cond, uncond, w)
        ec = denoise(model, z, 5, cond)
        eu = denoise(model, z, 5, uncond)
        ref = eu.data + w * (ec.data - eu.data)
        assert np.allclose(mixed.data, ref, atol=1e-6)


class TestTimeEmbedding:
    def test_shape_and_range(self):
        e = time_embedding(7, 64)
        assert e.shape == (64,)
        assert (np.abs(e) <= 1.0).all()

    def test_distinct_timesteps_differ(self):
        assert not np.allclose(time_embedding(3, 64), time_embedding(4, 64))


class TestGradientFlowThroughDenoiser:
    def test_value_embedding_receives_gradient_with_frozen_weights(self, model):
        rng = np.random.default_rng(7)
        model.set_trainable(False)
        saved_head = model.params["head.w"].data.copy()
        model.params["head.w"].data = rng.standard_normal(saved_head.shape).astype(np.float32) * 0.1
        try:
            cond = rand_cond(rng, requires_grad=True)
            z = Field(rng.standard_normal((32, 32, 3)).astype(np.float32))
            with Tape() as tape:
                eps = denoise(model, z, 5, cond)
                ad.backward(ad.mse(eps, Field(np.zeros((32, 32, 3), dtype=np.float32))))
            assert cond.value_embedding.grad is not None
            assert np.abs(cond.value_embedding.grad).max() > 0
            # frozen weights collect no gradients and the prefix is pruned
            assert all(p.grad is None for p in model.parameters())
            assert len(tape) < 200
        finally:
            model.params["head.w"].data = saved_head
            model.set_trainable(True)
