"""Backbone: patchify, joint attention vs brute force, adapter-branch laws."""

import numpy as np
import pytest

import duoflow.tensor as T
from duoflow.model import (
    LatentImage,
    ModelConfig,
    VelocityModel,
    joint_attention,
    patchify,
    timestep_embedding,
    unpatchify,
)
from duoflow.scenes import Scene, render
from duoflow.tensor import ShapeError, Tensor
from duoflow.text import FrozenEncoder, empty_embedding, tokenize


def randomize_zero_params(model: VelocityModel, scale: float = 0.05) -> None:
    """Give the zero-initialized heads deterministic nonzero values."""
    import zlib

    for name, p in model.named_params().items():
        if np.all(p.data == 0):
            rng = np.random.default_rng(zlib.crc32(name.encode()))
            p.data = rng.standard_normal(p.data.shape) * scale


def brute_force_joint(x, a, b, params):
    """Independent attention: explicit loops, no masking tricks."""

    def lin(v, w, bias=None):
        out = v @ w.data
        return out + bias.data if bias is not None else out

    if params.mode == "double":
        q = np.concatenate(
            [lin(x, params.img_wq, params.img_bq), lin(a, params.a_wq, params.a_bq)]
        )
        k = np.concatenate(
            [lin(x, params.img_wk, params.img_bk), lin(a, params.a_wk, params.a_bk)]
        )
        v = np.concatenate(
            [lin(x, params.img_wv, params.img_bv), lin(a, params.a_wv, params.a_bv)]
        )
    else:
        z = np.concatenate([x, a])
        q = lin(z, params.s_wq, params.s_bq)
        k = lin(z, params.s_wk, params.s_bk)
        v = lin(z, params.s_wv, params.s_bv)
    if b is not None and len(b):
        k = np.concatenate([k, b @ params.b_wk.data])
        v = np.concatenate([v, b @ params.b_wv.data])
    n_q = len(x) + len(a)
    d = q.shape[-1]
    h_count = params.n_heads
    dh = d // h_count
    out = np.zeros((n_q, d))
    for h in range(h_count):
        qs = q[:, h * dh : (h + 1) * dh]
        ks = k[:, h * dh : (h + 1) * dh]
        vs = v[:, h * dh : (h + 1) * dh]
        for i in range(n_q):
            logits = np.array([qs[i] @ ks[j] / np.sqrt(dh) for j in range(len(ks))])
            w = np.exp(logits - logits.max())
            w = w / w.sum()
            out[i, h * dh : (h + 1) * dh] = sum(w[j] * vs[j] for j in range(len(vs)))
    return out[: len(x)], out[len(x) :]


@pytest.fixture(scope="module")
def model():
    m = VelocityModel(ModelConfig(), seed=5)
    return m


class TestPatchify:
    def test_16x16_gives_16_tokens_of_48(self):
        lat = patchify(np.zeros((16, 16, 3)), 4)
        assert lat.tokens.shape == (16, 48)
        assert lat.grid == (4, 4)

    def test_round_trip_bitwise(self):
        img = render(Scene("triangle", "purple", "right", "small"), 32)
        assert np.array_equal(unpatchify(patchify(img, 4)), img)

    def test_batched_round_trip(self):
        imgs = np.stack(
            [render(Scene("circle", "red", "left", "large"), 16) for _ in range(3)]
        )
        lat = patchify(imgs, 4)
        assert lat.tokens.shape == (3, 16, 48)
        assert np.array_equal(unpatchify(lat), imgs)

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((17, 16, 3)), 4)

    def test_token_count_invariant_enforced(self):
        with pytest.raises(ShapeError):
            LatentImage(tokens=np.zeros((5, 48)), grid=(4, 4), patch=4, channels=3)

    def test_row_major_order(self):
        img = np.zeros((8, 8, 3))
        img[0:4, 4:8] = 1.0  # second patch in row-major order
        lat = patchify(img, 4)
        assert lat.tokens[1].sum() == 48.0
        assert lat.tokens[0].sum() == 0.0


class TestJointAttention:
    def test_double_block_matches_brute_force(self, model):
        rng = np.random.default_rng(0)
        params = model.doubles[0].block_params()
        params.b_wv.data = rng.standard_normal((64, 64)) / 8.0
        x = rng.standard_normal((5, 64))
        a = rng.standard_normal((3, 64))
        b = rng.standard_normal((2, 64))
        io, ao = joint_attention(Tensor(x), Tensor(a), Tensor(b), params)
        want_img, want_a = brute_force_joint(x, a, b, params)
        got = np.concatenate([io.data, ao.data])
        want = np.concatenate([want_img, want_a])
        rel = np.abs(got - want).max() / (np.abs(want).max() + 1e-12)
        assert rel <= 1e-10
        params.b_wv.data = np.zeros((64, 64))

    def test_single_block_matches_brute_force(self, model):
        rng = np.random.default_rng(1)
        params = model.singles[0].block_params()
        params.b_wv.data = rng.standard_normal((64, 64)) / 8.0
        x = rng.standard_normal((4, 64))
        a = rng.standard_normal((2, 64))
        b = rng.standard_normal((3, 64))
        io, ao = joint_attention(Tensor(x), Tensor(a), Tensor(b), params)
        want_img, want_a = brute_force_joint(x, a, b, params)
        rel = np.abs(np.concatenate([io.data, ao.data]) - np.concatenate([want_img, want_a])).max()
        assert rel <= 1e-10 * max(1.0, np.abs(want_img).max())
        params.b_wv.data = np.zeros((64, 64))

    def test_zero_length_b_equals_no_adapter_bitwise(self, model):
        rng = np.random.default_rng(2)
        params = model.doubles[0].block_params()
        x = Tensor(rng.standard_normal((5, 64)))
        a = Tensor(rng.standard_normal((3, 64)))
        with_empty = joint_attention(x, a, Tensor(np.zeros((0, 64))), params)
        without = joint_attention(x, a, None, params)
        assert np.array_equal(with_empty[0].data, without[0].data)
        assert np.array_equal(with_empty[1].data, without[1].data)

    def test_single_image_token_equals_value_projection(self, model):
        rng = np.random.default_rng(3)
        params = model.doubles[0].block_params()
        x = Tensor(rng.standard_normal((1, 64)))
        io, ao = joint_attention(x, Tensor(np.zeros((0, 64))), None, params)
        want = x.data @ params.img_wv.data + params.img_bv.data
        assert np.allclose(io.data, want, atol=1e-14)
        assert ao.data.shape == (0, 64)

    def test_masked_keys_match_shorter_sequence(self, model):
        rng = np.random.default_rng(4)
        params = model.doubles[0].block_params()
        x = Tensor(rng.standard_normal((4, 64)))
        a_full = rng.standard_normal((3, 64))
        io_short, _ = joint_attention(x, Tensor(a_full[:2]), None, params)
        mask = np.array([True, True, False])
        io_masked, _ = joint_attention(x, Tensor(a_full), None, params, a_mask=mask)
        assert np.allclose(io_short.data, io_masked.data, atol=1e-12)


class TestForwardVelocity:
    def _inputs(self, model, caption_a="small red circle left", caption_b="mika redu kiro lefa"):
        enc_a = FrozenEncoder("a", model.cfg.d_enc, seed=model.seed)
        enc_b = FrozenEncoder("b", model.cfg.d_enc, seed=model.seed)
        lat = patchify(render(Scene("circle", "red", "left", "small"), 16), 4)
        return lat, enc_a.encode(tokenize(caption_a, "a")), enc_b.encode(tokenize(caption_b, "b"))

    def test_output_shape_matches_input(self, model):
        lat, ta, tb = self._inputs(model)
        v = model.forward_velocity(lat, ta, tb, 0.5)
        assert v.tokens.shape == lat.tokens.shape
        assert v.grid == lat.grid

    def test_deterministic(self, model):
        lat, ta, tb = self._inputs(model)
        v1 = model.forward_velocity(lat, ta, tb, 0.25)
        v2 = model.forward_velocity(lat, ta, tb, 0.25)
        assert np.array_equal(v1.tokens, v2.tokens)

    def test_invalid_time_rejected(self, model):
        lat, ta, tb = self._inputs(model)
        for bad in (-0.1, 1.5, float("nan")):
            with pytest.raises(ValueError):
                model.forward_velocity(lat, ta, tb, bad)

    def test_zero_adapter_identity_bitwise(self):
        m = VelocityModel(ModelConfig(), seed=7)
        m_free = VelocityModel(ModelConfig(adapter_branch=False), seed=7)
        randomize_zero_params(m)
        randomize_zero_params(m_free)
        enc_a = FrozenEncoder("a", 48, seed=7)
        rng = np.random.default_rng(0)
        for i in range(5):
            lat = LatentImage(rng.standard_normal((16, 48)), (4, 4), 4, 3)
            ta = enc_a.encode(tokenize("large blue square center", "a"))
            t = float(rng.random())
            va = m.forward_velocity(lat, ta, None, t)
            vb = m.forward_velocity(lat, ta, empty_embedding("b", 48), t)
            vf = m_free.forward_velocity(lat, ta, None, t)
            assert np.array_equal(va.tokens, vf.tokens)
            assert np.array_equal(vb.tokens, vf.tokens)

    def test_b_stream_never_updated(self, model):
        lat, ta, tb = self._inputs(model)
        before = tb.vectors.data.copy()
        model.forward_velocity(lat, ta, tb, 0.5)
        assert np.array_equal(tb.vectors.data, before)

    def test_unconditional_pass_works(self, model):
        lat, _, tb = self._inputs(model)
        v = model.forward_velocity(lat, None, tb, 0.5)
        assert v.tokens.shape == lat.tokens.shape

    def test_clab_free_model_rejects_b_tokens(self):
        m = VelocityModel(ModelConfig(adapter_branch=False), seed=7)
        lat = LatentImage(np.zeros((16, 48)), (4, 4), 4, 3)
        enc_b = FrozenEncoder("b", 48, seed=7)
        tb = enc_b.encode(tokenize("kiro", "b"))
        with pytest.raises(ValueError):
            m.forward_velocity(lat, None, tb, 0.5)


class TestParameterPartition:
    def test_adapter_and_backbone_sets_partition(self, model):
        names = set(model.named_params())
        ad = model.adapter_param_names()
        bb = model.backbone_param_names()
        assert ad | bb == names
        assert not (ad & bb)

    def test_clab_pair_has_exactly_two_matrices(self, model):
        for blk in model.doubles + model.singles:
            clab_names = sorted(blk.clab.named_params())
            assert [n.split(".")[-1] for n in clab_names] == ["wk", "wv"]

    def test_query_update_variant_gains_query_matrix(self):
        m = VelocityModel(ModelConfig(query_update=True), seed=7)
        for blk in m.doubles + m.singles:
            names = [n.split(".")[-1] for n in sorted(blk.clab.named_params())]
            assert names == ["wk", "wq", "wv"]

    def test_set_trainable_flips_requires_grad(self, model):
        model.set_trainable(model.adapter_param_names())
        for name, p in model.named_params().items():
            assert p.requires_grad == (name in model.adapter_param_names())
        model.set_trainable(set(model.named_params()))

    def test_value_projection_zero_and_key_random_at_init(self):
        m = VelocityModel(ModelConfig(), seed=11)
        for blk in m.doubles + m.singles:
            assert np.all(blk.clab.wv.data == 0.0)
            assert np.abs(blk.clab.wk.data).sum() > 0


class TestQueryUpdateVariant:
    def test_b_stream_changes_across_blocks(self):
        m = VelocityModel(ModelConfig(query_update=True), seed=7)
        randomize_zero_params(m)
        rng = np.random.default_rng(0)
        toks = rng.standard_normal((1, 16, 48))
        at = rng.standard_normal((1, 3, 48))
        am = np.ones((1, 3), dtype=bool)
        bt = rng.standard_normal((1, 4, 48))
        bm = np.ones((1, 4), dtype=bool)
        # capture the adapted b before and after one double block
        b0 = m.adapter_b(Tensor(bt))
        tvec = m.time_vector(np.array([0.5]))
        x = m.in_proj(Tensor(toks))
        a = m.adapter_a(Tensor(at))
        _, _, b1 = m.doubles[0](x, a, am, b0, bm, tvec)
        assert b1 is not None
        assert not np.allclose(b1.data, b0.data)

    def test_default_model_keeps_b_constant_across_blocks(self, model):
        rng = np.random.default_rng(0)
        b0 = model.adapter_b(Tensor(rng.standard_normal((1, 4, 48))))
        tvec = model.time_vector(np.array([0.5]))
        x = model.in_proj(Tensor(rng.standard_normal((1, 16, 48))))
        a = model.adapter_a(Tensor(rng.standard_normal((1, 3, 48))))
        _, _, b1 = model.doubles[0](
            x, a, np.ones((1, 3), bool), b0, np.ones((1, 4), bool), tvec
        )
        assert b1 is b0


class TestGradients:
    def test_adapter_kv_gradient_matches_finite_differences(self):
        m = VelocityModel(ModelConfig(), seed=5)
        randomize_zero_params(m)
        rng = np.random.default_rng(1)
        toks = rng.standard_normal((1, 16, 48))
        at = rng.standard_normal((1, 3, 48))
        am = np.ones((1, 3), dtype=bool)
        bt = rng.standard_normal((1, 4, 48))
        bm = np.ones((1, 4), dtype=bool)
        t = np.array([0.3])

        def loss_value():
            out = m.forward_tokens(toks, at, am, bt, bm, t, (4, 4))
            return (out * out).mean()

        target = m.doubles[0].clab.wk
        for p in m.named_params().values():
            p.grad = None
        loss_value().backward()
        analytic = target.grad.copy()
        h = 1e-5
        worst = 0.0
        with T.no_grad():
            for i in range(0, 64, 13):
                for j in range(0, 64, 13):
                    orig = target.data[i, j]
                    target.data[i, j] = orig + h
                    fp = float(loss_value().data)
                    target.data[i, j] = orig - h
                    fm = float(loss_value().data)
                    target.data[i, j] = orig
                    central = (fp - fm) / (2 * h)
                    worst = max(
                        worst, abs(analytic[i, j] - central) / (abs(analytic[i, j]) + 1e-8)
                    )
        assert worst <= 1e-4

    def test_gradient_reaches_b_branch_but_not_frozen_backbone(self):
        m = VelocityModel(ModelConfig(), seed=5)
        randomize_zero_params(m)
        m.set_trainable(m.adapter_param_names())
        rng = np.random.default_rng(1)
        out = m.forward_tokens(
            rng.standard_normal((1, 16, 48)),
            rng.standard_normal((1, 3, 48)),
            np.ones((1, 3), dtype=bool),
            rng.standard_normal((1, 4, 48)),
            np.ones((1, 4), dtype=bool),
            np.array([0.3]),
            (4, 4),
        )
        (out * out).mean().backward()
        assert m.adapter_b.w1.grad is not None
        assert np.abs(m.doubles[0].clab.wv.grad).sum() > 0
        assert m.adapter_a.w1.grad is None
        assert m.in_proj.w.grad is None


class TestEquivariance:
    def test_image_token_permutation_without_positions(self):
        m = VelocityModel(ModelConfig(use_positions=False), seed=9)
        randomize_zero_params(m)
        rng = np.random.default_rng(0)
        toks = rng.standard_normal((1, 4, 48))
        at = rng.standard_normal((1, 2, 48))
        am = np.ones((1, 2), dtype=bool)
        t = np.array([0.4])
        base = m.forward_tokens(toks, at, am, None, None, t, (2, 2)).data
        perm = np.array([2, 0, 3, 1])
        permuted = m.forward_tokens(toks[:, perm], at, am, None, None, t, (2, 2)).data
        assert np.allclose(base[:, perm], permuted, atol=1e-12)

    def test_positions_break_permutation_equivariance(self):
        m = VelocityModel(ModelConfig(use_positions=True), seed=9)
        randomize_zero_params(m)
        rng = np.random.default_rng(0)
        toks = rng.standard_normal((1, 4, 48))
        at = rng.standard_normal((1, 2, 48))
        am = np.ones((1, 2), dtype=bool)
        t = np.array([0.4])
        base = m.forward_tokens(toks, at, am, None, None, t, (2, 2)).data
        perm = np.array([2, 0, 3, 1])
        permuted = m.forward_tokens(toks[:, perm], at, am, None, None, t, (2, 2)).data
        assert not np.allclose(base[:, perm], permuted, atol=1e-6)


def test_timestep_embedding_shape_and_distinctness():
    emb = timestep_embedding(np.array([0.0, 0.25, 0.5, 1.0]), 64)
    assert emb.shape == (4, 64)
    assert np.isfinite(emb).all()
    for i in range(3):
        assert not np.allclose(emb[i], emb[i + 1])


def test_same_seed_models_share_backbone_weights():
    m1 = VelocityModel(ModelConfig(), seed=13)
    m2 = VelocityModel(ModelConfig(adapter_branch=False), seed=13)
    p1, p2 = m1.named_params(), m2.named_params()
    for name in m2.backbone_param_names():
        assert np.array_equal(p1[name].data, p2[name].data), name
