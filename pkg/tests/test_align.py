"""Alignment losses: pooled, interpolated, and the threshold gate."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duoflow.align import (
    AlignError,
    AlignmentConfig,
    LossReport,
    gated_ra_loss,
    inter_loss,
    interp_seq,
    pool_loss,
)
from duoflow.tensor import Tensor
from duoflow.text import TextEmbedding, empty_embedding


def emb(data, language="b", requires_grad=False):
    arr = np.asarray(data, dtype=np.float64)
    return TextEmbedding(
        language=language,
        vectors=Tensor(arr, requires_grad=requires_grad),
        mask=np.ones((arr.shape[0],), dtype=bool),
    )


def oracle_resample(x: np.ndarray, target_len: int) -> np.ndarray:
    """Independent linear resampler built on np.interp per channel."""
    src_len = x.shape[0]
    if target_len == 1:
        return x.mean(axis=0, keepdims=True)
    coords = np.arange(target_len) * (src_len - 1) / (target_len - 1)
    out = np.zeros((target_len, x.shape[1]))
    for d in range(x.shape[1]):
        out[:, d] = np.interp(coords, np.arange(src_len), x[:, d])
    return out


class TestPoolLoss:
    def test_identical_sequences_zero(self):
        x = np.random.default_rng(0).standard_normal((4, 8))
        assert float(pool_loss(emb(x), emb(x, "a")).data) == 0.0

    def test_pooling_collapses_length(self):
        u = np.array([1.0, 3.0, -2.0])
        v = np.array([5.0, -1.0, 4.0])
        b = emb(np.stack([u, v]))
        a = emb(((u + v) / 2.0)[None], "a")
        assert float(pool_loss(b, a).data) <= 1e-30

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            lb, la = rng.integers(1, 9), rng.integers(1, 9)
            xb = rng.standard_normal((lb, 16))
            xa = rng.standard_normal((la, 16))
            got = float(pool_loss(emb(xb), emb(xa, "a")).data)
            want = float(np.mean((xb.mean(axis=0) - xa.mean(axis=0)) ** 2))
            assert abs(got - want) <= 1e-12 * max(1.0, abs(want))

    def test_empty_rejected(self):
        with pytest.raises(AlignError):
            pool_loss(empty_embedding("b", 8), emb(np.zeros((1, 8)), "a"))
        with pytest.raises(AlignError):
            pool_loss(emb(np.zeros((1, 8))), empty_embedding("a", 8))


class TestInterpSeq:
    def test_same_length_is_identity(self):
        e = emb(np.random.default_rng(0).standard_normal((5, 4)))
        out = interp_seq(e, 5)
        assert out is e

    def test_two_to_three_midpoint(self):
        a = np.array([0.0, 2.0])
        b = np.array([4.0, 8.0])
        out = interp_seq(emb(np.stack([a, b])), 3)
        want = np.stack([a, (a + b) / 2.0, b])
        assert np.allclose(out.vectors.data, want, atol=1e-15)

    def test_five_to_three_matches_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 12))
        out = interp_seq(emb(x), 3)
        assert np.abs(out.vectors.data - oracle_resample(x, 3)).max() <= 1e-12

    def test_target_one_is_source_mean(self):
        x = np.random.default_rng(3).standard_normal((6, 4))
        out = interp_seq(emb(x), 1)
        assert np.allclose(out.vectors.data, x.mean(axis=0, keepdims=True), atol=1e-15)

    def test_single_source_token_broadcasts(self):
        x = np.random.default_rng(4).standard_normal((1, 4))
        out = interp_seq(emb(x), 4)
        assert np.allclose(out.vectors.data, np.repeat(x, 4, axis=0), atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(min_value=1, max_value=10),
        st.integers(min_value=1, max_value=10),
        st.floats(min_value=-5, max_value=5, allow_nan=False),
    )
    def test_constant_sequences_are_fixed_points(self, src, dst, value):
        x = np.full((src, 3), value)
        out = interp_seq(emb(x), dst)
        assert np.allclose(out.vectors.data, value, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=2, max_value=10), st.integers(min_value=2, max_value=10))
    def test_rows_are_convex_combinations(self, src, dst):
        from duoflow.align import _interp_weights

        w = _interp_weights(src, dst)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert (w >= 0).all()
        assert (np.count_nonzero(w, axis=1) <= 2).all()

    def test_empty_rejected(self):
        with pytest.raises(AlignError):
            interp_seq(empty_embedding("a", 4), 3)
        with pytest.raises(ValueError):
            interp_seq(emb(np.zeros((2, 4))), 0)


class TestInterLoss:
    def test_identical_equal_length_zero(self):
        x = np.random.default_rng(0).standard_normal((4, 8))
        assert float(inter_loss(emb(x), emb(x, "a")).data) == 0.0

    def test_constant_sequences_zero_across_lengths(self):
        b = emb(np.full((5, 6), 2.5))
        a = emb(np.full((3, 6), 2.5), "a")
        assert float(inter_loss(b, a).data) <= 1e-28

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            lb, la = rng.integers(1, 9), rng.integers(1, 9)
            xb = rng.standard_normal((lb, 16))
            xa = rng.standard_normal((la, 16))
            got = float(inter_loss(emb(xb), emb(xa, "a")).data)
            want = float(np.mean((xb - oracle_resample(xa, lb)) ** 2))
            assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


class TestGate:
    def test_above_threshold_keeps_sum(self):
        cfg = AlignmentConfig(d_threshold=0.05)
        l_ra, fired = gated_ra_loss(0.04, 0.03, cfg)
        assert np.isclose(l_ra, 0.07) and not fired

    def test_below_threshold_equation_keeps_pool(self):
        cfg = AlignmentConfig(d_threshold=0.05, gate_mode="equation")
        l_ra, fired = gated_ra_loss(0.01, 0.02, cfg)
        assert np.isclose(l_ra, 0.01) and fired

    def test_below_threshold_text_keeps_nothing(self):
        cfg = AlignmentConfig(d_threshold=0.05, gate_mode="text")
        l_ra, fired = gated_ra_loss(0.01, 0.02, cfg)
        assert l_ra == 0.0 and fired

    def test_boundary_counts_as_above(self):
        cfg = AlignmentConfig(d_threshold=0.05)
        l_ra, fired = gated_ra_loss(0.02, 0.03, cfg)
        assert np.isclose(l_ra, 0.05) and not fired

    def test_zero_threshold_never_fires(self):
        cfg = AlignmentConfig(d_threshold=0.0)
        for lp, li in ((0.0, 0.0), (0.1, 0.0), (0.0, 0.1), (1.0, 2.0)):
            l_ra, fired = gated_ra_loss(lp, li, cfg)
            assert not fired
            assert np.isclose(l_ra, lp + li)

    def test_negative_terms_rejected(self):
        with pytest.raises(ValueError):
            gated_ra_loss(-0.1, 0.0, AlignmentConfig())

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(min_value=0, max_value=0.2, allow_nan=False),
        st.floats(min_value=0, max_value=0.2, allow_nan=False),
        st.floats(min_value=0, max_value=0.2, allow_nan=False),
    )
    def test_equation_mode_consistency(self, lp, li, d):
        cfg = AlignmentConfig(d_threshold=d, gate_mode="equation")
        l_ra, fired = gated_ra_loss(lp, li, cfg)
        if lp + li >= d:
            assert not fired and np.isclose(l_ra, lp + li)
        else:
            assert fired and np.isclose(l_ra, lp)

    def test_monotone_in_l_inter_above_threshold(self):
        cfg = AlignmentConfig(d_threshold=0.05)
        prev = -1.0
        for li in np.linspace(0.05, 0.5, 10):
            l_ra, _ = gated_ra_loss(0.01, float(li), cfg)
            assert l_ra >= prev
            prev = l_ra

    def test_independent_of_l_inter_below_threshold(self):
        cfg = AlignmentConfig(d_threshold=0.5, gate_mode="equation")
        base, _ = gated_ra_loss(0.01, 0.0, cfg)
        for li in (0.05, 0.1, 0.2):
            l_ra, fired = gated_ra_loss(0.01, li, cfg)
            assert fired and np.isclose(l_ra, base)

    def test_tensor_inputs_stay_on_tape(self):
        cfg = AlignmentConfig(d_threshold=0.05)
        lp = Tensor(np.asarray(0.2), requires_grad=True)
        li = Tensor(np.asarray(0.3), requires_grad=True)
        l_ra, fired = gated_ra_loss(lp, li, cfg)
        assert not fired
        l_ra.backward()
        assert lp.grad is not None and li.grad is not None

    def test_gate_is_stop_decision(self):
        # below threshold in equation mode: gradient reaches only l_p
        cfg = AlignmentConfig(d_threshold=10.0, gate_mode="equation")
        lp = Tensor(np.asarray(0.2), requires_grad=True)
        li = Tensor(np.asarray(0.3), requires_grad=True)
        l_ra, fired = gated_ra_loss(lp, li, cfg)
        assert fired
        l_ra.backward()
        assert lp.grad is not None
        assert li.grad is None


class TestGradientFlow:
    def test_gradient_reaches_b_not_a(self):
        rng = np.random.default_rng(6)
        b = emb(rng.standard_normal((4, 8)), requires_grad=True)
        a = emb(rng.standard_normal((6, 8)), "a")
        total = pool_loss(b, a) + inter_loss(b, a)
        total.backward()
        assert b.vectors.grad is not None
        assert np.abs(b.vectors.grad).sum() > 0
        assert a.vectors.grad is None


class TestLossReport:
    def test_total_invariant_enforced(self):
        LossReport(l_gen=1.0, l_p=0.1, l_inter=0.2, l_ra=0.3, total=1.3, gate_fired=False)
        with pytest.raises(ValueError):
            LossReport(l_gen=1.0, l_p=0.1, l_inter=0.2, l_ra=0.3, total=2.0, gate_fired=False)
