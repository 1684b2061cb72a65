"""Quantizer semantics: worked examples, rounding, ranges, STE, integer matmul."""

import numpy as np
import pytest

from hessq import quantizer as Q
from hessq import tensor as T


class TestQuantSpec:
    def test_validation(self):
        with pytest.raises(Q.QuantError):
            Q.QuantSpec(bits=0)
        with pytest.raises(Q.QuantError):
            Q.QuantSpec(bits=17)
        with pytest.raises(Q.QuantError):
            Q.QuantSpec(bits=4, range_policy="median")
        with pytest.raises(Q.QuantError):
            Q.QuantSpec(bits=4, range_policy="percentile")
        with pytest.raises(Q.QuantError):
            Q.QuantSpec(bits=4, range_policy="percentile", percentile=1.5)
        Q.QuantSpec(bits=4, range_policy="percentile", percentile=0.8)


class TestQuantRange:
    def test_delta(self):
        r = Q.QuantRange.from_bounds(0.0, 1.0, 2)
        assert r.delta == 1.0 / 3.0
        assert (r.q0, r.q_max) == (0.0, 1.0)

    def test_degenerate_collapses(self):
        r = Q.QuantRange.from_bounds(2.0, 2.0, 8)
        assert r.delta == 0.0
        r = Q.QuantRange.from_bounds(2.0, -1.0, 8)  # inverted bounds collapse too
        assert (r.q0, r.q_max, r.delta) == (2.0, 2.0, 0.0)


class TestSelectRange:
    def test_minmax(self):
        r = Q.select_range(np.array([3.0, -1.0, 0.5]), Q.QuantSpec(bits=4))
        assert (r.q0, r.q_max) == (-1.0, 3.0)

    def test_percentile_order_statistics(self):
        # ten points 0..9 at p=0.8 keep indices 1..8 of the sorted values
        vals = np.arange(10, dtype=np.float64)
        np.random.default_rng(0).shuffle(vals)
        spec = Q.QuantSpec(bits=4, range_policy="percentile", percentile=0.8)
        r = Q.select_range(vals, spec)
        assert (r.q0, r.q_max) == (1.0, 8.0)

    def test_percentile_full_mass_equals_minmax(self):
        vals = np.random.default_rng(1).standard_normal(50)
        spec = Q.QuantSpec(bits=4, range_policy="percentile", percentile=1.0)
        r = Q.select_range(vals, spec)
        assert (r.q0, r.q_max) == (vals.min(), vals.max())

    def test_errors(self):
        with pytest.raises(Q.QuantError):
            Q.select_range(np.array([]), Q.QuantSpec(bits=4))
        with pytest.raises(Q.QuantError):
            Q.select_range(np.array([1.0, np.nan]), Q.QuantSpec(bits=4))


class TestQuantizeDequantize:
    def test_worked_example(self):
        x = np.array([-1.0, 0.25, 0.9, 2.0])
        r = Q.QuantRange.from_bounds(0.0, 1.0, 2)
        qt = Q.quantize_forward(x, r, 2)
        np.testing.assert_array_equal(qt.codes, [0, 1, 3, 3])
        np.testing.assert_array_equal(Q.dequantize(qt), [0.0, 1.0 / 3.0, 1.0, 1.0])

    def test_codes_dtype_and_shape(self):
        x = np.random.default_rng(2).standard_normal((3, 5))
        r = Q.select_range(x, Q.QuantSpec(bits=8))
        qt = Q.quantize_forward(x, r, 8)
        assert qt.codes.dtype == np.uint16
        assert qt.shape == (3, 5)

    def test_degenerate_range_dequantizes_to_q0(self):
        x = np.array([5.0, 5.0])
        r = Q.QuantRange.from_bounds(5.0, 5.0, 4)
        qt = Q.quantize_forward(x, r, 4)
        np.testing.assert_array_equal(qt.codes, [0, 0])
        np.testing.assert_array_equal(Q.dequantize(qt), [5.0, 5.0])

    def test_requantizing_dequantized_is_stable(self):
        rng = np.random.default_rng(3)
        for bits in (1, 2, 4, 8):
            x = rng.standard_normal(100) * 4
            r = Q.select_range(x, Q.QuantSpec(bits=bits))
            qt = Q.quantize_forward(x, r, bits)
            again = Q.quantize_forward(Q.dequantize(qt), r, bits)
            np.testing.assert_array_equal(qt.codes, again.codes)

    def test_fake_quantize_matches_two_step(self):
        x = np.random.default_rng(4).standard_normal((7, 3)).astype(np.float32)
        r = Q.select_range(x, Q.QuantSpec(bits=3))
        fused = Q.fake_quantize(x, r, 3)
        assert fused.dtype == np.float32
        two_step = Q.dequantize(Q.quantize_forward(x, r, 3), dtype=np.float32)
        np.testing.assert_array_equal(fused, two_step)

    def test_rejects_non_finite(self):
        r = Q.QuantRange.from_bounds(0.0, 1.0, 2)
        with pytest.raises(Q.QuantError):
            Q.quantize_forward(np.array([np.inf]), r, 2)

    def test_error_bounded_by_half_step(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(500)
        r = Q.select_range(x, Q.QuantSpec(bits=5))
        err = np.abs(Q.dequantize(Q.quantize_forward(x, r, 5)) - x)
        assert err.max() <= r.delta / 2 + 1e-12


class TestSTE:
    def test_mask_passes_in_range_only(self):
        x = np.array([-2.0, 0.0, 0.5, 1.0, 3.0])
        up = np.full(5, 7.0)
        r = Q.QuantRange.from_bounds(0.0, 1.0, 2)
        got = Q.ste_backward(up, x, r)
        np.testing.assert_array_equal(got, [0.0, 7.0, 7.0, 7.0, 0.0])

    def test_shape_mismatch(self):
        r = Q.QuantRange.from_bounds(0.0, 1.0, 2)
        with pytest.raises(Q.QuantError):
            Q.ste_backward(np.ones(3), np.ones(4), r)

    def test_graph_node_forward_and_gradient(self):
        x = np.array([[-2.0, 0.25, 0.5], [0.75, 1.0, 3.0]])
        p = T.parameter(x)
        node = Q.fake_quant_node(
            p, np.array([0, 2], dtype=np.int64), 2, np.array([0.0]), np.array([1.0])
        )
        np.testing.assert_array_equal(
            node.data, Q.fake_quantize(x, Q.QuantRange.from_bounds(0.0, 1.0, 2), 2)
        )
        (g,) = T.grad(T.sum_all(node), [p])
        np.testing.assert_array_equal(g.data, [[0.0, 1.0, 1.0], [1.0, 1.0, 0.0]])

    def test_tensorwise_node_uses_fixed_range(self):
        x = np.linspace(-1, 2, 12).reshape(3, 4)
        p = T.parameter(x)
        r = Q.QuantRange.from_bounds(0.0, 1.0, 4)
        node = Q.fake_quant_tensorwise(p, r, 4)
        np.testing.assert_array_equal(node.data, Q.fake_quantize(x, r, 4))
        (g,) = T.grad(T.sum_all(node), [p])
        np.testing.assert_array_equal(g.data, ((x >= 0.0) & (x <= 1.0)).astype(np.float64))


class TestIntegerMatmulSim:
    def test_matches_dequantized_matmul(self):
        rng = np.random.default_rng(6)
        for bits_a, bits_b in [(2, 2), (4, 8), (8, 8), (16, 3)]:
            a = rng.standard_normal((5, 7)) * 3
            b = rng.standard_normal((7, 4)) - 1
            qa = Q.quantize_forward(a, Q.select_range(a, Q.QuantSpec(bits=bits_a)), bits_a)
            qb = Q.quantize_forward(b, Q.select_range(b, Q.QuantSpec(bits=bits_b)), bits_b)
            got = Q.integer_matmul_sim(qa, qb)
            want = Q.dequantize(qa) @ Q.dequantize(qb)
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_overflow_guard_triggers_on_huge_inner_dim(self):
        # stride-0 views: a matrix large enough to overflow int64 without
        # allocating it; the guard must fire before the kernel runs
        inner = 2**63 // (2**16 - 1) ** 2 + 1
        a = Q.QuantizedTensor(
            np.broadcast_to(np.uint16(65535), (1, inner)), Q.QuantRange(0.0, 1.0, 1.0), 16
        )
        b = Q.QuantizedTensor(
            np.broadcast_to(np.uint16(65535), (inner, 1)), Q.QuantRange(0.0, 1.0, 1.0), 16
        )
        with pytest.raises(OverflowError):
            Q.integer_matmul_sim(a, b)

    def test_shape_validation(self):
        r = Q.QuantRange(0.0, 1.0, 1.0)
        a = Q.QuantizedTensor(np.zeros((2, 3), dtype=np.uint16), r, 4)
        b = Q.QuantizedTensor(np.zeros((4, 2), dtype=np.uint16), r, 4)
        with pytest.raises(Q.QuantError):
            Q.integer_matmul_sim(a, b)
        c = Q.QuantizedTensor(np.zeros(3, dtype=np.uint16), r, 4)
        with pytest.raises(Q.QuantError):
            Q.integer_matmul_sim(a, c)


class TestActivationObserver:
    def test_ema_hand_math(self):
        obs = Q.ActivationObserver(decay=0.9)
        obs.update(np.array([0.0, 1.0]))
        assert (obs.ema_min, obs.ema_max) == (0.0, 1.0)
        obs.update(np.array([-1.0, 3.0]))
        assert obs.ema_min == pytest.approx(-0.1)
        assert obs.ema_max == pytest.approx(1.2)

    def test_freeze_stops_updates(self):
        obs = Q.ActivationObserver()
        obs.update(np.array([0.0, 1.0]))
        obs.freeze()
        obs.update(np.array([-100.0, 100.0]))
        assert (obs.ema_min, obs.ema_max) == (0.0, 1.0)

    def test_empty_batch_ignored(self):
        obs = Q.ActivationObserver()
        obs.update(np.array([]))
        assert obs.ema_min is None

    def test_range_before_data_errors(self):
        with pytest.raises(Q.QuantError):
            Q.ActivationObserver().range(8)

    def test_state_roundtrip_is_frozen(self):
        obs = Q.ActivationObserver(decay=0.8)
        obs.update(np.array([-2.0, 5.0]))
        clone = Q.ActivationObserver.from_state(obs.state())
        assert clone.frozen
        assert (clone.ema_min, clone.ema_max) == (-2.0, 5.0)
        r1, r2 = obs.range(8), clone.range(8)
        assert (r1.q0, r1.q_max, r1.delta) == (r2.q0, r2.q_max, r2.delta)

    def test_bad_decay(self):
        with pytest.raises(Q.QuantError):
            Q.ActivationObserver(decay=1.0)
