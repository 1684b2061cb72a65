"""Row-group construction and group-wise quantization against per-group oracles."""

import numpy as np
import pytest

from hessq import groups as G
from hessq.quantizer import QuantError, QuantSpec, dequantize, quantize_forward, select_range


class TestBuildGroupSpec:
    def test_reference_group_counts(self):
        assert G.build_group_spec(768, 12, "per_head").n_groups == 12
        assert G.build_group_spec(768, 12, "bucketed", bucket_size=6).n_groups == 128
        assert G.build_group_spec(768, 12, "layerwise").n_groups == 1

    def test_per_head_blocks_are_contiguous_equal(self):
        spec = G.build_group_spec(768, 12, "per_head")
        assert spec.starts == tuple(range(0, 769, 64))
        assert spec.sizes() == [64] * 12

    def test_bucketed_trailing_partial_bucket(self):
        spec = G.build_group_spec(10, 1, "bucketed", bucket_size=4)
        assert spec.starts == (0, 4, 8, 10)
        assert spec.sizes() == [4, 4, 2]

    def test_groups_partition_rows(self):
        for mode, kw in [("layerwise", {}), ("per_head", {}), ("bucketed", {"bucket_size": 7})]:
            spec = G.build_group_spec(96, 4, mode, **kw)
            assert spec.starts[0] == 0
            assert spec.starts[-1] == 96
            assert sum(spec.sizes()) == 96

    def test_validation(self):
        with pytest.raises(QuantError):
            G.build_group_spec(10, 3, "per_head")  # not divisible
        with pytest.raises(QuantError):
            G.build_group_spec(0, 1, "layerwise")
        with pytest.raises(QuantError):
            G.build_group_spec(8, 2, "stripes")
        with pytest.raises(QuantError):
            G.build_group_spec(8, 2, "bucketed")  # bucket_size missing


class TestGroupwiseQuantize:
    def test_matches_independent_per_group_quantization(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 5)) * 3
        spec = G.build_group_spec(12, 3, "per_head")
        qspec = QuantSpec(bits=3)
        gq = G.groupwise_quantize(x, spec, qspec)
        for g in range(spec.n_groups):
            block = x[spec.starts[g] : spec.starts[g + 1]]
            solo = quantize_forward(block, select_range(block, qspec), 3)
            np.testing.assert_array_equal(gq.codes[spec.starts[g] : spec.starts[g + 1]], solo.codes)
            np.testing.assert_array_equal(
                G.groupwise_dequantize(gq)[spec.starts[g] : spec.starts[g + 1]],
                dequantize(solo),
            )

    def test_percentile_policy_routes_per_group(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((8, 10))
        spec = G.build_group_spec(8, 2, "per_head")
        qspec = QuantSpec(bits=4, range_policy="percentile", percentile=0.8)
        ranges = G.group_ranges(x, spec, qspec)
        for g, r in enumerate(ranges):
            want = select_range(x[spec.starts[g] : spec.starts[g + 1]], qspec)
            assert (r.q0, r.q_max) == (want.q0, want.q_max)

    def test_row_count_mismatch(self):
        spec = G.build_group_spec(8, 2, "per_head")
        with pytest.raises(QuantError):
            G.groupwise_quantize(np.zeros((9, 2)), spec, QuantSpec(bits=2))

    def test_error_bound_holds_and_tightens_with_groups(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((16, 6)) * np.linspace(0.5, 8, 16)[:, None]
        qspec = QuantSpec(bits=3)
        fine = G.groupwise_quantize(x, G.build_group_spec(16, 4, "per_head"), qspec)
        coarse = G.groupwise_quantize(x, G.build_group_spec(16, 1, "layerwise"), qspec)
        err_fine = np.abs(G.groupwise_dequantize(fine) - x)
        err_coarse = np.abs(G.groupwise_dequantize(coarse) - x)
        assert (err_fine <= G.error_bound(fine) + 1e-12).all()
        assert (err_coarse <= G.error_bound(coarse) + 1e-12).all()
        # minmax subranges are never wider than the whole-tensor range
        assert (G.error_bound(fine) <= G.error_bound(coarse) + 1e-12).all()

    def test_higher_rank_tensors_flatten_trailing_axes(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 2, 4))
        spec = G.build_group_spec(6, 2, "per_head")
        gq = G.groupwise_quantize(x, spec, QuantSpec(bits=4))
        assert gq.shape == (6, 2, 4)
        flat = G.groupwise_quantize(x.reshape(6, 8), spec, QuantSpec(bits=4))
        np.testing.assert_array_equal(gq.codes.reshape(6, 8), flat.codes)


class TestGroupPolicy:
    def test_validation(self):
        with pytest.raises(QuantError):
            G.GroupPolicy(mode="diagonal")
        with pytest.raises(QuantError):
            G.GroupPolicy(mode="bucketed")
        with pytest.raises(QuantError):
            G.GroupPolicy(mode="count")

    def test_layerwise_resolves_to_one_group(self):
        spec = G.GroupPolicy().resolve(64, 4, is_attention=True)
        assert spec.n_groups == 1

    def test_per_head_attention_vs_other(self):
        pol = G.GroupPolicy(mode="per_head")
        att = pol.resolve(64, 4, is_attention=True)
        assert att.mode == "per_head"
        assert att.n_groups == 4
        ffn = pol.resolve(128, 4, is_attention=False)  # buckets of ceil(128/4)
        assert ffn.n_groups == 4
        assert ffn.sizes() == [32, 32, 32, 32]

    def test_count_mode(self):
        spec = G.GroupPolicy(mode="count", count=4).resolve(10, 2, is_attention=False)
        assert spec.n_groups == 4
        assert spec.sizes() == [3, 3, 3, 1]

    def test_bucketed_mode(self):
        spec = G.GroupPolicy(mode="bucketed", bucket_size=6).resolve(768, 12, is_attention=True)
        assert spec.n_groups == 128
