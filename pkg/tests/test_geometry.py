import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salpn.geometry import (
    HeightModel,
    PartitionClampWarning,
    PartitionPlan,
    alpha_admissible,
    alpha_bounds,
    estimate_sat_height,
    extract_partitions,
    plan_haas,
    plan_sps,
    plan_square_ring,
    scale_factor,
)

H_S = 189.75


class TestScaleFactor:
    def test_equal_heights(self):
        assert scale_factor(H_S, H_S, 14.0) == 0

    def test_higher(self):
        # (66.25 / 189.75) * 14 = 4.888
        assert scale_factor(256, H_S, 14.0) == 5

    def test_lower(self):
        assert scale_factor(123.5, H_S, 14.0) == -5

    def test_ties_away_from_zero(self):
        # ratio 0.25 * alpha 2 = 0.5 exactly
        assert scale_factor(125.0, 100.0, 2.0) == 1
        assert scale_factor(75.0, 100.0, 2.0) == -1

    def test_bad_sat_height(self):
        with pytest.raises(ValueError):
            scale_factor(100, 0, 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1, 500), st.floats(1, 500), st.floats(0, 40), st.floats(0.01, 100))
    def test_ratio_only(self, hd, hs, alpha, k):
        a = (hd - hs) / hs * alpha
        # skip values sitting on a rounding boundary, where scaling can flip the float
        if abs(abs(a) % 1 - 0.5) < 1e-6:
            return
        assert scale_factor(hd * k, hs * k, alpha) == scale_factor(hd, hs, alpha)

    def test_monotone_in_height(self):
        heights = np.arange(1.0, 500.0, 0.25)
        thetas = [scale_factor(h, H_S, 14.0) for h in heights]
        assert all(b >= a for a, b in zip(thetas, thetas[1:]))


class TestAlphaBounds:
    def test_extended_university_range(self):
        shrink, expand = alpha_bounds(H_S, 361, 18.5, 4, 128)
        assert shrink == pytest.approx(15 * H_S / 171.25)
        assert expand == pytest.approx(48 * H_S / 171.25)
        assert shrink == pytest.approx(16.62, abs=0.01)
        assert expand == pytest.approx(53.19, abs=0.01)

    def test_standard_range(self):
        shrink, expand = alpha_bounds(H_S, 256, 123.5, 4, 128)
        assert shrink == pytest.approx(42.96, abs=0.01)
        assert expand == pytest.approx(137.48, abs=0.01)

    def test_single_part_never_expands(self):
        _, expand = alpha_bounds(H_S, 256, 123.5, 1, 128)
        assert expand == 0

    def test_degenerate_ranges_unbounded(self):
        assert alpha_bounds(H_S, H_S, 100, 4, 128)[0] == math.inf
        assert alpha_bounds(H_S, 300, H_S, 4, 128)[1] == math.inf

    def test_admissibility(self):
        assert alpha_admissible(14.0, H_S, 361, 18.5, 4, 128)
        assert not alpha_admissible(17.0, H_S, 361, 18.5, 4, 128)
        assert not alpha_admissible(-1.0, H_S, 361, 18.5, 4, 128)


class TestHeightModel:
    def test_valid(self):
        hm = HeightModel(256, H_S, 14.0, 361, 18.5)
        assert hm.theta == 5

    def test_rejects_large_alpha(self):
        with pytest.raises(ValueError, match="shrink bound"):
            HeightModel(256, H_S, 17.0, 361, 18.5)

    def test_rejects_out_of_range_height(self):
        with pytest.raises(ValueError):
            HeightModel(400, H_S, 14.0, 361, 18.5)


class TestPlans:
    def test_sps_128_4(self):
        plan = plan_sps(128, 4)
        assert plan.sides == [32, 64, 96, 128]
        assert plan.theta == 0
        assert [(p.row, p.col) for p in plan.parts] == [(48, 48), (32, 32), (16, 16), (0, 0)]

    def test_sps_single(self):
        plan = plan_sps(128, 1)
        assert plan.sides == [128]
        assert (plan.parts[0].row, plan.parts[0].col) == (0, 0)

    def test_sps_non_divisible(self):
        assert plan_sps(128, 3).sides == [43, 85, 128]

    def test_sps_range(self):
        with pytest.raises(ValueError):
            plan_sps(128, 0)
        with pytest.raises(ValueError):
            plan_sps(128, 65)

    def test_haas_shrink(self):
        plan = plan_haas(128, 4, 5)
        assert plan.sides == [22, 54, 86, 118]
        assert not plan.clamped and not plan.warning

    def test_haas_expand_clamps_global(self):
        plan = plan_haas(128, 4, -5)
        assert plan.sides == [42, 74, 106, 128]
        assert plan.clamped and not plan.warning

    def test_haas_zero_is_sps(self):
        for S in (64, 128, 256):
            for N in range(1, 9):
                assert plan_haas(S, N, 0) == plan_sps(S, N)

    def test_haas_overshoot_warns(self):
        with pytest.warns(PartitionClampWarning):
            plan = plan_haas(128, 4, 16)
        assert plan.warning and plan.clamped
        assert plan.sides[0] == 2

    def test_extreme_expansion_all_global(self):
        plan = plan_haas(128, 4, -48)
        assert plan.sides == [128] * 4
        assert not plan.warning

    @settings(max_examples=200, deadline=None)
    @given(st.sampled_from([64, 128, 256]), st.integers(1, 8), st.integers(-40, 40))
    def test_nesting_and_centering(self, S, N, theta):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", PartitionClampWarning)
            plan = plan_haas(S, N, theta)
        c = (S - 1) / 2
        for p in plan.parts:
            assert 2 <= p.side <= S
            assert p.row >= 0 and p.row + p.side <= S
            assert abs(p.row + (p.side - 1) / 2 - c) <= 1
            assert abs(p.col + (p.side - 1) / 2 - c) <= 1
        for inner, outer in zip(plan.parts, plan.parts[1:]):
            assert outer.contains(inner)

    def test_json_roundtrip(self):
        plan = plan_haas(128, 4, -5)
        d = json.loads(plan.to_json())
        assert set(d) >= {"map_size", "theta", "parts", "clamped"}
        assert d["parts"][0] == {"row": 43, "col": 43, "side": 42}
        assert PartitionPlan.from_dict(d) == plan


class TestSquareRing:
    def test_counts(self):
        rings = plan_square_ring(128, 4)
        assert [int(r.sum()) for r in rings] == [1024, 3072, 5120, 7168]
        assert sum(int(r.sum()) for r in rings) == 128 ** 2

    def test_single(self):
        rings = plan_square_ring(128, 1)
        assert len(rings) == 1 and rings[0].all()

    @pytest.mark.parametrize("S,N", [(64, 3), (128, 4), (128, 7), (256, 8)])
    def test_disjoint_cover(self, S, N):
        rings = np.stack(plan_square_ring(S, N)).astype(int)
        np.testing.assert_array_equal(rings.sum(axis=0), 1)


class TestExtract:
    def test_full_map(self):
        t = np.random.default_rng(0).normal(size=(3, 16, 16)).astype(np.float32)
        (part,) = extract_partitions(t, plan_sps(16, 1))
        np.testing.assert_array_equal(part, t)

    def test_haas_shapes(self):
        t = np.zeros((2048, 128, 128), dtype=np.float32)
        shapes = [p.shape for p in extract_partitions(t, plan_haas(128, 4, 5))]
        assert shapes == [(2048, 22, 22), (2048, 54, 54), (2048, 86, 86), (2048, 118, 118)]

    def test_constant(self):
        t = np.full((2, 64, 64), 4.5, dtype=np.float32)
        for p in extract_partitions(t, plan_haas(64, 4, -3)):
            np.testing.assert_array_equal(p, 4.5)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            extract_partitions(np.zeros((1, 64, 64)), plan_sps(128, 4))
        with pytest.raises(ValueError):
            extract_partitions(np.zeros((1, 128, 64)), plan_sps(128, 4))


def test_bound_soundness_standard_range():
    """Heights on a 1 m grid over [123.5, 256] with alpha up to the bound never clamp."""
    shrink, expand = alpha_bounds(H_S, 256, 123.5, 4, 128)
    amax = min(shrink, expand)
    with warnings.catch_warnings():
        warnings.simplefilter("error", PartitionClampWarning)
        for alpha in np.arange(0, amax + 1e-9, 1.0):
            for h in np.append(np.arange(123.5, 256, 1.0), 256.0):
                assert not plan_haas(128, 4, scale_factor(h, H_S, alpha)).warning


def test_estimate_sat_height():
    # satellite pixels cover 1.5x the ground of the reference drone's pixels
    assert estimate_sat_height(126.5, 0.45, 0.3) == pytest.approx(189.75)
    with pytest.raises(ValueError):
        estimate_sat_height(100, 0, 1)
