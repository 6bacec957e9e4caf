import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofm.heatmap import PoseSequence, build_heatmap, condense, heatmaps, normalize_pose


def _pose(points, conf=None):
    return PoseSequence(np.asarray(points, dtype=float), None if conf is None else np.asarray(conf, dtype=float))


class TestNormalize:
    def test_two_points_box(self):
        p = normalize_pose(_pose([[[0, 0], [10, 10]]]), 72, 72, 0.9)
        c = p.coords[0]
        assert np.allclose(c[1] - c[0], [64.8, 64.8])
        assert np.allclose(c.mean(axis=0), [35.5, 35.5])

    def test_idempotent(self):
        once = normalize_pose(_pose([[[3, 1], [9, 17]], [[4, 6], [2, 5]]]), 24, 24)
        twice = normalize_pose(once, 24, 24)
        np.testing.assert_allclose(twice.coords, once.coords, atol=1e-6)

    def test_aspect_preserved(self):
        p = normalize_pose(_pose([[[0, 0], [20, 5]]]), 72, 48, 0.9)
        d = p.coords[0, 1] - p.coords[0, 0]
        assert d[0] == pytest.approx(0.9 * 48) and d[0] / d[1] == pytest.approx(4.0)

    def test_degenerate_goes_to_center(self, caplog):
        p = normalize_pose(_pose([[[5, 5], [5, 5]], [[5, 5], [5, 5]]]), 24, 24)
        assert np.all(p.coords == 11.5) and "degenerate" in caplog.text

    def test_needs_a_finite_point(self):
        with pytest.raises(ValueError):
            normalize_pose(_pose([[[np.nan, np.nan]]]), 24, 24)

    def test_missing_points_stay_missing(self):
        p = normalize_pose(_pose([[[0, 0], [np.nan, 1.0], [4, 4]]]), 24, 24)
        assert not p.valid()[0, 1] and p.valid()[0, [0, 2]].all()

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(-500, 500), st.floats(-500, 500)), min_size=2, max_size=20))
    def test_coords_land_inside(self, pts):
        p = _pose(np.array(pts)[None])
        q = normalize_pose(p, 24, 32)
        assert np.all(q.coords[..., 0] >= -1e-9) and np.all(q.coords[..., 0] <= 31 + 1e-9)
        assert np.all(q.coords[..., 1] >= -1e-9) and np.all(q.coords[..., 1] <= 23 + 1e-9)


class TestBuildHeatmap:
    def test_center_pixel_is_one(self):
        u = build_heatmap(_pose([[[7, 3]]]), 12, 12, 1.3, dtype=np.float64)
        assert u[0, 0, 3, 7] == 1.0 and u.max() == 1.0

    @pytest.mark.parametrize("sigma", [0.6, 1.0, 2.5])
    def test_value_at_sigma(self, sigma):
        u = build_heatmap(_pose([[[5.0, 5.0 - sigma]]]), 12, 12, sigma, dtype=np.float64)
        assert abs(u[0, 0, 5, 5] - math.exp(-0.5)) < 1e-6

    def test_shape_paper_dims(self):
        p = PoseSequence(np.full((48, 17, 2), 30.0))
        assert build_heatmap(p, 72, 72, 0.6).shape == (17, 48, 72, 72)

    def test_formula_brute_force(self):
        rng = np.random.default_rng(0)
        p = _pose(rng.uniform(0, 9, (2, 3, 2)))
        u = build_heatmap(p, 10, 9, 1.7, dtype=np.float64)
        for j in range(3):
            for f in range(2):
                x, y = p.coords[f, j]
                for h in range(10):
                    for w in range(9):
                        ref = math.exp(-((w - x) ** 2 + (h - y) ** 2) / (2 * 1.7 ** 2))
                        assert abs(u[j, f, h, w] - ref) < 1e-12

    def test_missing_keypoint_slice_is_zero(self):
        p = _pose([[[3, 3], [np.nan, 2], [4, 4]]], conf=[[1.0, 1.0, 0.0]])
        u = build_heatmap(p, 8, 8, 1.0)
        assert u[1].max() == 0 and u[2].max() == 0 and u[0].max() == 1

    def test_confidence_scaling_optional(self):
        p = _pose([[[3, 3]]], conf=[[0.25]])
        assert build_heatmap(p, 8, 8, 1.0).max() == 1.0
        assert build_heatmap(p, 8, 8, 1.0, use_confidence=True).max() == 0.25

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            build_heatmap(_pose([[[1, 1]]]), 4, 4, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(3, 8), st.floats(3, 8), st.integers(-2, 2), st.integers(-2, 2))
    def test_translation_equivariance(self, x, y, dx, dy):
        a = build_heatmap(_pose([[[x, y]]]), 16, 16, 1.0, dtype=np.float64)
        b = build_heatmap(_pose([[[x + dx, y + dy]]]), 16, 16, 1.0, dtype=np.float64)
        inner = np.s_[0, 0, 3:13, 3:13]
        shifted = np.s_[0, 0, 3 + dy:13 + dy, 3 + dx:13 + dx]
        np.testing.assert_allclose(b[shifted], a[inner], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 15), st.integers(0, 15), st.floats(-1, 1), st.floats(-1, 1))
    def test_monotone_decay_along_rays(self, px, py, ux, uy):
        u = build_heatmap(_pose([[[px, py]]]), 16, 16, 1.5, dtype=np.float64)[0, 0]
        norm = math.hypot(ux, uy)
        if norm < 1e-3:
            return
        vals = []
        for t in range(0, 30):
            h, w = round(py + uy / norm * t * 0.5), round(px + ux / norm * t * 0.5)
            if not (0 <= h < 16 and 0 <= w < 16):
                break
            vals.append(((h - py) ** 2 + (w - px) ** 2, u[h, w]))
        vals.sort()
        assert all(a[1] >= b[1] - 1e-15 for a, b in zip(vals, vals[1:]))


class TestCondense:
    def test_single_joint_is_identity(self):
        u = np.random.default_rng(0).random((1, 3, 5, 5))
        np.testing.assert_array_equal(condense(u), u[0])

    def test_disjoint_peaks_survive(self):
        u = build_heatmap(_pose([[[1, 1], [8, 8]]]), 10, 10, 0.8)
        r = condense(u)
        assert r[0, 1, 1] == 1.0 and r[0, 8, 8] == 1.0

    def test_brute_force_max(self):
        u = np.random.default_rng(1).random((4, 3, 5, 6))
        ref = np.empty((3, 5, 6))
        for f in range(3):
            for h in range(5):
                for w in range(6):
                    ref[f, h, w] = max(u[j, f, h, w] for j in range(4))
        assert np.array_equal(condense(u), ref)

    def test_commutes_with_frame_slicing(self):
        u = np.random.default_rng(2).random((3, 6, 4, 4))
        assert np.array_equal(condense(u[:, 2:5]), condense(u)[2:5])

    def test_batched(self):
        u = np.random.default_rng(3).random((2, 3, 4, 5, 5))
        assert np.array_equal(condense(u)[1], condense(u[1]))


def test_heatmaps_stack():
    poses = [_pose([[[1, 2], [3, 4]]]), _pose([[[0, 0], [5, 5]]])]
    u = heatmaps(poses, 8, 8, 1.0)
    assert u.shape == (2, 2, 1, 8, 8)
    np.testing.assert_array_equal(u[1], build_heatmap(poses[1], 8, 8, 1.0))


def test_pose_validation():
    with pytest.raises(ValueError):
        PoseSequence(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PoseSequence(np.zeros((2, 3, 2)), confidence=np.ones((2, 2)))
