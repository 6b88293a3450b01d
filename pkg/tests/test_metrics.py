import json

import numpy as np
import pytest

from cycreg.errors import DataError, EmptyMaskError, GridMismatchError
from cycreg.fields import warp
from cycreg.grid import INTENSITY, MASK, Grid, VectorField3, Volume3
from cycreg.metrics import (
    MetricsReport,
    burden_ml,
    burden_relative_error,
    cycle_l1,
    dsc,
    extract_tumor_instances,
    match_tumors,
    mi,
    ncc,
    per_tumor_burden_errors,
)

from conftest import make_grid, smooth_field, sphere_mask


def box_mask(grid, lo, hi):
    data = np.zeros(grid.dims)
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1.0
    return Volume3(grid, data, MASK)


class TestDsc:
    def test_identical(self):
        m = sphere_mask(make_grid(10), (5, 5, 5), 3.0)
        assert dsc(m, m) == 1.0

    def test_disjoint(self):
        g = Grid((12, 12, 12))
        assert dsc(sphere_mask(g, (3, 3, 3), 1.5),
                   sphere_mask(g, (9, 9, 9), 1.5)) == 0.0

    def test_half_overlap(self):
        g = make_grid(8)
        a = box_mask(g, (0, 0, 0), (4, 8, 8))
        b = box_mask(g, (2, 0, 0), (6, 8, 8))
        assert dsc(a, b) == pytest.approx(0.5)

    def test_symmetric_and_both_empty(self, rng):
        g = make_grid(8)
        a = Volume3(g, (rng.random(g.dims) > 0.5).astype(float), MASK)
        b = Volume3(g, (rng.random(g.dims) > 0.5).astype(float), MASK)
        assert dsc(a, b) == dsc(b, a)
        empty = Volume3(g, np.zeros(g.dims), MASK)
        assert dsc(empty, empty) == 1.0


class TestNcc:
    def test_self_correlation(self, rng):
        g = make_grid(10)
        a = Volume3(g, rng.random(g.dims))
        mask = sphere_mask(g, (5, 5, 5), 4.0)
        assert ncc(a, a, mask) == pytest.approx(1.0)

    def test_affine_intensity_invariance(self, rng):
        g = make_grid(10)
        a = Volume3(g, rng.random(g.dims))
        b = Volume3(g, 3.0 * a.data + 0.7)
        mask = sphere_mask(g, (5, 5, 5), 4.0)
        assert ncc(a, b, mask) == pytest.approx(1.0)

    def test_negation(self, rng):
        g = make_grid(10)
        a = Volume3(g, rng.random(g.dims))
        b = Volume3(g, -a.data)
        mask = sphere_mask(g, (5, 5, 5), 4.0)
        assert ncc(a, b, mask) == pytest.approx(-1.0)

    def test_zero_variance_rejected(self):
        g = make_grid(8)
        const = Volume3(g, np.full(g.dims, 0.5))
        mask = sphere_mask(g, (4, 4, 4), 3.0)
        with pytest.raises(DataError):
            ncc(const, const, mask)


class TestMi:
    def test_constant_images_zero(self):
        g = make_grid(8)
        a = Volume3(g, np.full(g.dims, 0.3))
        mask = sphere_mask(g, (4, 4, 4), 3.0)
        assert mi(a, a, mask) == 0.0

    def test_checkerboard_self_information(self):
        # two equally likely values: entropy of a fair binary variable
        g = make_grid(8)
        coords = np.indices(g.dims)
        data = ((coords.sum(axis=0) % 2) == 0).astype(float)
        vol = Volume3(g, data)
        mask = Volume3(g, np.ones(g.dims), MASK)
        assert mi(vol, vol, mask) == pytest.approx(np.log(2.0), rel=1e-9)

    def test_bounded_by_self_information(self, rng):
        g = make_grid(8)
        mask = Volume3(g, np.ones(g.dims), MASK)
        for _ in range(100):
            a = Volume3(g, rng.random(g.dims))
            b = Volume3(g, rng.random(g.dims))
            assert mi(a, b, mask) <= mi(a, a, mask) + 1e-12

    def test_symmetry(self, rng):
        g = make_grid(8)
        mask = Volume3(g, np.ones(g.dims), MASK)
        a = Volume3(g, rng.random(g.dims))
        b = Volume3(g, rng.random(g.dims))
        assert mi(a, b, mask) == pytest.approx(mi(b, a, mask), rel=1e-12)


class TestCycleL1:
    def test_identity(self, rng):
        g = make_grid(8)
        a = Volume3(g, rng.random(g.dims))
        assert cycle_l1(a, a) == 0.0

    def test_constant_offset(self, rng):
        g = make_grid(8)
        a = Volume3(g, np.clip(rng.random(g.dims), 0, 0.9))
        b = Volume3(g, a.data + 0.1)
        assert cycle_l1(a, b) == pytest.approx(0.1, rel=1e-12)

    def test_masked(self, rng):
        g = make_grid(8)
        a = Volume3(g, np.zeros(g.dims))
        diff = np.zeros(g.dims)
        diff[0, 0, 0] = 1.0  # outside the mask below
        b = Volume3(g, diff)
        mask = sphere_mask(g, (5, 5, 5), 2.0)
        assert cycle_l1(a, b, mask) == 0.0


class TestTumorMatching:
    def test_identical_single_tumor(self):
        g = make_grid(16)
        t = sphere_mask(g, (8, 8, 8), 3.0)
        matches = match_tumors(t, t)
        assert len(matches) == 1
        assert matches[0].inclusion == pytest.approx(1.0)
        assert matches[0].matched

    def test_five_percent_not_matched(self):
        # warped tumor covers 5% of the fixed tumor: below the 10% rule
        g = Grid((20, 20, 20))
        fixed = box_mask(g, (5, 5, 5), (15, 10, 9))   # 10*5*4 = 200 voxels
        warped = box_mask(g, (5, 5, 5), (10, 7, 6))   # overlap 5*2*1 = 10
        matches = match_tumors(warped, fixed)
        assert len(matches) == 1
        assert matches[0].inclusion == pytest.approx(0.05)
        assert not matches[0].matched

    def test_two_fixed_one_warped(self):
        g = Grid((24, 24, 24))
        f = np.zeros(g.dims)
        f[2:6, 2:6, 2:6] = 1.0      # tumor 1: 64 voxels
        f[14:18, 14:18, 14:18] = 1.0  # tumor 2
        fixed = Volume3(g, f, MASK)
        w = np.zeros(g.dims)
        w[2:6, 2:6, 2:4] = 1.0      # covers half of tumor 1 only
        warped = Volume3(g, w, MASK)
        matches = match_tumors(warped, fixed)
        assert len(matches) == 2
        matched = [m for m in matches if m.matched]
        assert len(matched) == 1
        assert matched[0].inclusion == pytest.approx(0.5)

    def test_monotone_under_dilation(self):
        from scipy import ndimage
        g = Grid((20, 20, 20))
        fixed = sphere_mask(g, (10, 10, 10), 4.0)
        warped = sphere_mask(g, (12, 10, 10), 3.0)
        before = match_tumors(warped, fixed)
        grown = Volume3(g, ndimage.binary_dilation(
            warped.data > 0.5, iterations=2).astype(float), MASK)
        after = match_tumors(grown, fixed)
        for b, a in zip(before, after):
            if b.matched:
                assert a.matched

    def test_no_tumors_empty_report(self):
        g = make_grid(8)
        empty = Volume3(g, np.zeros(g.dims), MASK)
        assert match_tumors(empty, empty) == []

    def test_instances_26_connected(self):
        g = Grid((10, 10, 10))
        data = np.zeros(g.dims)
        data[2, 2, 2] = 1.0
        data[3, 3, 3] = 1.0  # diagonal neighbor: one 26-connected component
        data[7, 7, 7] = 1.0  # separate component
        inst = extract_tumor_instances(Volume3(g, data, MASK))
        assert len(inst) == 2
        assert sorted(len(i.voxels) for i in inst) == [1, 2]


class TestBurden:
    def test_identical_zero_error(self):
        m = sphere_mask(make_grid(12), (6, 6, 6), 3.0)
        assert burden_relative_error(m, m) == 0.0

    def test_ten_percent_growth(self):
        g = Grid((16, 16, 16))
        pre = box_mask(g, (0, 0, 0), (10, 10, 10))    # 1000 voxels
        post = box_mask(g, (0, 0, 0), (10, 10, 11))   # 1100 voxels
        assert burden_relative_error(pre, post) == pytest.approx(0.1, abs=1e-12)

    def test_worked_clinical_arithmetic(self):
        # a 37.8 mL lesion with a 2.268 mL discrepancy is exactly a 6%
        # relative error (unit-spaced voxels: 37800 mm^3 -> 37.8 mL)
        g = Grid((40, 40, 40))
        pre = np.zeros(g.dims)
        pre.ravel()[:37800] = 1.0
        post = np.zeros(g.dims)
        post.ravel()[:37800 + 2268] = 1.0
        err = burden_relative_error(Volume3(g, pre, MASK), Volume3(g, post, MASK))
        assert burden_ml(Volume3(g, pre, MASK)) == pytest.approx(37.8, rel=1e-12)
        assert abs(err - 0.06) <= 1e-9 * 0.06

    def test_zero_pre_burden_rejected(self):
        g = make_grid(8)
        empty = Volume3(g, np.zeros(g.dims), MASK)
        with pytest.raises(EmptyMaskError):
            burden_relative_error(empty, empty)

    def test_translation_preserves_burden(self, rng):
        # a pure translation changes a tumor's thresholded volume by at most
        # the interpolation/rethreshold tolerance
        g = Grid((24, 24, 24))
        t = sphere_mask(g, (12, 12, 12), 6.0)
        shift = np.zeros((3,) + g.dims)
        shift[0] = 1.4
        shift[1] = -0.6
        warped = warp(t, VectorField3(g, shift))
        post = Volume3(g, (warped.data > 0.5).astype(float), MASK)
        assert burden_relative_error(t, post) <= 0.02

    def test_per_tumor_errors(self):
        g = Grid((24, 24, 24))
        data = np.zeros(g.dims)
        data[4:8, 4:8, 4:8] = 1.0
        data[14:19, 14:19, 14:19] = 1.0
        tum = Volume3(g, data, MASK)
        errors = per_tumor_burden_errors(tum, VectorField3.zeros(g))
        assert errors == [0.0, 0.0]


class TestReportJson:
    def test_round_trip_lossless(self):
        rep = MetricsReport(dsc=0.987, ncc=0.88, mi=0.44, grad_l2=0.0021,
                            cycle_l1=0.008, folds=0, matched_tumors=(2, 3),
                            mean_inclusion_ratio=0.46,
                            burden_relative_error=0.118)
        back = MetricsReport.from_json(rep.to_json())
        assert back == rep

    def test_snake_case_keys(self):
        rep = MetricsReport(dsc=1.0, ncc=None, mi=None, grad_l2=0.0,
                            cycle_l1=None, folds=0, matched_tumors=(0, 0),
                            mean_inclusion_ratio=0.0, burden_relative_error=0.0)
        keys = set(json.loads(rep.to_json()).keys())
        assert keys == {"dsc", "ncc", "mi", "grad_l2", "cycle_l1", "folds",
                        "matched_tumors", "mean_inclusion_ratio",
                        "burden_relative_error"}
