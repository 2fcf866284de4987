import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from nodulesat.exceptions import ConfigurationError, ContractError
from nodulesat.preprocess import AugmentSpec, Volume, augment, crop_patch, hu_normalize, resample_trilinear


def physical_grid(dims, spacing):
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


class TestHUNormalize:
    @pytest.mark.parametrize("hu,expected", [(-1024, -1.0), (400, 1.0), (2000, 1.0), (-312, 0.0), (-3000, -1.0)])
    def test_fixed_points(self, hu, expected):
        out = hu_normalize(Volume(np.full((1, 1, 1), float(hu))))
        assert out.voxels[0, 0, 0] == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5000, 5000), min_size=2, max_size=30))
    def test_range_and_monotone(self, values):
        x = np.sort(np.array(values))
        out = hu_normalize(Volume(x.reshape(1, 1, -1))).voxels.ravel()
        assert out.min() >= -1.0 and out.max() <= 1.0
        assert np.all(np.diff(out) >= 0)

    def test_commutes_with_rotation(self):
        v = Volume(np.random.default_rng(0).uniform(-2000, 1000, size=(5, 5, 5)))
        spec = AugmentSpec(rotation=90, axis=1, flip=True)
        np.testing.assert_array_equal(hu_normalize(augment(v, spec)).voxels, augment(hu_normalize(v), spec).voxels)


class TestResample:
    def test_doubling(self):
        out = resample_trilinear(Volume(np.zeros((4, 4, 4)), (2.0, 2.0, 2.0)))
        assert out.dims == (8, 8, 8) and out.spacing == (1.0, 1.0, 1.0)

    def test_constant(self):
        out = resample_trilinear(Volume(np.full((3, 5, 4), 0.7), (1.3, 0.8, 2.5)), (1.0, 1.0, 1.0))
        np.testing.assert_allclose(out.voxels, 0.7, atol=1e-14)

    def test_rounding_half_away(self):
        # 5 * 0.5 / 1 = 2.5 -> 3
        assert resample_trilinear(Volume(np.zeros((5, 2, 2)), (0.5, 1, 1))).dims == (3, 2, 2)

    def test_identity_at_own_spacing(self):
        v = Volume(np.random.default_rng(1).normal(size=(4, 6, 5)), (0.7, 1.1, 2.0))
        np.testing.assert_allclose(resample_trilinear(v, v.spacing).voxels, v.voxels, atol=1e-12)

    @pytest.mark.parametrize(
        "dims,src,dst",
        [((4, 4, 4), (2, 2, 2), (1, 1, 1)), ((6, 5, 7), (0.7, 1.3, 0.9), (1, 1, 1)), ((5, 5, 5), (1, 1, 1), (0.6, 0.8, 1.7))],
    )
    def test_linear_field_exact_in_interior(self, dims, src, dst):
        f = lambda x, y, z: 2 * x - y + 0.5 * z
        v = Volume(f(*physical_grid(dims, src)), src)
        out = resample_trilinear(v, dst)
        pts = physical_grid(out.dims, dst)
        # interior: output centres bracketed by source centres on every axis
        lo = [0.5 * s for s in src]
        hi = [(n - 0.5) * s for n, s in zip(dims, src)]
        inside = np.ones(out.dims, dtype=bool)
        for p, a, b in zip(pts, lo, hi):
            inside &= (p >= a) & (p <= b)
        assert inside.any()
        assert np.abs(out.voxels - f(*pts))[inside].max() <= 1e-10

    def test_matches_map_coordinates(self):
        rng = np.random.default_rng(2)
        v = Volume(rng.normal(size=(5, 6, 4)), (1.5, 0.7, 2.2))
        out = resample_trilinear(v, (1.0, 1.0, 1.0))
        coords = [p / s - 0.5 for p, s in zip(physical_grid(out.dims, (1, 1, 1)), v.spacing)]
        ref = map_coordinates(v.voxels, coords, order=1, mode="nearest")
        np.testing.assert_allclose(out.voxels, ref, atol=1e-12)

    def test_value_range_never_expands(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            v = Volume(rng.normal(size=tuple(rng.integers(2, 7, 3))), tuple(rng.uniform(0.5, 2.5, 3)))
            out = resample_trilinear(v).voxels
            assert out.min() >= v.voxels.min() - 1e-12 and out.max() <= v.voxels.max() + 1e-12

    def test_bad_spacing(self):
        with pytest.raises(ConfigurationError):
            resample_trilinear(Volume(np.zeros((2, 2, 2))), (1.0, 0.0, 1.0))


def naive_crop(vox, spacing, center, edge, fill=-1.0):
    out = np.full((edge,) * 3, fill)
    idx = [int(np.floor(c / s)) for c, s in zip(center, spacing)]
    for a in range(edge):
        for b in range(edge):
            for c in range(edge):
                i, j, k = idx[0] - edge // 2 + a, idx[1] - edge // 2 + b, idx[2] - edge // 2 + c
                if 0 <= i < vox.shape[0] and 0 <= j < vox.shape[1] and 0 <= k < vox.shape[2]:
                    out[a, b, c] = vox[i, j, k]
    return out


class TestCrop:
    def test_midpoint_is_pure_subarray(self):
        vox = np.arange(512.0).reshape(8, 8, 8)
        patch = crop_patch(Volume(vox), (4.0, 4.0, 4.0), 4).voxels
        np.testing.assert_array_equal(patch, vox[2:6, 2:6, 2:6])

    def test_corner_mostly_padding(self):
        patch = crop_patch(Volume(np.zeros((8, 8, 8))), (0.0, 0.0, 0.0), 4).voxels
        assert (patch == -1).mean() >= 7 / 8

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            dims = tuple(int(d) for d in rng.integers(2, 9, 3))
            spacing = tuple(rng.uniform(0.5, 2.0, 3))
            vox = rng.normal(size=dims)
            center = tuple(rng.uniform(-2, 12, 3))
            edge = int(rng.integers(1, 7))
            got = crop_patch(Volume(vox, spacing), center, edge).voxels
            np.testing.assert_array_equal(got, naive_crop(vox, spacing, center, edge))

    def test_bad_edge(self):
        with pytest.raises(ConfigurationError):
            crop_patch(Volume(np.zeros((2, 2, 2))), (0, 0, 0), 0)


class TestAugment:
    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_four_quarter_turns(self, axis):
        a = np.random.default_rng(5).normal(size=(4, 4, 4))
        out = a
        for _ in range(4):
            out = augment(out, AugmentSpec(rotation=90, axis=axis))
        np.testing.assert_array_equal(out, a)

    def test_flip_twice(self):
        a = np.random.default_rng(6).normal(size=(3, 3, 3))
        spec = AugmentSpec(flip=True)
        np.testing.assert_array_equal(augment(augment(a, spec), spec), a)

    def test_rotation_flip_preserve_values(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(5, 5, 5))
        for rot in (0, 90, 180, 270):
            for axis in range(3):
                out = augment(a, AugmentSpec(rotation=rot, axis=axis, flip=bool(rng.integers(2))))
                np.testing.assert_array_equal(np.sort(out, axis=None), np.sort(a, axis=None))

    def test_integer_shift_in_interior(self):
        a = np.random.default_rng(8).normal(size=(6, 6, 6))
        out = augment(a, AugmentSpec(shift=(1.0, 0.0, 0.0)))
        np.testing.assert_array_equal(out[1:], a[:-1])

    def test_random_augment_stays_in_range(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(6, 6, 6))
        for _ in range(20):
            out = augment(Volume(a), AugmentSpec.random(rng)).voxels
            assert out.min() >= a.min() - 1e-12 and out.max() <= a.max() + 1e-12

    def test_non_cubic(self):
        with pytest.raises(ContractError):
            augment(np.zeros((2, 3, 2)), AugmentSpec())

    @pytest.mark.parametrize("kw", [{"rotation": 45}, {"axis": 3}, {"shift": (2.0, 0, 0)}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigurationError):
            AugmentSpec(**kw)
