import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specmix import data as D
from specmix.baselines import fcls
from specmix.errors import ContractError, FormatError, GenerationError


class TestEndmembers:
    def test_pairwise_sad_floor(self):
        endm = D.generate_endmembers(2, 50, seed=0)
        assert D.sad_value(endm[0], endm[1]) >= 0.15

    def test_same_seed_identical(self):
        a = D.generate_endmembers(4, 30, seed=42)
        b = D.generate_endmembers(4, 30, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_many_endmembers_wide_band_succeeds(self):
        endm = D.generate_endmembers(9, 224, seed=1)
        assert endm.shape == (9, 224)
        assert np.all(endm >= 0.05) and np.all(endm <= 1.0)
        for i in range(9):
            for j in range(i + 1, 9):
                assert D.sad_value(endm[i], endm[j]) >= 0.15

    def test_impossible_separation_raises(self):
        with pytest.raises(GenerationError):
            D.generate_endmembers(4, 30, seed=0, min_sad=2.0, max_attempts=5)

    def test_bad_dims_rejected(self):
        with pytest.raises(ContractError):
            D.generate_endmembers(1, 30, seed=0)
        with pytest.raises(ContractError):
            D.generate_endmembers(5, 3, seed=0)


class TestAbundances:
    def test_simplex_everywhere(self):
        z = D.generate_abundances(16, 16, 5, coherence_length=4.0, seed=0)
        assert np.all(z >= 0)
        np.testing.assert_allclose(z.sum(axis=2), 1.0, atol=1e-9)

    def test_zero_coherence_uncorrelated_neighbors(self):
        z = D.generate_abundances(64, 64, 3, coherence_length=0.0, seed=1)
        a = z[:-1, :, 0].ravel() - z[:-1, :, 0].mean()
        b = z[1:, :, 0].ravel() - z[1:, :, 0].mean()
        r = (a * b).mean() / (a.std() * b.std())
        assert abs(r) < 0.05

    def test_coherent_field_autocorrelated(self):
        z = D.generate_abundances(64, 64, 3, coherence_length=8.0, seed=2)
        a = z[:-1, :, 0].ravel() - z[:-1, :, 0].mean()
        b = z[1:, :, 0].ravel() - z[1:, :, 0].mean()
        r = (a * b).mean() / (a.std() * b.std())
        assert r > 0.5

    def test_deterministic(self):
        a = D.generate_abundances(8, 8, 3, 2.0, seed=9)
        b = D.generate_abundances(8, 8, 3, 2.0, seed=9)
        np.testing.assert_array_equal(a, b)


class TestMixScene:
    def test_one_hot_inf_snr_reproduces_endmember(self):
        endm = D.generate_endmembers(3, 20, seed=0)
        abund = np.zeros((2, 2, 3))
        abund[..., 1] = 1.0
        cube = D.mix_scene(abund, endm, math.inf)
        for i in range(2):
            for j in range(2):
                np.testing.assert_array_equal(cube[i, j], endm[1])

    def test_inf_snr_exact_linear_mixing(self):
        rng = np.random.default_rng(0)
        endm = D.generate_endmembers(4, 25, seed=1)
        abund = rng.dirichlet(np.ones(4), size=(6, 5))
        cube = D.mix_scene(abund, endm, math.inf)
        np.testing.assert_array_equal(cube, abund @ endm)

    @pytest.mark.parametrize("snr", [20.0, 30.0, 40.0])
    def test_measured_snr_within_tolerance(self, snr):
        endm = D.generate_endmembers(4, 50, seed=2)
        abund = D.generate_abundances(48, 48, 4, 6.0, seed=3)
        signal = abund @ endm
        cube = D.mix_scene(abund, endm, snr, rng=np.random.default_rng(4))
        noise = cube - signal
        measured = 10.0 * np.log10(np.mean(signal ** 2) / np.mean(noise ** 2))
        assert abs(measured - snr) <= 0.2

    def test_noiseless_pixels_inside_endmember_hull(self):
        endm = D.generate_endmembers(3, 30, seed=5)
        abund = D.generate_abundances(8, 8, 3, 3.0, seed=6)
        cube = D.mix_scene(abund, endm, math.inf)
        for px in cube.reshape(-1, 30)[:16]:
            assert fcls(px, endm).residual_norm < 1e-9

    def test_nonnegative_output(self):
        endm = D.generate_endmembers(3, 30, seed=7)
        abund = D.generate_abundances(16, 16, 3, 2.0, seed=8)
        cube = D.mix_scene(abund, endm, 5.0, rng=np.random.default_rng(9))
        assert np.all(cube >= 0.0)


class TestPatches:
    def test_1x1_cube_patch1(self):
        cube = np.arange(3, dtype=float).reshape(1, 1, 3)
        items = list(D.extract_patches(cube, 1))
        assert len(items) == 1
        patch, center, (i, j) = items[0]
        np.testing.assert_array_equal(patch[0, 0], cube[0, 0])
        np.testing.assert_array_equal(center, cube[0, 0])
        assert (i, j) == (0, 0)

    def test_interior_patches_equal_cube_slices(self, rng):
        cube = rng.random((6, 6, 4))
        for patch, center, (i, j) in D.extract_patches(cube, 3):
            if 1 <= i <= 4 and 1 <= j <= 4:
                np.testing.assert_array_equal(
                    patch, cube[i - 1:i + 2, j - 1:j + 2])
            np.testing.assert_array_equal(center, cube[i, j])

    def test_corner_reflect_padding_hand_computed(self):
        cube = np.arange(9, dtype=float).reshape(3, 3, 1)
        patch0, _, _ = next(D.extract_patches(cube, 3))
        # reflect padding of [[0,1,2],[3,4,5],[6,7,8]] at the (0,0) corner:
        # row -1 mirrors row 1, col -1 mirrors col 1
        expected = np.array([[4.0, 3.0, 4.0],
                             [1.0, 0.0, 1.0],
                             [4.0, 3.0, 4.0]])
        np.testing.assert_array_equal(patch0[:, :, 0], expected)

    def test_every_pixel_exactly_once(self, rng):
        cube = rng.random((4, 5, 2))
        seen = [(i, j) for _, _, (i, j) in D.extract_patches(cube, 3)]
        assert seen == [(i, j) for i in range(4) for j in range(5)]

    def test_patch_batch_matches_generator(self, rng):
        cube = rng.random((5, 4, 3))
        batch = D.patch_batch(cube, 3, np.arange(20))
        for n, (patch, _, _) in enumerate(D.extract_patches(cube, 3)):
            np.testing.assert_array_equal(batch[n], patch)

    def test_even_patch_size_rejected(self, rng):
        with pytest.raises(ContractError):
            list(D.extract_patches(rng.random((3, 3, 2)), 2))


@given(st.integers(min_value=1, max_value=9), st.integers(min_value=-30, max_value=30))
def test_reflect_index_always_in_range(n, i):
    j = D.reflect_index(i, n)
    assert 0 <= j < n


@given(st.integers(min_value=2, max_value=9))
def test_reflect_index_matches_numpy_pad(n):
    arr = np.arange(n, dtype=float)
    w = n - 1
    padded = np.pad(arr, w, mode="reflect")
    ours = [arr[D.reflect_index(i - w, n)] for i in range(n + 2 * w)]
    np.testing.assert_array_equal(ours, padded)


class TestSplit:
    def test_80_20_exact(self):
        train, test = D.split(100, 0.8, seed=0)
        assert train.size == 80 and test.size == 20

    def test_disjoint_exhaustive(self):
        train, test = D.split(37, 0.75, seed=1)
        union = np.union1d(train, test)
        np.testing.assert_array_equal(union, np.arange(37))
        assert np.intersect1d(train, test).size == 0

    def test_same_seed_identical(self):
        a = D.split(50, 0.8, seed=7)
        b = D.split(50, 0.8, seed=7)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_bad_fraction_rejected(self):
        with pytest.raises(ContractError):
            D.split(10, 1.0, seed=0)


class TestSceneContainer:
    def _scene(self, seed=0):
        spec = D.SceneSpec(height=6, width=5, bands=8, endmembers=3, seed=seed,
                           snr_db=25.0, coherence_length=2.0)
        cube, abund, endm = D.generate_scene(spec)
        return cube, abund, endm, spec

    def test_bitwise_roundtrip(self, tmp_path):
        cube, abund, endm, spec = self._scene()
        path = tmp_path / "scene.hsis"
        D.save_scene(path, cube, abund, endm, spec)
        c2, a2, e2, s2 = D.load_scene(path)
        np.testing.assert_array_equal(cube, c2)
        np.testing.assert_array_equal(abund, a2)
        np.testing.assert_array_equal(endm, e2)
        assert s2 == spec
        # re-saving reproduces identical bytes
        path2 = tmp_path / "scene2.hsis"
        D.save_scene(path2, c2, a2, e2, s2)
        assert path.read_bytes() == path2.read_bytes()

    def test_truncated_file_is_format_error(self, tmp_path):
        cube, abund, endm, spec = self._scene()
        path = tmp_path / "scene.hsis"
        D.save_scene(path, cube, abund, endm, spec)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 20])
        with pytest.raises(FormatError):
            D.load_scene(path)

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.hsis"
        path.write_bytes(b"XXXX" + b"\x00" * 100)
        with pytest.raises(FormatError) as ei:
            D.load_scene(path)
        assert ei.value.offset == 0

    def test_file_size_arithmetic(self, tmp_path):
        h, w, b, k = 12, 10, 16, 3
        spec = D.SceneSpec(height=h, width=w, bands=b, endmembers=k, seed=2,
                           snr_db=math.inf, coherence_length=1.0)
        cube, abund, endm = D.generate_scene(spec)
        path = tmp_path / "scene.hsis"
        D.save_scene(path, cube, abund, endm, spec)
        trailer = spec.to_json().encode()
        header = 4 + 4 + 16
        expected = header + 8 * (h * w * b + h * w * k + k * b) + 4 + len(trailer)
        assert path.stat().st_size == expected

    def test_spec_json_roundtrip_with_infinite_snr(self):
        spec = D.SceneSpec(height=4, width=4, bands=5, endmembers=2, seed=3,
                           snr_db=math.inf)
        again = D.SceneSpec.from_json(spec.to_json())
        assert again == spec

    def test_unknown_spec_field_rejected(self):
        with pytest.raises(ContractError, match="bogus"):
            D.SceneSpec.from_json('{"height":4,"width":4,"bands":5,"endmembers":2,"bogus":1}')


class TestEndmemberCsv:
    def test_plain_rows(self, tmp_path):
        p = tmp_path / "endm.csv"
        p.write_text("0.5,0.25,0.125\n0.1,0.9,0.3\n")
        mat = D.load_endmembers_csv(p)
        np.testing.assert_allclose(mat, [[0.5, 0.25, 0.125], [0.1, 0.9, 0.3]])

    def test_wavelength_header_autodetected(self, tmp_path):
        p = tmp_path / "endm.csv"
        p.write_text("400,500,600\n0.5,0.25,0.125\n0.1,0.9,0.3\n")
        mat = D.load_endmembers_csv(p)
        assert mat.shape == (2, 3)

    def test_header_override(self, tmp_path):
        p = tmp_path / "endm.csv"
        p.write_text("0.1,0.2,0.3\n0.5,0.25,0.125\n")
        mat = D.load_endmembers_csv(p, header=True)
        assert mat.shape == (1, 3)

    def test_scene_generation_from_csv_endmembers(self, tmp_path):
        endm = D.generate_endmembers(3, 10, seed=0)
        p = tmp_path / "endm.csv"
        p.write_text("\n".join(",".join(repr(float(v)) for v in row)
                               for row in endm) + "\n")
        spec = D.SceneSpec(height=4, width=4, bands=10, endmembers=3, seed=1,
                           snr_db=math.inf, coherence_length=1.0,
                           endmember_mode=str(p))
        cube, abund, got = D.generate_scene(spec)
        np.testing.assert_allclose(got, endm, atol=1e-15)
        np.testing.assert_array_equal(cube, abund @ got)


class TestLargeSceneGeneration:
    def test_128x128x224_k9_at_20db(self):
        spec = D.SceneSpec(height=128, width=128, bands=224, endmembers=9,
                           seed=3, snr_db=20.0, coherence_length=6.0)
        cube, abund, endm = D.generate_scene(spec)
        assert cube.shape == (128, 128, 224) and endm.shape == (9, 224)
        signal = abund @ endm
        noise = cube - signal
        snr = 10 * np.log10(np.mean(signal ** 2) / np.mean(noise ** 2))
        assert abs(snr - 20.0) <= 0.2
