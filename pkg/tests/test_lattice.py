"""Lattice, norm, convolution, projection and transform tests."""

import io

import numpy as np
import pytest

from shglab import lattice as lt


def random_field(lat, rng, hermitian=False, scale=1.0):
    arr = scale * (rng.standard_normal(lat.shape) + 1j * rng.standard_normal(lat.shape))
    if hermitian:
        arr = lt.hermitize(arr)
    return lt.SpectralField(lat, arr, hermitian)


def brute_convolve(lat, a, b):
    """Literal O(N^2) oracle: (a*b)(j) = w * sum_l a(j-l) b(l), box-truncated."""
    out = np.zeros(lat.shape, dtype=np.complex128)
    cut = lat.cutoff
    all_j = list(np.ndindex(lat.shape))
    for oj in all_j:
        j = tuple(o - m for o, m in zip(oj, cut))
        acc = 0.0 + 0.0j
        for lj in all_j:
            l = tuple(o - m for o, m in zip(lj, cut))
            diff = tuple(ji - li for ji, li in zip(j, l))
            if all(abs(di) <= m for di, m in zip(diff, cut)):
                didx = tuple(di + m for di, m in zip(diff, cut))
                acc += a[didx] * b[lj]
        out[oj] = lat.weight * acc
    return out


class TestMakeLattice:
    def test_fine_half_example(self):
        lat = lt.make_lattice(1, 0.5, 2, lt.FINE)
        np.testing.assert_allclose(lat.axis_wavenumbers(0), [-1, -0.5, 0, 0.5, 1])
        assert lat.weight == 0.5

    def test_amplitude_points(self):
        lat = lt.make_lattice(1, 0.5, 2, lt.AMPLITUDE)
        np.testing.assert_array_equal(lat.axis_wavenumbers(0), [-2, -1, 0, 1, 2])
        assert lat.weight == 1.0

    def test_2d_product(self):
        lat = lt.make_lattice(2, 0.25, 8, lt.FINE)
        assert lat.shape == (17, 17)
        assert lat.weight == pytest.approx(0.0625)

    def test_rejects_bad_eps(self):
        with pytest.raises(lt.LatticeError):
            lt.make_lattice(1, 0.3, 10)
        with pytest.raises(lt.LatticeError):
            lt.make_lattice(1, 1.0, 10)

    def test_rejects_carrier_too_small(self):
        # fine lattice must contain e1: eps*cutoff >= 1
        with pytest.raises(lt.LatticeError):
            lt.make_lattice(1, 0.1, 9, lt.FINE)

    def test_rejects_cutoff_zero(self):
        with pytest.raises(lt.LatticeError):
            lt.make_lattice(1, 0.5, 0, lt.AMPLITUDE)

    def test_per_axis_cutoff(self):
        lat = lt.make_lattice(2, 0.2, (8, 3), lt.FINE)
        assert lat.shape == (17, 7)


class TestWienerNorm:
    def test_single_fine_coefficient(self):
        lat = lt.make_lattice(1, 0.2, 10, lt.FINE)
        f = lt.field_from_modes(lat, {3: 1.0})
        assert lt.wiener_norm(f, 0) == pytest.approx(0.2)

    def test_amplitude_r2(self):
        lat = lt.make_lattice(1, 0.5, 4, lt.AMPLITUDE)
        f = lt.field_from_modes(lat, {0: 3 + 4j})
        assert lt.wiener_norm(f, 2) == pytest.approx(5.0)

    def test_fine_r2_at_k1(self):
        lat = lt.make_lattice(1, 0.1, 20, lt.FINE)
        f = lt.field_from_modes(lat, {10: 1.0})   # k = 1
        assert lt.wiener_norm(f, 2) == pytest.approx(0.1 * 2.0)

    def test_zero_iff_zero(self):
        lat = lt.make_lattice(1, 0.5, 3, lt.AMPLITUDE)
        assert lt.wiener_norm(lt.zero_field(lat)) == 0.0
        f = lt.field_from_modes(lat, {1: 1e-30})
        assert lt.wiener_norm(f) > 0.0

    def test_rejects_negative_r(self):
        lat = lt.make_lattice(1, 0.5, 3, lt.AMPLITUDE)
        with pytest.raises(lt.LatticeError):
            lt.wiener_norm(lt.zero_field(lat), -1.0)


class TestConvolve:
    def test_identity_element(self):
        lat = lt.make_lattice(1, 0.25, 8, lt.FINE)
        rng = np.random.default_rng(0)
        g = random_field(lat, rng)
        delta = lt.field_from_modes(lat, {0: 1.0 / lat.weight})
        out = lt.convolve(delta, g, method="direct")
        np.testing.assert_allclose(out.coeffs, g.coeffs, atol=1e-14)

    def test_single_term(self):
        lat = lt.make_lattice(1, 0.5, 4, lt.AMPLITUDE)
        f = lt.field_from_modes(lat, {0: 2.0})
        g = lt.field_from_modes(lat, {1: 3.0})
        out = lt.convolve(f, g, method="direct")
        assert out.at(1) == pytest.approx(6.0)
        assert np.abs(out.coeffs).sum() == pytest.approx(6.0)

    @pytest.mark.parametrize("kind", [lt.FINE, lt.AMPLITUDE])
    def test_fft_matches_brute_force_1d(self, kind):
        rng = np.random.default_rng(7)
        lat = lt.make_lattice(1, 0.25, 16, kind)
        for _ in range(5):
            f = random_field(lat, rng)
            g = random_field(lat, rng)
            oracle = brute_convolve(lat, f.coeffs, g.coeffs)
            got = lt.convolve(f, g, method="fft")
            scale = np.abs(oracle).max()
            assert np.abs(got.coeffs - oracle).max() < 1e-12 * scale

    def test_fft_matches_brute_force_2d(self):
        rng = np.random.default_rng(8)
        lat = lt.make_lattice(2, 0.5, 4, lt.FINE)
        f = random_field(lat, rng)
        g = random_field(lat, rng)
        oracle = brute_convolve(lat, f.coeffs, g.coeffs)
        got = lt.convolve(f, g, method="fft")
        direct = lt.convolve(f, g, method="direct")
        assert np.abs(got.coeffs - oracle).max() < 1e-12 * np.abs(oracle).max()
        assert np.abs(direct.coeffs - oracle).max() < 1e-13 * np.abs(oracle).max()

    def test_convolve3_matches_iterated(self):
        rng = np.random.default_rng(9)
        lat = lt.make_lattice(1, 0.2, 12, lt.FINE)
        # supports chosen so the triple product fits inside the box: no
        # truncation happens and associativity is exact
        f = lt.field_from_modes(lat, {k: rng.standard_normal() + 1j * rng.standard_normal()
                                      for k in range(-4, 5)})
        two = lt.convolve(f, f, method="fft")
        three = lt.convolve(two, f, method="fft")
        got = lt.convolve3(lat, f.coeffs, f.coeffs, f.coeffs)
        assert np.abs(got - three.coeffs).max() < 1e-12 * np.abs(three.coeffs).max()

    def test_lattice_mismatch(self):
        a = lt.zero_field(lt.make_lattice(1, 0.5, 3, lt.AMPLITUDE))
        b = lt.zero_field(lt.make_lattice(1, 0.5, 4, lt.AMPLITUDE))
        with pytest.raises(lt.LatticeError):
            lt.convolve(a, b)

    def test_young_inequality(self):
        rng = np.random.default_rng(11)
        for kind in (lt.FINE, lt.AMPLITUDE):
            lat = lt.make_lattice(1, 0.25, 10, kind)
            for _ in range(20):
                f = random_field(lat, rng)
                g = random_field(lat, rng)
                lhs = lt.wiener_norm(lt.convolve(f, g), 0)
                assert lhs <= lt.wiener_norm(f) * lt.wiener_norm(g) + 1e-10

    def test_algebra_inequality_with_constant(self):
        rng = np.random.default_rng(12)
        lat = lt.make_lattice(1, 0.25, 10, lt.FINE)
        for r in (0.0, 1.0, 2.0):
            c_r = 2.0 ** (r / 2.0)
            for _ in range(20):
                f = random_field(lat, rng)
                g = random_field(lat, rng)
                lhs = lt.wiener_norm(lt.convolve(f, g), r)
                assert lhs <= c_r * lt.wiener_norm(f, r) * lt.wiener_norm(g, r) + 1e-10


class TestProjections:
    def test_p1_support_examples(self):
        lat = lt.make_lattice(1, 0.1, 15, lt.FINE)
        p1 = lt.projection_mask(lat, lt.P1)
        f = lt.field_from_modes(lat, {10: 1.0})   # k = e1
        assert lt.apply_mask(p1, f).at(10) == 1.0
        g = lt.field_from_modes(lat, {0: 1.0})    # k = 0
        assert lt.apply_mask(p1, g).at(0) == 0.0

    def test_pc_ps_examples(self):
        lat = lt.make_lattice(1, 0.1, 15, lt.FINE)
        pc = lt.projection_mask(lat, lt.PC)
        ps = lt.projection_mask(lat, lt.PS)
        i_me1 = 15 - 10   # array index of k = -e1
        assert pc.values.flat[i_me1] == 1.0
        assert ps.values.flat[15] == 1.0   # k = 0

    def test_partition_and_idempotence(self):
        for eps, cut in [(0.5, 3), (0.1, 12), (0.05, 25)]:
            lat = lt.make_lattice(1, eps, cut, lt.FINE)
            pc = lt.projection_mask(lat, lt.PC).values
            ps = lt.projection_mask(lat, lt.PS).values
            p1 = lt.projection_mask(lat, lt.P1).values
            pm1 = lt.projection_mask(lat, lt.PM1).values
            assert np.all(pc + ps == 1.0)
            assert np.all(pc == p1 + pm1)
            for m in (pc, ps, p1, pm1):
                assert np.all(m * m == m)
            assert (pc + ps).sum() == np.prod(lat.shape)

    def test_band_edge_exact(self):
        # eps = 1/10: k = 1.1 has |k - e1| = 1/10 exactly and belongs to P1
        lat = lt.make_lattice(1, 0.1, 15, lt.FINE)
        p1 = lt.projection_mask(lat, lt.P1)
        f = lt.field_from_modes(lat, {11: 1.0})
        assert lt.apply_mask(p1, f).at(11) == 1.0
        g = lt.field_from_modes(lat, {12: 1.0})   # k = 1.2 outside
        assert lt.apply_mask(p1, g).at(12) == 0.0

    def test_2d_band_is_euclidean(self):
        lat = lt.make_lattice(2, 0.05, 22, lt.FINE)
        p1 = lt.band_values(lat, lt.P1)
        # k = (1, 0.05): distance 0.05 <= 0.1 -> inside
        assert p1[20 + 22, 1 + 22] == 1.0
        # k = (1.1, 0.05): distance sqrt(0.0125) > 0.1 -> outside
        assert p1[22 + 22, 1 + 22] == 0.0

    def test_rejects_amplitude_lattice(self):
        lat = lt.make_lattice(1, 0.5, 3, lt.AMPLITUDE)
        with pytest.raises(lt.LatticeError):
            lt.projection_mask(lat, lt.P1)


class TestPhysical:
    def test_cosine_reconstruction(self):
        lat = lt.make_lattice(1, 0.2, 10, lt.FINE)
        amp = 0.5 / lat.weight
        f = lt.field_from_modes(lat, {5: amp}, hermitian=True)
        u = lt.to_physical(f, 64)
        x = np.arange(64) * lat.cell / 64
        np.testing.assert_allclose(u, np.cos(x), atol=1e-12)

    def test_zero_field(self):
        lat = lt.make_lattice(2, 0.5, 3, lt.FINE)
        u = lt.to_physical(lt.zero_field(lat, hermitian=True), 8)
        assert np.all(u == 0.0)

    def test_sup_bounded_by_wiener_norm(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            lat = lt.make_lattice(1, 0.25, 12, lt.FINE)
            f = random_field(lat, rng, hermitian=True)
            assert lt.sup_norm_physical(f, 101) <= lt.wiener_norm(f, 0) + 1e-12

    def test_single_mode_sup(self):
        lat = lt.make_lattice(1, 0.2, 8, lt.AMPLITUDE)
        f = lt.field_from_modes(lat, {3: 2.5j})
        assert lt.sup_norm_physical(f, 40) == pytest.approx(2.5, abs=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        for kind in (lt.FINE, lt.AMPLITUDE):
            lat = lt.make_lattice(2, 0.5, 4, kind)
            f = random_field(lat, rng)
            u = lt.to_physical(f, 16)
            g = lt.to_fourier(lat, u)
            assert np.abs(g.coeffs - f.coeffs).max() < 1e-12

    def test_grid_too_coarse(self):
        lat = lt.make_lattice(1, 0.25, 8, lt.FINE)
        with pytest.raises(lt.LatticeError):
            lt.to_physical(lt.zero_field(lat), 10)


class TestFieldValidation:
    def test_rejects_nan(self):
        lat = lt.make_lattice(1, 0.5, 2, lt.AMPLITUDE)
        arr = np.zeros(lat.shape, dtype=np.complex128)
        arr[0] = np.nan
        with pytest.raises(lt.LatticeError):
            lt.SpectralField(lat, arr)

    def test_rejects_false_hermitian_flag(self):
        lat = lt.make_lattice(1, 0.5, 2, lt.AMPLITUDE)
        arr = np.zeros(lat.shape, dtype=np.complex128)
        arr[0] = 1.0 + 1.0j
        with pytest.raises(lt.LatticeError):
            lt.SpectralField(lat, arr, hermitian=True)

    def test_coeffs_read_only(self):
        lat = lt.make_lattice(1, 0.5, 2, lt.AMPLITUDE)
        f = lt.zero_field(lat)
        with pytest.raises(ValueError):
            f.coeffs[0] = 1.0


class TestSerialization:
    def test_binary_round_trip(self):
        rng = np.random.default_rng(13)
        lat = lt.make_lattice(2, 0.2, (6, 3), lt.FINE)
        f = random_field(lat, rng, hermitian=True)
        g = lt.field_from_bytes(lt.field_to_bytes(f))
        assert g.lattice == lat
        assert g.hermitian
        np.testing.assert_array_equal(g.coeffs, f.coeffs)

    def test_csv_debug_format(self):
        lat = lt.make_lattice(1, 0.5, 2, lt.FINE)
        f = lt.field_from_modes(lat, {1: 1 - 2j})
        buf = io.StringIO()
        lt.write_field_csv(buf, f)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "k1,re,im"
        assert len(lines) == 1 + 5
        row = dict(zip(("k", "re", "im"), lines[4].split(",")))
        assert float(row["k"]) == 0.5
        assert float(row["re"]) == 1.0
        assert float(row["im"]) == -2.0
