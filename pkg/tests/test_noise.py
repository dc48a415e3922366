"""Noise stream, band amplitude, coupling and exact OU stepping tests."""

import numpy as np
import pytest

from shglab import lattice as lt
from shglab import noise as ns


def fine_lattice(eps=0.1, cutoff=15, d=1):
    return lt.make_lattice(d, eps, cutoff, lt.FINE)


def model(eps=0.1, cutoff=15, d=1, beta=1.5, seed=42, **kw):
    return ns.make_noise_model(fine_lattice(eps, cutoff, d), beta, seed, **kw)


class TestModel:
    def test_default_profile_normalized(self):
        m = model()
        assert m.alpha_l1_norm() == pytest.approx(1.0)

    def test_rejects_beta_below_one(self):
        with pytest.raises(ns.NoiseError):
            model(beta=1.0)

    def test_rejects_asymmetric_alpha(self):
        lat = fine_lattice()
        alpha = np.zeros(lat.shape)
        alpha[0] = 1.0
        with pytest.raises(ns.NoiseError):
            ns.NoiseModel(lattice=lat, alpha=alpha, beta=1.5, seed=0)

    def test_band_restricted_profiles(self):
        m_all = model()
        m_st = model(band="stable")
        m_cr = model(band="critical")
        pc = lt.band_values(m_all.lattice, lt.PC)
        assert np.all(m_st.alpha[pc == 1] == 0)
        assert np.all(m_cr.alpha[pc == 0] == 0)
        np.testing.assert_allclose(m_st.alpha + m_cr.alpha, m_all.alpha)


class TestBandAmplitude:
    def test_critical_band_scale(self):
        # alpha pinned to 1 on +-e1 so the multiplier is bare eps^2
        lat = fine_lattice(0.1, 15)
        alpha = np.zeros(lat.shape)
        alpha[15 + 10] = alpha[15 - 10] = 1.0
        m = ns.NoiseModel(lattice=lat, alpha=alpha, beta=1.5, seed=0)
        assert ns.sh_noise_amplitude(m, 10) == pytest.approx(0.01)

    def test_stable_band_scale(self):
        lat = fine_lattice(0.1, 15)
        alpha = np.zeros(lat.shape)
        alpha[15] = 1.0
        m = ns.NoiseModel(lattice=lat, alpha=alpha, beta=1.5, seed=0)
        assert ns.sh_noise_amplitude(m, 0) == pytest.approx(0.1 ** 1.5)

    def test_zero_alpha_gives_zero(self):
        m = model(profile="zero")
        assert np.all(ns.sh_amplitude_array(m) == 0.0)


class TestIncrements:
    def test_step_count_validation(self):
        m = model()
        with pytest.raises(ns.NoiseError):
            ns.sample_increments(m, 0.1, 0)
        incr = ns.sample_increments(m, 0.1, 1)
        assert incr.step(0).shape == m.lattice.shape
        with pytest.raises(ns.NoiseError):
            incr.step(1)

    def test_mirroring_bitwise(self):
        m = model(d=2, cutoff=6, eps=0.5)
        incr = ns.sample_increments(m, 0.05, 3)
        for i in range(3):
            dw = incr.step(i)
            flipped = dw[::-1, ::-1]
            np.testing.assert_array_equal(flipped, np.conj(dw))
        centre = tuple(c for c in m.lattice.cutoff)
        assert incr.step(0)[centre].imag == 0.0

    def test_reproducible(self):
        m = model(seed=123)
        a = ns.sample_increments(m, 0.1, 5).step(3)
        b = ns.sample_increments(m, 0.1, 5).step(3)
        np.testing.assert_array_equal(a, b)
        m2 = model(seed=124)
        c = ns.sample_increments(m2, 0.1, 5).step(3)
        assert np.abs(a - c).max() > 0

    def test_standard_normal_statistics(self):
        m = model(cutoff=100, eps=0.1)
        h = 0.07
        incr = ns.sample_increments(m, h, 550)
        pos = ns._half_lattice_mask(m.lattice)
        samples = np.concatenate([incr.step(i)[pos] for i in range(550)])
        vals = np.concatenate([samples.real, samples.imag]) / np.sqrt(h)
        assert vals.size > 1e5
        assert abs(vals.mean()) < 0.02
        assert 0.97 < vals.var() < 1.03

    def test_aux_stream_independent_of_increments(self):
        m = model()
        incr = ns.sample_increments(m, 0.1, 2)
        assert np.abs(incr.step(0) - incr.aux(0)).max() > 0


class TestGLCoupling:
    def gl_lat(self, m, cutoff=None):
        n = m.lattice.eps_den
        cut = cutoff if cutoff is not None else max(1, -(-n // 10))
        return lt.make_lattice(m.lattice.d, m.eps, cut, lt.AMPLITUDE)

    def test_k0_maps_to_carrier_with_factor_eps(self):
        m = model(eps=0.1, cutoff=15)
        h = 0.2
        incr = ns.sample_increments(m, h, 4)
        gl = self.gl_lat(m)
        glincr = ns.gl_noise_from_sh(m, incr, m.eps ** 2 * h, gl)
        dw = incr.step(2)
        dwa = glincr.step(2)
        centre_gl = tuple(c for c in gl.cutoff)
        carrier = (15 + 10,)
        assert dwa[centre_gl] == m.eps * dw[carrier]

    def test_round_trip_recovers_sh_increments(self):
        m = model(eps=0.1, cutoff=15)
        incr = ns.sample_increments(m, 0.2, 3)
        gl = self.gl_lat(m)
        glincr = ns.gl_noise_from_sh(m, incr, m.eps ** 2 * 0.2, gl)
        win = ns.critical_window(m.lattice, gl)
        for i in range(3):
            np.testing.assert_allclose(glincr.step(i) / m.eps, incr.step(i)[win],
                                       rtol=1e-14, atol=0)

    def test_step_size_mismatch_rejected(self):
        m = model()
        incr = ns.sample_increments(m, 0.2, 3)
        with pytest.raises(ns.NoiseError):
            ns.gl_noise_from_sh(m, incr, 0.2, self.gl_lat(m))

    def test_alpha_a_support(self):
        # eps = 1/20: |eps*K| <= 1/10 holds exactly for |K| <= 2
        m = model(eps=0.05, cutoff=30)
        gl = self.gl_lat(m, cutoff=4)
        aa = ns.gl_alpha(m, gl)
        k = np.arange(-4, 5)
        assert np.all(aa[np.abs(k) <= 2] > 0)
        assert np.all(aa[np.abs(k) > 2] == 0)

    def test_alpha_a_value_and_scale(self):
        m = model(eps=0.1, cutoff=15)
        gl = self.gl_lat(m)
        aa = ns.gl_alpha(m, gl)
        centre_gl = tuple(c for c in gl.cutoff)
        carrier = (15 + 10,)
        assert aa[centre_gl] == pytest.approx(m.eps * m.alpha[carrier])

    def test_gl_step_variance(self):
        m = model(eps=0.2, cutoff=8, seed=7)
        h = 0.5
        n_steps = 400
        incr = ns.sample_increments(m, h, n_steps)
        gl = self.gl_lat(m, cutoff=1)
        glincr = ns.gl_noise_from_sh(m, incr, m.eps ** 2 * h, gl)
        vals = np.concatenate([glincr.step(i).ravel() for i in range(n_steps)])
        comps = np.concatenate([vals.real, vals.imag])
        H = m.eps ** 2 * h
        assert comps.var() == pytest.approx(H, rel=0.1)


class TestOUStep:
    def test_pure_decay(self):
        z = np.array([1.0 + 2.0j, -0.5j])
        out = ns.ou_exact_step(z, 3.0, 0.0, np.zeros(2, complex), 0.25, np.zeros(2, complex))
        np.testing.assert_allclose(out, np.exp(-0.75) * z, rtol=1e-14)

    def test_rejects_nonpositive_damping(self):
        with pytest.raises(ns.NoiseError):
            ns.ou_exact_step(0.0, 0.0, 1.0, 0.0, 0.1, 0.0)

    def test_stationary_variance_against_euler_maruyama(self):
        # lambda'=1: per-component stationary variance amp^2/2
        rng = np.random.default_rng(3)
        n_paths, amp, T = 4000, 1.3, 6.0
        # exact sampler, a few coarse steps
        h = T / 8
        z = np.zeros(n_paths, dtype=complex)
        for _ in range(8):
            dw = np.sqrt(h) * (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths))
            aux = rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)
            z = ns.ou_exact_step(z, 1.0, amp, dw, h, aux)
        var_exact_sampler = 0.5 * (z.real.var() + z.imag.var())
        # Euler-Maruyama oracle at h = 1e-4
        h_em = 1e-4
        w = np.zeros(n_paths, dtype=complex)
        for _ in range(int(T / h_em)):
            dw = np.sqrt(h_em) * (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths))
            w = w - w * h_em + amp * dw
        var_em = 0.5 * (w.real.var() + w.imag.var())
        target = amp ** 2 / 2
        assert var_exact_sampler == pytest.approx(target, rel=0.08)
        assert var_em == pytest.approx(target, rel=0.08)
        assert var_exact_sampler == pytest.approx(var_em, rel=0.12)

    @pytest.mark.parametrize("lam", [1.0, 5.0, 37.0])
    @pytest.mark.parametrize("T", [0.1, 1.0, 10.0])
    def test_second_moment_closed_form(self, lam, T):
        rng = np.random.default_rng(int(lam * 10 + T * 7))
        n_paths, amp = 10_000, 0.8
        n_steps = 10
        h = T / n_steps
        z = np.zeros(n_paths, dtype=complex)
        for _ in range(n_steps):
            dw = np.sqrt(h) * (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths))
            aux = rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths)
            z = ns.ou_exact_step(z, lam, amp, dw, h, aux)
        m2 = np.abs(z) ** 2
        target = ns.ou_variance(lam, amp, T)
        se = m2.std() / np.sqrt(n_paths)
        assert abs(m2.mean() - target) < 3 * se

    def test_conditioning_preserves_total_variance_stiff(self):
        # one stiff step: unconditional variance must match the Ito integral
        rng = np.random.default_rng(11)
        n, lam, h, amp = 200_000, 40.0, 0.1, 2.0
        dw = np.sqrt(h) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        aux = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        z = ns.ou_exact_step(np.zeros(n, complex), lam, amp, dw, h, aux)
        target = ns.ou_variance(lam, amp, h)
        assert (np.abs(z) ** 2).mean() == pytest.approx(target, rel=0.02)

    def test_conditional_variance_series_matches_direct(self):
        h = 0.3
        for a in (-1e-9, 1e-9, -0.05 / h * 0.999, 0.05 / h * 0.999):
            mc, cs = ns._conditional_coefficients(np.array([a]), h)
            # quadrature oracle for the two integrals
            s = np.linspace(0, h, 20001)
            i1 = np.trapezoid(np.exp(a * (h - s)), s)
            i2 = np.trapezoid(np.exp(2 * a * (h - s)), s)
            assert mc[0] == pytest.approx(i1 / h, rel=1e-7)
            assert cs[0] ** 2 == pytest.approx(i2 - i1 ** 2 / h, rel=1e-4, abs=1e-18)


class TestRealness:
    def test_noise_realization_is_real(self):
        m = model(d=2, eps=0.5, cutoff=4, seed=9)
        incr = ns.sample_increments(m, 0.1, 2)
        amp = ns.sh_amplitude_array(m)
        f = lt.SpectralField(m.lattice, amp * incr.step(0), hermitian=True)
        u = lt.to_physical(f, 16)
        assert u.dtype == np.float64


class TestEnvelopeBound:
    def test_sup_w1_norm_uniform_in_eps(self):
        """99th percentile of sup_T ||Z_A||_{W_A^1} must not grow as eps -> 0."""
        q99 = {}
        n_paths, n_steps, T0 = 300, 40, 1.0
        H = T0 / n_steps
        for eps in (0.2, 0.1, 0.05):
            n = round(1 / eps)
            fine = lt.make_lattice(1, eps, n + max(1, n // 10) + 2, lt.FINE)
            m = ns.make_noise_model(fine, 1.5, seed=2024)
            gl = lt.make_lattice(1, eps, max(1, -(-n // 10)), lt.AMPLITUDE)
            aa = ns.gl_alpha(m, gl)
            lam = 1.0 + 4.0 * lt.ksq_grid(gl)
            weights = lt.norm_weights(gl, 1.0)
            rng = np.random.default_rng(5)
            sups = np.zeros(n_paths)
            for p in range(n_paths):
                z = np.zeros(gl.shape, dtype=complex)
                for _ in range(n_steps):
                    dw = np.sqrt(H) * (rng.standard_normal(gl.shape)
                                       + 1j * rng.standard_normal(gl.shape))
                    aux = rng.standard_normal(gl.shape) + 1j * rng.standard_normal(gl.shape)
                    z = ns.ou_exact_step(z, lam, aa, dw, H, aux)
                    sups[p] = max(sups[p], float((np.abs(z) * weights).sum()))
            q99[eps] = np.quantile(sups, 0.99)
        base = q99[0.2]
        for eps in (0.1, 0.05):
            assert q99[eps] <= 1.5 * base, q99
