"""GAMP linear steps, batched/compiled row updates, and full solves."""

import numpy as np
import pytest

from risloc import (table_ii_config, build_uniform_grid, Dictionary,
                    generate_scene, clean_frame, sigma2_for_snr, RowPrior,
                    SolverOptions, run_mp, HAVE_KERNEL)
from risloc.gamp import awgn_output_step, input_linear_step
from risloc.row_messages import row_update_batch, row_update_reference
from risloc.model import beta_prior
from risloc.baselines import bg_gamp_frame


def dqpsk_phases():
    return np.pi / 4 + np.pi / 2 * np.arange(4)


class TestOutputStep:
    def test_zero_variance_passthrough(self, rng):
        z = rng.standard_normal((6, 8)) + 1j * rng.standard_normal((6, 8))
        zeta = rng.standard_normal(8) + 1j * rng.standard_normal(8)
        y = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        phat, vp, qhat, vq, ahat, va = awgn_output_step(
            z, np.abs(z)**2, zeta, np.zeros(8), np.zeros(6), y, 0.1)
        np.testing.assert_allclose(phat, z @ zeta)
        np.testing.assert_allclose(vp, 1e-12)
        np.testing.assert_allclose(qhat, phat, atol=1e-10)
        np.testing.assert_allclose(ahat, (y - phat) / (vp + 0.1))

    def test_large_noise_ignores_measurement(self, rng):
        z = rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5))
        zeta = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        vz = rng.uniform(0.1, 0.5, 5)
        y = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        phat, vp, qhat, vq, _, _ = awgn_output_step(
            z, np.abs(z)**2, zeta, vz, np.zeros(4), y, 1e12)
        np.testing.assert_allclose(qhat, phat, atol=1e-9)
        np.testing.assert_allclose(vq, vp, rtol=1e-9)

    def test_moments_match_quadrature(self, rng):
        # scalar AWGN posterior: E{q | y} and Var{q | y} by integration
        from scipy.integrate import quad
        for _ in range(10):
            p = rng.standard_normal() + 1j * rng.standard_normal()
            vp = rng.uniform(0.2, 1.5)
            y = rng.standard_normal() + 1j * rng.standard_normal()
            s2 = rng.uniform(0.2, 1.5)
            z1 = np.ones((1, 1))
            _, _, qhat, vq, _, _ = awgn_output_step(
                z1, z1.real, np.array([p]), np.array([vp]),
                np.zeros(1), np.array([y]), s2)

            def moments(axis):
                def pdf(x):
                    q = x if axis == 0 else 1j * x
                    base = p if axis == 0 else p / 1j
                    yy = y if axis == 0 else y / 1j
                    return np.exp(-abs(x - (base.real if axis == 0 else base.real))**2 / vp
                                  - abs((yy.real if axis == 0 else yy.real) - x)**2 / s2)
                norm = quad(pdf, -12, 12)[0]
                mean = quad(lambda x: x * pdf(x), -12, 12)[0] / norm
                var = quad(lambda x: (x - mean)**2 * pdf(x), -12, 12)[0] / norm
                return mean, var
            mr, vr_ = moments(0)
            assert qhat[0].real == pytest.approx(mr, abs=1e-8)
            # real part carries half the complex variance
            assert vq[0] / 2 == pytest.approx(vr_, abs=1e-8)

    def test_rejects_bad_sigma(self, rng):
        z = np.ones((2, 2), dtype=complex)
        with pytest.raises(ValueError):
            awgn_output_step(z, np.abs(z)**2, np.zeros(2), np.zeros(2),
                             np.zeros(2), np.zeros(2), 0.0)


class TestInputStep:
    def test_zero_residual_returns_estimate(self, rng):
        z = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
        zeta = rng.standard_normal(7) + 1j * rng.standard_normal(7)
        rhat, vr = input_linear_step(z, np.abs(z)**2, np.zeros(5),
                                     np.ones(5), zeta)
        np.testing.assert_allclose(rhat, zeta)

    def test_scalar_case(self):
        z = np.array([[1.0 + 0j]])
        rhat, vr = input_linear_step(z, np.abs(z)**2, np.array([0.5 + 0j]),
                                     np.array([4.0]), np.array([0.0 + 0j]))
        assert vr[0] == pytest.approx(0.25)
        assert rhat[0] == pytest.approx(0.25 * 0.5)

    def test_matches_direct_formula(self, rng):
        z = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
        ahat = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        va = rng.uniform(0.1, 1.0, 5)
        zeta = rng.standard_normal(7) + 1j * rng.standard_normal(7)
        rhat, vr = input_linear_step(z, np.abs(z)**2, ahat, va, zeta)
        for i in range(7):
            denom = np.sum(np.abs(z[:, i])**2 * va)
            assert vr[i] == pytest.approx(1.0 / denom)
            want = zeta[i] + vr[i] * np.sum(z[:, i].conj() * ahat)
            assert rhat[i] == pytest.approx(want)

    def test_dead_column_gets_ceiling(self, rng):
        z = np.zeros((4, 3), dtype=complex)
        z[:, 0] = 1.0
        rhat, vr = input_linear_step(z, np.abs(z)**2,
                                     np.zeros(4, complex), np.ones(4),
                                     np.zeros(3, complex))
        assert vr[1] == pytest.approx(1e12)
        assert vr[2] == pytest.approx(1e12)


class TestRowUpdateImplementations:
    @pytest.mark.parametrize("order", [2, 4, 8])
    def test_batch_matches_reference(self, order, rng):
        phases = np.pi / order + 2 * np.pi * np.arange(order) / order
        prior = RowPrior(0.05, 0.0, 1.0, phases)
        rhat = 0.6 * (rng.standard_normal((15, 6))
                      + 1j * rng.standard_normal((15, 6)))
        vr = rng.uniform(0.02, 0.4, (15, 6))
        ref = row_update_reference(rhat, vr, prior)
        got = row_update_batch(rhat, vr, 0.05, 1.0, phases)
        for a, b in zip(ref, got):
            np.testing.assert_allclose(b, a, atol=1e-12)

    @pytest.mark.skipif(not HAVE_KERNEL, reason="compiled kernel unavailable")
    def test_kernel_matches_reference(self, rng):
        from risloc._row_kernel import row_update_kernel
        phases = dqpsk_phases()
        prior = RowPrior(0.03, 0.0, 1.0, phases)
        rhat = 0.5 * (rng.standard_normal((30, 7))
                      + 1j * rng.standard_normal((30, 7)))
        vr = rng.uniform(0.01, 0.3, (30, 7))
        ref = row_update_reference(rhat, vr, prior)
        got = row_update_kernel(np.ascontiguousarray(rhat),
                                np.ascontiguousarray(vr), 0.03, 1.0,
                                phases, 1e-12)
        for a, b in zip(ref, got):
            np.testing.assert_allclose(b, a, atol=1e-12)

    def test_single_block_edge(self, rng):
        phases = dqpsk_phases()
        prior = RowPrior(0.1, 0.0, 1.0, phases)
        rhat = rng.standard_normal((9, 1)) + 1j * rng.standard_normal((9, 1))
        vr = rng.uniform(0.05, 0.2, (9, 1))
        ref = row_update_reference(rhat, vr, prior)
        got = row_update_batch(rhat, vr, 0.1, 1.0, phases)
        for a, b in zip(ref, got):
            np.testing.assert_allclose(b, a, atol=1e-12)


def tiny_problem(rng_seed=5, snr_db=25.0, n_devices=1, blocks=3):
    cfg = table_ii_config(n_subcarriers=8, n_blocks=blocks, n_tx=4, n_rx=3,
                          n_devices=n_devices)
    grid = build_uniform_grid(cfg, 7, 6)
    scene = generate_scene(cfg, rng_seed, grid=grid)
    d = Dictionary(grid, scene.pilots, cfg)
    yc = clean_frame(scene, cfg)
    s2 = sigma2_for_snr(float(np.sum(np.abs(yc)**2)), snr_db, cfg)
    rng = np.random.default_rng(rng_seed + 1)
    noise = np.sqrt(s2 / 2) * (rng.standard_normal(yc.shape)
                               + 1j * rng.standard_normal(yc.shape))
    bm, bv = beta_prior(cfg)
    prior = RowPrior(cfg.n_devices / grid.n_rows, bm, bv, cfg.dpsk_phases)
    return cfg, grid, scene, d, yc + noise, s2, prior


class TestRunMp:
    def test_noiseless_single_device_exact(self):
        cfg, grid, scene, d, _, _, prior = tiny_problem()
        y = clean_frame(scene, cfg)
        s2 = 1e-12 * float(np.sum(np.abs(y)**2)) / y.size
        est = run_mp(y, d, prior, s2, SolverOptions())
        zeta = np.zeros((grid.n_rows, cfg.n_blocks), dtype=complex)
        zeta[scene.grid_rows] = scene.gains
        err = np.linalg.norm(est.zeta_mean - zeta) / np.linalg.norm(zeta)
        assert err < 1e-6
        assert set(est.top_rows(1)) == set(scene.grid_rows.tolist())

    def test_support_argmax_single_block(self):
        # K=1, M=1, noiseless: the detector lands on the true grid row
        cfg, grid, scene, d, _, _, prior = tiny_problem(blocks=1)
        y = clean_frame(scene, cfg)
        s2 = 1e-10 * float(np.sum(np.abs(y)**2)) / y.size
        est = run_mp(y, d, prior, s2, SolverOptions())
        assert int(np.argmax(est.row_support)) == int(scene.grid_rows[0])

    def test_permutation_equivariance(self, rng):
        cfg, grid, scene, d, y, s2, prior = tiny_problem(n_devices=2)
        est = run_mp(y, d, prior, s2, SolverOptions())
        perm = rng.permutation(grid.n_rows)

        class Shuffled:
            blocks = np.ascontiguousarray(d.blocks[:, :, perm])
            abs2 = np.ascontiguousarray(d.abs2[:, :, perm])
        est_p = run_mp(y, Shuffled, prior, s2, SolverOptions())
        np.testing.assert_allclose(est_p.zeta_mean, est.zeta_mean[perm],
                                   atol=1e-8)
        np.testing.assert_allclose(est_p.row_support, est.row_support[perm],
                                   atol=1e-8)

    def test_serial_matches_truth_noiseless(self):
        if not HAVE_KERNEL:
            pytest.skip("compiled kernel unavailable")
        cfg, grid, scene, d, _, _, prior = tiny_problem(n_devices=2)
        y = clean_frame(scene, cfg)
        s2 = 1e-10 * float(np.sum(np.abs(y)**2)) / y.size
        est = run_mp(y, d, prior, s2, SolverOptions(schedule="serial"))
        zeta = np.zeros((grid.n_rows, cfg.n_blocks), dtype=complex)
        zeta[scene.grid_rows] = scene.gains
        err = np.linalg.norm(est.zeta_mean - zeta) / np.linalg.norm(zeta)
        assert err < 1e-5

    def test_bg_gamp_reduction_m1_v1(self):
        """M=1, V=1 with a zero-phase constellation collapses to BG-GAMP."""
        cfg, grid, scene, d, y, s2, _ = tiny_problem(blocks=1)
        bm, bv = beta_prior(cfg)
        prior = RowPrior(cfg.n_devices / grid.n_rows, 0.0, bv,
                         np.array([0.0]))
        opts = SolverOptions()
        mp_est = run_mp(y, d, prior, s2, opts)
        bg_est = bg_gamp_frame(y, d, prior.sparsity, 0.0, bv, s2, opts)
        np.testing.assert_allclose(mp_est.zeta_mean, bg_est.zeta_mean,
                                   atol=1e-8 * np.abs(bg_est.zeta_mean).max())
        np.testing.assert_allclose(mp_est.support_prob, bg_est.support_prob,
                                   atol=1e-8)

    def test_variance_floor_invariant(self):
        cfg, grid, scene, d, y, s2, prior = tiny_problem(n_devices=2)
        est = run_mp(y, d, prior, s2, SolverOptions())
        floor = 1e-12 * prior.beta_var
        assert np.all(est.zeta_var >= floor * (1 - 1e-12))
        assert np.all((est.support_prob >= 0) & (est.support_prob <= 1))
        assert np.all((est.row_support >= 0) & (est.row_support <= 1))
