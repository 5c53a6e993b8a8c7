"""Physical-layer model: steering, reflection, DPSK, fading, scenes."""

import numpy as np
import pytest

from risloc import (table_ii_config, steering_bs, steering_ris, channel_bs,
                    retro_gradients, ris_phase_profile, effective_gain,
                    dpsk_encode, dpsk_decode, fading_coefficient, beta_prior,
                    generate_scene, synthesize_frame, clean_frame, snr_db,
                    sigma2_for_snr, build_uniform_grid)
from risloc.model import amplitude_factor, steering_ris as ris_vec, wrap_phase


class TestSteering:
    def test_broadside_bs(self):
        np.testing.assert_allclose(steering_bs(0.0, 4), 0.5 * np.ones(4))

    def test_endfire_value(self):
        got = steering_bs(np.pi / 2, 2)
        np.testing.assert_allclose(got, np.array([1, -1]) / np.sqrt(2),
                                   atol=1e-12)

    def test_sign_conjugates(self, rng):
        for theta in rng.uniform(-np.pi / 2, np.pi / 2, 5):
            a = steering_bs(theta, 6, +1)
            b = steering_bs(theta, 6, -1)
            np.testing.assert_allclose(b, a.conj(), atol=1e-14)

    def test_unit_norm(self, rng):
        for theta in rng.uniform(-np.pi / 2, np.pi / 2, 10):
            assert np.linalg.norm(steering_bs(theta, 7)) == pytest.approx(1.0)
            phi, gam = rng.uniform(-np.pi / 2, np.pi / 2), rng.uniform(0, 2 * np.pi)
            assert np.linalg.norm(steering_ris(phi, gam, 3, 5)) == pytest.approx(1.0)

    def test_ris_broadside(self):
        np.testing.assert_allclose(steering_ris(0.0, 1.3, 2, 2),
                                   0.25 * np.ones(4) * 2)

    def test_ris_xaxis(self):
        got = steering_ris(np.pi / 2, 0.0, 2, 1)
        np.testing.assert_allclose(got, np.array([1, -1]) / np.sqrt(2),
                                   atol=1e-12)


class TestChannel:
    def test_broadside_entries(self):
        h = channel_bs(0.0, 4, 3)
        np.testing.assert_allclose(h, np.full((3, 4), 1 / np.sqrt(12)))

    def test_rank_one(self, rng):
        for theta in rng.uniform(-np.pi / 3, np.pi / 3, 4):
            h = channel_bs(theta, 5, 4)
            assert np.linalg.matrix_rank(h) == 1
            assert np.linalg.norm(h) == pytest.approx(1.0)
            np.testing.assert_allclose(np.abs(h), 1 / np.sqrt(20))


class TestRetroReflection:
    def test_normal_incidence(self):
        assert retro_gradients(0.0, 1.0) == (0.0, 0.0)

    def test_known_value(self):
        qx, qy = retro_gradients(np.pi / 6, 0.0)
        assert qx == pytest.approx(-1.0)
        assert qy == pytest.approx(0.0, abs=1e-12)

    def test_magnitude_identity(self, rng):
        for _ in range(5):
            phi = rng.uniform(-np.pi / 2, np.pi / 2)
            gam = rng.uniform(0, 2 * np.pi)
            qx, qy = retro_gradients(phi, gam)
            assert qx**2 + qy**2 == pytest.approx(4 * np.sin(phi)**2)

    def test_phase_profile(self):
        theta = ris_phase_profile(0.0, 0.0, 0.7, 3, 4)
        np.testing.assert_allclose(theta, 0.7)
        theta = ris_phase_profile(0.25, -0.5, 0.2, 4, 3)
        assert theta[0, 0] == pytest.approx(0.2)
        assert theta[1, 0] - theta[0, 0] == pytest.approx(np.pi * 0.25)
        assert theta[0, 1] - theta[0, 0] == pytest.approx(np.pi * -0.5)


def brute_force_gain(beta, theta, incident, reflected, nx, ny):
    """Independent oracle: the cascade through explicit steering vectors."""
    a_i = ris_vec(*incident, nx, ny)
    a_r = ris_vec(*reflected, nx, ny)
    lam = np.diag(np.exp(1j * theta.reshape(-1)))
    return beta * a_r.conj() @ lam @ a_i


class TestEffectiveGain:
    def test_retro_identity_unit(self):
        phi, gam = 0.35, 2.1
        qx, qy = retro_gradients(phi, gam)
        theta = ris_phase_profile(qx, qy, 0.0, 5, 4)
        got = effective_gain(1.0, theta, (phi, gam), (-phi, gam))
        assert got == pytest.approx(1.0, abs=1e-10)

    def test_retro_identity_complex(self):
        phi, gam = -0.2, 0.9
        qx, qy = retro_gradients(phi, gam)
        theta = ris_phase_profile(qx, qy, np.pi / 4, 6, 6)
        beta = 0.5 * np.exp(1j * 0.3)
        got = effective_gain(beta, theta, (phi, gam), (-phi, gam))
        assert got == pytest.approx(beta * np.exp(1j * np.pi / 4), abs=1e-10)

    def test_matches_brute_force(self, rng):
        for _ in range(5):
            nx, ny = 3, 4
            theta = rng.uniform(-np.pi, np.pi, (nx, ny))
            inc = (rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi))
            ref = (rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi))
            beta = rng.standard_normal() + 1j * rng.standard_normal()
            got = effective_gain(beta, theta, inc, ref)
            want = brute_force_gain(beta, theta, inc, ref, nx, ny)
            assert got == pytest.approx(want, rel=1e-10)

    def test_retro_identity_random_angles(self, rng):
        # the closed form holds for every incident geometry
        for _ in range(6):
            phi = rng.uniform(-np.pi / 3, np.pi / 3)
            gam = rng.uniform(0, 2 * np.pi)
            ref_phase = rng.uniform(-np.pi, np.pi)
            qx, qy = retro_gradients(phi, gam)
            theta = ris_phase_profile(qx, qy, ref_phase, 4, 5)
            got = effective_gain(1.0, theta, (phi, gam), (-phi, gam))
            assert got == pytest.approx(np.exp(1j * ref_phase), rel=1e-10)


class TestDpsk:
    def test_dqpsk_single_step(self):
        # reference phase pi/4, start pi/4, symbol pi/4 -> 3*pi/4
        seq = dpsk_encode([0], np.pi / 4, np.pi / 4, 4)
        assert wrap_phase(seq[1]) == pytest.approx(3 * np.pi / 4)

    def test_all_zero_symbols_progression(self):
        order = 4
        phases = np.pi / order + 2 * np.pi * np.arange(order) / order
        seq = dpsk_encode(np.zeros(6, dtype=int), phases[0], np.pi / 4, order)
        steps = wrap_phase(np.diff(seq))
        np.testing.assert_allclose(steps, wrap_phase(phases[0] + np.pi / 4))

    @pytest.mark.parametrize("order", [2, 4, 8])
    def test_roundtrip(self, order, rng):
        phases = np.pi / order + 2 * np.pi * np.arange(order) / order
        for _ in range(10):
            symbols = rng.integers(0, order, 9)
            start = phases[rng.integers(order)]
            seq = dpsk_encode(symbols, start, np.pi / order, order)
            assert np.all(np.isin(np.round(wrap_phase(seq), 9),
                                  np.round(wrap_phase(phases), 9)))
            alpha = np.exp(1j * seq)
            got, erased = dpsk_decode(alpha, np.pi / order, order)
            assert not erased.any()
            np.testing.assert_array_equal(got, symbols)

    def test_common_phase_invariance(self, rng):
        symbols = rng.integers(0, 4, 7)
        seq = dpsk_encode(symbols, np.pi / 4, np.pi / 4, 4)
        alpha = np.exp(1j * seq)
        rot = (0.3 - 1.7j)
        base, _ = dpsk_decode(alpha, np.pi / 4, 4)
        scaled, _ = dpsk_decode(rot * alpha, np.pi / 4, 4)
        np.testing.assert_array_equal(base, scaled)

    def test_small_perturbation_exact(self, rng):
        symbols = rng.integers(0, 4, 8)
        seq = dpsk_encode(symbols, np.pi / 4, np.pi / 4, 4)
        # keep each differential phase error below half the pi/2 spacing
        jitter = rng.uniform(-0.39, 0.39, seq.size) / 2.0
        alpha = np.exp(1j * (seq + jitter))
        got, _ = dpsk_decode(alpha, np.pi / 4, 4)
        np.testing.assert_array_equal(got, symbols)

    def test_zero_amplitude_erasure(self):
        seq = dpsk_encode([1, 2, 3], np.pi / 4, np.pi / 4, 4)
        alpha = np.exp(1j * seq)
        alpha[1] = 0.0
        got, erased = dpsk_decode(alpha, np.pi / 4, 4)
        assert erased[0] and erased[1] and not erased[2]
        assert got[0] == -1 and got[1] == -1 and got[2] == 3

    def test_bad_symbol_rejected(self):
        with pytest.raises(ValueError):
            dpsk_encode([4], np.pi / 4, np.pi / 4, 4)


class TestFading:
    def test_zero_eta(self):
        cfg = table_ii_config()
        assert fading_coefficient(100.0, 0.0, cfg) == 0.0

    def test_inverse_square_amplitude(self):
        cfg = table_ii_config()
        near = fading_coefficient(500.0, 1.0, cfg)
        far = fading_coefficient(1000.0, 1.0, cfg)
        assert abs(near) / abs(far) == pytest.approx(4.0)

    def test_hand_evaluation(self):
        cfg = table_ii_config()
        d = 2000.0
        want = np.sqrt(100 * 100 * 1.0 * 900**2 * (0.1**4 / 4)
                       / (64 * np.pi**3 * d**4))
        assert amplitude_factor(d, cfg) == pytest.approx(want, rel=1e-12)

    def test_rejects_nonpositive_distance(self):
        with pytest.raises(ValueError):
            fading_coefficient(0.0, 1.0, table_ii_config())

    def test_beta_prior_zero_mean(self):
        mean, var = beta_prior(table_ii_config())
        assert mean == 0
        assert var > 0

    def test_beta_prior_degenerate_range(self):
        # closed ranges collapse: var = P^2 + (2P)^2/4 = 2 P^2
        cfg = table_ii_config(distance_min=1000.0, distance_max=1000.0 + 1e-9)
        p = amplitude_factor(1000.0, cfg)
        _, var = beta_prior(cfg)
        assert var == pytest.approx(2 * p**2, rel=1e-6)


class TestScene:
    def test_deterministic(self, small_config, small_grid):
        a = generate_scene(small_config, 77, grid=small_grid)
        b = generate_scene(small_config, 77, grid=small_grid)
        np.testing.assert_array_equal(a.pilots, b.pilots)
        np.testing.assert_array_equal(a.angles, b.angles)
        np.testing.assert_array_equal(a.gains, b.gains)

    def test_on_grid_snapping(self, small_config, small_grid):
        scene = generate_scene(small_config, 3, grid=small_grid)
        assert np.all(np.isin(scene.angles, small_grid.angles))
        assert np.all(np.isin(scene.delays, small_grid.delays))
        assert len(set(scene.grid_rows.tolist())) == small_config.n_devices

    def test_off_grid_ranges(self, small_config):
        scene = generate_scene(small_config, 5, on_grid=False)
        assert scene.grid_rows is None
        assert np.all((scene.angles >= small_config.angle_min)
                      & (scene.angles <= small_config.angle_max))
        assert np.all((scene.delays >= small_config.delay_min)
                      & (scene.delays <= small_config.delay_max))

    def test_pilots_unit_modulus(self, small_config, small_grid):
        scene = generate_scene(small_config, 9, grid=small_grid)
        np.testing.assert_allclose(np.abs(scene.pilots), 1.0)

    def test_phase_sequences_obey_recursion(self, small_config, small_grid):
        scene = generate_scene(small_config, 11, grid=small_grid)
        cfg = small_config
        for dev in scene.devices:
            want = dpsk_encode(dev.symbol_sequence, dev.phase_sequence[0],
                               cfg.reference_phase, cfg.dpsk_order)
            np.testing.assert_allclose(wrap_phase(dev.phase_sequence), want,
                                       atol=1e-12)


class TestFrameSynthesis:
    def test_noiseless_single_device_exact(self, small_config, small_grid):
        cfg = small_config
        scene = generate_scene(cfg, 21, grid=small_grid)
        dev = scene.devices[0]
        single = type(scene)(devices=(dev,), pilots=scene.pilots,
                             grid_rows=scene.grid_rows[:1])
        y = clean_frame(single, cfg)
        h = channel_bs(dev.angle, cfg.n_tx, cfg.n_rx)
        n = np.arange(cfg.n_subcarriers)
        for m in range(cfg.n_blocks):
            want = np.concatenate([
                dev.gain_sequence[m]
                * np.exp(-2j * np.pi * nn * cfg.subcarrier_spacing * dev.delay)
                * (h @ scene.pilots[m, nn]) for nn in n])
            np.testing.assert_allclose(y[:, m], want, atol=1e-18)

    def test_noise_energy_moment(self, small_config, small_grid):
        cfg = small_config.with_noise_variance(2.5e-3)
        scene = generate_scene(cfg, 22, grid=small_grid)
        draws = 400
        samples = cfg.n_rx * cfg.n_subcarriers * cfg.n_blocks
        clean = clean_frame(scene, cfg)
        energies = []
        for i in range(draws):
            w = synthesize_frame(scene, cfg, i) - clean
            energies.append(np.sum(np.abs(w)**2))
        mean = np.mean(energies)
        want = samples * cfg.noise_variance
        se = np.std(energies, ddof=1) / np.sqrt(draws)
        assert abs(mean - want) < 3 * se

    def test_snr_definition(self, small_config):
        cfg = small_config
        samples = cfg.n_rx * cfg.n_subcarriers * cfg.n_blocks
        assert snr_db(samples * 1.0, 1.0, cfg) == pytest.approx(0.0)
        assert (snr_db(samples, 0.5, cfg)
                == pytest.approx(10 * np.log10(2), abs=1e-9))

    def test_snr_sigma2_roundtrip(self, small_config, rng):
        energy = float(rng.uniform(0.5, 2.0))
        for target in (-3.0, 0.0, 7.5, 18.0):
            s2 = sigma2_for_snr(energy, target, small_config)
            assert snr_db(energy, s2, small_config) == pytest.approx(target)

    def test_zero_signal_sentinel(self, small_config):
        assert snr_db(0.0, 1.0, small_config) == -np.inf
