"""Grid construction, operator assembly, analytic derivatives."""

import numpy as np
import pytest

from risloc import (table_ii_config, build_uniform_grid, Dictionary,
                    generate_scene, clean_frame, channel_bs)
from risloc.dictionary import assemble_block, assemble_frame


class TestGrid:
    def test_two_point_grid_is_endpoints(self, small_config):
        g = build_uniform_grid(small_config, 2, 2)
        np.testing.assert_allclose(
            g.angles, [small_config.angle_min, small_config.angle_max])
        np.testing.assert_allclose(
            g.delays, [small_config.delay_min, small_config.delay_max])

    def test_table_ii_row_count(self):
        g = build_uniform_grid(table_ii_config(), 25, 25)
        assert g.n_rows == 625

    def test_uniform_spacing(self, small_config):
        g = build_uniform_grid(small_config, 9, 7)
        da = np.diff(g.angles)
        dt = np.diff(g.delays)
        np.testing.assert_allclose(da, da[0], rtol=1e-12)
        np.testing.assert_allclose(dt, dt[0], rtol=1e-12)

    def test_rejects_single_point(self, small_config):
        with pytest.raises(ValueError):
            build_uniform_grid(small_config, 1, 4)

    def test_row_indexing(self, small_config):
        g = build_uniform_grid(small_config, 4, 3)
        assert g.row_to_pair(0) == (0, 0)
        assert g.row_to_pair(5) == (1, 1)
        assert g.row_angle(5) == g.angles[1]
        assert g.row_delay(5) == g.delays[1]


class TestAssembly:
    def test_column_against_brute_force(self, small_config, small_grid, rng):
        cfg = small_config
        scene = generate_scene(cfg, 31, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, cfg)
        for _ in range(8):
            m = rng.integers(cfg.n_blocks)
            n = rng.integers(cfg.n_subcarriers)
            q = rng.integers(small_grid.n_angles)
            u = rng.integers(small_grid.n_delays)
            phasor = np.exp(-2j * np.pi * n * cfg.subcarrier_spacing
                            * small_grid.delays[u])
            want = phasor * (channel_bs(small_grid.angles[q], cfg.n_tx,
                                        cfg.n_rx) @ scene.pilots[m, n])
            got = d.subcarrier_slice(m, n)[:, u * small_grid.n_angles + q]
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_frame_matches_slice_stack(self, small_config, small_grid):
        scene = generate_scene(small_config, 32, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, small_config)
        ref = assemble_frame(small_grid, scene.pilots, small_config, 1)
        np.testing.assert_allclose(d.block(1), ref, atol=1e-12)
        assert d.block(1).shape == (small_config.n_rx
                                    * small_config.n_subcarriers,
                                    small_grid.n_rows)

    def test_first_subcarrier_delay_degenerate(self, small_config, small_grid):
        scene = generate_scene(small_config, 33, grid=small_grid)
        z0 = assemble_block(small_grid, scene.pilots, small_config, 0, 0)
        q_cols = small_grid.n_angles
        for u in range(1, small_grid.n_delays):
            np.testing.assert_allclose(z0[:, u * q_cols:(u + 1) * q_cols],
                                       z0[:, :q_cols], atol=1e-12)

    def test_column_norm_delay_invariant(self, small_config, small_grid):
        scene = generate_scene(small_config, 34, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, small_config)
        norms = np.linalg.norm(d.block(0), axis=0)
        per_delay = norms.reshape(small_grid.n_delays, small_grid.n_angles)
        np.testing.assert_allclose(
            per_delay, np.broadcast_to(per_delay[0], per_delay.shape),
            rtol=1e-12)

    def test_noiseless_consistency_with_synthesis(self, small_config,
                                                  small_grid):
        cfg = small_config
        scene = generate_scene(cfg, 35, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, cfg)
        zeta = np.zeros((small_grid.n_rows, cfg.n_blocks), dtype=complex)
        zeta[scene.grid_rows] = scene.gains
        y = clean_frame(scene, cfg)
        for m in range(cfg.n_blocks):
            np.testing.assert_allclose(d.block(m) @ zeta[:, m], y[:, m],
                                       atol=1e-18)


class TestDerivatives:
    @staticmethod
    def _fd(dict_builder, grid, axis, index, h):
        if axis == 0:
            hi = grid.replace_axes(angles=grid.angles
                                   + h * (np.arange(grid.n_angles) == index))
            lo = grid.replace_axes(angles=grid.angles
                                   - h * (np.arange(grid.n_angles) == index))
        else:
            hi = grid.replace_axes(delays=grid.delays
                                   + h * (np.arange(grid.n_delays) == index))
            lo = grid.replace_axes(delays=grid.delays
                                   - h * (np.arange(grid.n_delays) == index))
        return dict_builder(hi), dict_builder(lo)

    def test_angle_derivative_fd(self, small_config, small_grid, rng):
        scene = generate_scene(small_config, 41, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, small_config)
        h = 1e-6
        for _ in range(4):
            m = rng.integers(small_config.n_blocks)
            q = rng.integers(small_grid.n_angles)
            hi, lo = self._fd(lambda g: Dictionary(g, scene.pilots,
                                                   small_config),
                              small_grid, 0, q, h)
            fd = (hi.block(m) - lo.block(m)) / (2 * h)
            got = d.derivative_angle(m, q)
            assert (np.linalg.norm(got - fd) / np.linalg.norm(got)) < 1e-5

    def test_delay_derivative_fd(self, small_config, small_grid, rng):
        scene = generate_scene(small_config, 42, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, small_config)
        h = 1e-12
        for _ in range(4):
            m = rng.integers(small_config.n_blocks)
            u = rng.integers(small_grid.n_delays)
            hi, lo = self._fd(lambda g: Dictionary(g, scene.pilots,
                                                   small_config),
                              small_grid, 1, u, h)
            fd = (hi.block(m) - lo.block(m)) / (2 * h)
            got = d.derivative_delay(m, u)
            assert (np.linalg.norm(got - fd) / np.linalg.norm(got)) < 1e-5

    def test_angle_derivative_support(self, small_config, small_grid):
        scene = generate_scene(small_config, 43, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, small_config)
        q = 2
        dz = d.derivative_angle(0, q)
        mask = np.ones(small_grid.n_rows, dtype=bool)
        mask[d.angle_columns(q)] = False
        assert np.all(dz[:, mask] == 0)
        assert np.any(dz[:, ~mask] != 0)

    def test_delay_derivative_support_and_n0(self, small_config, small_grid):
        cfg = small_config
        scene = generate_scene(cfg, 44, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, cfg)
        u = 3
        dz = d.derivative_delay(0, u)
        mask = np.ones(small_grid.n_rows, dtype=bool)
        mask[d.delay_columns(u)] = False
        assert np.all(dz[:, mask] == 0)
        # first subcarrier slice vanishes (factor n = 0)
        np.testing.assert_allclose(dz[:cfg.n_rx, :], 0.0, atol=1e-30)

    def test_scalar_array_has_no_angle_sensitivity(self):
        cfg = table_ii_config(n_tx=1, n_rx=1, n_subcarriers=4, n_blocks=2)
        grid = build_uniform_grid(cfg, 3, 3)
        scene = generate_scene(cfg, 45, grid=grid)
        d = Dictionary(grid, scene.pilots, cfg)
        np.testing.assert_allclose(d.derivative_angle(0, 1), 0.0, atol=1e-16)

    def test_index_errors(self, small_config, small_grid):
        scene = generate_scene(small_config, 46, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, small_config)
        with pytest.raises(IndexError):
            d.derivative_angle(0, small_grid.n_angles)
        with pytest.raises(IndexError):
            d.derivative_delay(0, -1)

    def test_rebuild_moves_only_touched_columns(self, small_config,
                                                small_grid):
        scene = generate_scene(small_config, 47, grid=small_grid)
        d = Dictionary(small_grid, scene.pilots, small_config)
        angles = small_grid.angles.copy()
        angles[2] += 1e-3
        moved = d.with_grid(small_grid.replace_axes(angles=angles))
        changed = np.any(np.abs(moved.blocks - d.blocks) > 0, axis=(0, 1))
        want = np.zeros(small_grid.n_rows, dtype=bool)
        want[d.angle_columns(2)] = True
        np.testing.assert_array_equal(changed, want)
