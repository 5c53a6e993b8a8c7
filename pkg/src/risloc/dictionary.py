"""Angle/delay grid, per-block measurement operators and their derivatives.

Flat row convention: index i = u * Q + q pairs delay u with angle q, matching
the column layout of the per-block operators.
"""

from dataclasses import dataclass
import numpy as np

from .config import SystemConfig
from .model import channel_bs, channel_bs_derivative


@dataclass(frozen=True)
class Grid:
    angles: np.ndarray
    delays: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.angles) <= 0) or np.any(np.diff(self.delays) <= 0):
            raise ValueError("grid axes must be strictly increasing")

    @property
    def n_angles(self):
        return self.angles.size

    @property
    def n_delays(self):
        return self.delays.size

    @property
    def n_rows(self):
        return self.angles.size * self.delays.size

    def row_to_pair(self, row):
        """(angle index, delay index) of a flat row."""
        return row % self.n_angles, row // self.n_angles

    def row_angle(self, row):
        return self.angles[np.asarray(row) % self.n_angles]

    def row_delay(self, row):
        return self.delays[np.asarray(row) // self.n_angles]

    def replace_axes(self, angles=None, delays=None):
        return Grid(angles=self.angles if angles is None else np.asarray(angles, float),
                    delays=self.delays if delays is None else np.asarray(delays, float))


def build_uniform_grid(config: SystemConfig, n_angles, n_delays) -> Grid:
    """Uniform grid with endpoints pinned to the configured ranges."""
    if n_angles < 2 or n_delays < 2:
        raise ValueError("need at least two points per axis")
    return Grid(np.linspace(config.angle_min, config.angle_max, n_angles),
                np.linspace(config.delay_min, config.delay_max, n_delays))


class Dictionary:
    """Materialized operators Z_m (Nr*N x Q*U) for every block.

    Immutable once built; rebuilding after a grid update touches only the
    moved columns' values (full rebuild here, desk scale makes that cheap).
    """

    def __init__(self, grid: Grid, pilots, config: SystemConfig):
        self.grid = grid
        self.pilots = pilots
        self.config = config
        self.blocks = self._assemble_all()
        self.abs2 = np.abs(self.blocks)**2

    def _steering_products(self):
        cfg = self.config
        th = self.grid.angles
        a = np.exp(1j * np.pi * np.arange(cfg.n_tx)[:, None] * np.sin(th)[None, :])
        a /= np.sqrt(cfg.n_tx)
        b = np.exp(-1j * np.pi * np.arange(cfg.n_rx)[:, None] * np.sin(th)[None, :])
        b /= np.sqrt(cfg.n_rx)
        return a, b

    def _assemble_all(self):
        cfg = self.config
        a, b = self._steering_products()
        # H(theta_q) x_m[n] = b[:, q] * (a[:, q]^H x_m[n])
        s = np.einsum('tq,mnt->mnq', a.conj(), self.pilots)
        cols = np.einsum('rq,mnq->mnrq', b, s)
        n = np.arange(cfg.n_subcarriers)
        ramps = np.exp(-2j * np.pi * cfg.subcarrier_spacing
                       * n[:, None] * self.grid.delays[None, :])
        z = np.einsum('nu,mnrq->mnruq', ramps, cols)
        return np.ascontiguousarray(
            z.reshape(cfg.n_blocks, cfg.n_subcarriers * cfg.n_rx, self.grid.n_rows))

    def block(self, m):
        return self.blocks[m]

    def subcarrier_slice(self, m, n):
        """Z_m[n]: the Nr x Q*U slice of block m at subcarrier n."""
        cfg = self.config
        return self.blocks[m].reshape(cfg.n_subcarriers, cfg.n_rx, -1)[n]

    def column(self, m, q, u):
        return self.blocks[m][:, u * self.grid.n_angles + q]

    def angle_columns(self, q):
        """Flat column indices carrying angle index q."""
        return np.arange(q, self.grid.n_rows, self.grid.n_angles)

    def delay_columns(self, u):
        """Flat column indices carrying delay index u."""
        start = u * self.grid.n_angles
        return np.arange(start, start + self.grid.n_angles)

    def derivative_angle_columns(self, m, q):
        """The U nonzero columns of d Z_m / d angle_q (others vanish)."""
        cfg = self.config
        if not 0 <= q < self.grid.n_angles:
            raise IndexError("angle index out of range")
        dh = channel_bs_derivative(self.grid.angles[q], cfg.n_tx, cfg.n_rx)
        dhx = np.einsum('rt,nt->nr', dh, self.pilots[m])            # (N, Nr)
        n = np.arange(cfg.n_subcarriers)
        ramps = np.exp(-2j * np.pi * cfg.subcarrier_spacing
                       * n[:, None] * self.grid.delays[None, :])    # (N, U)
        return (ramps[:, None, :] * dhx[:, :, None]).reshape(
            cfg.n_subcarriers * cfg.n_rx, self.grid.n_delays)

    def derivative_angle(self, m, q):
        """d Z_m / d angle_q; nonzero only in the U columns with angle index q."""
        out = np.zeros_like(self.blocks[m])
        out[:, self.angle_columns(q)] = self.derivative_angle_columns(m, q)
        return out

    def derivative_delay_columns(self, m, u):
        """The Q nonzero columns of d Z_m / d delay_u (others vanish)."""
        cfg = self.config
        if not 0 <= u < self.grid.n_delays:
            raise IndexError("delay index out of range")
        a, b = self._steering_products()
        s = np.einsum('tq,nt->nq', a.conj(), self.pilots[m])
        cols_q = np.einsum('rq,nq->nrq', b, s)                      # (N, Nr, Q)
        n = np.arange(cfg.n_subcarriers)
        w = -2j * np.pi * cfg.subcarrier_spacing * n
        dramp = w * np.exp(-2j * np.pi * cfg.subcarrier_spacing * n
                           * self.grid.delays[u])
        return (dramp[:, None, None] * cols_q).reshape(
            -1, self.grid.n_angles)

    def derivative_delay(self, m, u):
        """d Z_m / d delay_u; nonzero only in the Q columns with delay index u."""
        out = np.zeros_like(self.blocks[m])
        out[:, self.delay_columns(u)] = self.derivative_delay_columns(m, u)
        return out

    def with_grid(self, grid: Grid):
        return Dictionary(grid, self.pilots, self.config)


def assemble_block(grid, pilots, config, m, n):
    """Single-subcarrier operator Z_m[n] (Nr x Q*U), brute-force reference."""
    ramp = np.exp(-2j * np.pi * n * config.subcarrier_spacing * grid.delays)
    out = np.empty((config.n_rx, grid.n_rows), dtype=complex)
    for q, th in enumerate(grid.angles):
        hx = channel_bs(th, config.n_tx, config.n_rx) @ pilots[m, n]
        for u in range(grid.n_delays):
            out[:, u * grid.n_angles + q] = ramp[u] * hx
    return out


def assemble_frame(grid, pilots, config, m):
    """Vertical stack of Z_m[n] over all subcarriers (Nr*N x Q*U)."""
    return np.vstack([assemble_block(grid, pilots, config, m, n)
                      for n in range(config.n_subcarriers)])
