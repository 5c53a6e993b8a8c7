"""System configuration and Table-II-style defaults."""

from dataclasses import dataclass, field, replace
import numpy as np

C_LIGHT = 3.0e8


@dataclass(frozen=True)
class SystemConfig:
    """Global parameters of the RIS-aided full-duplex OFDM link.

    Angles are radians, delays seconds, powers linear.  The delay range is
    derived from the distance range via tau = 2 d / c (round trip).
    """

    n_subcarriers: int = 30
    n_blocks: int = 20
    n_tx: int = 16
    n_rx: int = 8
    subcarrier_spacing: float = 15e3
    cp_duration: float = 16.67e-6
    wavelength: float = 0.1
    ris_cols: int = 30
    ris_rows: int = 30
    n_devices: int = 5
    dpsk_order: int = 4
    reference_phase: float = np.pi / 4
    angle_min: float = -np.pi / 6
    angle_max: float = np.pi / 6
    distance_min: float = 1500.0
    distance_max: float = 2500.0
    gain_tx: float = 100.0
    gain_rx: float = 100.0
    gain_ris: float = 1.0
    noise_variance: float = 1e-13

    def __post_init__(self):
        for name in ("n_subcarriers", "n_blocks", "n_tx", "n_rx",
                     "ris_cols", "ris_rows", "n_devices", "dpsk_order"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.angle_min >= self.angle_max:
            raise ValueError("angle range is empty")
        if self.distance_min >= self.distance_max:
            raise ValueError("distance range is empty")
        if self.distance_min <= 0:
            raise ValueError("distances must be positive")
        if self.noise_variance <= 0:
            raise ValueError("noise_variance must be positive")
        if self.delay_max > self.cp_duration:
            raise ValueError("echo delay exceeds the cyclic prefix "
                             f"({self.delay_max:.3e} > {self.cp_duration:.3e})")

    @property
    def symbol_duration(self):
        return 1.0 / self.subcarrier_spacing

    @property
    def n_ris(self):
        return self.ris_cols * self.ris_rows

    @property
    def delay_min(self):
        return 2.0 * self.distance_min / C_LIGHT

    @property
    def delay_max(self):
        return 2.0 * self.distance_max / C_LIGHT

    @property
    def dpsk_phases(self):
        """The V constellation phases: pi/V + l*(2*pi/V), l = 0..V-1.

        For V = 4 this is the DQPSK set {pi/4, 3pi/4, 5pi/4, 7pi/4}.
        """
        v = self.dpsk_order
        return np.pi / v + 2.0 * np.pi * np.arange(v) / v

    def with_noise_variance(self, sigma2):
        return replace(self, noise_variance=float(sigma2))


def table_ii_config(**overrides) -> SystemConfig:
    """The default simulation setup; keyword overrides replace single fields."""
    return replace(SystemConfig(), **overrides) if overrides else SystemConfig()
