"""Physical-layer ground truth: arrays, channels, RIS reflection, DPSK, noise.

All functions are pure; randomness enters only through explicitly passed
numpy Generators.
"""

from dataclasses import dataclass
import numpy as np

from .config import SystemConfig, C_LIGHT


def wrap_phase(phi):
    """Wrap phases to (-pi, pi]."""
    out = np.mod(-np.asarray(phi) + np.pi, 2.0 * np.pi)
    return np.pi - out


def steering_bs(angle, count, sign=+1):
    """ULA steering vector, element p = exp(j*pi*p*sin(sign*angle))/sqrt(count).

    sign=+1 gives the transmit vector a_BS, sign=-1 the receive vector b_BS.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    p = np.arange(count)
    return np.exp(1j * np.pi * p * np.sin(sign * angle)) / np.sqrt(count)


def steering_ris(elevation, azimuth, nx, ny):
    """URA steering vector as the Kronecker product of x- and y-axis vectors."""
    if nx < 1 or ny < 1:
        raise ValueError("nx, ny must be >= 1")
    ax = np.exp(1j * np.pi * np.arange(nx) * np.sin(elevation) * np.cos(azimuth))
    ay = np.exp(1j * np.pi * np.arange(ny) * np.sin(elevation) * np.sin(azimuth))
    return np.kron(ax, ay) / np.sqrt(nx * ny)


def channel_bs(angle, n_tx, n_rx):
    """Rank-one BS round-trip channel H = b_BS(-angle) a_BS(angle)^H."""
    return np.outer(steering_bs(angle, n_rx, -1), steering_bs(angle, n_tx, +1).conj())


def channel_bs_derivative(angle, n_tx, n_rx):
    """Analytic d H / d angle via the product rule on the two steering vectors."""
    a = steering_bs(angle, n_tx, +1)
    b = steering_bs(angle, n_rx, -1)
    da = 1j * np.pi * np.arange(n_tx) * np.cos(angle) * a
    db = -1j * np.pi * np.arange(n_rx) * np.cos(angle) * b
    return np.outer(db, a.conj()) + np.outer(b, da.conj())


def retro_gradients(elevation, azimuth):
    """Phase gradients steering the reflection back along the incident path."""
    qx = -2.0 * np.sin(elevation) * np.cos(azimuth)
    qy = -2.0 * np.sin(elevation) * np.sin(azimuth)
    return qx, qy


def ris_phase_profile(qx, qy, reference_phase, nx, ny):
    """Per-element phases theta[i, j] = pi*i*qx + pi*j*qy + reference_phase."""
    i = np.arange(nx)[:, None]
    j = np.arange(ny)[None, :]
    return np.pi * i * qx + np.pi * j * qy + reference_phase


def effective_gain(beta, theta, incident, reflected):
    """Cascaded gain alpha = beta * a_r^H diag(e^{j theta}) a_i by explicit double sum.

    With the retro-reflection profile this collapses to beta * e^{j phi_ref}.
    """
    nx, ny = theta.shape
    phi_i, gamma_i = incident
    phi_r, gamma_r = reflected
    total = 0.0 + 0.0j
    for i in range(nx):
        for j in range(ny):
            ph_i = np.pi * (i * np.sin(phi_i) * np.cos(gamma_i)
                            + j * np.sin(phi_i) * np.sin(gamma_i))
            ph_r = np.pi * (i * np.sin(phi_r) * np.cos(gamma_r)
                            + j * np.sin(phi_r) * np.sin(gamma_r))
            total += np.exp(1j * (ph_i - ph_r + theta[i, j]))
    return beta * total / (nx * ny)


def dpsk_encode(symbols, initial_phase, reference_phase, order):
    """Differential phase recursion phi_m = phi_{m-1} + S[symbol] + S_ref.

    `symbols` are constellation indices for blocks 2..M; the returned sequence
    includes the initial phase and stays inside the constellation set.
    """
    symbols = np.asarray(symbols)
    if symbols.size and (symbols.min() < 0 or symbols.max() >= order):
        raise ValueError("symbol index out of range")
    phases = np.pi / order + 2.0 * np.pi * np.arange(order) / order
    out = np.empty(symbols.size + 1)
    out[0] = wrap_phase(initial_phase)
    for m, s in enumerate(symbols, start=1):
        out[m] = wrap_phase(out[m - 1] + phases[s] + reference_phase)
    return out


def dpsk_decode(alpha, reference_phase, order):
    """Nearest-constellation decisions on consecutive phase differences.

    Returns (symbol indices for blocks 2..M, erased mask).  A zero amplitude
    erases every symbol whose phase difference touches it; erased symbols keep
    index -1.  Ties go to the lower constellation index.
    """
    alpha = np.asarray(alpha)
    if alpha.size < 2:
        raise ValueError("need at least two blocks to decode")
    phases = np.pi / order + 2.0 * np.pi * np.arange(order) / order
    zero = alpha == 0
    diffs = wrap_phase(np.angle(alpha[1:]) - np.angle(alpha[:-1]) - reference_phase)
    dist = np.abs(wrap_phase(diffs[:, None] - phases[None, :]))
    symbols = np.argmin(dist, axis=1)
    erased = zero[1:] | zero[:-1]
    symbols = np.where(erased, -1, symbols)
    return symbols, erased


def gray_bits(index, order):
    """Gray-coded bits (log2(order) per symbol) for a constellation index."""
    bits_per = int(np.log2(order))
    g = index ^ (index >> 1)
    return [(g >> k) & 1 for k in reversed(range(bits_per))]


def amplitude_factor(distance, config: SystemConfig):
    """Deterministic part of the round-trip fading amplitude (Friis-style)."""
    num = (config.gain_tx * config.gain_rx * config.gain_ris
           * config.n_ris**2 * config.wavelength**4 / 4.0)
    return np.sqrt(num / (64.0 * np.pi**3 * np.asarray(distance)**4))


def fading_coefficient(distance, eta, config: SystemConfig):
    """beta = eta * sqrt(Gt*Gr*G*L^2*(lambda^4/4) / (64*pi^3*d^4))."""
    if np.any(np.asarray(distance) <= 0):
        raise ValueError("distance must be positive")
    return eta * amplitude_factor(distance, config)


def beta_prior(config: SystemConfig):
    """Zero mean and the pessimistic second-moment proxy used as gain prior."""
    p_max = amplitude_factor(config.distance_min, config)
    p_min = amplitude_factor(config.distance_max, config)
    var = (p_min**2 + p_min * p_max + p_max**2) / 3.0 + (p_min + p_max)**2 / 4.0
    return 0.0 + 0.0j, var


@dataclass(frozen=True)
class DeviceGroundTruth:
    angle: float
    delay: float
    distance: float
    fading: complex
    incident_elevation: float
    incident_azimuth: float
    reflected_elevation: float
    reflected_azimuth: float
    phase_sequence: np.ndarray        # (M,)
    symbol_sequence: np.ndarray       # (M-1,) constellation indices

    @property
    def gain_sequence(self):
        """alpha_{k,m} = beta * e^{j phi_m} (retro-reflection closed form)."""
        return self.fading * np.exp(1j * self.phase_sequence)


@dataclass(frozen=True)
class Scene:
    devices: tuple
    pilots: np.ndarray                # (M, N, Nt) unit-modulus
    grid_rows: np.ndarray | None      # on-grid flat indices, None if off-grid

    @property
    def angles(self):
        return np.array([d.angle for d in self.devices])

    @property
    def delays(self):
        return np.array([d.delay for d in self.devices])

    @property
    def distances(self):
        return np.array([d.distance for d in self.devices])

    @property
    def gains(self):
        return np.stack([d.gain_sequence for d in self.devices])   # (K, M)

    @property
    def symbols(self):
        return np.stack([d.symbol_sequence for d in self.devices])  # (K, M-1)


def generate_pilots(config: SystemConfig, rng):
    """Unit-modulus QPSK pilots per (block, subcarrier, antenna)."""
    idx = rng.integers(0, 4, (config.n_blocks, config.n_subcarriers, config.n_tx))
    return np.exp(1j * (np.pi / 4 + np.pi / 2 * idx))


def generate_scene(config: SystemConfig, rng_seed, on_grid=True, grid=None):
    """Draw K devices (+ pilots) deterministically from the seed.

    on_grid mode snaps (angle, delay) to distinct points of `grid`; off-grid
    mode draws continuous values in the configured ranges.
    """
    rng = np.random.default_rng(rng_seed)
    k = config.n_devices
    if on_grid:
        if grid is None:
            raise ValueError("on-grid scenes need a grid")
        if k > grid.n_angles * grid.n_delays:
            raise ValueError("more devices than grid points")
        while True:
            qi = rng.integers(0, grid.n_angles, k)
            ui = rng.integers(0, grid.n_delays, k)
            if len({(q, u) for q, u in zip(qi, ui)}) == k:
                break
        angles = grid.angles[qi]
        delays = grid.delays[ui]
        rows = ui * grid.n_angles + qi
    else:
        while True:
            angles = rng.uniform(config.angle_min, config.angle_max, k)
            delays = rng.uniform(config.delay_min, config.delay_max, k)
            if len({(a, t) for a, t in zip(angles, delays)}) == k:
                break
        rows = None
    dists = C_LIGHT * delays / 2.0
    eta = (rng.standard_normal(k) + 1j * rng.standard_normal(k)) / np.sqrt(2.0)
    betas = fading_coefficient(dists, eta, config)
    phases = config.dpsk_phases
    devices = []
    for i in range(k):
        symbols = rng.integers(0, config.dpsk_order, config.n_blocks - 1)
        phi0 = phases[rng.integers(0, config.dpsk_order)]
        seq = dpsk_encode(symbols, phi0, config.reference_phase, config.dpsk_order)
        phi_i = rng.uniform(-np.pi / 3, np.pi / 3)
        gam_i = rng.uniform(0.0, 2.0 * np.pi)
        devices.append(DeviceGroundTruth(
            angle=float(angles[i]), delay=float(delays[i]), distance=float(dists[i]),
            fading=complex(betas[i]),
            incident_elevation=phi_i, incident_azimuth=gam_i,
            reflected_elevation=-phi_i, reflected_azimuth=gam_i,
            phase_sequence=seq, symbol_sequence=symbols))
    pilots = generate_pilots(config, rng)
    return Scene(devices=tuple(devices), pilots=pilots, grid_rows=rows)


def clean_frame(scene: Scene, config: SystemConfig):
    """Noiseless stacked observations Y (Nr*N x M), subcarrier-major rows."""
    n = np.arange(config.n_subcarriers)
    m_blocks = config.n_blocks
    y = np.zeros((config.n_subcarriers * config.n_rx, m_blocks), dtype=complex)
    for dev in scene.devices:
        h = channel_bs(dev.angle, config.n_tx, config.n_rx)
        ramp = np.exp(-2j * np.pi * n * config.subcarrier_spacing * dev.delay)
        hx = np.einsum('rt,mnt->mnr', h, scene.pilots)     # (M, N, Nr)
        contrib = ramp[None, :, None] * hx                 # (M, N, Nr)
        y += (dev.gain_sequence[:, None, None] * contrib).reshape(m_blocks, -1).T
    return y


def synthesize_frame(scene: Scene, config: SystemConfig, rng_seed):
    """Noisy measurement frame: clean signal plus circular Gaussian noise."""
    rng = np.random.default_rng(rng_seed)
    y = clean_frame(scene, config)
    scale = np.sqrt(config.noise_variance / 2.0)
    noise = scale * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y + noise


def snr_db(signal_energy, sigma2, config: SystemConfig):
    """SNR per the trace definition over the whole frame."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    if signal_energy == 0:
        return -np.inf
    denom = config.n_rx * config.n_subcarriers * config.n_blocks * sigma2
    return 10.0 * np.log10(signal_energy / denom)


def sigma2_for_snr(signal_energy, snr_db_target, config: SystemConfig):
    """Solve the SNR definition for the noise variance."""
    denom = config.n_rx * config.n_subcarriers * config.n_blocks
    return signal_energy / (denom * 10.0**(snr_db_target / 10.0))
