"""Bayesian information matrix and Cramer-Rao bounds at the true parameters.

Parameters are ordered (angles K, delays K, Re gains KM, Im gains KM); the
data term is (2/sigma^2) Re{D^H D} for the stacked derivative matrix D of
the noiseless signal.  The gain prior adds 2/v_beta per real coordinate
(zero-mean circular mixture); angle/delay priors are uniform, hence zero.

For comparison against gain-error curves, `gain_bound` also assembles the
complex-parameterization matrix (angles, delays, one column per complex
gain), whose inverse matches the convention used in the reference curves.
"""

from dataclasses import dataclass
import numpy as np

from .config import SystemConfig, C_LIGHT
from .model import steering_bs, channel_bs, channel_bs_derivative, Scene


@dataclass(frozen=True)
class BimMatrix:
    matrix: np.ndarray            # (2K + 2KM) x (2K + 2KM), real symmetric
    n_devices: int
    n_blocks: int

    @property
    def angle_slice(self):
        return slice(0, self.n_devices)

    @property
    def delay_slice(self):
        return slice(self.n_devices, 2 * self.n_devices)

    @property
    def gain_slice(self):
        return slice(2 * self.n_devices, None)


def _signal_columns(scene: Scene, config: SystemConfig):
    """Per-device signal columns and their angle/delay derivatives.

    Returns three (M, Nr*N, K) arrays: columns, d/d angle, d/d delay.
    """
    k = len(scene.devices)
    m_blocks = config.n_blocks
    n = np.arange(config.n_subcarriers)
    shape = (m_blocks, config.n_subcarriers * config.n_rx, k)
    cols = np.zeros(shape, dtype=complex)
    dcols_a = np.zeros(shape, dtype=complex)
    dcols_t = np.zeros(shape, dtype=complex)
    for ki, dev in enumerate(scene.devices):
        h = channel_bs(dev.angle, config.n_tx, config.n_rx)
        dh = channel_bs_derivative(dev.angle, config.n_tx, config.n_rx)
        ramp = np.exp(-2j * np.pi * n * config.subcarrier_spacing * dev.delay)
        dramp = -2j * np.pi * n * config.subcarrier_spacing * ramp
        hx = np.einsum('rt,mnt->mnr', h, scene.pilots)
        dhx = np.einsum('rt,mnt->mnr', dh, scene.pilots)
        cols[:, :, ki] = (ramp[None, :, None] * hx).reshape(m_blocks, -1)
        dcols_a[:, :, ki] = (ramp[None, :, None] * dhx).reshape(m_blocks, -1)
        dcols_t[:, :, ki] = (dramp[None, :, None] * hx).reshape(m_blocks, -1)
    return cols, dcols_a, dcols_t


def _derivative_matrix(scene: Scene, config: SystemConfig):
    """Stacked d(signal)/d(parameter) for the real parameter ordering."""
    cols, dcols_a, dcols_t = _signal_columns(scene, config)
    gains = scene.gains                                   # (K, M)
    k, m_blocks = gains.shape
    rows_per = cols.shape[1]
    n_par = 2 * k + 2 * k * m_blocks
    d = np.zeros((m_blocks * rows_per, n_par), dtype=complex)
    for m in range(m_blocks):
        rows = slice(m * rows_per, (m + 1) * rows_per)
        d[rows, 0:k] = dcols_a[m] * gains[:, m][None, :]
        d[rows, k:2 * k] = dcols_t[m] * gains[:, m][None, :]
        g0 = 2 * k + m * k
        d[rows, g0:g0 + k] = cols[m]
        g1 = 2 * k + k * m_blocks + m * k
        d[rows, g1:g1 + k] = 1j * cols[m]
    return d


def assemble_data_bim(scene: Scene, config: SystemConfig, sigma2) -> BimMatrix:
    """Fisher information of the observation given the true parameters."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    d = _derivative_matrix(scene, config)
    j = (2.0 / sigma2) * np.real(d.conj().T @ d)
    return BimMatrix(matrix=j, n_devices=len(scene.devices),
                     n_blocks=config.n_blocks)


def prior_fisher_gain(beta_mean, beta_var, phases, n_quad=80, half_width=6.0):
    """Fisher information per real gain coordinate under the mixture prior.

    Numerical quadrature of the squared score over the complex plane; for a
    zero-mean mixture the components coincide and the closed form 2/v holds.
    """
    if beta_mean == 0:
        return 2.0 / beta_var
    std = np.sqrt(beta_var / 2.0)
    lim = half_width * std + abs(beta_mean)
    xs = np.linspace(-lim, lim, n_quad)
    h = xs[1] - xs[0]
    xg, yg = np.meshgrid(xs, xs, indexing='ij')
    z = xg + 1j * yg
    means = beta_mean * np.exp(1j * np.asarray(phases))
    comps = np.stack([np.exp(-np.abs(z - mu)**2 / beta_var)
                      / (np.pi * beta_var) for mu in means])
    p = comps.mean(axis=0)
    # squared score of x-coordinate; y gives the same by symmetry
    dp_x = np.stack([c * (-2.0 * (xg - mu.real) / beta_var)
                     for c, mu in zip(comps, means)]).mean(axis=0)
    mask = p > 1e-300
    integrand = np.zeros_like(p)
    integrand[mask] = dp_x[mask]**2 / p[mask]
    return float(np.sum(integrand) * h * h)


def assemble_prior_bim(n_devices, n_blocks, beta_mean, beta_var,
                       phases) -> BimMatrix:
    """Uniform angle/delay priors contribute zero; gains add their Fisher."""
    n_par = 2 * n_devices + 2 * n_devices * n_blocks
    diag = np.zeros(n_par)
    diag[2 * n_devices:] = prior_fisher_gain(beta_mean, beta_var, phases)
    return BimMatrix(matrix=np.diag(diag), n_devices=n_devices,
                     n_blocks=n_blocks)


def bcrb_values(bim: BimMatrix):
    """Per-parameter variance lower bounds: the diagonal of the inverse.

    Uses a Cholesky solve on the symmetrized matrix; falls back to the
    pseudo-inverse (flagged) when the matrix is numerically singular.
    """
    j = 0.5 * (bim.matrix + bim.matrix.T)
    try:
        chol = np.linalg.cholesky(j)
        inv = np.linalg.inv(chol)
        diag = np.sum(inv**2, axis=0)
        cond = (np.max(np.diag(chol)) / np.min(np.diag(chol)))**2
        return diag, {"condition": float(cond), "pseudo_inverse": False}
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(j)
        return np.diag(inv).copy(), {"condition": np.inf,
                                     "pseudo_inverse": True}


def distance_crb(delay_variances):
    """Var{d} = (c^2/4) Var{tau}."""
    return (C_LIGHT**2 / 4.0) * np.asarray(delay_variances)


def gain_bound(scene: Scene, config: SystemConfig, sigma2, beta_var):
    """Aggregate gain-error bound in the complex parameterization.

    Assembles the (2K + KM)-dimensional matrix whose gain block keeps one
    real entry per complex gain, per the reference-curve convention, and
    returns trace of its inverse gain block over the squared gain norm.
    """
    d = _derivative_matrix(scene, config)
    k = len(scene.devices)
    km = k * config.n_blocks
    dc = d[:, :2 * k + km]
    j = (2.0 / sigma2) * np.real(dc.conj().T @ dc)
    j[2 * k:, 2 * k:] += np.eye(km) * (2.0 / beta_var)
    inv = np.linalg.inv(j)
    gains = scene.gains
    return float(np.sum(np.diag(inv)[2 * k:]) / np.sum(np.abs(gains)**2))


def bound_summary(scene: Scene, config: SystemConfig, sigma2, beta_mean,
                  beta_var, phases):
    """NMSE-style lower bounds for the harness CSV: gains, angles, distances."""
    data = assemble_data_bim(scene, config, sigma2)
    prior = assemble_prior_bim(len(scene.devices), config.n_blocks,
                               beta_mean, beta_var, phases)
    bim = BimMatrix(matrix=data.matrix + prior.matrix,
                    n_devices=data.n_devices, n_blocks=data.n_blocks)
    var, info = bcrb_values(bim)
    k = data.n_devices
    angles = scene.angles
    dists = scene.distances
    out = {
        "gain_nmse_bound": gain_bound(scene, config, sigma2, beta_var),
        "angle_nmse_bound": float(np.sum(var[:k]) / np.sum(angles**2)),
        "distance_nmse_bound": float(np.sum(distance_crb(var[k:2 * k]))
                                     / np.sum(dists**2)),
        "condition": info["condition"],
        "pseudo_inverse": info["pseudo_inverse"],
    }
    return out
