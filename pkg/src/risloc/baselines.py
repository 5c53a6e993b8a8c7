"""Reference solvers: per-column OMP and per-entry Bernoulli-Gaussian GAMP.

Both estimate each frame column independently (no row coupling).  BG-GAMP
reuses the GAMP linear steps and stabilized outer loop, swapping in the
scalar spike-plus-single-Gaussian denoiser.
"""

import numpy as np

from .gamp import SolverOptions, PosteriorEstimate, gamp_loop


def omp_column(y, z_block, k_target=None, residual_tol=None):
    """Greedy correlation-select / least-squares-refit on one column.

    Stops after k_target atoms, or when the residual norm drops below
    residual_tol (default 1e-6 * ||y||).  A rank-deficient refit drops the
    newest atom and stops.  Returns the sparse coefficient vector.
    """
    n_cols = z_block.shape[1]
    if k_target is not None and k_target > n_cols:
        raise ValueError("k_target exceeds the column count")
    if residual_tol is None:
        residual_tol = 1e-6 * np.linalg.norm(y)
    max_atoms = k_target if k_target is not None else n_cols
    col_norms = np.linalg.norm(z_block, axis=0)
    col_norms = np.where(col_norms > 0, col_norms, 1.0)
    selected = []
    coef = np.zeros(n_cols, dtype=complex)
    resid = y.copy()
    while len(selected) < max_atoms and np.linalg.norm(resid) > residual_tol:
        scores = np.abs(z_block.conj().T @ resid) / col_norms
        scores[selected] = -1.0
        atom = int(np.argmax(scores))
        trial = selected + [atom]
        sub = z_block[:, trial]
        sol, _, rank, _ = np.linalg.lstsq(sub, y, rcond=None)
        if rank < len(trial):
            break
        selected = trial
        resid = y - sub @ sol
    if selected:
        sol, _, _, _ = np.linalg.lstsq(z_block[:, selected], y, rcond=None)
        coef[selected] = sol
    return coef


def omp_frame(y, dictionary, k_target=None, residual_tol=None):
    """Column-by-column OMP over the whole frame; returns (Q*U, M) estimate."""
    n_blocks = y.shape[1]
    out = np.zeros((dictionary.blocks.shape[2], n_blocks), dtype=complex)
    for m in range(n_blocks):
        out[:, m] = omp_column(y[:, m], dictionary.blocks[m],
                               k_target, residual_tol)
    return out


class _BgDenoiser:
    """Per-entry spike-plus-Gaussian posterior (normalized slab variance 1)."""

    def __init__(self, rho, beta_mean, var_floor):
        self.rho = rho
        self.beta_mean = beta_mean
        self.var_floor = var_floor

    def initial_state(self, n_rows, n_blocks):
        vz = np.full((n_rows, n_blocks), self.rho)
        return vz, np.zeros((n_rows, n_blocks)), np.zeros(n_rows)

    def __call__(self, rhat, vr):
        vt = 1.0 / (1.0 / vr + 1.0)
        comp = vt * (rhat / vr + self.beta_mean)
        vsum = vr + 1.0
        t = (np.log(self.rho) - np.abs(rhat - self.beta_mean)**2 / vsum
             - np.log(np.pi * vsum)
             - np.log1p(-self.rho) + np.abs(rhat)**2 / vr + np.log(np.pi * vr))
        pi = np.empty_like(t)
        pos = t >= 0
        pi[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
        e = np.exp(t[~pos])
        pi[~pos] = e / (1.0 + e)
        zhat = pi * comp
        vz = pi * vt + pi * (1.0 - pi) * np.abs(comp)**2
        return zhat, np.maximum(vz, self.var_floor), pi, pi.mean(axis=1)


def bg_gamp_column(y, z_block, abs2_block, rho, beta_mean, beta_var, sigma2,
                   options: SolverOptions = SolverOptions()):
    """BG-GAMP on a single column; returns its PosteriorEstimate."""

    class _OneBlock:
        blocks = z_block[None, :, :]
        abs2 = abs2_block[None, :, :]

    return bg_gamp_frame(y[:, None], _OneBlock, rho, beta_mean, beta_var,
                         sigma2, options)


def bg_gamp_frame(y, dictionary, rho, beta_mean, beta_var, sigma2,
                  options: SolverOptions = SolverOptions()) -> PosteriorEstimate:
    """Independent Bernoulli-Gaussian GAMP on every frame column."""
    scale = np.sqrt(beta_var)
    denoiser = _BgDenoiser(rho, beta_mean / scale, options.var_floor)
    return gamp_loop(y / scale, dictionary, sigma2 / scale**2, denoiser,
                     options, scale=scale)
