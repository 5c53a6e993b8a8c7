"""EM learning of noise variance, sparsity, and the angle/delay grids.

The outer loop alternates: (inner) message-passing solves with noise and
sparsity re-estimation, then coordinate-blockwise gradient ascent of the
expected log-likelihood surrogate on the grid angles, then on the grid
delays, followed by a dictionary rebuild.
"""

from dataclasses import dataclass, field, replace
import numpy as np

from .config import SystemConfig
from .dictionary import Dictionary, Grid
from .gamp import SolverOptions, PosteriorEstimate, run_mp
from .messages import RowPrior


@dataclass
class EmOptions:
    max_outer: int = 70
    max_inner: int = 10
    inner_tol: float = 1e-3          # relative sigma^2 change
    outer_tol: float = 1e-6          # relative objective improvement
    step_scale: float = 1e-2         # first step, x grid spacing / max |grad|
    step_min_factor: float = 1e-12
    solver: SolverOptions = field(default_factory=SolverOptions)
    sigma2_init: float | None = None  # None: 20 dB-SNR heuristic
    rho_init: float | None = None
    k_guess: int = 5


@dataclass
class EmState:
    sigma2: float
    rho: float
    grid: Grid
    iteration: int = 0
    objective_trace: list = field(default_factory=list)
    sigma2_trace: list = field(default_factory=list)
    rho_trace: list = field(default_factory=list)
    grid_snapshots: list = field(default_factory=list)
    stalled_steps: int = 0
    solver_flags: int = 0


def update_noise(y, dictionary, posterior: PosteriorEstimate, floor=1e-15):
    """Residual power plus the propagated posterior variance, per sample."""
    blocks = dictionary.blocks
    abs2 = dictionary.abs2
    n_blocks = y.shape[1]
    total = 0.0
    for m in range(n_blocks):
        resid = y[:, m] - blocks[m] @ posterior.zeta_mean[:, m]
        total += np.sum(np.abs(resid)**2)
        total += np.sum(abs2[m] @ posterior.zeta_var[:, m])
    return max(total / y.size, floor)


def update_sparsity(posterior: PosteriorEstimate):
    """Mean support probability, clamped away from the degenerate endpoints."""
    pi = posterior.support_prob
    eps = 1.0 / pi.size
    return float(np.clip(np.mean(pi), eps, 1.0 - eps))


def em_objective(y, dictionary, posterior: PosteriorEstimate):
    """Expected complete-data fit term: 2 Re{y^H Z zeta} - Tr{Z^H Z Omega}."""
    blocks = dictionary.blocks
    abs2 = dictionary.abs2
    total = 0.0
    for m in range(y.shape[1]):
        fit = blocks[m] @ posterior.zeta_mean[:, m]
        total += 2.0 * np.real(np.vdot(y[:, m], fit))
        total -= np.sum(np.abs(fit)**2)
        total -= np.sum(np.sum(abs2[m], axis=0) * posterior.zeta_var[:, m])
    return float(total)


def _gradient(y, dictionary, posterior, axis, index):
    """d objective / d grid-point via the sparse derivative columns.

    Only the columns tied to the moved grid point are nonzero in dZ, so the
    trace terms reduce to inner products against those columns.
    """
    if axis == 0:
        cols = dictionary.angle_columns(index)
    else:
        cols = dictionary.delay_columns(index)
    total = 0.0
    for m in range(y.shape[1]):
        dcols = (dictionary.derivative_angle_columns(m, index) if axis == 0
                 else dictionary.derivative_delay_columns(m, index))
        zm = posterior.zeta_mean[:, m]
        vm = posterior.zeta_var[:, m]
        fit = dictionary.blocks[m] @ zm
        dfit = dcols @ zm[cols]
        # 2 Re{y^H dZ zeta}
        total += 2.0 * np.real(np.vdot(y[:, m], dfit))
        # Tr{(dZ^H Z + Z^H dZ) Omega} with Omega = zeta zeta^H + diag(v)
        cross = np.vdot(fit, dfit)
        cross += np.sum(vm[cols] * np.einsum(
            'ji,ji->i', dictionary.blocks[m][:, cols].conj(), dcols))
        total -= 2.0 * np.real(cross)
    return float(total)


def gradient_angle(y, dictionary, posterior, q):
    return _gradient(y, dictionary, posterior, 0, q)


def gradient_delay(y, dictionary, posterior, u):
    return _gradient(y, dictionary, posterior, 1, u)


def backtracking_ascent(y, dictionary, posterior, axis,
                        options: EmOptions):
    """One ascent move of a whole coordinate block with halving line search.

    Returns (new grid, new dictionary, objective value, moved flag).  The
    grid stays unchanged when the gradient vanishes or the step underflows.
    """
    grid = dictionary.grid
    n_pts = grid.n_angles if axis == 0 else grid.n_delays
    grads = np.array([_gradient(y, dictionary, posterior, axis, i)
                      for i in range(n_pts)])
    g_old = em_objective(y, dictionary, posterior)
    gmax = np.max(np.abs(grads))
    if gmax == 0.0:
        return grid, dictionary, g_old, False
    values = grid.angles if axis == 0 else grid.delays
    spacing = np.min(np.diff(values))
    step = options.step_scale * spacing / gmax
    step_min = options.step_min_factor * step
    while step >= step_min:
        cand = values + step * grads
        if np.all(np.diff(cand) > 0):
            new_grid = (grid.replace_axes(angles=cand) if axis == 0
                        else grid.replace_axes(delays=cand))
            new_dict = dictionary.with_grid(new_grid)
            g_new = em_objective(y, new_dict, posterior)
            if g_new > g_old:
                return new_grid, new_dict, g_new, True
        step *= 0.5
    return grid, dictionary, g_old, False


def run_em(y, config: SystemConfig, grid: Grid, pilots, prior: RowPrior,
           options: EmOptions = EmOptions(), trace_metrics=None,
           solve_fn=None):
    """EM loop over (sigma^2, rho, grid angles, grid delays).

    `prior` supplies the gain statistics; sigma^2 and rho are learned.
    `solve_fn(y, dictionary, prior, sigma2, solver_options)` defaults to the
    row-coupled solver; any estimator returning a PosteriorEstimate works
    (the learning steps only need posterior moments).  `trace_metrics`, a
    callable (state, posterior, dictionary) -> dict, appends one row per
    outer iteration to the returned trace list.
    """
    if solve_fn is None:
        solve_fn = run_mp
    dictionary = Dictionary(grid, pilots, config)
    sigma2 = options.sigma2_init
    if sigma2 is None:
        sigma2 = float(np.sum(np.abs(y)**2) / (y.size * 101.0))
    rho = options.rho_init
    if rho is None:
        rho = min(2.0 * max(1, options.k_guess) / grid.n_rows, 0.5)
    state = EmState(sigma2=sigma2, rho=rho, grid=grid)
    trace = []
    posterior = None
    g_prev = -np.inf
    for outer in range(options.max_outer):
        state.iteration = outer + 1
        for _ in range(options.max_inner):
            cur_prior = replace(prior, sparsity=state.rho)
            posterior = solve_fn(y, dictionary, cur_prior, state.sigma2,
                                 options.solver)
            if not posterior.converged:
                state.solver_flags += 1
            s2_new = update_noise(y, dictionary, posterior)
            rho_new = update_sparsity(posterior)
            rel = abs(s2_new - state.sigma2) / max(state.sigma2, 1e-300)
            state.sigma2 = s2_new
            state.rho = rho_new
            if rel < options.inner_tol:
                break
        grid_a, dictionary, _, moved_a = backtracking_ascent(
            y, dictionary, posterior, 0, options)
        grid_d, dictionary, g_now, moved_d = backtracking_ascent(
            y, dictionary, posterior, 1, options)
        state.grid = dictionary.grid
        if not (moved_a or moved_d):
            state.stalled_steps += 1
        state.objective_trace.append(g_now)
        state.sigma2_trace.append(state.sigma2)
        state.rho_trace.append(state.rho)
        state.grid_snapshots.append((dictionary.grid.angles.copy(),
                                     dictionary.grid.delays.copy()))
        if trace_metrics is not None:
            trace.append(trace_metrics(state, posterior, dictionary))
        if g_prev > -np.inf and abs(g_now - g_prev) <= options.outer_tol * abs(g_prev):
            break
        g_prev = g_now
    return posterior, state, dictionary, trace
