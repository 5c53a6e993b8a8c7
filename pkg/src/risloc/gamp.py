"""GAMP over the per-block linear model plus row-coupled mixture messages.

The per-block linear steps follow the standard generalized approximate
message passing recursion with an AWGN output channel; the per-entry
denoiser is the row-coupled update from row_messages / _row_kernel.

The dictionary columns are strongly correlated in the delay direction, and
plain parallel GAMP diverges there.  Two stabilizers are built in: mean
damping of the estimate/residual tracks and a noise-variance continuation
(the solve starts from an inflated noise level and anneals down to the true
one, warm-starting each stage).  Both can be disabled through the options.
"""

from dataclasses import dataclass, field, replace
import numpy as np

from .messages import RowPrior, VAR_FLOOR
from .row_messages import row_update_batch, row_update_reference

try:
    from ._row_kernel import row_update_kernel, serial_sweep
    HAVE_KERNEL = True
except ImportError:          # pure-Python install
    row_update_kernel = None
    serial_sweep = None
    HAVE_KERNEL = False


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 100
    tolerance: float = 1e-6
    damping: float = 0.5
    damping_min: float = 0.02       # adaptive floor; reached => divergence watch
    var_floor: float = VAR_FLOOR
    schedule: str = "parallel"      # or "serial" (sequential rows)
    anneal_ratio: float = 2.5       # <= 1 disables the continuation
    anneal_start: float = 30.0      # first noise level, x mean |Y|^2
    anneal_inner_tol: float = 1e-3
    anneal_inner_max: int = 20
    anneal_reheat: float = 0.0      # variance floor applied at level entry
    polish_moves: int = 0           # support local-search rounds (serial only)
    detect_threshold: float = 0.5
    use_kernel: bool | None = None  # None: compiled if available


@dataclass
class PosteriorEstimate:
    zeta_mean: np.ndarray           # (Q*U, M)
    zeta_var: np.ndarray            # (Q*U, M)
    support_prob: np.ndarray        # per-entry pi (Q*U, M)
    row_support: np.ndarray         # per-row pi (Q*U,)
    iterations: int
    converged: bool
    residual_nmse: float

    def detected_rows(self, threshold=0.5):
        return np.flatnonzero(self.row_support > threshold)

    def top_rows(self, k):
        return np.argsort(-self.row_support, kind="stable")[:k]


def awgn_output_step(z_block, abs2_block, zeta_mean, zeta_var, ahat_prev, y,
                     sigma2, var_floor=VAR_FLOOR):
    """Output linear step and AWGN posterior closed form for one block.

    Returns (phat, vp, qhat, vq, ahat, va).  The scaled residual uses the
    algebraically equivalent form ahat = (y - phat) / (vp + sigma2), which
    stays finite when every entry variance hits the floor.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    vp = np.maximum(abs2_block @ zeta_var, var_floor)
    phat = z_block @ zeta_mean - vp * ahat_prev
    denom = vp + sigma2
    qhat = (vp * y + sigma2 * phat) / denom
    vq = vp * sigma2 / denom
    ahat = (y - phat) / denom
    va = 1.0 / denom
    return phat, vp, qhat, vq, ahat, va


def input_linear_step(z_block, abs2_block, ahat, va, zeta_mean,
                      var_floor=VAR_FLOOR, var_ceiling=1.0 / VAR_FLOOR):
    """Pseudo-observations of the coefficients for one block.

    All-zero dictionary columns would leave vr undefined; those entries are
    clamped to the variance ceiling.
    """
    energy = abs2_block.T @ va
    dead = energy <= 0
    with np.errstate(divide="ignore"):
        vr = 1.0 / energy
    vr[dead] = var_ceiling
    vr = np.clip(vr, var_floor, var_ceiling)
    rhat = zeta_mean + vr * (z_block.conj().T @ ahat)
    return rhat, vr


def _row_update(rhat, vr, prior: RowPrior, options: SolverOptions):
    use_kernel = options.use_kernel
    if use_kernel is None:
        use_kernel = HAVE_KERNEL
    if prior.beta_mean != 0:
        # general-mean prior only exists on the reference path
        return row_update_reference(rhat, vr, prior, options.var_floor)
    if use_kernel and row_update_kernel is not None:
        return row_update_kernel(np.ascontiguousarray(rhat),
                                 np.ascontiguousarray(vr),
                                 prior.sparsity, prior.beta_var,
                                 np.ascontiguousarray(prior.phases, dtype=float),
                                 options.var_floor)
    return row_update_batch(rhat, vr, prior.sparsity, prior.beta_var,
                            prior.phases, options.var_floor)


def _sigma_schedule(y_power, sigma2, ratio, start_factor):
    """Geometric continuation levels from far above the received power.

    Starting with essentially the whole signal treated as noise keeps the
    first iterations in the single-detectable-device regime, where parallel
    GAMP on the coherent dictionary is stable.
    """
    top = start_factor * y_power
    if ratio <= 1.0 or top <= sigma2:
        return [sigma2]
    n_levels = int(np.ceil(np.log(top / sigma2) / np.log(ratio)))
    return [sigma2 * ratio**k for k in range(n_levels, 0, -1)] + [sigma2]


def gamp_loop(y, dictionary, sigma2, denoiser, options: SolverOptions,
              scale=1.0):
    """Stabilized GAMP outer loop shared by the row-coupled and BG solvers.

    `denoiser(rhat, vr) -> (zhat, vz, pi, row_support)` consumes the
    pseudo-observations of one iteration.  The loop runs the noise-level
    continuation, damps the mean tracks, and backs off (halving the damping
    and restoring the best state) on exponential runaways; if backoffs are
    exhausted at the damping floor it returns the best state, flagged.
    """
    blocks = dictionary.blocks
    abs2 = dictionary.abs2
    n_blocks = y.shape[1]
    if blocks.shape[0] != n_blocks:
        raise ValueError("dictionary blocks do not match the frame")
    n_rows = blocks.shape[2]
    zeta = np.zeros((n_rows, n_blocks), dtype=complex)
    vz, pi_z, pi_row = denoiser.initial_state(n_rows, n_blocks)
    ahat = np.zeros_like(y)
    rhat = np.zeros_like(zeta)
    vr = np.ones(zeta.shape)

    y_norm = max(np.linalg.norm(y), 1e-300)
    levels = _sigma_schedule(np.mean(np.abs(y)**2), sigma2,
                             options.anneal_ratio, options.anneal_start)
    damp = options.damping
    total_iters = 0
    first = True
    converged = False
    diverged = False

    def residual(z):
        fit = np.empty_like(y)
        for m in range(n_blocks):
            fit[:, m] = blocks[m] @ z[:, m]
        return np.linalg.norm(y - fit) / y_norm

    best = (zeta.copy(), vz.copy(), ahat.copy(), pi_z, pi_row)
    best_res = residual(zeta)
    runaways = 0

    for level, s2 in enumerate(levels):
        final = level == len(levels) - 1
        itmax = options.max_iterations if final else options.anneal_inner_max
        tol = options.tolerance if final else options.anneal_inner_tol
        if level > 0 and options.anneal_reheat > 0:
            vz = np.maximum(vz, options.anneal_reheat)
        best_res = residual(zeta)
        best = (zeta.copy(), vz.copy(), ahat.copy(), pi_z, pi_row)
        for _ in range(itmax):
            if diverged:
                break
            ahat_new = np.empty_like(ahat)
            va = np.empty(y.shape)
            for m in range(n_blocks):
                _, _, _, _, a_m, va_m = awgn_output_step(
                    blocks[m], abs2[m], zeta[:, m], vz[:, m], ahat[:, m],
                    y[:, m], s2, options.var_floor)
                ahat_new[:, m] = a_m
                va[:, m] = va_m
            ahat = ahat_new if first else damp * ahat_new + (1 - damp) * ahat
            for m in range(n_blocks):
                rhat[:, m], vr[:, m] = input_linear_step(
                    blocks[m], abs2[m], ahat[:, m], va[:, m], zeta[:, m],
                    options.var_floor)
            z_new, vz_new, pi_z, pi_row = denoiser(rhat, vr)
            if first:
                zeta_next, vz = z_new, vz_new
            else:
                zeta_next = damp * z_new + (1 - damp) * zeta
                vz = damp * vz_new + (1 - damp) * vz
            step = np.linalg.norm(zeta_next - zeta)
            norm = np.linalg.norm(zeta_next)
            zeta = zeta_next
            first = False
            total_iters += 1
            res = residual(zeta)
            if res <= best_res:
                best_res = res
                best = (zeta.copy(), vz.copy(), ahat.copy(), pi_z, pi_row)
            elif res > 3.0 * best_res or not np.isfinite(res):
                # exponential runaway: back off, restore the best state
                runaways += 1
                damp = max(damp * 0.5, options.damping_min)
                zeta, vz, ahat, pi_z, pi_row = (x.copy() for x in best)
                if runaways >= 5 and damp <= options.damping_min:
                    diverged = True
                continue
            if norm > 0 and step / norm < tol:
                if final:
                    converged = True
                break
        if diverged:
            break
    zeta, vz, ahat, pi_z, pi_row = best
    return PosteriorEstimate(zeta_mean=zeta * scale, zeta_var=vz * scale**2,
                             support_prob=pi_z, row_support=pi_row,
                             iterations=total_iters,
                             converged=converged and not diverged,
                             residual_nmse=best_res)


class _RowDenoiser:
    """Row-coupled mixture denoiser bound to a normalized prior."""

    def __init__(self, prior: RowPrior, options: SolverOptions):
        self.prior = prior
        self.options = options

    def initial_state(self, n_rows, n_blocks):
        vz = np.full((n_rows, n_blocks), self.prior.sparsity * self.prior.beta_var)
        return vz, np.zeros((n_rows, n_blocks)), np.zeros(n_rows)

    def __call__(self, rhat, vr):
        return _row_update(rhat, vr, self.prior, self.options)


def serial_loop(y, dictionary, sigma2, prior: RowPrior,
                options: SolverOptions, scale=1.0) -> PosteriorEstimate:
    """Sequential-row schedule: exact residual feedback per row update.

    Every sweep refreshes the variance tracks from the parallel formulas,
    then visits rows in descending predicted-energy order, re-denoising each
    row against the live residual.  The winner-take-all dynamics resolve the
    near-collinear delay columns that the parallel schedule splits over.
    Requires the compiled kernel and the zero-mean gain prior.
    """
    if serial_sweep is None:
        raise RuntimeError("serial schedule needs the compiled kernel")
    if prior.beta_mean != 0:
        raise ValueError("serial schedule supports the zero-mean gain prior")
    blocks = dictionary.blocks
    abs2 = dictionary.abs2
    n_blocks = y.shape[1]
    if blocks.shape[0] != n_blocks:
        raise ValueError("dictionary blocks do not match the frame")
    n_rows = blocks.shape[2]
    blocks_t = np.ascontiguousarray(np.transpose(blocks, (0, 2, 1)))
    phases = np.ascontiguousarray(prior.phases, dtype=float)
    zeta = np.zeros((n_rows, n_blocks), dtype=complex)
    vz = np.full((n_rows, n_blocks), prior.sparsity * prior.beta_var)
    pi_z = np.zeros(zeta.shape)
    pi_row = np.zeros(n_rows)
    y_norm = max(np.linalg.norm(y), 1e-300)
    levels = _sigma_schedule(np.mean(np.abs(y)**2), sigma2,
                             options.anneal_ratio, options.anneal_start)
    total_iters = 0
    converged = False
    for level, s2 in enumerate(levels):
        final = level == len(levels) - 1
        itmax = options.max_iterations if final else options.anneal_inner_max
        tol = options.tolerance if final else options.anneal_inner_tol
        for _ in range(itmax):
            va = np.empty_like(y, dtype=float)
            vr = np.empty(zeta.shape)
            resid = y.copy()
            for m in range(n_blocks):
                vp = np.maximum(abs2[m] @ vz[:, m], options.var_floor)
                va[:, m] = 1.0 / (vp + s2)
                energy = abs2[m].T @ va[:, m]
                vr[:, m] = 1.0 / np.maximum(energy, options.var_floor**2)
                resid[:, m] -= blocks[m] @ zeta[:, m]
            vr = np.clip(vr, options.var_floor, 1.0 / options.var_floor)
            # visit rows by predicted pseudo-observation energy, largest first
            score = np.zeros(n_rows)
            for m in range(n_blocks):
                mf = blocks[m].conj().T @ (resid[:, m] * va[:, m])
                score += np.abs(zeta[:, m] + vr[:, m] * mf)**2
            order = np.argsort(-score, kind="stable")
            old = zeta.copy()
            pi_z, pi_row = serial_sweep(blocks_t, resid, zeta, vz, va, vr,
                                        order, prior.sparsity, prior.beta_var,
                                        phases, options.var_floor)
            total_iters += 1
            step = np.linalg.norm(zeta - old)
            norm = np.linalg.norm(zeta)
            if norm > 0 and step / norm < tol:
                if final:
                    converged = True
                break
    fit = np.empty_like(y)
    for m in range(n_blocks):
        fit[:, m] = blocks[m] @ zeta[:, m]
    res = np.linalg.norm(y - fit) / y_norm
    return PosteriorEstimate(zeta_mean=zeta * scale, zeta_var=vz * scale**2,
                             support_prob=pi_z, row_support=pi_row,
                             iterations=total_iters, converged=converged,
                             residual_nmse=res)


class _SupportScorer:
    """Penalized-likelihood scoring and restricted re-solves on small supports.

    Scores the generative model at a candidate support: data fit plus, per
    active row, the activity odds, the gain-prior density at the fitted
    shared gain, and the per-block phase prior mass.  All per-candidate
    arithmetic touches only the candidate columns.
    """

    def __init__(self, y, dictionary, sigma2, prior: RowPrior, options):
        self.y = y
        self.blocks = dictionary.blocks
        self.abs2 = dictionary.abs2
        self.blocks_t = np.ascontiguousarray(
            np.transpose(dictionary.blocks, (0, 2, 1)))
        self.sigma2 = sigma2
        self.prior = prior
        self.options = options
        self.n_rows = self.blocks.shape[2]
        self.n_blocks = y.shape[1]
        self.phases = np.ascontiguousarray(prior.phases, dtype=float)
        # Per-row charge for cross-size comparisons: activity prior odds
        # plus the expected noise energy a spurious row can absorb through
        # its free per-block constellation phases (the Occam correction for
        # scoring at the fitted maximum).  With best-of-V phase alignment
        # the per-block aligned noise amplitude has mean
        # E|z| E cos = (sqrt(pi)/2) (V/pi) sin(pi/V), and the shared-gain
        # fit captures M times its square plus one unit for the gain itself.
        v_ord = prior.order
        align = np.sqrt(np.pi) / 2.0
        if v_ord > 1:
            align *= (v_ord / np.pi) * np.sin(np.pi / v_ord)
        else:
            align = 0.0
        self.row_penalty = (np.log((1 - prior.sparsity) / prior.sparsity)
                            + self.n_blocks * align**2 + 1.0)
        # rows outside a candidate support are confidently zero: their
        # per-entry variance sits at the floor, like a converged solve
        self.vp_base = np.stack(
            [self.abs2[m].sum(axis=1) * options.var_floor
             for m in range(self.n_blocks)], axis=1)
        self.start_vz = prior.sparsity * prior.beta_var

    def solve_restricted(self, rows, sweeps=6, anneal=False):
        """Serial re-solve touching only `rows`.

        With anneal=True the noise continuation restarts inside the
        restricted sub-problem, letting a tangled group reorganize from
        scratch instead of refining its current configuration.
        """
        rows = np.asarray(sorted(rows), dtype=np.intp)
        zeta = np.zeros((self.n_rows, self.n_blocks), dtype=complex)
        vz = np.full((self.n_rows, self.n_blocks), self.options.var_floor)
        vz[rows] = self.start_vz
        pi_z = np.zeros(zeta.shape)
        pi_row = np.zeros(self.n_rows)
        vr = np.ones(zeta.shape)
        if anneal:
            levels = _sigma_schedule(np.mean(np.abs(self.y)**2), self.sigma2,
                                     self.options.anneal_ratio,
                                     self.options.anneal_start)
        else:
            levels = [self.sigma2]
        for level, s2 in enumerate(levels):
            final = level == len(levels) - 1
            for _ in range(sweeps if final else 3):
                va = np.empty_like(self.y, dtype=float)
                resid = self.y.copy()
                for m in range(self.n_blocks):
                    sub2 = self.abs2[m][:, rows]
                    vp = self.vp_base[:, m] + sub2 @ (vz[rows, m]
                                                      - self.options.var_floor)
                    va[:, m] = 1.0 / (np.maximum(vp, self.options.var_floor)
                                      + s2)
                    vr[rows, m] = 1.0 / np.maximum(sub2.T @ va[:, m],
                                                   self.options.var_floor**2)
                    resid[:, m] -= self.blocks[m][:, rows] @ zeta[rows, m]
                vr[rows] = np.clip(vr[rows], self.options.var_floor,
                                   1.0 / self.options.var_floor)
                energy = np.sum(np.abs(zeta[rows])**2, axis=1)
                order = rows[np.argsort(-energy, kind="stable")]
                old = zeta[rows].copy()
                pz, pr = serial_sweep(self.blocks_t, resid, zeta, vz, va, vr,
                                      order, self.prior.sparsity,
                                      self.prior.beta_var, self.phases,
                                      self.options.var_floor)
                pi_z[rows] = pz[rows]
                pi_row[rows] = pr[rows]
                step = np.linalg.norm(zeta[rows] - old)
                if step <= 1e-8 * np.linalg.norm(old):
                    break
        return zeta, vz, pi_z, pi_row

    def score(self, zeta, pi_row):
        """Fit plus gain-prior terms plus activity odds per active row.

        The phase/gain prior densities are treated as hypothesis-neutral, so
        cross-size comparisons only charge the Bernoulli activity odds; that
        keeps genuinely weak rows while still pricing redundant ones.
        """
        active = np.flatnonzero(pi_row > 0.5)
        resid = self.y.copy()
        for m in range(self.n_blocks):
            resid[:, m] -= self.blocks[m][:, active] @ zeta[active, m]
        fit = -np.sum(np.abs(resid)**2) / self.sigma2
        nu2 = np.mean(np.abs(zeta[active])**2, axis=1) if active.size else 0.0
        return (fit - float(np.sum(nu2)) / self.prior.beta_var
                - active.size * self.row_penalty)


def _move_candidates(row, n_angles, n_rows, occupied):
    """Neighbouring rows of a support move: delay +-1/+-2, angle +-1.

    A move onto an occupied neighbour merges the two rows (net drop).
    """
    q, u = row % n_angles, row // n_angles
    n_delays = n_rows // n_angles
    out = []
    for du in (-2, -1, 1, 2):
        if 0 <= u + du < n_delays:
            out.append((u + du) * n_angles + q)
    for dq in (-1, 1):
        if 0 <= q + dq < n_angles:
            out.append(u * n_angles + q + dq)
    return out


def polish_support(y, dictionary, sigma2, prior: RowPrior,
                   est: PosteriorEstimate, options: SolverOptions,
                   scale=1.0) -> PosteriorEstimate:
    """Greedy MAP search over single-row support edits.

    Starting from the converged active set, each round re-solves candidate
    supports obtained by moving one active row to a grid neighbour or
    dropping it, and keeps the best penalized-likelihood improvement.  This
    cleans up the delay-neighbour confusions that survive message passing on
    the near-collinear delay columns.
    """
    scorer = _SupportScorer(y, dictionary, sigma2, prior, options)
    active = set(np.flatnonzero(est.row_support
                                > options.detect_threshold).tolist())
    max_active = 4 * max(8, int(prior.sparsity * scorer.n_rows * 4))
    if not active or len(active) > max_active:
        return est
    zeta, vz, pi_z, pi_row = scorer.solve_restricted(active, anneal=True)
    best_score = scorer.score(zeta, pi_row)
    best_state = (zeta, vz, pi_z, pi_row)
    n_angles = dictionary.grid.n_angles
    for _ in range(options.polish_moves):
        candidates = []
        for row in sorted(active):
            for tgt in _move_candidates(row, n_angles, scorer.n_rows, active):
                candidates.append((active - {row}) | {tgt})
            candidates.append(active - {row})
        # tangled same-angle groups: re-solve the whole angle column from
        # scratch (annealed) with the other actives in place, and take the
        # support that sub-solve lands on as a candidate
        by_angle = {}
        for row in active:
            by_angle.setdefault(row % n_angles, []).append(row)
        for q, rows_q in by_angle.items():
            if len(rows_q) < 2:
                continue
            col = set(range(q, scorer.n_rows, n_angles))
            sub_rows = (active - set(rows_q)) | col
            _, _, _, pr_g = scorer.solve_restricted(sub_rows, anneal=True)
            regrown = {int(r) for r in np.flatnonzero(pr_g > 0.5)}
            if regrown and regrown != active:
                candidates.append(regrown)
        round_best = None
        seen = set()
        for cand in candidates:
            key = frozenset(cand)
            if not cand or key in seen or key == frozenset(active):
                continue
            seen.add(key)
            z_c, v_c, pz_c, pr_c = scorer.solve_restricted(cand, anneal=True)
            s_c = scorer.score(z_c, pr_c)
            if s_c > best_score + 1e-9:
                best_score = s_c
                round_best = (z_c, v_c, pz_c, pr_c)
        if round_best is None:
            break
        best_state = round_best
        active = {int(r) for r in
                  np.flatnonzero(best_state[3] > options.detect_threshold)}
        if not active:
            break
    zeta, vz, pi_z, pi_row = best_state
    return PosteriorEstimate(zeta_mean=zeta * scale, zeta_var=vz * scale**2,
                             support_prob=pi_z, row_support=pi_row,
                             iterations=est.iterations,
                             converged=est.converged,
                             residual_nmse=est.residual_nmse)


def run_mp(y, dictionary, prior: RowPrior, sigma2,
           options: SolverOptions = SolverOptions()) -> PosteriorEstimate:
    """Row-coupled message-passing solve of a stacked frame Y (Nr*N x M).

    The problem is rescaled so the gain-prior variance is one, which keeps
    the absolute variance floor meaningful regardless of path-loss scale.
    """
    scale = np.sqrt(prior.beta_var)
    prior_n = replace(prior, beta_var=1.0, beta_mean=prior.beta_mean / scale)
    if options.schedule == "serial":
        est = serial_loop(y / scale, dictionary, sigma2 / scale**2, prior_n,
                          options, scale=scale)
        if options.polish_moves > 0:
            est = polish_support(y / scale, dictionary, sigma2 / scale**2,
                                 prior_n, est, options, scale=scale)
        return est
    if options.schedule != "parallel":
        raise ValueError(f"unknown schedule {options.schedule!r}")
    est = gamp_loop(y / scale, dictionary, sigma2 / scale**2,
                    _RowDenoiser(prior_n, options), options, scale=scale)
    return est
