"""Batched row-coupling update across all grid rows and blocks.

Two implementations of Algorithm steps 11-14:

* `row_update_reference` loops over rows/blocks through the messages module;
  it handles any gain-prior mean and is the correctness anchor.
* `row_update_batch` vectorizes the zero-mean-gain case, where every mixture
  in the progressive product keeps uniform weights and exact rotational
  orbits, so one representative mean per row suffices.  This is the pure
  NumPy twin of the compiled kernel.
"""

import numpy as np

from .messages import (RowPrior, forward_message, backward_message_nu,
                       zeta_message, zeta_posterior, VAR_FLOOR)


def row_update_reference(rhat, vr, prior: RowPrior, var_floor=VAR_FLOOR):
    n_rows, n_blocks = rhat.shape
    zhat = np.zeros_like(rhat)
    vz = np.zeros(rhat.shape)
    pi_z = np.zeros(rhat.shape)
    pi_row = np.zeros(n_rows)
    for i in range(n_rows):
        fwd = [forward_message(rhat[i, m], vr[i, m], prior)
               for m in range(n_blocks)]
        for m in range(n_blocks):
            others = fwd[:m] + fwd[m + 1:]
            msg = zeta_message(backward_message_nu(others, prior), prior)
            zhat[i, m], vz[i, m], pi_z[i, m] = zeta_posterior(
                rhat[i, m], vr[i, m], msg)
        pi_row[i] = backward_message_nu(fwd, prior).support_prob
    return zhat, np.maximum(vz, var_floor), pi_z, pi_row


def _reduce_step(nu, v, r_next, v_next, rot):
    """One progressive product step in the orbit-symmetric representation.

    (nu, v) is the accumulated mixture's representative mean and shared
    variance; the new block enters as its V rotated pseudo-observations.
    Anchoring is on the accumulator (blocks arrive sorted by |r| descending).
    """
    means_b = rot[None, :] * r_next[:, None]
    v_out = 1.0 / (1.0 / v + 1.0 / v_next)
    pair = v_out[:, None] * (nu[:, None] / v[:, None]
                             + means_b / v_next[:, None])
    logw = -np.abs(nu[:, None] - means_b)**2 / (v + v_next)[:, None]
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    nu_new = np.einsum('iv,iv->i', w, pair)
    v_new = v_out + np.einsum('iv,iv->i', w, np.abs(pair - nu_new[:, None])**2)
    return nu_new, v_new


def _sigmoid(t):
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def row_update_batch(rhat, vr, rho, beta_var, phases, var_floor=VAR_FLOOR):
    """Steps 11-14 for all rows at once, zero-mean gain prior.

    rhat, vr: (rows, blocks).  Returns (zhat, vz, pi_z, pi_row).
    """
    n_rows, n_blocks = rhat.shape
    n_ph = phases.size
    rot_fwd = np.exp(-1j * phases)
    orbit = np.exp(2j * np.pi * np.arange(n_ph) / n_ph)

    if n_blocks == 1:
        # vacuous exclusion product: the gain message is the prior itself,
        # but the row belief still sees the single block
        nu_excl = np.zeros((n_rows, 1), dtype=complex)
        v_excl = np.full((n_rows, 1), np.inf)
        pi_row = _sigmoid(_pi_logit(rot_fwd[0] * rhat[:, 0], vr[:, 0],
                                    rho, beta_var, n_ph))
    else:
        order = np.argsort(-np.abs(rhat), axis=1, kind='stable')
        rs = np.take_along_axis(rhat, order, 1)
        vs = np.take_along_axis(vr, order, 1)
        pref_nu = np.empty((n_rows, n_blocks), dtype=complex)
        pref_v = np.empty((n_rows, n_blocks))
        pref_nu[:, 0] = rot_fwd[0] * rs[:, 0]
        pref_v[:, 0] = vs[:, 0]
        for k in range(1, n_blocks):
            pref_nu[:, k], pref_v[:, k] = _reduce_step(
                pref_nu[:, k - 1], pref_v[:, k - 1], rs[:, k], vs[:, k], rot_fwd)
        ex_nu = np.empty_like(pref_nu)
        ex_v = np.empty_like(pref_v)
        for j in range(n_blocks):
            if j == 0:
                nu = rot_fwd[0] * rs[:, 1]
                v = vs[:, 1].copy()
                start = 2
            else:
                nu = pref_nu[:, j - 1].copy()
                v = pref_v[:, j - 1].copy()
                start = j + 1
            for k in range(start, n_blocks):
                nu, v = _reduce_step(nu, v, rs[:, k], vs[:, k], rot_fwd)
            ex_nu[:, j] = nu
            ex_v[:, j] = v
        nu_excl = np.empty_like(ex_nu)
        v_excl = np.empty_like(ex_v)
        np.put_along_axis(nu_excl, order, ex_nu, 1)
        np.put_along_axis(v_excl, order, ex_v, 1)
        # spike/slab odds at the full product give the row support
        t_row = _pi_logit(pref_nu[:, -1], pref_v[:, -1], rho, beta_var, n_ph)
        pi_row = _sigmoid(t_row)

    with np.errstate(over='ignore'):
        t_msg = _pi_logit(nu_excl, v_excl, rho, beta_var, n_ph)
    vnu = 1.0 / (1.0 / v_excl + 1.0 / beta_var)
    mu0 = np.where(np.isinf(v_excl), 0.0, vnu * nu_excl
                   / np.where(np.isinf(v_excl), 1.0, v_excl))
    slab = (np.exp(1j * phases[0]) * mu0)[..., None] * orbit[None, None, :]

    vt = 1.0 / (1.0 / vr + 1.0 / vnu)
    comp = vt[..., None] * (rhat[..., None] / vr[..., None]
                            + slab / vnu[..., None])
    logw = -np.abs(rhat[..., None] - slab)**2 / (vr + vnu)[..., None]
    mx = logw.max(axis=2)
    lse = mx + np.log(np.exp(logw - mx[..., None]).sum(axis=2))
    w = np.exp(logw - lse[..., None])
    # Bernoulli update of each entry (spike at zero vs V-component slab);
    # log-odds add the message logit to the density ratio
    ln_spike = -np.abs(rhat)**2 / vr - np.log(np.pi * vr)
    ln_slab = -np.log(n_ph) + lse - np.log(np.pi * (vr + vnu))
    t_zeta = t_msg + ln_slab - ln_spike
    pi_z = _sigmoid(t_zeta)
    mean_slab = (w * comp).sum(axis=2)
    zhat = pi_z * mean_slab
    vz = ((1.0 - pi_z) * np.abs(zhat)**2
          + pi_z * ((w * (vt[..., None] + np.abs(comp - zhat[..., None])**2)).sum(axis=2)))
    return zhat, np.maximum(vz, var_floor), pi_z, pi_row


def _pi_logit(nu, v, rho, beta_var, n_ph):
    """log-odds of the support indicator given the reduced product mixture.

    Infinite variance marks the vacuous product (prior odds).
    """
    a2 = np.abs(nu)**2
    with np.errstate(invalid='ignore'):
        ln_spike = np.log1p(-rho) + np.log(n_ph) - a2 / v - np.log(np.pi * v)
        ln_slab = (np.log(rho) - a2 / (beta_var + v)
                   - np.log(np.pi * (beta_var + v)))
        t = ln_slab - ln_spike
    prior_logit = np.log(rho) - np.log1p(-rho)
    if np.ndim(t):
        t[np.isinf(np.asarray(v))] = prior_logit
    elif np.isinf(v):
        t = prior_logit
    return t
