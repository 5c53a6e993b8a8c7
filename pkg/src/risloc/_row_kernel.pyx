# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled row-coupling update (zero-mean gain prior, orbit-symmetric case).

Same math as row_messages.row_update_batch.  Two entry points share the
per-row message computation: `row_update_kernel` (parallel schedule, all
rows from given pseudo-observations) and `serial_sweep` (sequential rows
with exact residual feedback).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, INFINITY, M_PI

cnp.import_array()

DEF MAX_V = 16
DEF MAX_M = 256


cdef inline double _sigmoid(double t) nogil:
    if t >= 0.0:
        return 1.0 / (1.0 + exp(-t))
    cdef double e = exp(t)
    return e / (1.0 + e)


cdef inline double _cabs2(double complex z) nogil:
    return z.real * z.real + z.imag * z.imag


cdef inline void _reduce_step(double complex* nu, double* v,
                              double complex r_next, double v_next,
                              double complex* rot, int n_ph) nogil:
    """Progressive product step anchored on the accumulator."""
    cdef double v_out = 1.0 / (1.0 / v[0] + 1.0 / v_next)
    cdef double vsum = v[0] + v_next
    cdef double complex pair[MAX_V]
    cdef double lw[MAX_V]
    cdef double complex b
    cdef double mx = -INFINITY
    cdef double wsum = 0.0
    cdef double complex nu_new = 0.0
    cdef double spread = 0.0
    cdef int d
    for d in range(n_ph):
        b = rot[d] * r_next
        pair[d] = v_out * (nu[0] / v[0] + b / v_next)
        lw[d] = -_cabs2(nu[0] - b) / vsum
        if lw[d] > mx:
            mx = lw[d]
    for d in range(n_ph):
        lw[d] = exp(lw[d] - mx)
        wsum += lw[d]
    for d in range(n_ph):
        lw[d] /= wsum
        nu_new += lw[d] * pair[d]
    for d in range(n_ph):
        spread += lw[d] * _cabs2(pair[d] - nu_new)
    nu[0] = nu_new
    v[0] = v_out + spread


cdef double _row_messages(double complex* rhat, double* vr,
                          Py_ssize_t n_blocks, double rho, double beta_var,
                          double complex* rot, double complex* orbit,
                          int n_ph, double var_floor, double prior_logit,
                          double log_nph,
                          double complex* zeta_out, double* vz_out,
                          double* piz_out,
                          Py_ssize_t* order, double complex* rs, double* vs,
                          double complex* pref_nu, double* pref_v,
                          double complex* ex_nu, double* ex_v) nogil:
    """Steps 11-14 for one row; returns the row support probability."""
    cdef Py_ssize_t m, j, k, key_i
    cdef double key_mag
    cdef double complex nu, mu0, mean_slab, zt
    cdef double v, t_row, t_msg, vnu, a2, vt, vsum
    cdef double mx, wsum, ln_spike, ln_slab, pz, spread
    cdef double complex slab[MAX_V]
    cdef double complex comp[MAX_V]
    cdef double lw[MAX_V]
    cdef int d

    for m in range(n_blocks):
        order[m] = m
    for m in range(1, n_blocks):
        key_i = order[m]
        key_mag = _cabs2(rhat[key_i])
        j = m - 1
        while j >= 0 and _cabs2(rhat[order[j]]) < key_mag:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = key_i
    for m in range(n_blocks):
        rs[m] = rhat[order[m]]
        vs[m] = vr[order[m]]

    if n_blocks > 1:
        pref_nu[0] = rot[0] * rs[0]
        pref_v[0] = vs[0]
        for k in range(1, n_blocks):
            nu = pref_nu[k - 1]
            v = pref_v[k - 1]
            _reduce_step(&nu, &v, rs[k], vs[k], rot, n_ph)
            pref_nu[k] = nu
            pref_v[k] = v
        for j in range(n_blocks):
            if j == 0:
                nu = rot[0] * rs[1]
                v = vs[1]
                k = 2
            else:
                nu = pref_nu[j - 1]
                v = pref_v[j - 1]
                k = j + 1
            while k < n_blocks:
                _reduce_step(&nu, &v, rs[k], vs[k], rot, n_ph)
                k += 1
            ex_nu[j] = nu
            ex_v[j] = v
        a2 = _cabs2(pref_nu[n_blocks - 1])
        v = pref_v[n_blocks - 1]
        t_row = ((log(rho) - a2 / (beta_var + v) - log(M_PI * (beta_var + v)))
                 - (log1p(-rho) + log_nph - a2 / v - log(M_PI * v)))
    else:
        nu = rot[0] * rs[0]
        v = vs[0]
        a2 = _cabs2(nu)
        t_row = ((log(rho) - a2 / (beta_var + v) - log(M_PI * (beta_var + v)))
                 - (log1p(-rho) + log_nph - a2 / v - log(M_PI * v)))

    for j in range(n_blocks):
        m = order[j] if n_blocks > 1 else 0
        if n_blocks > 1:
            nu = ex_nu[j]
            v = ex_v[j]
            a2 = _cabs2(nu)
            t_msg = ((log(rho) - a2 / (beta_var + v)
                      - log(M_PI * (beta_var + v)))
                     - (log1p(-rho) + log_nph - a2 / v - log(M_PI * v)))
            vnu = 1.0 / (1.0 / v + 1.0 / beta_var)
            mu0 = vnu * nu / v
        else:
            t_msg = prior_logit
            vnu = beta_var
            mu0 = 0.0
        for d in range(n_ph):
            slab[d] = orbit[d] * mu0

        vt = 1.0 / (1.0 / vr[m] + 1.0 / vnu)
        vsum = vr[m] + vnu
        mx = -INFINITY
        for d in range(n_ph):
            comp[d] = vt * (rhat[m] / vr[m] + slab[d] / vnu)
            lw[d] = -_cabs2(rhat[m] - slab[d]) / vsum
            if lw[d] > mx:
                mx = lw[d]
        wsum = 0.0
        for d in range(n_ph):
            lw[d] = exp(lw[d] - mx)
            wsum += lw[d]
        ln_slab = mx + log(wsum) - log_nph - log(M_PI * vsum)
        ln_spike = -_cabs2(rhat[m]) / vr[m] - log(M_PI * vr[m])
        pz = _sigmoid(t_msg + ln_slab - ln_spike)
        mean_slab = 0.0
        for d in range(n_ph):
            lw[d] /= wsum
            mean_slab += lw[d] * comp[d]
        zt = pz * mean_slab
        spread = 0.0
        for d in range(n_ph):
            spread += lw[d] * (vt + _cabs2(comp[d] - zt))
        zeta_out[m] = zt
        vz_out[m] = (1.0 - pz) * _cabs2(zt) + pz * spread
        if vz_out[m] < var_floor:
            vz_out[m] = var_floor
        piz_out[m] = pz
    return _sigmoid(t_row)


cdef class _Scratch:
    cdef Py_ssize_t[::1] order
    cdef double complex[::1] rs, pref_nu, ex_nu, zrow, rrow
    cdef double[::1] vs, pref_v, ex_v, vzrow, pizrow, vrrow
    cdef double complex rot[MAX_V]
    cdef double complex orbit[MAX_V]
    cdef int n_ph
    cdef double prior_logit, log_nph

    def __init__(self, n_blocks, phases, rho):
        self.order = np.empty(n_blocks, dtype=np.intp)
        self.rs = np.empty(n_blocks, dtype=np.complex128)
        self.vs = np.empty(n_blocks, dtype=np.float64)
        self.pref_nu = np.empty(n_blocks, dtype=np.complex128)
        self.pref_v = np.empty(n_blocks, dtype=np.float64)
        self.ex_nu = np.empty(n_blocks, dtype=np.complex128)
        self.ex_v = np.empty(n_blocks, dtype=np.float64)
        self.zrow = np.empty(n_blocks, dtype=np.complex128)
        self.rrow = np.empty(n_blocks, dtype=np.complex128)
        self.vzrow = np.empty(n_blocks, dtype=np.float64)
        self.pizrow = np.empty(n_blocks, dtype=np.float64)
        self.vrrow = np.empty(n_blocks, dtype=np.float64)
        self.n_ph = len(phases)
        cdef int d
        for d in range(self.n_ph):
            self.rot[d] = np.exp(-1j * phases[d])
            self.orbit[d] = np.exp(1j * (phases[0]
                                         + 2.0 * np.pi * d / self.n_ph))
        self.prior_logit = log(rho) - log1p(-rho)
        self.log_nph = log(<double>self.n_ph)


def row_update_kernel(double complex[:, ::1] rhat, double[:, ::1] vr,
                      double rho, double beta_var,
                      double[::1] phases, double var_floor):
    """Batched steps 11-14 (parallel schedule); returns (zhat, vz, pi_z, pi_row)."""
    cdef Py_ssize_t n_rows = rhat.shape[0]
    cdef Py_ssize_t n_blocks = rhat.shape[1]
    if phases.shape[0] > MAX_V:
        raise ValueError("constellation too large for the kernel")
    zhat_arr = np.empty((n_rows, n_blocks), dtype=np.complex128)
    vz_arr = np.empty((n_rows, n_blocks), dtype=np.float64)
    piz_arr = np.empty((n_rows, n_blocks), dtype=np.float64)
    pirow_arr = np.empty(n_rows, dtype=np.float64)
    cdef double complex[:, ::1] zhat = zhat_arr
    cdef double[:, ::1] vz = vz_arr
    cdef double[:, ::1] piz = piz_arr
    cdef double[::1] pirow = pirow_arr
    cdef _Scratch s = _Scratch(n_blocks, np.asarray(phases), rho)
    cdef Py_ssize_t i
    for i in range(n_rows):
        pirow[i] = _row_messages(
            &rhat[i, 0], &vr[i, 0], n_blocks, rho, beta_var,
            s.rot, s.orbit, s.n_ph, var_floor, s.prior_logit, s.log_nph,
            &zhat[i, 0], &vz[i, 0], &piz[i, 0],
            &s.order[0], &s.rs[0], &s.vs[0], &s.pref_nu[0], &s.pref_v[0],
            &s.ex_nu[0], &s.ex_v[0])
    return zhat_arr, vz_arr, piz_arr, pirow_arr


def serial_sweep(double complex[:, :, ::1] blocks_t,
                 double complex[:, ::1] residual,
                 double complex[:, ::1] zeta, double[:, ::1] vz,
                 double[:, ::1] va, double[:, ::1] vr,
                 Py_ssize_t[::1] order_rows,
                 double rho, double beta_var,
                 double[::1] phases, double var_floor):
    """One sequential pass over the rows with exact residual feedback.

    blocks_t holds the dictionary transposed to (M, rows, samples) so a
    row's columns are contiguous.  residual (samples, M), zeta and vz
    (rows, M) are updated in place; va and vr stay fixed for the sweep.
    Returns (pi_z, pi_row).
    """
    cdef Py_ssize_t n_blocks = blocks_t.shape[0]
    cdef Py_ssize_t n_rows = blocks_t.shape[1]
    cdef Py_ssize_t n_samp = blocks_t.shape[2]
    cdef Py_ssize_t n_visit = order_rows.shape[0]
    if phases.shape[0] > MAX_V:
        raise ValueError("constellation too large for the kernel")
    piz_arr = np.zeros((n_rows, n_blocks), dtype=np.float64)
    pirow_arr = np.zeros(n_rows, dtype=np.float64)
    cdef double[:, ::1] piz = piz_arr
    cdef double[::1] pirow = pirow_arr
    cdef _Scratch s = _Scratch(n_blocks, np.asarray(phases), rho)
    cdef Py_ssize_t ii, i, m, j
    cdef double complex corr, delta
    for ii in range(n_visit):
        i = order_rows[ii]
        for m in range(n_blocks):
            corr = 0.0
            for j in range(n_samp):
                corr += blocks_t[m, i, j].conjugate() * residual[j, m] * va[j, m]
            s.rrow[m] = zeta[i, m] + vr[i, m] * corr
            s.vrrow[m] = vr[i, m]
        pirow[i] = _row_messages(
            &s.rrow[0], &s.vrrow[0], n_blocks, rho, beta_var,
            s.rot, s.orbit, s.n_ph, var_floor, s.prior_logit, s.log_nph,
            &s.zrow[0], &s.vzrow[0], &piz[i, 0],
            &s.order[0], &s.rs[0], &s.vs[0], &s.pref_nu[0], &s.pref_v[0],
            &s.ex_nu[0], &s.ex_v[0])
        for m in range(n_blocks):
            delta = s.zrow[m] - zeta[i, m]
            if delta != 0.0:
                for j in range(n_samp):
                    residual[j, m] = residual[j, m] - blocks_t[m, i, j] * delta
            zeta[i, m] = s.zrow[m]
            vz[i, m] = s.vzrow[m]
    return piz_arr, pirow_arr
