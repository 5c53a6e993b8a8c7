"""Gaussian-mixture messages on the row-coupling factor graph.

Reference (per-row, readable) implementations.  The solver's hot path lives
in row_messages / _row_kernel and is tested against these.

Mixtures are V complex Gaussians with a shared variance.  Weight arithmetic
runs in the log domain with max subtraction; every emitted variance is
floored.
"""

from dataclasses import dataclass, field
import numpy as np

VAR_FLOOR = 1e-12
VAR_CEILING = 1e12


def log_cn0(delta, var):
    """log CN(0; delta, var) for complex delta."""
    return -np.abs(delta)**2 / var - np.log(np.pi * var)


@dataclass(frozen=True)
class RowPrior:
    sparsity: float
    beta_mean: complex
    beta_var: float
    phases: np.ndarray            # V constellation phases S_1..S_V

    def __post_init__(self):
        if not 0.0 < self.sparsity < 1.0:
            raise ValueError("sparsity must be in (0,1)")
        if self.beta_var <= 0:
            raise ValueError("beta_var must be positive")

    @property
    def order(self):
        return self.phases.size


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    variance: float
    anchor_mag: float = 0.0       # |r| of the generating pseudo-observation
    degenerate: bool = False      # set when weights underflowed to uniform

    def __post_init__(self):
        object.__setattr__(self, "variance", max(float(self.variance), VAR_FLOOR))

    @property
    def order(self):
        return self.weights.size

    def mean(self):
        return np.sum(self.weights * self.means)

    def second_moment(self):
        return self.variance + np.sum(self.weights * np.abs(self.means)**2)


def forward_message(r, vr, prior: RowPrior) -> GaussianMixture:
    """Message toward the shared-gain node: V rotations of the pseudo-obs."""
    if vr <= 0:
        raise ValueError("vr must be positive")
    v = prior.order
    return GaussianMixture(weights=np.full(v, 1.0 / v),
                           means=np.exp(-1j * prior.phases) * r,
                           variance=vr, anchor_mag=abs(r))


def _product_groups(a: GaussianMixture, b: GaussianMixture):
    """Exact V^2 product, moment-matched per anchor group.

    Returns (group weights, group means, group variances, shared pair
    variance, degenerate flag); groups are indexed by the anchor component.
    """
    v = 1.0 / (1.0 / a.variance + 1.0 / b.variance)
    vsum = a.variance + b.variance
    am = a.means[:, None]
    bm = b.means[None, :]
    pair_means = v * (am / a.variance + bm / b.variance)
    with np.errstate(divide="ignore"):
        pair_logw = (np.log(a.weights)[:, None] + np.log(b.weights)[None, :]
                     + log_cn0(am - bm, vsum))
    mx = pair_logw.max()
    degenerate = not np.isfinite(mx)
    if degenerate:
        pair_w = np.full_like(pair_logw, 1.0 / pair_logw.size)
    else:
        pair_w = np.exp(pair_logw - mx)
        pair_w /= pair_w.sum()
    gw = pair_w.sum(axis=1)
    inner = pair_w / np.maximum(gw[:, None], 1e-300)
    gm = (inner * pair_means).sum(axis=1)
    gv = v + (inner * np.abs(pair_means - gm[:, None])**2).sum(axis=1)
    return gw, gm, gv, v, degenerate


def mixture_product_reduce(a: GaussianMixture, b: GaussianMixture,
                           return_groups=False):
    """Product of two V-mixtures reduced back to V components.

    The mixture generated by the larger pseudo-observation anchors the
    grouping (ties keep the first argument).  Group moments are matched
    exactly; the output means are then replaced by the rotational form
    (multiples of 2*pi/V around the heaviest group) with a common variance.
    """
    if a.order != b.order:
        raise ValueError("mixture orders differ")
    if a.anchor_mag < b.anchor_mag:
        a, b = b, a
    gw, gm, gv, _, degenerate = _product_groups(a, b)
    vv = a.order
    lead = int(np.argmax(gw))
    rot = np.exp(2j * np.pi * (np.arange(vv) - lead) / vv)
    out = GaussianMixture(weights=gw, means=rot * gm[lead], variance=gv[lead],
                          anchor_mag=max(a.anchor_mag, b.anchor_mag),
                          degenerate=degenerate or a.degenerate or b.degenerate)
    if return_groups:
        return out, (gw, gm, gv)
    return out


@dataclass(frozen=True)
class NuMessage:
    """Spike weight plus slab mixture for the shared row gain."""
    support_prob: float
    slab: GaussianMixture


def backward_message_nu(messages, prior: RowPrior) -> NuMessage:
    """Progressive product of the other blocks' messages, then prior combine.

    `messages` holds the forward messages of blocks m' != m in block order;
    an empty list returns the Bernoulli-Gaussian prior itself.
    """
    v = prior.order
    if len(messages) == 0:
        slab = GaussianMixture(weights=np.full(v, 1.0 / v),
                               means=np.full(v, prior.beta_mean, dtype=complex),
                               variance=prior.beta_var)
        return NuMessage(support_prob=prior.sparsity, slab=slab)
    acc = None
    for msg in sorted(messages, key=lambda m: -m.anchor_mag):
        acc = msg if acc is None else mixture_product_reduce(acc, msg)
    vm = acc.variance
    vnu = 1.0 / (1.0 / vm + 1.0 / prior.beta_var)
    nu_means = vnu * (acc.means / vm + prior.beta_mean / prior.beta_var)
    with np.errstate(divide="ignore"):
        logw = np.log(acc.weights) + log_cn0(prior.beta_mean - acc.means,
                                             prior.beta_var + vm)
    mx = logw.max()
    xi = np.exp(logw - mx)
    xi /= xi.sum()
    # spike/slab odds: the spike side sums the slab-free densities at zero
    ln_spike = np.log1p(-prior.sparsity) + _logsumexp(log_cn0(acc.means, vm))
    ln_slab = np.log(prior.sparsity) + _logsumexp(logw)
    pi = _sigmoid(ln_slab - ln_spike)
    return NuMessage(support_prob=pi,
                     slab=GaussianMixture(weights=xi, means=nu_means, variance=vnu,
                                          anchor_mag=acc.anchor_mag,
                                          degenerate=acc.degenerate))


def zeta_message(nu_msg: NuMessage, prior: RowPrior) -> NuMessage:
    """Push the gain message through the phase prior onto a single entry.

    The V^2 rotated components collapse onto V phase classes (anchor index
    plus rotation index); each class is moment-matched, keeping the slab
    variance.  The support probability passes through unchanged.
    """
    v = prior.order
    slab = nu_msg.slab
    rot = np.exp(1j * prior.phases)
    with np.errstate(divide="ignore"):
        logw = np.log(slab.weights) - np.log(v)
    cls_means = np.zeros(v, dtype=complex)
    cls_w = np.zeros(v)
    for l in range(v):
        for q in range(v):
            c = (l + q) % v
            w = np.exp(logw[l])
            cls_w[c] += w
            cls_means[c] += w * rot[q] * slab.means[l]
    cls_means /= np.maximum(cls_w, 1e-300)
    return NuMessage(support_prob=nu_msg.support_prob,
                     slab=GaussianMixture(weights=cls_w, means=cls_means,
                                          variance=slab.variance,
                                          anchor_mag=slab.anchor_mag,
                                          degenerate=slab.degenerate))


def zeta_posterior(r, vr, msg: NuMessage):
    """Posterior mean/variance/support of one entry given its pseudo-obs."""
    if vr <= 0:
        raise ValueError("vr must be positive")
    slab = msg.slab
    pi = msg.support_prob
    vt = 1.0 / (1.0 / vr + 1.0 / slab.variance)
    comp_means = vt * (r / vr + slab.means / slab.variance)
    with np.errstate(divide="ignore"):
        logw = np.log(slab.weights) + log_cn0(r - slab.means, vr + slab.variance)
    mx = logw.max()
    w = np.exp(logw - mx)
    w /= w.sum()
    with np.errstate(divide="ignore"):
        ln_spike = np.log(max(1.0 - pi, 0.0)) + log_cn0(r, vr)
        ln_slab = np.log(pi) + _logsumexp(logw)
    pi_z = _sigmoid(ln_slab - ln_spike)
    mean_slab = np.sum(w * comp_means)
    zhat = pi_z * mean_slab
    vz = ((1.0 - pi_z) * np.abs(zhat)**2
          + pi_z * np.sum(w * (vt + np.abs(comp_means - zhat)**2)))
    return zhat, max(vz, VAR_FLOOR), pi_z


def _logsumexp(x):
    m = np.max(x)
    if not np.isfinite(m):
        return m
    return m + np.log(np.sum(np.exp(x - m)))


def _sigmoid(t):
    if t >= 0:
        return 1.0 / (1.0 + np.exp(-t))
    e = np.exp(t)
    return e / (1.0 + e)
