"""Objective terms: source cross-entropy, target prediction entropy,
moment-matched latent KL, and the Donsker-Varadhan mutual-information losses
(single shared critic and the two-critic form) with a reconstruction baseline.

Array-level losses return ``(value, grad...)`` tuples. Critic-based losses run
the critics forward, optionally backpropagate a scalar ``grad`` (the upstream
derivative of the caller's objective w.r.t. the returned value) into the
critic parameters, and return the gradients w.r.t. the latent inputs so the
caller can chain them into the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .numerics import Net, Rng, as_tensor, log_softmax, softmax

VAR_FLOOR = 1e-6


@dataclass
class MiBatch:
    """Joint pairs ``(x, z)`` and the row-permuted latents standing in for P_X x P_Z."""

    x_joint: np.ndarray
    z_joint: np.ndarray
    z_marginal: np.ndarray
    perm: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = self.x_joint.shape[0]
        if n < 2:
            raise ValueError("an MI batch needs at least 2 rows")
        if self.z_joint.shape[0] != n or self.z_marginal.shape != self.z_joint.shape:
            raise ValueError("x_joint, z_joint and z_marginal must have the same row count")

    @classmethod
    def from_joint(cls, x: np.ndarray, z: np.ndarray, rng: Rng) -> "MiBatch":
        perm = marginal_permutation(z.shape[0], rng)
        return cls(x, z, z[perm], perm)

    @property
    def n(self) -> int:
        return self.x_joint.shape[0]

    def is_permutation(self) -> bool:
        a = self.z_joint[np.lexsort(self.z_joint.T[::-1])]
        b = self.z_marginal[np.lexsort(self.z_marginal.T[::-1])]
        return bool(np.array_equal(a, b))


@dataclass
class LossBreakdown:
    l_cls: float
    l_kld: float
    l_mi: float
    l_ent: float
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 0.1

    @property
    def total(self) -> float:
        return self.l_cls + self.alpha * self.l_kld + self.beta * self.l_mi + self.gamma * self.l_ent


class CriticOutput(NamedTuple):
    value: float
    dz_joint: np.ndarray | None
    dz_marginal: np.ndarray | None


@dataclass
class EmaState:
    """Running mean of ``mean(exp(M2(marginal)))`` for the bias-corrected gradient.

    Stored in log space so large critic outputs cannot overflow.
    """

    rate: float
    log_value: float | None = None

    def update(self, log_batch_mean: float) -> float:
        if self.log_value is None:
            self.log_value = log_batch_mean
        else:
            self.log_value = float(np.logaddexp(math.log1p(-self.rate) + self.log_value,
                                                math.log(self.rate) + log_batch_mean))
        return self.log_value


def classification_loss(logits, labels):
    """Mean softmax cross-entropy. Returns ``(value, dvalue/dlogits)``."""
    logits = as_tensor(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError("labels length must match logits rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    logp = log_softmax(logits)
    rows = np.arange(n)
    value = -float(logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return value, grad / n


def entropy_penalty(logits):
    """Mean Shannon entropy of the softmax rows. Returns ``(value, dvalue/dlogits)``."""
    logits = as_tensor(logits, "logits")
    n = logits.shape[0]
    logp = log_softmax(logits)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    grad = -p * (logp + h[:, None]) / n
    return float(h.mean()), grad


def _moments(z: np.ndarray):
    mu = z.mean(axis=0)
    raw = z.var(axis=0, ddof=1)
    return mu, np.maximum(raw, VAR_FLOOR), raw > VAR_FLOOR


def latent_kld(z_source, z_target):
    """KL(N_source || N_target) between per-dimension Gaussian fits of two batches.

    Means and unbiased variances (floored at ``VAR_FLOOR``) are taken per
    column; the closed-form diagonal KL is summed over columns. Returns
    ``(value, d/dz_source, d/dz_target)``; floored variances pass no gradient.
    """
    zs = as_tensor(z_source, "z_source")
    zt = as_tensor(z_target, "z_target")
    if zs.shape[0] < 2 or zt.shape[0] < 2:
        raise ValueError("latent_kld needs at least 2 rows per batch")
    if zs.shape[1] != zt.shape[1]:
        raise ValueError("latent batches must have the same width")
    mu_s, var_s, live_s = _moments(zs)
    mu_t, var_t, live_t = _moments(zt)
    diff = mu_s - mu_t
    value = float(np.sum(0.5 * np.log(var_t / var_s) + (var_s + diff**2) / (2.0 * var_t) - 0.5))

    d_mu_s = diff / var_t
    d_var_s = (0.5 / var_t - 0.5 / var_s) * live_s
    d_var_t = (0.5 / var_t - (var_s + diff**2) / (2.0 * var_t**2)) * live_t
    ns, nt = zs.shape[0], zt.shape[0]
    dzs = d_mu_s / ns + d_var_s * 2.0 * (zs - mu_s) / (ns - 1)
    dzt = -d_mu_s / nt + d_var_t * 2.0 * (zt - mu_t) / (nt - 1)
    return value, dzs, dzt


def _log_mean_exp(b: np.ndarray) -> float:
    m = b.max()
    return float(m + np.log(np.mean(np.exp(b - m))))


def _critic_pass(m1: Net, m2: Net, batch: MiBatch, *, grad=None, param_grads=True,
                 hinge_lambda=0.0, ema: EmaState | None = None):
    """Shared evaluation of L_mi and the constraint gap.

    Returns ``(l_mi, gap, dz_joint, dz_marginal)``. The backpropagated objective
    is ``grad * (l_mi + hinge_lambda * max(0, gap))``.
    """
    n = batch.n
    dx = batch.x_joint.shape[1]
    for m in (m1, m2):
        if m.layer_sizes[0] != dx + batch.z_joint.shape[1] or m.layer_sizes[-1] != 1:
            raise ValueError("critic must map d_x + d_z inputs to one score")
    joint = np.hstack([batch.x_joint, batch.z_joint])
    marg = np.hstack([batch.x_joint, batch.z_marginal])
    shared = m1 is m2
    if shared:
        out = m1.forward(np.vstack([joint, marg]))[:, 0]
        a, b, a2 = out[:n], out[n:], out[:n]
    else:
        a = m1.forward(joint)[:, 0]
        out2 = m2.forward(np.vstack([joint, marg]))[:, 0]
        a2, b = out2[:n], out2[n:]
    lme = _log_mean_exp(b)
    l_mi = -(float(a.mean()) - lme)
    gap = float(a.mean() - a2.mean())
    if grad is None:
        return l_mi, gap, None, None

    da = np.full(n, -1.0 / n)
    if ema is not None:
        log_ema = ema.update(lme)
        db = np.exp(b - log_ema) / n
    else:
        db = softmax(b[None, :])[0]
    da2 = np.zeros(n)
    if hinge_lambda > 0 and gap > 0 and not shared:
        da = da + hinge_lambda / n
        da2 = da2 - hinge_lambda / n
    if shared:
        g_in = m1.backward(grad * np.concatenate([da + da2, db])[:, None], accumulate=param_grads)
        dzj, dzm = g_in[:n, dx:], g_in[n:, dx:]
    else:
        g1 = m1.backward(grad * da[:, None], accumulate=param_grads)
        g2 = m2.backward(grad * np.concatenate([da2, db])[:, None], accumulate=param_grads)
        dzj = g1[:, dx:] + g2[:n, dx:]
        dzm = g2[n:, dx:]
    return l_mi, gap, dzj, dzm


def mi_loss(critic_m1: Net, critic_m2: Net, batch: MiBatch, grad=None, *,
            param_grads: bool = True, ema: EmaState | None = None) -> CriticOutput:
    """``-(mean M1(x, z) - log mean exp M2(x, z_bar))``.

    Passing the same net twice gives the shared-critic (MINE) loss.
    """
    l_mi, _, dzj, dzm = _critic_pass(critic_m1, critic_m2, batch, grad=grad,
                                     param_grads=param_grads, ema=ema)
    return CriticOutput(l_mi, dzj, dzm)


def dv_bound_single(critic: Net, batch: MiBatch, grad=None, *, param_grads: bool = True,
                    ema: EmaState | None = None) -> CriticOutput:
    """Donsker-Varadhan bound ``mean M(joint) - log mean exp M(marginal)`` for one critic.

    ``grad`` is the upstream derivative w.r.t. the bound itself.
    """
    g = None if grad is None else -grad
    l_mi, _, dzj, dzm = _critic_pass(critic, critic, batch, grad=g, param_grads=param_grads, ema=ema)
    return CriticOutput(-l_mi, dzj, dzm)


def constraint_gap(critic_m1: Net, critic_m2: Net, batch: MiBatch) -> float:
    """``mean M1(joint) - mean M2(joint)``; positive means the two-critic bound's hypothesis fails."""
    return _critic_pass(critic_m1, critic_m2, batch)[1]


def critic_objective(critic_m1: Net, critic_m2: Net, batch: MiBatch, *, hinge_lambda: float = 0.0,
                     ema: EmaState | None = None):
    """Critic-phase step: backprop ``L_mi + hinge_lambda * max(0, gap)`` into both critics.

    Returns ``(l_mi, gap)`` measured before the update.
    """
    l_mi, gap, _, _ = _critic_pass(critic_m1, critic_m2, batch, grad=1.0,
                                   hinge_lambda=hinge_lambda, ema=ema)
    return l_mi, gap


def marginal_permutation(n: int, rng: Rng) -> np.ndarray:
    if n < 2:
        raise ValueError("resampling needs at least 2 rows")
    return rng.permutation(n)


def resample_marginal(z_joint, rng: Rng) -> np.ndarray:
    """Fisher-Yates row shuffle of ``z_joint``."""
    z = np.asarray(z_joint, dtype=np.float64)
    return z[marginal_permutation(z.shape[0], rng)]


def recon_mi_baseline(decoder: Net, x, z, grad=None, *, param_grads: bool = True):
    """Mean squared reconstruction error ``mean_i ||decoder(z_i) - x_i||^2``.

    Returns ``(value, dz)``; ``dz`` is None unless ``grad`` is given.
    """
    x = as_tensor(x, "x")
    z = as_tensor(z, "z")
    if decoder.layer_sizes[0] != z.shape[1] or decoder.layer_sizes[-1] != x.shape[1]:
        raise ValueError("decoder must map d_z to d_x")
    if x.shape[0] != z.shape[0]:
        raise ValueError("x and z row counts differ")
    resid = decoder.forward(z) - x
    n = x.shape[0]
    value = float(np.sum(resid * resid) / n)
    if grad is None:
        return value, None
    dz = decoder.backward(grad * 2.0 * resid / n, accumulate=param_grads)
    return value, dz
