"""Diagonal linear-Gaussian Kalman filtering.

Emission is the identity and there is no feedthrough, so every channel of the
latent state is filtered independently with scalar predict/update equations.
Sequences are time-major arrays ``(K, ...)``; ``u[t]`` is the input that drives
the transition *into* step ``t`` and ``w[t]``, ``r[t]`` are the observation and
its noise variance at step ``t``.

Besides the step-by-step reference there is an associative formulation in two
passes.  The posterior variance obeys the fractional-linear recurrence

    p_t = r_t (a^2 p_{t-1} + q) / (a^2 p_{t-1} + q + r_t),

i.e. a Moebius map with matrix ``[[r a^2, r q], [a^2, q + r]]``, so all variances
come out of one scan of 2x2 matrix products.  Given the gains, the mean obeys
the affine recurrence ``x_t = (1 - k_t) a x_{t-1} + (1 - k_t) b u_t + k_t w_t``,
which is a second scan.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, NumericError
from .scan import (affine_operator, apply_affine, apply_mobius, check_right_padding,
                   lift_mao, mobius_operator, scan_parallel)


@dataclass
class GaussianBelief:
    """Diagonal Gaussian; ``mean`` and ``var`` may carry leading (time/batch) axes."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def standard(cls, shape, dtype=np.float64) -> "GaussianBelief":
        return cls(np.zeros(shape, dtype), np.ones(shape, dtype))

    def __post_init__(self):
        self.mean = np.asarray(self.mean)
        self.var = np.asarray(self.var)


@dataclass
class DiagonalDynamics:
    """Transition diagonal ``a``, input gain ``b`` and process noise ``q``.

    ``q`` is either per-channel or per-step (same leading time axis as the inputs).
    """

    a: np.ndarray
    b: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a)
        self.b = np.asarray(self.b)
        self.q = np.asarray(self.q)

    def q_at(self, t: int, step_ndim: int) -> np.ndarray:
        return self.q[t] if self.q.ndim > step_ndim else self.q


def predict(belief: GaussianBelief, dyn: DiagonalDynamics, u, q=None) -> GaussianBelief:
    q = dyn.q if q is None else q
    mean = dyn.a * belief.mean + dyn.b * u
    var = dyn.a * dyn.a * belief.var + q
    if np.any(var <= 0):
        raise NumericError("predicted variance is not positive")
    return GaussianBelief(mean, var)


def update(prior: GaussianBelief, w, r) -> tuple[GaussianBelief, np.ndarray]:
    """Condition on ``w`` observed with noise variance ``r``; returns (posterior, gain)."""
    r = np.asarray(r)
    if np.any(~(r > 0)):
        raise ContractError("observation noise variance must be positive")
    gain = prior.var / (prior.var + r)
    mean = prior.mean + gain * (w - prior.mean)
    var = (1 - gain) * prior.var
    return GaussianBelief(mean, var), gain


def _mask_like(mask, ref: np.ndarray) -> np.ndarray:
    if mask is None:
        return np.zeros(ref.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    check_right_padding(mask, axis=0)
    while mask.ndim < ref.ndim:
        mask = mask[..., None]
    return np.broadcast_to(mask, ref.shape)


def _check_lengths(*seqs):
    n = {len(s) for s in seqs if s is not None}
    if len(n) != 1:
        raise ContractError(f"sequence lengths disagree: {sorted(n)}")
    if n.pop() < 1:
        raise ContractError("sequences must be non-empty")


def filter_sequential(init: GaussianBelief, dyn: DiagonalDynamics, u_seq, w_seq, r_seq,
                      mask_seq=None, update_step: bool = True) -> GaussianBelief:
    """Interleave predict and update over the sequence; returns stacked posteriors.

    Padded steps (``mask_seq`` true) carry the previous posterior forward.
    """
    u_seq = np.asarray(u_seq)
    _check_lengths(u_seq, w_seq if update_step else None, r_seq if update_step else None)
    mask = _mask_like(mask_seq, u_seq)
    step_ndim = u_seq.ndim - 1
    means = np.empty_like(u_seq, dtype=np.result_type(u_seq, init.mean))
    variances = np.empty_like(means)
    belief = GaussianBelief(np.broadcast_to(init.mean, u_seq.shape[1:]).copy(),
                            np.broadcast_to(init.var, u_seq.shape[1:]).copy())
    for t in range(len(u_seq)):
        post = predict(belief, dyn, u_seq[t], dyn.q_at(t, step_ndim))
        if update_step:
            post, _ = update(post, w_seq[t], r_seq[t])
        live = ~mask[t]
        belief = GaussianBelief(np.where(live, post.mean, belief.mean),
                                np.where(live, post.var, belief.var))
        means[t] = belief.mean
        variances[t] = belief.var
    return GaussianBelief(means, variances)


@dataclass
class KFScanElements:
    """Per-step, per-channel scan elements.

    ``cov_map`` holds the four entries of the Moebius matrix, ``mean_map`` the
    affine coefficients ``(alpha, beta)``; padded steps hold identity maps.
    """

    cov_map: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    mean_map: tuple[np.ndarray, np.ndarray]
    mask: np.ndarray


def variance_maps(dyn: DiagonalDynamics, r_seq, mask: np.ndarray, update_step: bool = True):
    q = np.broadcast_to(dyn.q, mask.shape)
    a2 = np.broadcast_to(dyn.a * dyn.a, mask.shape)
    if update_step:
        r = np.asarray(r_seq)
        m = (r * a2, r * q, a2, q + r)
    else:
        m = (a2, q, np.zeros_like(a2), np.ones_like(a2))
    ident = (1, 0, 0, 1)
    return tuple(np.where(mask, i, x).astype(a2.dtype) for x, i in zip(m, ident))


def build_scan_elements(init: GaussianBelief, dyn: DiagonalDynamics, u_seq, w_seq, r_seq,
                        mask_seq=None, scan: Callable = scan_parallel,
                        update_step: bool = True) -> KFScanElements:
    """Two-pass construction: variance maps, their scan, then the gain-dependent mean maps."""
    u_seq = np.asarray(u_seq)
    _check_lengths(u_seq, w_seq if update_step else None, r_seq if update_step else None)
    mask = _mask_like(mask_seq, u_seq)
    cov = variance_maps(dyn, r_seq, mask, update_step)
    var = _scan_variances(init, cov, mask, scan)
    prev_var = np.concatenate([np.broadcast_to(init.var, var.shape[1:])[None], var[:-1]])
    prior_var = dyn.a * dyn.a * prev_var + np.broadcast_to(dyn.q, mask.shape)
    if update_step:
        gain = prior_var / (prior_var + np.asarray(r_seq))
        alpha = (1 - gain) * dyn.a
        beta = (1 - gain) * dyn.b * u_seq + gain * np.asarray(w_seq)
    else:
        alpha = np.broadcast_to(dyn.a, mask.shape)
        beta = dyn.b * u_seq
    alpha = np.where(mask, 1, alpha).astype(cov[0].dtype)
    beta = np.where(mask, 0, beta).astype(cov[0].dtype)
    return KFScanElements(cov, (alpha, beta), mask)


def _scan_variances(init, cov, mask, scan):
    out = scan(lift_mao(mobius_operator()), (*cov, mask))
    return apply_mobius(out[:4], init.var)


def filter_scan(init: GaussianBelief, dyn: DiagonalDynamics, u_seq, w_seq, r_seq,
                mask_seq=None, scan: Callable = scan_parallel,
                update_step: bool = True) -> GaussianBelief:
    """Posteriors via the two masked associative scans (generic-operator route)."""
    el = build_scan_elements(init, dyn, u_seq, w_seq, r_seq, mask_seq, scan, update_step)
    var = _scan_variances(init, el.cov_map, el.mask, scan)
    out = scan(lift_mao(affine_operator()), (*el.mean_map, el.mask))
    mean = apply_affine(out[:2], init.mean)
    return GaussianBelief(mean, var)


def bayes_oracle_iid(observations, prior_mean: float, prior_var: float,
                     noise_var: float) -> tuple[float, float]:
    """Conjugate normal posterior over a static mean from i.i.d. observations."""
    obs = np.asarray(observations, dtype=np.float64).reshape(-1)
    if obs.size == 0:
        return float(prior_mean), float(prior_var)
    precision = 1.0 / prior_var + obs.size / noise_var
    post_var = 1.0 / precision
    post_mean = post_var * (prior_mean / prior_var + obs.sum() / noise_var)
    return float(post_mean), float(post_var)
