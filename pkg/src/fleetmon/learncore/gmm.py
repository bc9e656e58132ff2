"""Gaussian and mixture utilities: reparameterization, KL terms, GMM heads."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, log_softmax, logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_reparameterize(mu: Tensor, log_var: Tensor, rng: np.random.Generator) -> Tensor:
    """Sample mu + exp(log_var/2) * eps with eps drawn from `rng`."""
    if mu.shape != log_var.shape:
        raise ValueError(f"mu shape {mu.shape} != log_var shape {log_var.shape}")
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(log_var.data))):
        raise FloatingPointError("non-finite inputs to reparameterize")
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + (log_var * 0.5).exp() * Tensor(eps)


def gaussian_kl(mu: Tensor, log_var: Tensor, prior_mu: Tensor, prior_log_var: Tensor) -> Tensor:
    """Closed-form diagonal-Gaussian KL, summed over the last axis, mean over the rest."""
    if not all(np.all(np.isfinite(t.data)) for t in (mu, log_var, prior_mu, prior_log_var)):
        raise FloatingPointError("non-finite inputs to gaussian_kl")
    term = (log_var - prior_log_var).exp() \
        + ((prior_mu - mu) ** 2) * (-prior_log_var).exp() \
        - 1.0 + prior_log_var - log_var
    per_sample = term.sum(axis=-1) * 0.5
    return per_sample.mean() if per_sample.ndim > 0 else per_sample


def kl_to_gaussian_mixture(mu: Tensor, log_var: Tensor,
                           prior_means: Tensor, prior_log_vars: Tensor,
                           prior_logits: Tensor) -> Tensor:
    """Variational upper bound on KL(q || mixture): -log sum_k w_k exp(-KL(q||N_k)).

    Non-negative by construction and exact when the mixture has one mode.
    Shapes: mu/log_var (B, D); prior_means/log_vars (B, K, D) or (K, D); logits (B, K) or (K,).
    """
    B, D = mu.shape
    mu_e = mu.reshape(B, 1, D)
    lv_e = log_var.reshape(B, 1, D)
    if prior_means.ndim == 2:
        K = prior_means.shape[0]
        pm = prior_means.reshape(1, K, D)
        plv = prior_log_vars.reshape(1, K, D)
        logits = prior_logits.reshape(1, K)
    else:
        pm, plv, logits = prior_means, prior_log_vars, prior_logits
    kl_k = ((lv_e - plv).exp() + ((pm - mu_e) ** 2) * (-plv).exp() - 1.0 + plv - lv_e).sum(axis=-1) * 0.5
    bound = -logsumexp(log_softmax(logits, axis=-1) - kl_k, axis=-1)
    return bound.mean()


def floor_std(raw: Tensor, min_std: float = 0.005) -> Tensor:
    """Std head activation: softplus plus an additive floor; returns log std."""
    return (raw.softplus() + min_std).log()


def gmm_log_prob(means: Tensor, log_stds: Tensor, logits: Tensor, value: Tensor) -> Tensor:
    """Log density of a diagonal-Gaussian mixture.

    means/log_stds: (..., K, D); logits: (..., K); value: (..., D). Returns (...).
    """
    if means.shape[-2] == 0:
        raise ValueError("mixture needs at least one mode")
    K, D = means.shape[-2], means.shape[-1]
    v = value.reshape(*value.shape[:-1], 1, D)
    z = (v - means) * (-log_stds).exp()
    comp = (z ** 2 + 2.0 * log_stds + LOG_2PI).sum(axis=-1) * -0.5
    return logsumexp(log_softmax(logits, axis=-1) + comp, axis=-1)


def gmm_sample(means: np.ndarray, log_stds: np.ndarray, logits: np.ndarray,
               rng: np.random.Generator, low_noise: bool = False) -> np.ndarray:
    """Draw from the mixture; low_noise returns the highest-weight mode's mean.

    Operates on plain arrays (inference path). means/log_stds: (..., K, D); logits (..., K).
    """
    if means.shape[-2] == 0:
        raise ValueError("mixture needs at least one mode")
    lead = means.shape[:-2]
    K, D = means.shape[-2:]
    m = means.reshape(-1, K, D)
    s = np.exp(log_stds.reshape(-1, K, D))
    lg = logits.reshape(-1, K)
    if low_noise:
        idx = np.argmax(lg, axis=-1)
        out = m[np.arange(m.shape[0]), idx]
    else:
        shifted = lg - lg.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        out = np.empty((m.shape[0], D), dtype=means.dtype)
        for i in range(m.shape[0]):
            k = int(rng.choice(K, p=probs[i]))
            out[i] = m[i, k] + s[i, k] * rng.standard_normal(D).astype(means.dtype)
    return out.reshape(*lead, D)
