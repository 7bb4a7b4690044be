"""Likelihoods, conditional samplers and gradient oracles for the selection models.

Conditioned on one observation, the latent vector z ~ N(W^T x, I) lives in a
union of slabs: for a max observation at value y, slab i pins z_i = y and
caps every other coordinate at y; for a second-price observation (winner i,
value y), slab j != i pins z_j = y, forces z_i >= y and caps the rest.
Within a slab the coordinates are independent one-sided truncated normals,
so exact slab probabilities, conditional means and samples are all available
in closed form through the primitives in :mod:`selfsel.stats_core`.

The per-sample negative log-likelihood used throughout is the negative log
density of the observable. It differs from the latent-region surface
integral by a constant that does not depend on W, so the two have identical
gradients; we work with the observable density because it is directly
computable.

All functions broadcast: a "k-vector of means" argument accepts shape
(..., k) with matching leading shapes for the observation values, which is
how the Monte-Carlo tests and the batched optimizer drive them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .stats_core import sample_std_upper_fast, std_logpdf


@dataclass(frozen=True)
class ConditionalMixture:
    """Slab-membership probabilities for one observation."""

    weights: np.ndarray
    mus: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "mus", np.asarray(self.mus, dtype=float))
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")


# ---------------------------------------------------------------------------
# Max-selection model
# ---------------------------------------------------------------------------

def _max_log_weights(mus, y):
    """Unnormalized log slab weights:  log phi(y - mu_i) + sum_{j != i} log Phi(y - mu_j)."""
    mus = np.asarray(mus, dtype=float)
    y = np.asarray(y, dtype=float)
    delta = y[..., None] - mus
    logcdf = log_ndtr(delta)
    total = logcdf.sum(axis=-1, keepdims=True)
    return std_logpdf(delta) + total - logcdf


def max_mixture_weights(mu, y_max: float) -> ConditionalMixture:
    """Probability that each coordinate attains the observed maximum.

    Computed in log space and normalized there, so simultaneous underflow of
    every unnormalized weight still yields a valid probability vector.
    """
    lw = _max_log_weights(mu, y_max)
    w = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return ConditionalMixture(weights=w, mus=np.asarray(mu, dtype=float))


def _pick_from_log_weights(lw, rng):
    # manual softmax + cumulative pick (scipy's logsumexp is too heavy for
    # the per-step optimizer path)
    w = np.exp(lw - lw.max(axis=-1, keepdims=True))
    cum = np.cumsum(w, axis=-1)
    u = rng.random(lw.shape[:-1] + (1,)) * cum[..., -1:]
    idx = (cum < u).sum(axis=-1)
    return np.minimum(idx, lw.shape[-1] - 1)


def sample_conditional_max(mu, y_max: float, rng, size: int | None = None):
    """Draw z ~ N(mu, I) conditioned on max_j z_j = y_max.

    One slab index is drawn from the mixture, that coordinate is pinned at
    y_max, and the remaining coordinates are independent upper-truncated
    normals.  ``size=None`` gives one (k,) draw; an integer gives (size, k)
    independent draws for the same observation.
    """
    mu = np.asarray(mu, dtype=float)
    squeeze = size is None
    n = 1 if squeeze else size
    mus = np.broadcast_to(mu, (n, mu.shape[-1]))
    ys = np.full(n, y_max)
    z = _sample_conditional_max_core(mus, ys, rng)
    return z[0] if squeeze else z


def _sample_conditional_max_core(mus, ys, rng):
    """(B, k) means + (B,) observed maxima -> (B, k) conditional draws."""
    B, k = mus.shape
    beta = ys[:, None] - mus
    logcdf = log_ndtr(beta)
    lw = std_logpdf(beta) + logcdf.sum(axis=1, keepdims=True) - logcdf
    pinned = _pick_from_log_weights(lw, rng)
    z = mus + sample_std_upper_fast(beta, rng)
    z[np.arange(B), pinned] = ys
    return z


def exact_conditional_mean_max(mu, y_max):
    """E[z | max_j z_j = y_max] componentwise:

        E[z_j] = w_j * y_max + (1 - w_j) * (mu_j - phi/Phi ratio at y_max)
    """
    mus = np.asarray(mu, dtype=float)
    y = np.asarray(y_max, dtype=float)
    lw = _max_log_weights(mus, y)
    w = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    delta = y[..., None] - mus
    trunc_mean = mus - np.exp(std_logpdf(delta) - log_ndtr(delta))
    return w * y[..., None] + (1.0 - w) * trunc_mean


def max_log_density(mu, y):
    """log density of max_j (mu_j + xi_j) at y:  logsumexp of the slab terms."""
    return logsumexp(_max_log_weights(mu, y), axis=-1)


def nll_max(W, obs) -> float:
    """Per-sample negative log-likelihood of a max observation."""
    W = np.asarray(W, dtype=float)
    return float(-max_log_density(W.T @ obs.x, obs.y_max))


def nll_max_batch(W, x, y_max):
    """(n,) per-sample NLL over columnar data."""
    mus = np.asarray(x, dtype=float) @ np.asarray(W, dtype=float)
    return -max_log_density(mus, np.asarray(y_max, dtype=float))


def stochastic_gradient_max(W, obs, rng) -> np.ndarray:
    """Unbiased estimate of the per-sample NLL gradient:

        g = x x^T W - x z^T,   z ~ conditional law given the observation.

    Its conditional mean is :func:`exact_gradient_max`; stepping against it
    descends the negative log-likelihood.
    """
    W = np.asarray(W, dtype=float)
    mu = W.T @ obs.x
    z = sample_conditional_max(mu, obs.y_max, rng)
    return np.outer(obs.x, mu - z)


def exact_gradient_max(W, obs) -> np.ndarray:
    """Per-sample gradient with the conditional expectation integrated out:
    x x^T W - x E[z|obs]^T."""
    W = np.asarray(W, dtype=float)
    mu = W.T @ obs.x
    return np.outer(obs.x, mu - exact_conditional_mean_max(mu, obs.y_max))


def exact_gradient_max_batch(W, x, y_max):
    """(n, d, k) stack of per-sample exact gradients."""
    x = np.asarray(x, dtype=float)
    mus = x @ np.asarray(W, dtype=float)
    m = exact_conditional_mean_max(mus, np.asarray(y_max, dtype=float))
    return np.einsum("nd,nk->ndk", x, mus - m)


def batch_gradient_oracle_max(x, y_max):
    """Stochastic-gradient oracle over a data pool for the batched optimizer.

    Returns ``oracle(Ws, rng) -> (B, d, k)``: each chain consumes one
    uniformly drawn observation and one conditional draw of z.
    """
    x = np.asarray(x, dtype=float)
    y_max = np.asarray(y_max, dtype=float)
    n = x.shape[0]

    def oracle(Ws, rng):
        B = Ws.shape[0]
        idx = rng.integers(0, n, size=B)
        xb = x[idx]
        yb = y_max[idx]
        mus = np.einsum("bd,bdk->bk", xb, Ws)
        z = _sample_conditional_max_core(mus, yb, rng)
        return np.einsum("bd,bk->bdk", xb, mus - z)

    return oracle


# ---------------------------------------------------------------------------
# Second-price model
# ---------------------------------------------------------------------------

def _second_price_log_weights(mus, i_max, ys):
    """Unnormalized log weights over the pinned (second-max) coordinate.

    Row entries at ``i_max`` are set to -inf; the winner's survival factor is
    common to every slab and omitted (it cancels after normalization).
    """
    mus = np.asarray(mus, dtype=float)
    ys = np.asarray(ys, dtype=float)
    delta = ys[..., None] - mus
    logcdf = log_ndtr(delta)
    i_of = np.asarray(i_max)
    win_cdf = np.take_along_axis(logcdf, i_of[..., None], axis=-1)
    total = logcdf.sum(axis=-1, keepdims=True) - win_cdf
    lw = std_logpdf(delta) + total - logcdf
    np.put_along_axis(lw, i_of[..., None], -np.inf, axis=-1)
    return lw


def second_price_mixture_weights(mu, i_max: int, y_smax: float) -> np.ndarray:
    """Probabilities, over the k-1 non-winner coordinates in ascending index
    order, that each one attains the observed second-highest value."""
    mu = np.asarray(mu, dtype=float)
    k = mu.shape[-1]
    if not 0 <= i_max < k:
        raise ValueError("winner index out of range")
    lw = _second_price_log_weights(mu, np.asarray(i_max), y_smax)
    w = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    keep = np.arange(k) != i_max
    w = w[..., keep]
    return w / w.sum(axis=-1, keepdims=True)


def sample_conditional_second_price(mu, i_max: int, y_smax: float, rng, size=None):
    """Draw z ~ N(mu, I) given the winner index and second-highest value.

    One non-winner slab is drawn and pinned at y_smax, the winner coordinate
    is lower-truncated at y_smax, and the rest are upper-truncated."""
    mu = np.asarray(mu, dtype=float)
    squeeze = size is None
    n = 1 if squeeze else size
    mus = np.broadcast_to(mu, (n, mu.shape[-1]))
    z = _sample_conditional_second_price_core(
        mus, np.full(n, i_max, dtype=np.int64), np.full(n, y_smax), rng
    )
    return z[0] if squeeze else z


def _sample_conditional_second_price_core(mus, i_max, ys, rng):
    B, k = mus.shape
    rows = np.arange(B)
    pinned = _pick_from_log_weights(_second_price_log_weights(mus, i_max, ys), rng)
    beta = ys[:, None] - mus
    z = mus + sample_std_upper_fast(beta, rng)
    # winner: z_i ~ N(mu_i, 1) | [y, inf), via the mirrored left-tail sampler
    mu_win = mus[rows, i_max]
    z[rows, i_max] = mu_win - sample_std_upper_fast(mu_win - ys, rng)
    z[rows, pinned] = ys
    return z


def exact_conditional_mean_second_price(mu, i_max, y_smax):
    """E[z | winner i_max, second-highest y_smax] componentwise."""
    mus = np.asarray(mu, dtype=float)
    y = np.asarray(y_smax, dtype=float)
    i_of = np.asarray(i_max)
    lw = _second_price_log_weights(mus, i_of, y)
    w = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    delta = y[..., None] - mus
    lower_mean = mus - np.exp(std_logpdf(delta) - log_ndtr(delta))
    m = w * y[..., None] + (1.0 - w) * lower_mean
    # winner coordinate: mean of N(mu_i, 1) | [y, inf)
    mu_win = np.take_along_axis(mus, i_of[..., None], axis=-1)
    d_win = y[..., None] - mu_win
    upper_mean = mu_win + np.exp(std_logpdf(d_win) - log_ndtr(-d_win))
    np.put_along_axis(m, i_of[..., None], upper_mean, axis=-1)
    return m


def second_price_log_density(mu, i_max, y):
    """log joint density of (winner == i_max, second-highest == y):

        log sum_{j != i} phi(y-mu_j) (1 - Phi(y-mu_i)) prod_{l != j,i} Phi(y-mu_l)
    """
    mus = np.asarray(mu, dtype=float)
    ys = np.asarray(y, dtype=float)
    i_of = np.asarray(i_max)
    lw = _second_price_log_weights(mus, i_of, ys)
    mu_win = np.take_along_axis(mus, i_of[..., None], axis=-1)[..., 0]
    log_sf_win = log_ndtr(mu_win - ys)
    return logsumexp(lw, axis=-1) + log_sf_win


def nll_second_price(W, obs) -> float:
    W = np.asarray(W, dtype=float)
    return float(-second_price_log_density(W.T @ obs.x, obs.i_max, obs.y_smax))


def nll_second_price_batch(W, x, i_max, y_smax):
    mus = np.asarray(x, dtype=float) @ np.asarray(W, dtype=float)
    return -second_price_log_density(
        mus, np.asarray(i_max), np.asarray(y_smax, dtype=float)
    )


def stochastic_gradient_second_price(W, obs, rng) -> np.ndarray:
    """Unbiased per-sample NLL gradient; see :func:`stochastic_gradient_max`."""
    W = np.asarray(W, dtype=float)
    mu = W.T @ obs.x
    z = sample_conditional_second_price(mu, obs.i_max, obs.y_smax, rng)
    return np.outer(obs.x, mu - z)


def exact_gradient_second_price(W, obs) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    mu = W.T @ obs.x
    m = exact_conditional_mean_second_price(mu, obs.i_max, obs.y_smax)
    return np.outer(obs.x, mu - m)


def exact_gradient_second_price_batch(W, x, i_max, y_smax):
    x = np.asarray(x, dtype=float)
    mus = x @ np.asarray(W, dtype=float)
    m = exact_conditional_mean_second_price(
        mus, np.asarray(i_max), np.asarray(y_smax, dtype=float)
    )
    return np.einsum("nd,nk->ndk", x, mus - m)


def batch_gradient_oracle_second_price(x, i_max, y_smax):
    """Pool-backed stochastic-gradient oracle, one observation per chain."""
    x = np.asarray(x, dtype=float)
    i_max = np.asarray(i_max, dtype=np.int64)
    y_smax = np.asarray(y_smax, dtype=float)
    n = x.shape[0]

    def oracle(Ws, rng):
        B = Ws.shape[0]
        idx = rng.integers(0, n, size=B)
        xb = x[idx]
        mus = np.einsum("bd,bdk->bk", xb, Ws)
        z = _sample_conditional_second_price_core(mus, i_max[idx], y_smax[idx], rng)
        return np.einsum("bd,bk->bdk", xb, mus - z)

    return oracle
