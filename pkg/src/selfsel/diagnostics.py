"""Numerical verification harness for the selection-model likelihoods.

Each check produces a :class:`DiagnosticReport` that is reproducible
bit-for-bit from its seed and sample sizes, serializes to JSON, and passes
iff ``statistic <= threshold``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import log_ndtr

from . import likelihood as lk
from . import models
from .stats_core import make_rng, std_logpdf, truncnorm_m2

MAX_MODEL = "max"
SECOND_PRICE_MODEL = "second-price"


@dataclass(frozen=True)
class DiagnosticReport:
    name: str
    statistic: float
    threshold: float
    se: float | None
    sample_sizes: dict
    seed: int | None
    passed: bool = False  # derived; always recomputed below

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.statistic <= self.threshold))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def row(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: statistic={self.statistic:.6g} threshold={self.threshold:.6g}"


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def fd_gradient_check(loss, grad, point, h: float = 1e-5, name: str = "fd_gradient") -> DiagnosticReport:
    """Entrywise central differences of ``loss`` against ``grad(point)``.

    The statistic is the max relative error with denominator
    max(1, |entry|).
    """
    point = np.asarray(point, dtype=float)
    g = np.asarray(grad(point), dtype=float)
    fd = np.zeros_like(point)
    for idx in np.ndindex(point.shape):
        plus, minus = point.copy(), point.copy()
        plus[idx] += h
        minus[idx] -= h
        fd[idx] = (loss(plus) - loss(minus)) / (2 * h)
    rel = np.abs(g - fd) / np.maximum(1.0, np.abs(fd))
    return DiagnosticReport(
        name=name,
        statistic=float(rel.max()),
        threshold=1e-4,
        se=None,
        sample_sizes={"entries": int(point.size), "h": h},
        seed=None,
    )


# ---------------------------------------------------------------------------
# Hessian spectrum
# ---------------------------------------------------------------------------

def _conditional_covariance_max(mus, ys):
    """Exact Cov[z | observation] per row, via total variance over slabs.

    Within slab i the coordinates are independent: the pinned one is
    degenerate at y, the others are upper-truncated normals whose means and
    second moments have closed forms.  (B, k) inputs -> (B, k, k).
    """
    from scipy.special import logsumexp

    lw = lk._max_log_weights(mus, ys)
    w = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))  # (B, k)
    delta = ys[..., None] - mus
    t_mean = mus - np.exp(std_logpdf(delta) - log_ndtr(delta))
    t_var = truncnorm_m2(mus, ys[..., None]) - t_mean**2

    B, k = mus.shape
    eye = np.eye(k, dtype=bool)
    # slab-conditional means m[b, i, :] and diagonal variances v[b, i, :]
    m = np.where(eye[None, :, :], ys[:, None, None], t_mean[:, None, :])
    v = np.where(eye[None, :, :], 0.0, t_var[:, None, :])
    mean = (w[:, :, None] * m).sum(axis=1)
    second = (w[:, :, None, None] * (
        v[..., None] * np.eye(k)[None, None, :, :]
        + np.einsum("bij,bil->bijl", m, m)
    )).sum(axis=1)
    return second - np.einsum("bj,bl->bjl", mean, mean)


def _conditional_covariance_second_price(mus, i_max, ys):
    """Same as :func:`_conditional_covariance_max` for second-price slabs:
    slab j pins z_j = y, the winner is lower-truncated, the rest upper."""
    from scipy.special import logsumexp

    lw = lk._second_price_log_weights(mus, i_max, ys)
    w = np.exp(lw - logsumexp(lw, axis=-1, keepdims=True))
    delta = ys[..., None] - mus
    lo_mean = mus - np.exp(std_logpdf(delta) - log_ndtr(delta))
    lo_var = truncnorm_m2(mus, ys[..., None]) - lo_mean**2
    # winner: moments of the mirrored upper-truncation
    mu_win = np.take_along_axis(mus, i_max[..., None], axis=-1)[..., 0]
    up_mean = -(-mu_win - np.exp(std_logpdf(ys - mu_win) - log_ndtr(mu_win - ys)))
    up_var = truncnorm_m2(-mu_win, -ys) - (-up_mean) ** 2

    B, k = mus.shape
    rows = np.arange(B)
    eye = np.eye(k, dtype=bool)
    m = np.where(eye[None, :, :], ys[:, None, None], lo_mean[:, None, :])
    v = np.where(eye[None, :, :], 0.0, lo_var[:, None, :])
    m[rows, :, i_max] = up_mean[:, None]
    v[rows, :, i_max] = up_var[:, None]
    mean = (w[:, :, None] * m).sum(axis=1)
    second = (w[:, :, None, None] * (
        v[..., None] * np.eye(k)[None, None, :, :]
        + np.einsum("bij,bil->bijl", m, m)
    )).sum(axis=1)
    return second - np.einsum("bj,bl->bjl", mean, mean)


def hessian_min_eig_estimate(
    model: str,
    spec: models.InstanceSpec,
    W,
    n_obs: int,
    rng,
    n_inner: int = 0,
) -> float:
    """Monte-Carlo minimum eigenvalue of the population NLL Hessian at W.

    Per observation the Hessian contribution is
    I_{dk} - Cov[z | observation] (x) x x^T, with the conditional covariance
    computed exactly from slab weights and truncated moments (default), or by
    ``n_inner`` conditional samples when requested.  Dense eigendecomposition
    restricts this to d*k <= 64.
    """
    W = np.asarray(W, dtype=float)
    d, k = W.shape
    if d * k > 64:
        raise ValueError("hessian_min_eig_estimate requires d*k <= 64")
    if model == MAX_MODEL:
        data = models.gen_max_observations(spec, n_obs, rng)
        mus = data.x @ W
        if n_inner > 0:
            cov = _sampled_cov(
                lambda b: lk.sample_conditional_max(mus[b], data.y_max[b], rng, size=n_inner)
            , n_obs, k)
        else:
            cov = _conditional_covariance_max(mus, data.y_max)
    elif model == SECOND_PRICE_MODEL:
        data = models.gen_second_price_observations(spec, n_obs, rng)
        mus = data.x @ W
        if n_inner > 0:
            cov = _sampled_cov(
                lambda b: lk.sample_conditional_second_price(
                    mus[b], int(data.i_max[b]), data.y_smax[b], rng, size=n_inner
                ),
                n_obs,
                k,
            )
        else:
            cov = _conditional_covariance_second_price(mus, data.i_max, data.y_smax)
    else:
        raise ValueError(f"unknown model {model!r}")

    xxT = np.einsum("bi,bj->bij", data.x, data.x)
    # mean over observations of Cov[z] (x) x x^T, assembled as a dk x dk matrix
    H = np.eye(d * k) - np.einsum("bjl,bim->bjilm", cov, xxT).mean(axis=0).reshape(
        d * k, d * k
    )
    return float(np.linalg.eigvalsh(0.5 * (H + H.T)).min())


def _sampled_cov(draw, n_obs, k):
    cov = np.empty((n_obs, k, k))
    for b in range(n_obs):
        z = draw(b)
        cov[b] = np.cov(z, rowvar=False, ddof=1)
    return cov


# ---------------------------------------------------------------------------
# Stationarity and growth
# ---------------------------------------------------------------------------

def stationarity_test(model: str, w_star, n: int, rng, seed: int | None = None) -> DiagnosticReport:
    """Mean exact per-sample gradient over fresh observations at the truth;
    passes when every entry is within 4 standard errors of zero."""
    w_star = np.asarray(w_star, dtype=float)
    spec = models.InstanceSpec(w_star=w_star, c=0.01, C=max(1.0, float(np.linalg.norm(w_star, axis=0).max())))
    if model == MAX_MODEL:
        data = models.gen_max_observations(spec, n, rng)
        grads = lk.exact_gradient_max_batch(w_star, data.x, data.y_max)
    elif model == SECOND_PRICE_MODEL:
        data = models.gen_second_price_observations(spec, n, rng)
        grads = lk.exact_gradient_second_price_batch(
            w_star, data.x, data.i_max, data.y_smax
        )
    else:
        raise ValueError(f"unknown model {model!r}")
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1) / math.sqrt(n)
    statistic = float(np.max(np.abs(mean) / np.maximum(se, 1e-300)))
    return DiagnosticReport(
        name=f"stationarity[{model}]",
        statistic=statistic,
        threshold=4.0,
        se=float(se.max()),
        sample_sizes={"n_obs": n},
        seed=seed,
    )


@dataclass(frozen=True)
class GrowthPoint:
    radius: float
    gap: float
    se: float


def growth_probe(model: str, w_star, radii, n: int, rng, seed: int | None = None):
    """Coupled Monte-Carlo estimates of L(W* + r V) - L(W*) along a random
    unit-Frobenius direction V, on a common observation sample.

    Returns a list of :class:`GrowthPoint`; the r=0 entry is exactly zero by
    coupling.
    """
    w_star = np.asarray(w_star, dtype=float)
    spec = models.InstanceSpec(
        w_star=w_star, c=0.01, C=max(1.0, float(np.linalg.norm(w_star, axis=0).max()))
    )
    V = rng.standard_normal(w_star.shape)
    V /= np.linalg.norm(V)
    if model == MAX_MODEL:
        data = models.gen_max_observations(spec, n, rng)
        nll = lambda W: lk.nll_max_batch(W, data.x, data.y_max)
    elif model == SECOND_PRICE_MODEL:
        data = models.gen_second_price_observations(spec, n, rng)
        nll = lambda W: lk.nll_second_price_batch(W, data.x, data.i_max, data.y_smax)
    else:
        raise ValueError(f"unknown model {model!r}")
    base = nll(w_star)
    points = []
    for r in radii:
        if r == 0:
            points.append(GrowthPoint(radius=0.0, gap=0.0, se=0.0))
            continue
        diff = nll(w_star + r * V) - base
        points.append(
            GrowthPoint(
                radius=float(r),
                gap=float(diff.mean()),
                se=float(diff.std(ddof=1) / math.sqrt(n)),
            )
        )
    return points
