"""Coarse Gaussian mean estimation over convex partitions.

An observation is a convex region of R^d known to contain one latent draw
from N(mu*, I).  Estimation is projected SGD on the coarse negative
log-likelihood; its stochastic gradient at mu is ``mu - y`` with y drawn
from N(mu, I) restricted to the (localized) observed region.

Far-out regions are first passed through a localization map: intersect with
the box B_inf(0, R) when the intersection is nonempty, otherwise collapse to
a deterministic single point of the region.  With R chosen a few dozen log
factors beyond the mean bound, localization alters a vanishing fraction of
observations while capping the gradient second moment at O(D^2 + d R^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from . import optimizer as opt
from .stats_core import make_rng, sample_truncnorm_box

DEFAULT_BURN_IN_PER_DIM = 64
DEFAULT_DELTA = 1e-3
LOCALIZATION_LOG_FACTOR = 10.0


class PartitionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Convex sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned cell, half-open: lower <= x < upper componentwise.

    Infinite bounds are allowed on either side.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be matching vectors")
        if not np.all(lo < hi):
            raise ValueError("box requires lower < upper componentwise")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x < self.upper + atol))

    def representative(self) -> np.ndarray:
        """Deterministic interior point: the center, with infinite sides
        replaced by the in-interval point closest to the origin."""
        lo, hi = self.lower, self.upper
        rep = np.where(
            np.isfinite(lo) & np.isfinite(hi),
            0.5 * (lo + hi),
            np.clip(0.0, lo, hi),
        )
        return rep


@dataclass(frozen=True)
class Polytope:
    """``{x : A x <= b}``, certified nonempty by a strict interior point."""

    A: np.ndarray
    b: np.ndarray
    interior_point: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float)
        p = np.asarray(self.interior_point, dtype=float)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "interior_point", p)
        if A.shape[0] != b.shape[0] or A.shape[1] != p.shape[0]:
            raise ValueError("inconsistent polytope shapes")
        if not np.all(A @ p < b):
            raise ValueError("interior point must strictly satisfy A x < b")

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def contains(self, x, atol: float = 1e-9) -> bool:
        return bool(np.all(self.A @ np.asarray(x, dtype=float) <= self.b + atol))

    def representative(self) -> np.ndarray:
        return self.interior_point


@dataclass(frozen=True)
class Singleton:
    point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))

    @property
    def dim(self) -> int:
        return self.point.shape[0]

    def contains(self, x, atol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.point - np.asarray(x, dtype=float)) <= atol))

    def representative(self) -> np.ndarray:
        return self.point


CoarseSet = Union[Box, Polytope, Singleton]


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridPartition:
    """Cells ``[offset + i*width, offset + (i+1)*width)`` over all integer
    multi-indices i; covers R^d with the half-open boundary convention."""

    width: float
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))
        if self.width <= 0:
            raise ValueError("grid width must be positive")

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    def cell_index(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.floor((x - self.offset) / self.width).astype(np.int64)

    def cell(self, index) -> Box:
        lo = self.offset + np.asarray(index, dtype=float) * self.width
        return Box(lo, lo + self.width)

    def locate(self, x) -> Box:
        return self.cell(self.cell_index(x))


@dataclass(frozen=True)
class BoxListPartition:
    """Explicit list of half-open boxes covering R^d."""

    cells: tuple

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.cells:
            raise ValueError("empty partition")

    @property
    def dim(self) -> int:
        return self.cells[0].dim

    def locate(self, x) -> Box:
        for cell in self.cells:
            if np.all(x >= cell.lower) and np.all(x < cell.upper):
                return cell
        raise PartitionError(f"no cell contains {x}; partition does not cover R^d")


@dataclass(frozen=True)
class PolytopeListPartition:
    """Explicit list of polyhedra; boundary ties resolved by first match."""

    cells: tuple

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        if not self.cells:
            raise ValueError("empty partition")

    @property
    def dim(self) -> int:
        return self.cells[0].dim

    def locate(self, x) -> Polytope:
        for cell in self.cells:
            if cell.contains(x, atol=0.0):
                return cell
        # retry with tolerance for points on shared facets
        for cell in self.cells:
            if cell.contains(x, atol=1e-12):
                return cell
        raise PartitionError(f"no cell contains {x}; partition does not cover R^d")


Partition = Union[GridPartition, BoxListPartition, PolytopeListPartition]


def locate(partition: Partition, x) -> CoarseSet:
    """The unique cell of ``partition`` containing x."""
    return partition.locate(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# Localization
# ---------------------------------------------------------------------------

def localization_radius(D: float, n_samples: int, dim: int, delta: float = DEFAULT_DELTA):
    """R = D + 10 * ln(n d / delta); with this choice an n-sample run alters
    an observation by localization with probability well below delta."""
    return D + LOCALIZATION_LOG_FACTOR * math.log(max(n_samples, 1) * dim / delta)


def localize(region: CoarseSet, R: float) -> CoarseSet:
    """Intersect with B_inf(0, R) when possible, else collapse to a
    deterministic representative point of the region."""
    if isinstance(region, Singleton):
        return region
    if isinstance(region, Box):
        lo = np.maximum(region.lower, -R)
        hi = np.minimum(region.upper, R)
        if np.all(lo < hi):
            if np.array_equal(lo, region.lower) and np.array_equal(hi, region.upper):
                return region  # already inside the window
            return Box(lo, hi)
        return Singleton(region.representative())
    if isinstance(region, Polytope):
        d = region.dim
        if np.all(np.abs(region.interior_point) < R):
            interior = region.interior_point
        else:
            interior = _window_interior_point(region, R)
            if interior is None:
                # empty (or measure-zero) intersection with the window
                return Singleton(region.representative())
        box_A = np.vstack([np.eye(d), -np.eye(d)])
        box_b = np.full(2 * d, float(R))
        A = np.vstack([region.A, box_A])
        b = np.concatenate([region.b, box_b])
        return Polytope(A, b, interior)
    raise TypeError(f"unknown coarse set {type(region)!r}")


def _window_interior_point(region: Polytope, R: float):
    """Chebyshev-center LP for the intersection with B_inf(0, R); returns a
    strictly interior point, or None when the interior is empty."""
    from scipy.optimize import linprog

    A, b = region.A, region.b
    d = region.dim
    norms = np.linalg.norm(A, axis=1)
    box_A = np.vstack([np.eye(d), -np.eye(d)])
    A_ub = np.vstack(
        [np.hstack([A, norms[:, None]]), np.hstack([box_A, np.ones((2 * d, 1))])]
    )
    b_ub = np.concatenate([b, np.full(2 * d, float(R))])
    c = np.zeros(d + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * (d + 1), method="highs")
    if res.success and res.x[-1] > 1e-12:
        return res.x[:d]
    return None


# ---------------------------------------------------------------------------
# Sampling over sets
# ---------------------------------------------------------------------------

def hit_and_run(mu, polytope: Polytope, start, burn_in: int, rng) -> np.ndarray:
    """Hit-and-run chain for N(mu, I) restricted to ``polytope``.

    Each step draws a uniform direction u, finds the feasible chord through
    the current point, and moves to a point drawn from the exact 1-D
    conditional of the target along the chord: N(<mu - x, u>, 1) truncated
    to the chord.  Unbounded chords are allowed.
    """
    mu = np.asarray(mu, dtype=float)
    x = np.asarray(start, dtype=float).copy()
    A, b = polytope.A, polytope.b
    if np.any(A @ x > b + 1e-9):
        raise ValueError("hit-and-run start point is infeasible")
    for _ in range(burn_in):
        u = rng.standard_normal(mu.shape[0])
        u /= np.linalg.norm(u)
        x = _chord_step(x, u, mu, A, b, rng)
    return x


def hit_and_run_many(mu, polytope: Polytope, start, burn_in: int, rng, size: int):
    """``size`` independent hit-and-run chains, advanced in lockstep."""
    mu = np.asarray(mu, dtype=float)
    d = mu.shape[0]
    A, b = polytope.A, polytope.b
    X = np.broadcast_to(np.asarray(start, dtype=float), (size, d)).copy()
    if np.any(A @ X[0] > b + 1e-9):
        raise ValueError("hit-and-run start point is infeasible")
    for _ in range(burn_in):
        U = rng.standard_normal((size, d))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        # chord bounds per chain: A(x + t u) <= b
        AU = U @ A.T                      # (size, m)
        slack = b[None, :] - X @ A.T      # (size, m), >= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = slack / AU
        t_hi = np.where(AU > 0, ratio, np.inf).min(axis=1)
        t_lo = np.where(AU < 0, ratio, -np.inf).max(axis=1)
        m1 = ((mu[None, :] - X) * U).sum(axis=1)
        t = sample_truncnorm_box(m1, t_lo, t_hi, rng)
        X = X + t[:, None] * U
    return X


def _chord_step(x, u, mu, A, b, rng):
    Au = A @ u
    slack = b - A @ x
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = slack / Au
    pos = Au > 0
    neg = Au < 0
    t_hi = ratio[pos].min() if np.any(pos) else np.inf
    t_lo = ratio[neg].max() if np.any(neg) else -np.inf
    m1 = float((mu - x) @ u)
    t = sample_truncnorm_box(np.array([m1]), t_lo, t_hi, rng)[0]
    return x + t * u


def sample_truncated_gaussian_on_set(mu, region: CoarseSet, rng, burn_in: int | None = None):
    """One draw from N(mu, I) restricted to ``region``."""
    mu = np.asarray(mu, dtype=float)
    if isinstance(region, Singleton):
        return region.point.copy()
    if isinstance(region, Box):
        return sample_truncnorm_box(mu, region.lower, region.upper, rng)
    if isinstance(region, Polytope):
        if burn_in is None:
            burn_in = DEFAULT_BURN_IN_PER_DIM * region.dim
        return hit_and_run(mu, region, region.interior_point, burn_in, rng)
    raise TypeError(f"unknown coarse set {type(region)!r}")


# ---------------------------------------------------------------------------
# Gradient oracle and estimator
# ---------------------------------------------------------------------------

def coarse_gradient(mu, observation, R: float, rng) -> np.ndarray:
    """Unbiased stochastic gradient of the coarse NLL at ``mu``:
    ``mu - y`` with y drawn from N(mu, I) on the localized observed region.
    """
    region = getattr(observation, "set", observation)
    y = sample_truncated_gaussian_on_set(mu, localize(region, R), rng)
    return np.asarray(mu, dtype=float) - y


@dataclass(frozen=True)
class CoarseConfig:
    """Estimator configuration.

    D          -- mean bound: ||mu*||_2 <= D (also the projection radius)
    psgd       -- schedule constants; ``eps`` is the stage-B gap target, and
                  ``eta`` is ignored (derived from alpha_hint)
    alpha_hint -- information-preservation guess; eta = sqrt(2) * alpha_hint
    R          -- localization radius; derived from (D, n, d, delta) when None
    delta      -- failure-probability budget used in the derived radius
    """

    D: float
    psgd: opt.PsgdConfig
    alpha_hint: float
    R: float | None = None
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.D <= 0 or self.alpha_hint <= 0:
            raise ValueError("require D > 0 and alpha_hint > 0")
        if self.R is not None and self.R < self.D:
            raise ValueError("localization radius must satisfy R >= D")


@dataclass
class CoarseTrace:
    stage_a: opt.StageTrace | None
    stage_b: opt.StageTrace | None
    R: float
    G: float
    eta: float
    non_identifiable: bool
    n_localized: int


def _pilot_gradient(mu, sets_localized, rng, batch: int):
    idx = rng.integers(0, len(sets_localized), size=batch)
    grads = np.stack(
        [
            np.asarray(mu, dtype=float)
            - sample_truncated_gaussian_on_set(mu, sets_localized[i], rng)
            for i in idx
        ]
    )
    return grads


def _identifiability_probe(sets_localized, D, rng, batch: int = 1024):
    """Estimate the population gradient at two distinct feasible points; if
    both vanish within noise, no information about the mean is present (the
    coarse NLL is flat, as for the whole-space partition)."""
    d = sets_localized[0].dim
    p0 = np.zeros(d)
    direction = rng.standard_normal(d)
    p1 = direction / np.linalg.norm(direction) * (D / 2.0)
    for p in (p0, p1):
        grads = _pilot_gradient(p, sets_localized, rng, batch)
        mean = grads.mean(axis=0)
        se = grads.std(axis=0, ddof=1) / math.sqrt(batch)
        if np.any(np.abs(mean) > 4.0 * (se + 1e-12)):
            return False
    return True


def estimate_coarse_mean(observations, partition, config: CoarseConfig, rng):
    """Two-stage PSGD estimate of the Gaussian mean from coarse observations.

    Stage A starts from the origin and targets an O(1)-accurate point;
    stage B restarts from it and runs to the configured gap target.  The
    feasible region is the ball of radius D around the origin throughout.
    ``partition`` is accepted for interface symmetry with the generators and
    may be None; only the observed regions are consumed.
    """
    sets = [getattr(o, "set", o) for o in observations]
    if not sets:
        raise ValueError("no observations")
    d = sets[0].dim
    m = len(sets)
    R = config.R if config.R is not None else localization_radius(
        config.D, m, d, config.delta
    )
    localized = [localize(s, R) for s in sets]
    n_localized = sum(1 for s, l in zip(sets, localized) if l is not s)

    # fast path: every localized region is a box (grids, box lists,
    # singletons), letting the SGD loop skip per-step dispatch
    box_arrays = _as_box_arrays(localized, d)

    eta = math.sqrt(2.0) * config.alpha_hint
    pilot = _pilot_gradient(np.zeros(d), localized, rng, batch=min(256, m))
    G = math.sqrt(float((pilot**2).sum(axis=1).mean())) * 1.5 + 1e-12

    non_identifiable = _identifiability_probe(localized, config.D, rng)

    K = opt.ProjectionSet(center=np.zeros(d), D=config.D)
    mu0 = np.zeros(d)

    def make_oracle(data_rng):
        if box_arrays is not None:
            lo, hi = box_arrays

            def oracle(mu, step_rng):
                i = data_rng.integers(0, m)
                y = sample_truncnorm_box(mu, lo[i], hi[i], step_rng)
                return mu - y

        else:

            def oracle(mu, step_rng):
                i = data_rng.integers(0, m)
                y = sample_truncated_gaussian_on_set(mu, localized[i], step_rng)
                return mu - y

        return oracle

    # Stage A: coarse warm point at O(1) accuracy.
    r_a = min(1.0, config.D)
    eps_a = max(config.psgd.eps, eta**2 * r_a**2 / 2.0)
    eps0_a = max(G * config.D, 2.0 * eps_a)
    cfg_a = replace(
        config.psgd, eps0=eps0_a, eps=eps_a, eta=eta, G=G, seed=config.psgd.seed
    )
    mu_a, trace_a = opt.iterative_psgd(
        cfg_a, K, mu0, make_oracle(make_rng(config.psgd.seed, stream=101))
    )

    # Stage B: re-center on the stage-A output and run to the gap target.
    eps0_b = max(G * r_a, 2.0 * config.psgd.eps)
    cfg_b = replace(
        config.psgd, eps0=eps0_b, eps=config.psgd.eps, eta=eta, G=G,
        seed=config.psgd.seed + 1,
    )
    mu_b, trace_b = opt.iterative_psgd(
        cfg_b, K, mu_a, make_oracle(make_rng(config.psgd.seed, stream=102))
    )

    trace = CoarseTrace(
        stage_a=trace_a,
        stage_b=trace_b,
        R=R,
        G=G,
        eta=eta,
        non_identifiable=non_identifiable,
        n_localized=n_localized,
    )
    return mu_b, trace


def _as_box_arrays(regions, d):
    lo = np.empty((len(regions), d))
    hi = np.empty((len(regions), d))
    for i, r in enumerate(regions):
        if isinstance(r, Box):
            lo[i], hi[i] = r.lower, r.upper
        elif isinstance(r, Singleton):
            # degenerate box: the interval sampler clamps to the point
            eps = 1e-12 + 1e-12 * np.abs(r.point)
            lo[i], hi[i] = r.point - eps, r.point + eps
        else:
            return None
    return lo, hi
