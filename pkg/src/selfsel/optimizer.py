"""Multi-stage projected SGD for convex objectives with local growth.

The optimizer runs a fixed number of stages; within each stage it performs
plain projected SGD with a constant step size and averages the iterates.
Step size and trust radius halve from stage to stage, and each stage
restarts from the previous stage's averaged iterate.  The schedule
quantities are

    tau    = ceil(log2(eps0 / eps))
    D0     = 2 eps0 / (eta sqrt(eps))
    gamma0 = eps0 / (gamma_divisor * G^2 * tau)
    T      = t_multiplier * G^2 * tau^2 / (eta^2 * eps),  capped at t_cap

with ``t_multiplier`` / ``gamma_divisor`` defaulting to the worst-case
constants 40000 / 100.  Those defaults are extremely conservative; the
``desk`` preset keeps the same formulas but uses t_multiplier=40 and
gamma_divisor=sqrt(40)/2, which preserves the coupling
gamma ~ D / (G sqrt(T)) of the default pair.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .stats_core import make_rng

DESK_T_MULTIPLIER = 40.0
DESK_GAMMA_DIVISOR = math.sqrt(40.0) / 2.0
DESK_T_CAP = 200_000


class OptimizerError(RuntimeError):
    pass


class ClusterBoostError(RuntimeError):
    """No candidate is close to a majority of the boosting repetitions."""


@dataclass(frozen=True)
class PsgdConfig:
    """Schedule constants for the staged optimizer.

    eps0  -- bound on the initial optimality gap F(w0) - F(w*)
    eps   -- target optimality gap (the run aims for a 2*eps-optimal point)
    eta   -- local growth rate: ||w - w*|| <= sqrt(F(w) - F(w*)) / eta
    G     -- root bound on the gradient second moment, E||g||^2 <= G^2
    """

    eps0: float
    eps: float
    eta: float
    G: float
    t_multiplier: float = 40_000.0
    gamma_divisor: float = 100.0
    t_cap: int = DESK_T_CAP
    seed: int = 0

    def __post_init__(self):
        if not (self.eps0 >= self.eps > 0):
            raise ValueError("require eps0 >= eps > 0")
        if self.eta <= 0 or self.G <= 0:
            raise ValueError("require eta > 0 and G > 0")
        if self.t_multiplier <= 0 or self.gamma_divisor <= 0:
            raise ValueError("require positive schedule multipliers")

    def desk(self, **overrides) -> "PsgdConfig":
        """Copy of this config with the desk-scale schedule constants."""
        values = dict(
            t_multiplier=DESK_T_MULTIPLIER,
            gamma_divisor=DESK_GAMMA_DIVISOR,
            t_cap=DESK_T_CAP,
        )
        values.update(overrides)
        return replace(self, **values)


@dataclass(frozen=True)
class Schedule:
    tau: int
    D0: float
    gamma0: float
    T: int


def schedule(config: PsgdConfig) -> Schedule:
    """Stage count, initial trust radius, initial step and per-stage steps."""
    ratio = config.eps0 / config.eps
    tau = max(0, math.ceil(math.log2(ratio)))
    D0 = 2.0 * config.eps0 / (config.eta * math.sqrt(config.eps))
    if tau == 0:
        return Schedule(tau=0, D0=D0, gamma0=0.0, T=0)
    gamma0 = config.eps0 / (config.gamma_divisor * config.G**2 * tau)
    T_raw = config.t_multiplier * config.G**2 * tau**2 / (config.eta**2 * config.eps)
    T = int(min(math.ceil(T_raw), config.t_cap))
    return Schedule(tau=tau, D0=D0, gamma0=gamma0, T=T)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProjectionSet:
    """Intersection of a Frobenius ball, optional per-column caps, and an
    optional extra (per-stage) Frobenius ball.

    ``center`` fixes the array shape; vectors and matrices both work
    (Frobenius norm == Euclidean norm for vectors).
    """

    center: np.ndarray
    D: float
    C: float | None = None
    stage_center: np.ndarray | None = None
    stage_radius: float | None = None

    def __post_init__(self):
        if self.D <= 0:
            raise ValueError("require D > 0")
        if self.C is not None and self.C <= 0:
            raise ValueError("require C > 0")
        if (self.stage_center is None) != (self.stage_radius is None):
            raise ValueError("stage ball needs both center and radius")

    def with_stage_ball(self, center: np.ndarray, radius: float) -> "ProjectionSet":
        return replace(self, stage_center=center, stage_radius=radius)

    def _ball_projections(self):
        balls = [(self.center, self.D)]
        if self.stage_center is not None:
            balls.append((self.stage_center, self.stage_radius))
        return balls

    def feasibility_slack(self, W: np.ndarray) -> float:
        """Largest constraint violation (0.0 when feasible)."""
        slack = 0.0
        for c, r in self._ball_projections():
            slack = max(slack, np.linalg.norm(W - c) - r)
        if self.C is not None:
            if W.ndim == 1:
                slack = max(slack, float(np.linalg.norm(W)) - self.C)
            else:
                slack = max(slack, float(np.linalg.norm(W, axis=0).max()) - self.C)
        return max(slack, 0.0)


def _project_ball(W, center, radius):
    diff = W - center
    nrm = np.linalg.norm(diff)
    if nrm <= radius:
        return W
    return center + diff * (radius / nrm)


def _project_columns(W, C):
    norms = np.linalg.norm(W, axis=0, keepdims=True)
    scale = np.minimum(1.0, C / np.maximum(norms, 1e-300))
    return W * scale


def _single_constraint_projection(W, K):
    candidates = [lambda X, c=c, r=r: _project_ball(X, c, r) for c, r in K._ball_projections()]
    if K.C is not None:
        if W.ndim == 2:
            candidates.append(lambda X: _project_columns(X, K.C))
        else:
            candidates.append(lambda X: _project_ball(X, np.zeros_like(W), K.C))
    moved = None
    for proj in candidates:
        Y = proj(W)
        if Y is not W and not np.array_equal(Y, W):
            if moved is not None:
                return None  # several constraints active
            moved = Y
    if moved is not None and K.feasibility_slack(moved) <= 1e-12:
        return moved
    return None


def project(W: np.ndarray, K: ProjectionSet, tol: float = 1e-10, max_sweeps: int = 5000):
    """Euclidean projection onto K by Dykstra's alternating method.

    Exact for intersections of convex sets; terminates when a full sweep
    moves the iterate by less than ``tol`` or after ``max_sweeps`` sweeps
    (then warns and clamps back to feasibility).  The sweep cap is sized so
    that shallow-angle ball intersections still reach ~1e-7 accuracy; each
    sweep is a handful of closed-form projections, so the cap is cheap.
    """
    W = np.asarray(W, dtype=float)
    if K.feasibility_slack(W) == 0.0:
        return W

    # single-active-constraint shortcut: projecting onto just the violated
    # set is exact when the result satisfies everything else
    single = _single_constraint_projection(W, K)
    if single is not None:
        return single

    projections = []
    for c, r in K._ball_projections():
        projections.append(lambda X, c=c, r=r: _project_ball(X, c, r))
    if K.C is not None and W.ndim == 2:
        projections.append(lambda X: _project_columns(X, K.C))
    elif K.C is not None:
        # vector parameter: the column cap degenerates to a norm ball at 0
        projections.append(lambda X: _project_ball(X, np.zeros_like(W), K.C))

    x = W.copy()
    increments = [np.zeros_like(W) for _ in projections]
    for _ in range(max_sweeps):
        x_prev = x
        for i, proj in enumerate(projections):
            y = proj(x + increments[i])
            increments[i] = x + increments[i] - y
            x = y
        if np.linalg.norm(x - x_prev) < tol:
            break
    else:
        warnings.warn("Dykstra projection did not converge; clamping", RuntimeWarning)
    # belt-and-braces clamp: a couple of cyclic passes keep any residual
    # violation below 1e-8 without noticeably moving the point
    for _ in range(2):
        if K.feasibility_slack(x) <= 1e-9:
            break
        for proj in projections:
            x = proj(x)
    return x


# ---------------------------------------------------------------------------
# Iterative PSGD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageRecord:
    stage: int
    gamma: float
    trust_radius: float
    steps: int
    moved: float


@dataclass
class StageTrace:
    stages: list[StageRecord] = field(default_factory=list)
    step_rows: list[tuple] | None = None  # (stage, step, gamma, slack, grad_norm)

    def as_rows(self):
        return [
            (r.stage, r.gamma, r.trust_radius, r.steps, r.moved) for r in self.stages
        ]


def iterative_psgd(
    config: PsgdConfig,
    K: ProjectionSet,
    w0: np.ndarray,
    grad_oracle,
    *,
    collect_steps: bool = False,
):
    """Staged projected SGD; returns (estimate, StageTrace).

    ``grad_oracle(W, rng) -> array`` must be an unbiased gradient estimate
    with E||g||_F^2 <= G^2.  Each stage runs T projected steps constrained
    to K intersected with a ball around the previous stage's output, then
    averages its iterates.
    """
    w0 = np.asarray(w0, dtype=float)
    if K.feasibility_slack(w0) > 1e-8:
        raise OptimizerError("w0 is not feasible for the projection set")
    sched = schedule(config)
    trace = StageTrace(step_rows=[] if collect_steps else None)
    if sched.tau == 0:
        return w0.copy(), trace

    rng = make_rng(config.seed)
    w_prev = w0.copy()
    for stage in range(1, sched.tau + 1):
        gamma = sched.gamma0 * 2.0**-stage
        radius = sched.D0 * 2.0**-stage
        Kl = K.with_stage_ball(w_prev.copy(), radius)
        w = w_prev.copy()
        avg = np.zeros_like(w)
        for t in range(1, sched.T + 1):
            g = grad_oracle(w, rng)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(
                    f"gradient oracle returned non-finite entries at stage {stage}, step {t}"
                )
            w = project(w - gamma * np.asarray(g, dtype=float), Kl)
            avg += (w - avg) / t
            if collect_steps:
                trace.step_rows.append(
                    (stage, t, gamma, Kl.feasibility_slack(w), float(np.linalg.norm(g)))
                )
        trace.stages.append(
            StageRecord(
                stage=stage,
                gamma=gamma,
                trust_radius=radius,
                steps=sched.T,
                moved=float(np.linalg.norm(avg - w_prev)),
            )
        )
        w_prev = avg
    return w_prev, trace


def iterative_psgd_batch(
    config: PsgdConfig,
    K: ProjectionSet,
    w0: np.ndarray,
    batch_grad_oracle,
    n_chains: int,
):
    """Run ``n_chains`` independent PSGD chains in lockstep (vectorized).

    ``batch_grad_oracle(Ws, rng) -> (n_chains, *shape)`` returns one
    stochastic gradient per chain; chains share the schedule but draw
    independent randomness.  Semantically each chain follows the exact
    single-chain recursion; vectorization changes only the RNG layout.
    Returns (stack of estimates, list of per-chain StageTrace).
    """
    w0 = np.asarray(w0, dtype=float)
    if K.feasibility_slack(w0) > 1e-8:
        raise OptimizerError("w0 is not feasible for the projection set")
    sched = schedule(config)
    traces = [StageTrace() for _ in range(n_chains)]
    Ws = np.broadcast_to(w0, (n_chains,) + w0.shape).copy()
    if sched.tau == 0:
        return Ws, traces

    rng = make_rng(config.seed)
    axes = tuple(range(1, Ws.ndim))
    prev = Ws.copy()
    for stage in range(1, sched.tau + 1):
        gamma = sched.gamma0 * 2.0**-stage
        radius = sched.D0 * 2.0**-stage
        stage_centers = prev.copy()
        Ws = prev.copy()
        avg = np.zeros_like(Ws)
        for t in range(1, sched.T + 1):
            G = batch_grad_oracle(Ws, rng)
            if not np.all(np.isfinite(G)):
                raise OptimizerError(
                    f"gradient oracle returned non-finite entries at stage {stage}, step {t}"
                )
            Ws = Ws - gamma * G
            _project_batch_inplace(Ws, K, stage_centers, radius, axes)
            avg += (Ws - avg) / t
        for i in range(n_chains):
            traces[i].stages.append(
                StageRecord(
                    stage=stage,
                    gamma=gamma,
                    trust_radius=radius,
                    steps=sched.T,
                    moved=float(np.linalg.norm(avg[i] - prev[i])),
                )
            )
        prev = avg
    return prev, traces


def _project_batch_inplace(Ws, K, stage_centers, radius, axes):
    """Project every chain onto K intersected with its stage ball.

    Fast path: apply each ball/cap radially in sequence, counting how many
    constraints actually move each chain.  When at most one fires the result
    already equals the exact Euclidean projection; the rare chains where
    several interact are finished off with Dykstra.
    """
    B = Ws.shape[0]
    orig = Ws.copy()
    flat = Ws.reshape(B, -1)
    active = np.zeros(B, dtype=np.int64)

    for center_flat, r in (
        (stage_centers.reshape(B, -1), radius),
        (K.center.reshape(1, -1), K.D),
    ):
        diff = flat - center_flat
        sq = np.einsum("bi,bi->b", diff, diff)
        over = sq > r * r
        if np.any(over):
            scale = (r / np.sqrt(sq[over]))[:, None]
            flat[over] = center_flat if center_flat.shape[0] == 1 else center_flat[over]
            flat[over] += diff[over] * scale
            active[over] += 1

    if K.C is not None and Ws.ndim == 3:
        colsq = np.einsum("bdk,bdk->bk", Ws, Ws)
        over = colsq > K.C * K.C
        if np.any(over):
            rows = over.any(axis=1)
            scale = np.where(over, K.C / np.sqrt(np.maximum(colsq, 1e-300)), 1.0)
            Ws[rows] *= scale[rows][:, None, :]
            active[rows] += 1
    elif K.C is not None:
        sq = np.einsum("bi,bi->b", flat, flat)
        over = sq > K.C * K.C
        if np.any(over):
            flat[over] *= (K.C / np.sqrt(sq[over]))[:, None]
            active[over] += 1

    if np.any(active >= 2):
        for i in np.flatnonzero(active >= 2):
            Ws[i] = project(orig[i], K.with_stage_ball(stage_centers[i], radius))


# ---------------------------------------------------------------------------
# Permutation-matched distance and boosting
# ---------------------------------------------------------------------------

def permutation_distance(A: np.ndarray, B: np.ndarray):
    """min over column permutations pi of sqrt(sum_i ||a_i - b_pi(i)||^2).

    Returns (distance, permutation) where permutation[i] is the column of B
    matched to column i of A.  The assignment is solved exactly on the
    k x k squared-distance cost matrix.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError("matrices must share a shape")
    if A.ndim == 1 or A.shape[1] == 1:
        return float(np.linalg.norm(A - B)), np.array([0])
    # cost[i, j] = ||a_i - b_j||^2, formed by explicit differences
    # (the Gram-matrix expansion loses precision to cancellation)
    cost = ((A[:, :, None] - B[:, None, :]) ** 2).sum(axis=0)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty_like(cols)
    perm[rows] = cols
    return float(math.sqrt(cost[rows, cols].sum())), perm


def permutation_distance_bruteforce(A: np.ndarray, B: np.ndarray):
    """Enumeration reference for small k; used to cross-check the solver."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    k = A.shape[1]
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(k)):
        d = math.sqrt(sum(np.sum((A[:, i] - B[:, p]) ** 2) for i, p in enumerate(perm)))
        if d < best:
            best, best_perm = d, perm
    return best, np.array(best_perm)


def cluster_boost(candidates, radius: float) -> np.ndarray:
    """First candidate whose permutation-matched distance to at least half of
    all candidates (including itself) is <= radius.

    Raises ClusterBoostError when no candidate qualifies (the caller should
    then increase the number of repetitions).
    """
    cands = [np.asarray(c, dtype=float) for c in candidates]
    m = len(cands)
    if m == 0:
        raise ClusterBoostError("no candidates supplied")
    # strict majority: an exact half-split (possible for even m) must fail
    need = m // 2 + 1
    for i, ci in enumerate(cands):
        close = 0
        for cj in cands:
            d, _ = permutation_distance(ci, cj)
            if d <= radius:
                close += 1
        if close >= need:
            return ci
    raise ClusterBoostError(
        f"no candidate is within {radius} of a majority of the {m} repetitions"
    )
