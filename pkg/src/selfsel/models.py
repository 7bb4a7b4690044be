"""Problem instances and synthetic observation generators.

Three observation models share the latent mechanism  y_i = <x, w_i> + xi_i
with x ~ N(0, I_d) and independent unit noise:

* max selection:        observe (x, max_i y_i)
* second price:         observe (x, argmax_i y_i, second-highest y)
* coarse partitions:    draw z ~ N(mu*, I) and observe the partition cell
                        containing z (x plays no role)

Generators are deterministic given the RNG and can optionally retain the
latent draws for tests; production datasets never carry latents.
Datasets serialize to newline-delimited JSON with a leading header record.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .coarse import (
    Box,
    BoxListPartition,
    CoarseSet,
    GridPartition,
    Partition,
    Polytope,
    PolytopeListPartition,
    Singleton,
    locate,
)


@dataclass(frozen=True)
class InstanceSpec:
    """True regression matrix plus the separation/boundedness constants.

    Columns w_i of ``w_star`` must satisfy
        ||w_i||^2 >= c + max_{j != i} |<w_j, w_i>|   and   ||w_i|| <= C.
    """

    w_star: np.ndarray
    c: float
    C: float

    def __post_init__(self):
        W = np.asarray(self.w_star, dtype=float)
        object.__setattr__(self, "w_star", W)
        if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
            raise ValueError("w_star must be a d x k matrix")
        if not np.all(np.isfinite(W)):
            raise ValueError("w_star entries must be finite")
        if not (0 < self.c <= 1) or self.C < 1:
            raise ValueError("require c in (0, 1] and C >= 1")

    @property
    def d(self) -> int:
        return self.w_star.shape[0]

    @property
    def k(self) -> int:
        return self.w_star.shape[1]


@dataclass(frozen=True)
class AssumptionViolation:
    kind: str          # "separability" | "boundedness"
    index: int         # offending column
    margin: float      # amount by which the condition fails (> 0)

    def __str__(self):
        return f"{self.kind} violated at column {self.index} by {self.margin:.6g}"


def validate_assumptions(spec: InstanceSpec) -> list[AssumptionViolation]:
    """Empty list iff separability and boundedness both hold."""
    W = spec.w_star
    gram = W.T @ W
    norms_sq = np.diag(gram)
    violations = []
    for i in range(spec.k):
        cross = np.abs(np.delete(gram[i], i)).max() if spec.k > 1 else 0.0
        margin = spec.c + cross - norms_sq[i]
        if margin > 0:
            violations.append(AssumptionViolation("separability", i, float(margin)))
        excess = math.sqrt(norms_sq[i]) - spec.C
        if excess > 0:
            violations.append(AssumptionViolation("boundedness", i, float(excess)))
    return violations


def random_instance(d: int, k: int, c: float, C: float, rng) -> InstanceSpec:
    """Random valid instance: orthonormal directions scaled to norms inside
    [sqrt(c) * 1.05, C]; orthogonality makes separability immediate."""
    if d < k:
        raise ValueError("need d >= k for orthogonal columns")
    raw = rng.standard_normal((d, k))
    Q, _ = np.linalg.qr(raw)
    lo = min(math.sqrt(c) * 1.05, C)
    scales = rng.uniform(lo, C, size=k)
    spec = InstanceSpec(w_star=Q[:, :k] * scales, c=c, C=C)
    assert not validate_assumptions(spec)
    return spec


# ---------------------------------------------------------------------------
# Observations and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaxObservation:
    x: np.ndarray
    y_max: float


@dataclass(frozen=True)
class SecondPriceObservation:
    x: np.ndarray
    i_max: int      # 0-based winner column
    y_smax: float


@dataclass(frozen=True)
class CoarseObservation:
    set: CoarseSet


class MaxDataset(Sequence):
    """Columnar storage of (x, y_max) pairs."""

    model = "max"

    def __init__(
        self,
        x: np.ndarray,
        y_max: np.ndarray,
        k: int | None = None,
        latents: np.ndarray | None = None,
    ):
        self.x = np.asarray(x, dtype=float)
        self.y_max = np.asarray(y_max, dtype=float)
        self.k = k  # number of latent regressors, when known
        self.latents = latents  # (n, k) latent y-vectors, test mode only
        if self.x.shape[0] != self.y_max.shape[0]:
            raise ValueError("inconsistent dataset lengths")

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i) -> MaxObservation:
        return MaxObservation(self.x[i], float(self.y_max[i]))

    @property
    def d(self):
        return self.x.shape[1]


class SecondPriceDataset(Sequence):
    model = "second-price"

    def __init__(self, x, i_max, y_smax, k: int, latents=None):
        self.x = np.asarray(x, dtype=float)
        self.i_max = np.asarray(i_max, dtype=np.int64)
        self.y_smax = np.asarray(y_smax, dtype=float)
        self.k = int(k)
        self.latents = latents
        if not (self.x.shape[0] == self.i_max.shape[0] == self.y_smax.shape[0]):
            raise ValueError("inconsistent dataset lengths")
        if len(self.i_max) and not (0 <= self.i_max.min() and self.i_max.max() < self.k):
            raise ValueError("winner index out of range")

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i) -> SecondPriceObservation:
        return SecondPriceObservation(self.x[i], int(self.i_max[i]), float(self.y_smax[i]))

    @property
    def d(self):
        return self.x.shape[1]


class CoarseDataset(Sequence):
    model = "coarse"

    def __init__(self, sets: list, partition: Partition | None = None, latents=None):
        self.sets = list(sets)
        self.partition = partition
        self.latents = latents  # (n, d) latent draws, test mode only

    def __len__(self):
        return len(self.sets)

    def __getitem__(self, i) -> CoarseObservation:
        return CoarseObservation(self.sets[i])

    @property
    def d(self):
        return self.sets[0].dim


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def gen_max_observations(spec: InstanceSpec, n: int, rng, with_latents: bool = False) -> MaxDataset:
    """n draws of (x, y_max) with y_i = <x, w_i> + xi_i, y_max = max_i y_i."""
    x = rng.standard_normal((n, spec.d))
    y = x @ spec.w_star + rng.standard_normal((n, spec.k))
    return MaxDataset(x, y.max(axis=1), k=spec.k, latents=y if with_latents else None)


def gen_second_price_observations(
    spec: InstanceSpec, n: int, rng, with_latents: bool = False
) -> SecondPriceDataset:
    """n draws of (x, argmax_i y_i, second-highest y); requires k >= 2.

    Argmax ties (a probability-zero event) break toward the lowest index,
    matching ``np.argmax``.
    """
    if spec.k < 2:
        raise ValueError("second-price observations require k >= 2")
    x = rng.standard_normal((n, spec.d))
    y = x @ spec.w_star + rng.standard_normal((n, spec.k))
    i_max = y.argmax(axis=1)
    masked = y.copy()
    masked[np.arange(n), i_max] = -np.inf
    y_smax = masked.max(axis=1)
    return SecondPriceDataset(
        x, i_max, y_smax, k=spec.k, latents=y if with_latents else None
    )


def gen_coarse_observations(
    mu_star: np.ndarray, partition: Partition, n: int, rng, with_latents: bool = False
) -> CoarseDataset:
    """n draws of the partition cell containing z ~ N(mu_star, I)."""
    mu_star = np.asarray(mu_star, dtype=float)
    z = mu_star + rng.standard_normal((n, mu_star.shape[0]))
    if isinstance(partition, GridPartition):
        # vectorized cell lookup for grids
        idx = np.floor((z - partition.offset) / partition.width).astype(np.int64)
        lower = partition.offset + idx * partition.width
        sets = [Box(lower[i], lower[i] + partition.width) for i in range(n)]
    else:
        sets = [locate(partition, z[i]) for i in range(n)]
    return CoarseDataset(sets, partition, latents=z if with_latents else None)


# ---------------------------------------------------------------------------
# NDJSON serialization
# ---------------------------------------------------------------------------

def _encode_bound(v: float):
    return None if math.isinf(v) else float(v)


def _decode_bound(v, sign: float):
    return sign * math.inf if v is None else float(v)


def _encode_set(s: CoarseSet) -> dict:
    if isinstance(s, Box):
        return {
            "type": "box",
            "lower": [_encode_bound(v) for v in s.lower],
            "upper": [_encode_bound(v) for v in s.upper],
        }
    if isinstance(s, Polytope):
        return {
            "type": "polytope",
            "A": s.A.tolist(),
            "b": s.b.tolist(),
            "interior": s.interior_point.tolist(),
        }
    if isinstance(s, Singleton):
        return {"type": "singleton", "point": s.point.tolist()}
    raise TypeError(f"unknown coarse set {type(s)!r}")


def _decode_set(obj: dict) -> CoarseSet:
    kind = obj["type"]
    if kind == "box":
        return Box(
            np.array([_decode_bound(v, -1.0) for v in obj["lower"]]),
            np.array([_decode_bound(v, +1.0) for v in obj["upper"]]),
        )
    if kind == "polytope":
        return Polytope(np.array(obj["A"]), np.array(obj["b"]), np.array(obj["interior"]))
    if kind == "singleton":
        return Singleton(np.array(obj["point"]))
    raise ValueError(f"unknown set type {kind!r}")


def write_ndjson(dataset, path, seed: int | None = None, extra_header: dict | None = None):
    """Dataset -> newline-delimited JSON; first record is a header carrying
    the dimension, regressor count, model tag and generation seed."""
    header = {"record": "header", "model": dataset.model, "n": len(dataset)}
    header["d"] = int(dataset.d)
    if dataset.model in ("max", "second-price"):
        header["k"] = int(dataset.k) if dataset.k is not None else None
    if seed is not None:
        header["seed"] = int(seed)
    if extra_header:
        header.update(extra_header)
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        if dataset.model == "max":
            for i in range(len(dataset)):
                fh.write(
                    json.dumps({"x": dataset.x[i].tolist(), "y_max": float(dataset.y_max[i])})
                    + "\n"
                )
        elif dataset.model == "second-price":
            for i in range(len(dataset)):
                fh.write(
                    json.dumps(
                        {
                            "x": dataset.x[i].tolist(),
                            "i_max": int(dataset.i_max[i]),
                            "y_smax": float(dataset.y_smax[i]),
                        }
                    )
                    + "\n"
                )
        else:
            for s in dataset.sets:
                fh.write(json.dumps({"set": _encode_set(s)}) + "\n")


def read_ndjson(path):
    """Inverse of :func:`write_ndjson`; returns the matching dataset type."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("record") != "header":
            raise ValueError("missing header record")
        model = header["model"]
        records = [json.loads(line) for line in fh if line.strip()]
    if model == "max":
        x = np.array([r["x"] for r in records])
        y = np.array([r["y_max"] for r in records])
        return MaxDataset(x, y, k=header.get("k"))
    if model == "second-price":
        x = np.array([r["x"] for r in records])
        i_max = np.array([r["i_max"] for r in records])
        y = np.array([r["y_smax"] for r in records])
        return SecondPriceDataset(x, i_max, y, k=int(header["k"]))
    if model == "coarse":
        return CoarseDataset([_decode_set(r["set"]) for r in records])
    raise ValueError(f"unknown model tag {model!r}")
