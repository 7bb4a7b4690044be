"""Reproducible experiment harness.

Subcommands::

    selfsel simulate --config run.toml [--seed N] [--out DIR]
    selfsel estimate --config run.toml [--seed N] [--out DIR] [--trace] [--preset desk|paper]
    selfsel diagnose --config run.toml [--seed N] [--out DIR]
    selfsel bench    --config run.toml [--seed N] [--out DIR]

Configs are TOML; results are a JSON summary plus CSV stage traces.  Every
output embeds the resolved-config hash and the library version, and a fixed
(config, seed) pair reproduces outputs byte-for-byte.

Exit codes: 0 ok, 2 config error, 3 acceptance/diagnostic failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import coarse as crs
from . import diagnostics as dg
from . import likelihood as lk
from . import models
from . import optimizer as opt
from .stats_core import make_rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3

# RNG stream layout (per run seed)
STREAM_INSTANCE = 0
STREAM_DATA = 1
STREAM_WARM = 2
STREAM_PILOT = 3
STREAM_CHAINS = 4
STREAM_DIAGNOSE = 5
STREAM_COARSE_TRUTH = 6


class ConfigError(ValueError):
    pass


class RunFailure(RuntimeError):
    pass


def load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(p, "rb") as fh:
        try:
            cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e
    if "model" not in cfg:
        raise ConfigError("config must set 'model' (max | second-price | coarse)")
    if cfg["model"] not in ("max", "second-price", "coarse"):
        raise ConfigError(f"unknown model {cfg['model']!r}")
    if "seed" not in cfg:
        raise ConfigError("config must set an integer 'seed'")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def _out_dir(cfg: dict, override: str | None) -> Path:
    out = Path(override or cfg.get("out", "runs/out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _result_payload(cfg: dict, **fields) -> dict:
    payload = {
        "version": __version__,
        "config_hash": config_hash(cfg),
        "model": cfg["model"],
        "seed": cfg["seed"],
    }
    payload.update(fields)
    return payload


def _write_json(path: Path, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Instances, partitions, warm starts
# ---------------------------------------------------------------------------

def _load_matrix(path: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"matrix file not found: {path}")
    with open(p) as fh:
        return np.array(json.load(fh)["w"], dtype=float)


def build_instance(cfg: dict) -> models.InstanceSpec:
    sect = cfg.get("instance")
    if sect is None:
        raise ConfigError("selection models need an [instance] section")
    c, C = float(sect.get("c", 0.5)), float(sect.get("C", 1.5))
    if "w_star_file" in sect:
        w = _load_matrix(sect["w_star_file"])
        spec = models.InstanceSpec(w_star=w, c=c, C=C)
    else:
        d, k = int(sect["d"]), int(sect["k"])
        spec = models.random_instance(d, k, c, C, make_rng(cfg["seed"], STREAM_INSTANCE))
    violations = models.validate_assumptions(spec)
    if violations:
        raise ConfigError(
            "instance violates model assumptions:\n  "
            + "\n  ".join(str(v) for v in violations)
        )
    return spec


def build_partition(cfg: dict) -> crs.Partition:
    sect = cfg.get("coarse", {})
    part = sect.get("partition")
    if part is None:
        raise ConfigError("coarse model needs [coarse].partition")
    kind = part.get("type")
    if kind == "grid":
        return crs.GridPartition(
            width=float(part["width"]), offset=np.array(part["offset"], dtype=float)
        )
    if kind == "boxes":
        cells = tuple(
            crs.Box(
                np.array([-math.inf if v is None else v for v in c["lower"]], dtype=float),
                np.array([math.inf if v is None else v for v in c["upper"]], dtype=float),
            )
            for c in part["cells"]
        )
        return crs.BoxListPartition(cells)
    if kind == "polytopes":
        cells = tuple(
            crs.Polytope(np.array(c["A"], float), np.array(c["b"], float), np.array(c["interior"], float))
            for c in part["cells"]
        )
        return crs.PolytopeListPartition(cells)
    raise ConfigError(f"unknown partition type {kind!r}")


def _coarse_truth(cfg: dict, d: int) -> np.ndarray:
    sect = cfg.get("coarse", {})
    if "mu_star" in sect:
        mu = np.array(sect["mu_star"], dtype=float)
        if mu.shape != (d,):
            raise ConfigError("mu_star dimension does not match the partition")
        return mu
    D = float(sect.get("D", 1.0))
    rng = make_rng(cfg["seed"], STREAM_COARSE_TRUTH)
    v = rng.standard_normal(d)
    norm = float(sect.get("mu_star_norm", 0.5 * D))
    return v / np.linalg.norm(v) * norm


def build_dataset(cfg: dict, spec=None, partition=None):
    sect = cfg.get("data", {})
    if "file" in sect:
        path = Path(sect["file"])
        if not path.exists():
            raise ConfigError(f"dataset file not found: {path}")
        return models.read_ndjson(path), None
    n = int(sect.get("n", 10_000))
    rng = make_rng(cfg["seed"], STREAM_DATA)
    if cfg["model"] == "max":
        return models.gen_max_observations(spec, n, rng), spec.w_star
    if cfg["model"] == "second-price":
        return models.gen_second_price_observations(spec, n, rng), spec.w_star
    mu = _coarse_truth(cfg, partition.dim)
    return models.gen_coarse_observations(mu, partition, n, rng), mu


def build_warm_start(cfg: dict, w_star: np.ndarray):
    sect = cfg.get("warm_start", {})
    if "file" in sect:
        return _load_matrix(sect["file"]), float(sect.get("radius", 0.0)) or None
    if w_star is None:
        raise ConfigError("oracle warm start requires a known truth; supply warm_start.file")
    radius = float(sect.get("radius", 0.2))
    rng = make_rng(cfg["seed"], STREAM_WARM)
    V = rng.standard_normal(w_star.shape)
    V /= np.linalg.norm(V)
    return w_star + radius * V, radius


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------

def _pilot_gradient_norm(oracle, W0, rng, batch: int = 512) -> float:
    Ws = np.broadcast_to(W0, (batch,) + W0.shape).copy()
    g = oracle(Ws, rng)
    return float(np.sqrt((g**2).sum(axis=tuple(range(1, g.ndim))).mean()))


def build_psgd_config(cfg: dict, preset: str, G: float, warm_radius: float, seed: int) -> opt.PsgdConfig:
    """Schedule constants from the preset plus a pilot gradient bound.

    Without certified (eps0, eta, G) the desk preset takes eps0 = G * r0,
    halves eps over a fixed number of stages, and backs out eta so that the
    initial trust radius is 2 * r0 (equivalently: T depends only on the
    stage count, T = t_multiplier * tau^2).
    """
    sect = cfg.get("estimate", {})
    stages = int(sect.get("stages", 16))
    eps0 = float(sect.get("eps0", G * warm_radius))
    eps = float(sect.get("eps", eps0 * 2.0**-stages))
    eta = float(sect.get("eta", G / math.sqrt(eps)))
    G = float(sect.get("G", G))
    if preset == "desk":
        t_mult, g_div = opt.DESK_T_MULTIPLIER, opt.DESK_GAMMA_DIVISOR
    elif preset == "paper":
        t_mult, g_div = 40_000.0, 100.0
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    return opt.PsgdConfig(
        eps0=eps0, eps=eps, eta=eta, G=G,
        t_multiplier=float(sect.get("t_multiplier", t_mult)),
        gamma_divisor=float(sect.get("gamma_divisor", g_div)),
        t_cap=int(sect.get("t_cap", opt.DESK_T_CAP)),
        seed=seed,
    )


def estimate_selection_model(cfg: dict, preset: str, collect_trace: bool):
    spec = build_instance(cfg)
    data, w_star = build_dataset(cfg, spec=spec)
    W0_raw, warm_radius = build_warm_start(cfg, spec.w_star)
    if warm_radius is None:
        warm_radius = float(np.linalg.norm(W0_raw - spec.w_star)) or 0.2

    sect = cfg.get("estimate", {})
    reps = int(sect.get("boost_reps", 24))
    target = float(sect.get("target_error", 0.04))

    K = opt.ProjectionSet(center=W0_raw.copy(), D=2.0 * warm_radius, C=spec.C)
    W0 = opt.project(W0_raw, K)

    if cfg["model"] == "max":
        oracle = lk.batch_gradient_oracle_max(data.x, data.y_max)
    else:
        oracle = lk.batch_gradient_oracle_second_price(data.x, data.i_max, data.y_smax)

    G = _pilot_gradient_norm(oracle, W0, make_rng(cfg["seed"], STREAM_PILOT)) * 1.5
    psgd = build_psgd_config(cfg, preset, G, warm_radius, seed=cfg["seed"])

    t0 = time.perf_counter()
    candidates, traces = opt.iterative_psgd_batch(psgd, K, W0, oracle, n_chains=reps)
    estimate = opt.cluster_boost(list(candidates), radius=2.0 * target)
    elapsed = time.perf_counter() - t0

    error = None
    if w_star is not None:
        error, _ = opt.permutation_distance(estimate, w_star)

    sched = opt.schedule(psgd)
    result = {
        "estimate": estimate.tolist(),
        "permutation_matched_error": error,
        "warm_radius": warm_radius,
        "boost_reps": reps,
        "cluster_radius": 2.0 * target,
        "pilot_G": G,
        "schedule": {"tau": sched.tau, "D0": sched.D0, "gamma0": sched.gamma0, "T": sched.T},
        "elapsed_s": elapsed,
        "n": len(data),
    }
    trace_rows = []
    for rep_i, tr in enumerate(traces):
        for rec in tr.stages:
            trace_rows.append(
                (rep_i, rec.stage, rec.gamma, rec.trust_radius, rec.steps, rec.moved)
            )
    return result, trace_rows


def estimate_coarse_model(cfg: dict, preset: str):
    partition = build_partition(cfg)
    data, mu_star = build_dataset(cfg, partition=partition)
    sect = cfg.get("coarse", {})
    est_sect = cfg.get("estimate", {})
    D = float(sect.get("D", 1.0))
    alpha_hint = float(sect.get("alpha_hint", 0.5))
    target = float(est_sect.get("target_error", 0.04))
    reps = int(est_sect.get("boost_reps", 1))

    eta = math.sqrt(2.0) * alpha_hint
    eps = float(est_sect.get("eps", eta**2 * target**2 / 2.0))
    psgd = opt.PsgdConfig(
        eps0=max(1.0, 2 * eps), eps=eps, eta=1.0, G=1.0,
        t_multiplier=float(est_sect.get("t_multiplier", opt.DESK_T_MULTIPLIER)),
        gamma_divisor=float(est_sect.get("gamma_divisor", opt.DESK_GAMMA_DIVISOR)),
        t_cap=int(est_sect.get("t_cap", 12_000)),
        seed=cfg["seed"],
    )
    ccfg = crs.CoarseConfig(
        D=D, psgd=psgd, alpha_hint=alpha_hint,
        R=sect.get("R"), delta=float(sect.get("delta", crs.DEFAULT_DELTA)),
    )

    t0 = time.perf_counter()
    candidates = []
    trace = None
    for rep in range(reps):
        rep_cfg = crs.CoarseConfig(
            D=D,
            psgd=opt.PsgdConfig(
                eps0=psgd.eps0, eps=psgd.eps, eta=psgd.eta, G=psgd.G,
                t_multiplier=psgd.t_multiplier, gamma_divisor=psgd.gamma_divisor,
                t_cap=psgd.t_cap, seed=cfg["seed"] + 1000 * rep,
            ),
            alpha_hint=alpha_hint, R=ccfg.R, delta=ccfg.delta,
        )
        mu_hat, trace = crs.estimate_coarse_mean(
            data, partition, rep_cfg, make_rng(cfg["seed"] + 1000 * rep, STREAM_CHAINS)
        )
        candidates.append(mu_hat)
    estimate = (
        candidates[0] if reps == 1 else opt.cluster_boost(candidates, radius=2.0 * target)
    )
    elapsed = time.perf_counter() - t0

    error = float(np.linalg.norm(estimate - mu_star)) if mu_star is not None else None
    result = {
        "estimate": estimate.tolist(),
        "error": error,
        "boost_reps": reps,
        "localization_radius": trace.R,
        "pilot_G": trace.G,
        "eta": trace.eta,
        "non_identifiable": trace.non_identifiable,
        "n_localized": trace.n_localized,
        "elapsed_s": elapsed,
        "n": len(data),
    }
    rows = []
    for label, tr in (("A", trace.stage_a), ("B", trace.stage_b)):
        for rec in tr.stages:
            rows.append((label, rec.stage, rec.gamma, rec.trust_radius, rec.steps, rec.moved))
    return result, rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: dict, out_override: str | None, **_):
    out = _out_dir(cfg, out_override)
    if cfg["model"] in ("max", "second-price"):
        spec = build_instance(cfg)
        data, _ = build_dataset(cfg, spec=spec)
        extra = {"config_hash": config_hash(cfg), "version": __version__}
        models.write_ndjson(data, out / "dataset.ndjson", seed=cfg["seed"], extra_header=extra)
        truth = {"w": spec.w_star.tolist()}
    else:
        partition = build_partition(cfg)
        data, mu = build_dataset(cfg, partition=partition)
        extra = {"config_hash": config_hash(cfg), "version": __version__}
        models.write_ndjson(data, out / "dataset.ndjson", seed=cfg["seed"], extra_header=extra)
        truth = {"mu": mu.tolist()}
    _write_json(out / "truth.json", _result_payload(cfg, truth=truth))
    print(f"wrote {out / 'dataset.ndjson'} ({len(data)} records)")
    return EXIT_OK


def cmd_estimate(cfg: dict, out_override: str | None, preset: str = "desk", trace: bool = False, **_):
    out = _out_dir(cfg, out_override)
    if cfg["model"] in ("max", "second-price"):
        result, rows = estimate_selection_model(cfg, preset, collect_trace=trace)
        header = ("rep", "stage", "gamma", "trust_radius", "steps", "moved")
    else:
        result, rows = estimate_coarse_model(cfg, preset)
        header = ("stage_label", "stage", "gamma", "trust_radius", "steps", "moved")
    payload = _result_payload(cfg, preset=preset, **result)
    _write_json(out / "result.json", payload)
    if trace:
        with open(out / "trace.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
    err = result.get("permutation_matched_error", result.get("error"))
    err_s = "n/a" if err is None else f"{err:.5f}"
    print(f"estimate written to {out / 'result.json'}; error={err_s}")
    return EXIT_OK


def cmd_diagnose(cfg: dict, out_override: str | None, **_):
    out = _out_dir(cfg, out_override)
    if cfg["model"] == "coarse":
        raise ConfigError("diagnose currently covers the selection models only")
    model = cfg["model"]
    sect = cfg.get("diagnose", {})
    n = int(sect.get("n", 100_000))
    suite = sect.get("suite", ["fd", "stationarity", "hessian", "growth"])
    spec = build_instance(cfg)
    seed = cfg["seed"]
    rng = make_rng(seed, STREAM_DIAGNOSE)
    reports: list[dg.DiagnosticReport] = []

    if "fd" in suite:
        if model == "max":
            obs = models.gen_max_observations(spec, 1, rng)[0]
            reports.append(
                dg.fd_gradient_check(
                    lambda W: lk.nll_max(W, obs),
                    lambda W: lk.exact_gradient_max(W, obs),
                    spec.w_star, name=f"fd_gradient[{model}]",
                )
            )
        else:
            obs = models.gen_second_price_observations(spec, 1, rng)[0]
            reports.append(
                dg.fd_gradient_check(
                    lambda W: lk.nll_second_price(W, obs),
                    lambda W: lk.exact_gradient_second_price(W, obs),
                    spec.w_star, name=f"fd_gradient[{model}]",
                )
            )
    if "stationarity" in suite:
        reports.append(dg.stationarity_test(model, spec.w_star, n, rng, seed=seed))
    if "hessian" in suite and spec.d * spec.k <= 64:
        me = dg.hessian_min_eig_estimate(model, spec, spec.w_star, min(n, 20_000), rng)
        reports.append(
            dg.DiagnosticReport(
                name=f"hessian_min_eig[{model}]",
                statistic=-me,  # pass iff min eig >= -0.02
                threshold=0.02,
                se=None,
                sample_sizes={"n_obs": min(n, 20_000)},
                seed=seed,
            )
        )
    if "growth" in suite:
        pts = dg.growth_probe(model, spec.w_star, [0.05, 0.1, 0.2, 0.3], n, rng, seed=seed)
        viol = 0.0
        for p in pts:
            viol = max(viol, -p.gap / max(p.se, 1e-300))
        for lo, hi in zip(pts, pts[1:]):
            viol = max(viol, (lo.gap - hi.gap) / max(lo.se + hi.se, 1e-300))
        reports.append(
            dg.DiagnosticReport(
                name=f"growth_probe[{model}]",
                statistic=float(viol),
                threshold=4.0,
                se=None,
                sample_sizes={"n_obs": n, "radii": [p.radius for p in pts]},
                seed=seed,
            )
        )

    payload = _result_payload(cfg, reports=[asdict(r) for r in reports])
    _write_json(out / "diagnostics.json", payload)
    for r in reports:
        print(r.row())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILURE


def cmd_bench(cfg: dict, out_override: str | None, **_):
    out = _out_dir(cfg, out_override)
    rng = make_rng(cfg["seed"], STREAM_DIAGNOSE)
    spec = models.random_instance(10, 3, 0.5, 1.5, rng)
    data = models.gen_max_observations(spec, 1000, rng)
    timings = {}

    n_it = 2000
    t0 = time.perf_counter()
    for i in range(n_it):
        lk.stochastic_gradient_max(spec.w_star, data[i % 1000], rng)
    timings["stochastic_gradient_max_us"] = (time.perf_counter() - t0) / n_it * 1e6

    t0 = time.perf_counter()
    lk.sample_conditional_max(np.zeros(3), 0.5, rng, size=100_000)
    timings["conditional_sample_us_per_draw"] = (time.perf_counter() - t0) / 1e5 * 1e6

    cell = crs.Box(np.zeros(3), np.ones(3))
    t0 = time.perf_counter()
    for _ in range(n_it):
        crs.coarse_gradient(np.zeros(3), cell, 10.0, rng)
    timings["coarse_gradient_us"] = (time.perf_counter() - t0) / n_it * 1e6

    payload = _result_payload(cfg, timings=timings)
    _write_json(out / "bench.json", payload)
    for k, v in timings.items():
        print(f"{k}: {v:.2f}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="selfsel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="output directory")
        if name == "estimate":
            p.add_argument("--trace", action="store_true", help="write per-stage CSV trace")
            p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        kwargs = {}
        if args.command == "estimate":
            kwargs = {"preset": args.preset, "trace": args.trace}
        return COMMANDS[args.command](cfg, args.out, **kwargs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (opt.ClusterBoostError, RunFailure) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
