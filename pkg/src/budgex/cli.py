"""Command-line orchestration: generate worlds, run protocols, evaluate, sweep.

Subcommands:
  generate  env.json -> obs.jsonl / pool.jsonl (+ manifest.json)
  run       env.json + protocol.json -> rct.jsonl, scores, solution.json
  evaluate  env.json + solution.json -> metrics.csv, summary.json
  sweep     sweep.json -> one metrics row per (budget, strategy, replication)

All outputs are byte-deterministic given identical configs and master seed.
BUDGEX_THREADS caps worker parallelism for sweeps (default 1).
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from ._rng import derive_seed, rng_for
from .acquisition import AcquisitionWeights, EnsembleSpec
from .core import (PoolUnit, PropensityBounds, read_jsonl, write_jsonl)
from .envs import MarginalShift, load_env, sample_obs, sample_pool
from .estimator import solution_to_json, solution_from_json
from .metrics import (ZeroGlobalLiftError, pehe, pehe_exact_segments,
                      randomized_eval_set, uplift_curve)
from .protocol import (AffinePolicy, ConstantPolicy, ProtocolConfig,
                       VarianceOptimalPolicy, run_protocol)

METRIC_COLUMNS = ["budget", "strategy", "replication", "seed", "pehe", "auuc",
                  "min_eig_normalized"]

STRATEGY_WEIGHTS = {
    "active-full": (0.5, 1.0, 0.7),
    "active-v-only": (0.5, 0.0, 0.0),
    "active-d-only": (0.0, 1.0, 0.0),
    "active-o-only": (0.0, 0.0, 0.7),
    "active-vd": (0.5, 1.0, 0.0),
    "active-vo": (0.5, 0.0, 0.7),
    "active-do": (0.0, 1.0, 0.7),
}


def _sha256_file(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _randomization_from_json(doc):
    kind = doc.get("kind", "constant")
    if kind == "constant":
        return ConstantPolicy(doc.get("p", 0.5))
    if kind == "affine":
        return AffinePolicy(tuple(doc["weights"]), doc.get("bias", 0.5))
    if kind == "variance-optimal":
        return VarianceOptimalPolicy()
    raise ValueError(f"unknown randomization kind {kind!r}")


def protocol_config_from_json(doc, seed=0, strategy=None, budget=None):
    bounds = PropensityBounds(doc.get("f_min", 0.2), doc.get("f_max", 0.8))
    wj = doc.get("weights", {})
    weights = AcquisitionWeights(alpha=wj.get("alpha", 0.5),
                                 beta=wj.get("beta", 1.0),
                                 gamma=wj.get("gamma", 0.7))
    ej = doc.get("ensemble", {})
    ensemble = EnsembleSpec(n_members=ej.get("n_members", 15),
                            resample_fraction=ej.get("resample_fraction", 0.8),
                            perturb_lambda=ej.get("perturb_lambda", 0.0),
                            lam=ej.get("lambda", doc.get("estimator_lambda", 1.0)))
    return ProtocolConfig(
        budget=budget if budget is not None else doc["budget"],
        max_rounds=doc.get("max_rounds", 1_000_000),
        max_batch=doc.get("max_batch", 1_000_000),
        bounds=bounds,
        randomization=_randomization_from_json(doc.get("randomization", {})),
        strategy=strategy if strategy is not None else doc.get("strategy", "active"),
        weights=weights,
        ensemble=ensemble,
        estimator_lambda=doc.get("estimator_lambda", 1.0),
        mode=doc.get("mode", "theory"),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args):
    env, policy, shift, doc = load_env(args.env)
    os.makedirs(args.out, exist_ok=True)
    seed = doc.get("seed", 0) if args.seed is None else args.seed
    pool = sample_pool(env, doc.get("n_pool", 1000), seed)
    write_jsonl(os.path.join(args.out, "pool.jsonl"), pool)
    n_obs = doc.get("n_obs", 0)
    if policy is not None and n_obs > 0:
        obs = sample_obs(env, policy, shift, n_obs, seed)
        write_jsonl(os.path.join(args.out, "obs.jsonl"), obs)
    _write_json(os.path.join(args.out, "manifest.json"),
                {"env_spec_sha256": _sha256_file(args.env), "seed": seed})
    return 0


# ---------------------------------------------------------------------------
# run


def cmd_run(args):
    env, policy, shift, env_doc = load_env(args.env)
    with open(args.protocol) as fh:
        pdoc = json.load(fh)
    os.makedirs(args.out, exist_ok=True)

    pool_path = os.path.join(args.data, "pool.jsonl")
    obs_path = os.path.join(args.data, "obs.jsonl")
    pool = read_jsonl(pool_path, "pool")
    obs = read_jsonl(obs_path, "obs") if os.path.exists(obs_path) else []
    mode = args.mode or pdoc.get("mode", "theory")
    if mode == "fusion" and not obs:
        print("error: fusion mode requires obs.jsonl", file=sys.stderr)
        return 2
    budget = pdoc["budget"]
    if budget > len(pool):
        msg = f"budget {budget} exceeds pool size {len(pool)}"
        if args.strict_budget:
            print(f"error: {msg}", file=sys.stderr)
            return 2
        print(f"warning: {msg}; pool will be exhausted", file=sys.stderr)

    for r in range(args.reps):
        seed_r = derive_seed(args.seed, r)
        cfg = protocol_config_from_json(pdoc, seed=seed_r)
        cfg = replace(cfg, mode=mode)
        rep_dir = os.path.join(args.out, f"rep_{r:04d}")
        os.makedirs(rep_dir, exist_ok=True)
        fresh_pool = [PoolUnit(id=u.id, x=u.x) for u in pool]
        t0 = time.perf_counter()
        result = run_protocol(cfg, env, pool_units=fresh_pool,
                              obs_records=obs, out_dir=rep_dir)
        elapsed = time.perf_counter() - t0
        write_jsonl(os.path.join(rep_dir, "rct.jsonl"), result.records)
        _write_json(os.path.join(rep_dir, "solution.json"),
                    solution_to_json(result.solution, cfg.estimator_lambda))
        _write_json(os.path.join(rep_dir, "run_summary.json"), {
            "budget": cfg.budget,
            "budget_used": int(len(result.ts)),
            "batch_sizes": result.batch_sizes,
            "seed": seed_r,
            "wall_time_s": round(elapsed, 3),
        })
    _write_json(os.path.join(args.out, "manifest.json"), {
        "env_spec_sha256": _sha256_file(args.env),
        "protocol_sha256": _sha256_file(args.protocol),
        "master_seed": args.seed,
        "replications": args.reps,
        "mode": mode,
    })
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args):
    env, _, _, _ = load_env(args.env)
    with open(args.solution) as fh:
        solution = solution_from_json(json.load(fh))
    os.makedirs(args.out, exist_ok=True)
    predict = lambda xs: env.feature_map.apply_many(xs) @ solution.theta_hat

    eval_xs = env.sample_x(args.n_eval, rng_for(args.seed, 0x65786576))
    pr = pehe(predict, env, eval_xs)
    xs, ts, ys = randomized_eval_set(env, args.n_eval, args.seed)
    try:
        auuc = uplift_curve(predict(xs), ts, ys).auuc_normalized
    except ZeroGlobalLiftError:
        auuc = float("nan")

    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pehe", "auuc", "n_eval"])
        w.writerow([repr(pr.value), repr(auuc), pr.n_eval])
    _write_json(os.path.join(args.out, "summary.json"),
                {"pehe": pr.value, "auuc": auuc, "n_eval": pr.n_eval})
    return 0


# ---------------------------------------------------------------------------
# sweep


def _sweep_cell(payload):
    """One (budget, strategy, replication) cell; pure function of its inputs."""
    (env_doc_json, pdoc, budget, strategy, rep, master_seed, n_pool, n_obs) = payload
    from .envs import env_from_json  # local import keeps workers lightweight

    env, policy, shift = env_from_json(json.loads(env_doc_json))
    seed = derive_seed(master_seed, budget,
                       zlib.crc32(strategy.encode()) & 0xFFFF, rep)
    if strategy == "random":
        cfg = protocol_config_from_json(pdoc, seed=seed, strategy="random",
                                        budget=budget)
    else:
        a, b, g = STRATEGY_WEIGHTS[strategy]
        cfg = protocol_config_from_json(pdoc, seed=seed, strategy="active",
                                        budget=budget)
        cfg = replace(cfg, weights=AcquisitionWeights(a, b, g))

    pool = sample_pool(env, n_pool, derive_seed(seed, 0x706C))
    obs = (sample_obs(env, policy, shift, n_obs, derive_seed(seed, 0x6F62))
           if policy is not None and n_obs > 0 else [])
    if cfg.strategy == "active" and not obs:
        raise ValueError("active sweep strategies need an obs policy and n_obs > 0")
    result = run_protocol(cfg, env, pool_units=pool, obs_records=obs)
    predict = lambda xs: env.feature_map.apply_many(xs) @ result.solution.theta_hat

    if hasattr(env.marginal, "probs"):
        pehe_val = pehe_exact_segments(predict, env)
    else:
        eval_xs = env.sample_x(4000, rng_for(seed, 0x6576))
        pehe_val = pehe(predict, env, eval_xs).value
    xs, ts, ys = randomized_eval_set(env, 4000, derive_seed(master_seed, budget, rep))
    try:
        auuc = uplift_curve(predict(xs), ts, ys).auuc_normalized
    except ZeroGlobalLiftError:
        auuc = float("nan")
    b_used = max(len(result.ts), 1)
    v0 = result.solution.info.V - cfg.estimator_lambda * np.eye(env.feature_map.output_dim)
    min_eig = float(np.linalg.eigvalsh(v0).min() / b_used)
    return [budget, strategy, rep, seed, repr(pehe_val), repr(auuc), repr(min_eig)]


def cmd_sweep(args):
    with open(args.sweep) as fh:
        sdoc = json.load(fh)
    os.makedirs(args.out, exist_ok=True)
    with open(sdoc["env"]) as fh:
        env_doc_json = fh.read()
    pdoc = sdoc.get("protocol", {})
    budgets = sdoc["budgets"]
    strategies = sdoc["strategies"]
    reps = sdoc.get("replications", 1) if args.reps is None else args.reps
    if not budgets or not strategies:
        print("error: sweep needs nonempty budgets and strategies", file=sys.stderr)
        return 2
    n_pool = sdoc.get("n_pool", max(budgets) * 2)
    n_obs = sdoc.get("n_obs", 2000)

    payloads = [
        (env_doc_json, pdoc, int(b), s, r, args.seed, n_pool, n_obs)
        for b in budgets for s in strategies for r in range(reps)
    ]
    workers = int(os.environ.get("BUDGEX_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_cell, payloads))
    else:
        rows = [_sweep_cell(p) for p in payloads]

    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)

    summary = {"cells": {}, "slopes": {}}
    for s in strategies:
        per_budget = {}
        for b in budgets:
            vals = [float(r[4]) for r in rows if r[0] == b and r[1] == s]
            aucs = [float(r[5]) for r in rows if r[0] == b and r[1] == s]
            per_budget[str(b)] = {
                "mean_pehe": float(np.mean(vals)),
                "mean_auuc": float(np.nanmean(aucs)) if aucs else float("nan"),
            }
        summary["cells"][s] = per_budget
        if len(budgets) >= 4:
            mb = np.array(sorted(budgets), dtype=float)
            mp = np.array([per_budget[str(int(b))]["mean_pehe"] for b in sorted(budgets)])
            slope, intercept = np.polyfit(np.log(mb), np.log(mp), 1)
            summary["slopes"][s] = {"slope": float(slope), "intercept": float(intercept)}
    _write_json(os.path.join(args.out, "summary.json"), summary)
    _write_json(os.path.join(args.out, "manifest.json"), {
        "sweep_sha256": _sha256_file(args.sweep),
        "master_seed": args.seed,
        "replications": reps,
    })
    return 0


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(prog="budgex",
                                     description="Budgeted active experimentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate obs/pool datasets from env.json")
    g.add_argument("--env", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the budgeted protocol")
    r.add_argument("--env", required=True)
    r.add_argument("--protocol", required=True)
    r.add_argument("--data", required=True, help="directory with pool.jsonl / obs.jsonl")
    r.add_argument("--out", required=True)
    r.add_argument("--reps", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--mode", choices=["theory", "fusion"], default=None)
    r.add_argument("--strict-budget", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="evaluate a fitted solution")
    e.add_argument("--env", required=True)
    e.add_argument("--solution", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n-eval", type=int, default=5000)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="budget x strategy sweep")
    s.add_argument("--sweep", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
