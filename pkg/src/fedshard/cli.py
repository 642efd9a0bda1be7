"""Command-line entry point: train, unlearn, metrics, scenario, analyze, baseline."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

from . import analysis, scenarios
from .adaptive import RoundRange
from .datagen import CSVParseError, DataConfig, SchemaError, build_clients
from .engine import (
    CacheError,
    RunConfig,
    load_cache,
    model_digest,
    run_training,
    save_cache,
    shard_accuracies,
)
from .fairmetrics import DEFAULT_EPS, FairnessInputs, fairness_report
from .numkit import ModelSpec, RejectedInputError
from .unlearn import (
    RejectedRequestError,
    count_cost,
    structured_scratch,
    sweep_all_single_costs,
    unlearn,
    unlearn_report,
    validate_request,
)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CACHE = 4
EXIT_REQUEST = 5

log = logging.getLogger("fedshard")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioParams:
    n_leavers: int | None = None
    unlearner: str = "exact"
    gamma: int = 50
    ascent_lr: float | None = None
    tau: float = 0.01
    cost_weight: float = 0.5
    attacker_fraction: float = 0.25
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.unlearner not in ("exact", "mock"):
            raise ConfigError(f"unknown unlearner {self.unlearner!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    workers: int = 1

    def digest(self) -> str:
        return self.run.digest()


_RUN_KEYS = {"K", "R", "lr", "local_steps", "master_seed", "fixed_rounds", "round_range", "merge",
             "batch_size"}
_TOP_KEYS = _RUN_KEYS | {"schema_version", "model", "data", "scenario", "workers"}


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config document and build the typed experiment config."""
    _check_keys("config", raw, _TOP_KEYS)
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {raw['schema_version']!r}")
    if "K" not in raw:
        raise ConfigError("config: K is required")
    try:
        data_raw = raw.get("data", {})
        _check_keys("data", data_raw, {f.name for f in fields(DataConfig)})
        data = DataConfig(**data_raw)
        model_raw = raw.get("model", {})
        _check_keys("model", model_raw, {f.name for f in fields(ModelSpec)})
        model = ModelSpec(**{"input_dim": data.input_dim, "num_labels": data.num_labels, **model_raw})
        run_kw = {k: raw[k] for k in _RUN_KEYS if k in raw}
        if "round_range" in run_kw:
            run_kw["round_range"] = RoundRange(*run_kw["round_range"])
        run = RunConfig(model=model, data=data, **run_kw)
        sc_raw = raw.get("scenario", {})
        _check_keys("scenario", sc_raw, {f.name for f in fields(ScenarioParams)})
        if "seeds" in sc_raw:
            sc_raw = {**sc_raw, "seeds": tuple(sc_raw["seeds"])}
        scenario = ScenarioParams(**sc_raw)
        return ExperimentConfig(run, scenario, int(raw.get("workers", 1)))
    except (TypeError, RejectedInputError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(raw)


def apply_ablation(run: RunConfig, no_a1: bool, no_a2: bool) -> RunConfig:
    if no_a1:
        run = replace(run, merge="random")
    if no_a2 and run.fixed_rounds is None:
        run = replace(run, fixed_rounds=scenarios.baseline_rounds(run))
    return run


def parse_ids(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise RejectedRequestError(f"client list must be comma-separated integers: {text!r}") from None


def _report(command: str, run: RunConfig, body: dict, started: float) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_digest": run.digest(),
        "master_seed": run.master_seed,
        **body,
        "duration_s": time.perf_counter() - started,
    }


def _emit(report: dict, path) -> None:
    text = json.dumps(report, indent=1, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


# --- commands -------------------------------------------------------------


def cmd_train(args) -> dict:
    t0 = time.perf_counter()
    exp = load_config(args.config)
    run = apply_ablation(exp.run, args.no_a1, args.no_a2)
    clients = build_clients(run.data, run.K)
    cache = run_training(run, clients, workers=args.workers or exp.workers)
    save_cache(cache, args.out)
    body = {
        "K": run.K,
        "R": run.R,
        "P": cache.P,
        "merge": run.merge,
        "adaptive_rounds": run.fixed_rounds is None,
        "rounds": [[n.rounds for n in st] for st in cache.stages[1:]],
        "stages": shard_accuracies(cache, clients),
        "training_client_rounds": cache.training_client_rounds(),
        "model_digest": model_digest(cache.final_model),
        "cache": str(args.out),
    }
    return _report("train", run, body, t0)


def cmd_unlearn(args) -> dict:
    t0 = time.perf_counter()
    cache = load_cache(args.cache)
    leavers = parse_ids(args.clients)
    clients = build_clients(cache.config.data, cache.config.K)
    new, theta, ledger = unlearn(cache, leavers, clients)
    save_cache(new, args.out)
    body = unlearn_report(cache, ledger, theta)
    if args.verify:
        oracle = structured_scratch(cache, clients, leavers).final_model
        body["oracle_digest"] = model_digest(oracle)
        body["matches_oracle"] = body["oracle_digest"] == body["model_digest"]
    body["cache"] = str(args.out)
    return _report("unlearn", cache.config, body, t0)


def cmd_metrics(args) -> dict:
    t0 = time.perf_counter()
    before = load_cache(args.cache)
    after = load_cache(args.unlearned)
    if before.config_digest != after.config_digest:
        raise RejectedRequestError("the two caches come from different configs (digest mismatch)")
    leavers = sorted(set(after.removed) - set(before.removed))
    if not leavers:
        raise RejectedRequestError("the unlearned cache removes no client relative to the original")
    clients = [c for c in build_clients(before.config.data, before.config.K) if c.client_id in before.clients]
    spec = before.config.model
    pre = scenarios.client_accuracy(before.final_model, clients, spec)
    post = scenarios.client_accuracy(after.final_model, clients, spec)
    costs = sweep_all_single_costs(before, args.sweep, clients if args.sweep == "full" else None)
    inputs = FairnessInputs(
        delta_y={c: pre[c] - post[c] for c in pre},
        alphas=dict(before.client_alphas),
        remaining=frozenset(after.clients),
        leaving=frozenset(leavers),
        costs=costs,
        eps=args.eps,
    )
    rep = fairness_report(inputs)
    body = {"leavers": leavers, "sweep": args.sweep, "costs": {str(k): v for k, v in costs.items()},
            **rep.to_dict()}
    return _report("metrics", before.config, body, t0)


def cmd_scenario(args) -> dict:
    t0 = time.perf_counter()
    exp = load_config(args.config)
    sp = exp.scenario
    unlearner = args.unlearner or sp.unlearner
    gamma = sp.gamma if args.gamma is None else args.gamma
    seeds = parse_ids(args.seeds) if args.seeds else list(sp.seeds)
    runs = []
    for seed in seeds:
        run = scenarios.with_seed(exp.run, seed)
        if args.kind == "cascade":
            cache, clients, leavers = scenarios.cascade_fixture(run, sp.n_leavers, sp.attacker_fraction)
            rep = scenarios.run_cascade(cache, clients, leavers, scenarios.PayoffParams(sp.cost_weight),
                                        unlearner, gamma, sp.ascent_lr)
        else:
            tau = sp.tau if args.tau is None else args.tau
            rep = scenarios.run_dpa(run, sp.attacker_fraction, tau, unlearner, gamma, sp.ascent_lr)
        runs.append(rep.to_dict())
    summary = {"median_LC": statistics.median(r["LC"] for r in runs),
               "median_M_p": statistics.median(r["M_p"] for r in runs)}
    if args.kind == "dpa":
        summary["median_precision"] = statistics.median(r["precision"] for r in runs)
    body = {"kind": args.kind, "unlearner": unlearner, "gamma": gamma, "seeds": seeds,
            "summary": summary, "runs": runs}
    return _report("scenario", exp.run, body, t0)


def cmd_analyze(args) -> dict:
    t0 = time.perf_counter()
    if args.cache:
        cache = load_cache(args.cache)
        leavers = parse_ids(args.leavers) if args.leavers else None
        body = analysis.efficiency_report(cache, leavers).to_dict()
        return _report("analyze", cache.config, body, t0)
    K, R, T = args.K, args.R, args.t0
    if K is None:
        raise ConfigError("analyze needs --K (or --cache)")
    t_train, t_un = analysis.balanced_tree_counts(K, R, T)
    mean_un = Fraction(sum(t_un.values()), len(t_un))
    t_min = args.t_min if args.t_min is not None else T
    t_max = args.t_max if args.t_max is not None else T
    lo, hi = analysis.r1_bounds(K, R, T, t_min, t_max)
    P = analysis.num_stages(K, R)
    exact = Fraction(R - 1, R) * Fraction(K, K - 1) * P
    body = {
        "K": K, "R": R, "P": P, "T0": T,
        "r1": analysis.r1(K, R),
        "r1_fraction": str(exact),
        "r1_lower": lo, "r1_upper": hi,
        "counted_T_train": t_train,
        "counted_T_un": float(mean_un),
        "counted_ratio": float(Fraction(t_train) / mean_un),
        "counted_ratio_fraction": str(Fraction(t_train) / mean_un),
    }
    if args.m:
        pp = args.p_prime if args.p_prime is not None else 0
        lower, upper, bad = analysis.r2_bounds(K, R, args.m, pp)
        body.update({"m": args.m, "p_prime": pp, "r2_minus": lower, "r2_plus": upper,
                     "r2_inconsistent": bad})
    fake = RunConfig(K=K, R=R, fixed_rounds=T)
    return _report("analyze", fake, body, t0)


def cmd_baseline(args) -> dict:
    t0 = time.perf_counter()
    cache = load_cache(args.cache)
    leavers = parse_ids(args.clients)
    validate_request(cache, leavers)
    clients = build_clients(cache.config.data, cache.config.K)
    survivors = [c for c in clients if c.client_id in cache.clients and c.client_id not in set(leavers)]
    theta, cost = scenarios.scratch_retrain_baseline(cache.config, survivors, args.rounds)
    full_size, actual = count_cost(cache, leavers)
    body = {
        "leavers": sorted(leavers),
        "baseline_rounds": cost.rounds,
        "baseline_paper_mode_client_rounds": cost.paper_mode_client_rounds,
        "baseline_actual_client_rounds": cost.actual_client_rounds,
        "unlearn_paper_mode_client_rounds": full_size,
        "unlearn_actual_client_rounds": actual,
        "speedup_paper_mode": cost.paper_mode_client_rounds / full_size,
        "speedup_actual": cost.actual_client_rounds / actual,
        "model_digest": model_digest(theta),
    }
    return _report("baseline", cache.config, body, t0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedshard", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the shard hierarchy and write its cache")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="cache directory")
    p.add_argument("--no-a1", action="store_true", help="random merging instead of angle-balanced")
    p.add_argument("--no-a2", action="store_true", help="fixed rounds instead of adaptive")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("unlearn", help="remove clients from a cached run")
    p.add_argument("--cache", required=True)
    p.add_argument("--clients", required=True, help="comma-separated client ids")
    p.add_argument("--out", required=True, help="directory for the updated cache")
    p.add_argument("--verify", action="store_true", help="also retrain the tree from scratch and compare")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_unlearn)

    p = sub.add_parser("metrics", help="fairness scores of an unlearning step")
    p.add_argument("--cache", required=True, help="cache before unlearning")
    p.add_argument("--unlearned", required=True, help="cache after unlearning")
    p.add_argument("--sweep", choices=("count", "full"), default="count")
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--report")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("scenario", help="cascaded-leaving or poisoning experiment")
    p.add_argument("kind", choices=("cascade", "dpa"))
    p.add_argument("--config", required=True)
    p.add_argument("--unlearner", choices=("exact", "mock"))
    p.add_argument("--gamma", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_scenario)

    p = sub.add_parser("analyze", help="closed-form speedups next to counted costs")
    p.add_argument("--K", type=int)
    p.add_argument("--R", type=int, default=2)
    p.add_argument("--t0", type=int, default=5)
    p.add_argument("--t-min", type=int)
    p.add_argument("--t-max", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--p-prime", type=int)
    p.add_argument("--cache", help="read counts from a trained cache instead")
    p.add_argument("--leavers", help="comma-separated ids for the multi-leaver figures (with --cache)")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("baseline", help="flat FedAvg retraining over the survivors")
    p.add_argument("--cache", required=True)
    p.add_argument("--clients", required=True)
    p.add_argument("--rounds", type=int, help="rounds per stage (default: the run's T0)")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_baseline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        report = args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CSVParseError, SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CacheError as exc:
        print(f"cache error: {exc}", file=sys.stderr)
        return EXIT_CACHE
    except (RejectedRequestError, RejectedInputError) as exc:
        print(f"request error: {exc}", file=sys.stderr)
        return EXIT_REQUEST
    _emit(report, getattr(args, "report", None))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
