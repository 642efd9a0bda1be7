"""Exact client unlearning by retraining only the shards on the leavers' paths."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datagen import ClientDataset
from .engine import (
    FLCache,
    TreePlan,
    clone_cache,
    init_super_shard,
    model_digest,
    run_training,
    stage_alphas,
    train_shard,
)


class RejectedRequestError(ValueError):
    pass


@dataclass
class CostLedger:
    leavers: tuple[int, ...]
    affected: dict[int, list[int]]  # stage -> shard indices
    paper_mode_client_rounds: int
    actual_client_rounds: int
    p_prime: int
    wall_clock: float = 0.0
    per_client: dict[int, float] = field(default_factory=dict)

    @property
    def z_avg(self) -> float:
        if not self.per_client:
            return float("nan")
        return sum(self.per_client.values()) / len(self.per_client)


def validate_request(cache: FLCache, leavers: Iterable[int]) -> tuple[int, ...]:
    leavers = list(leavers)
    if not leavers:
        raise RejectedRequestError("no clients to unlearn")
    if len(set(leavers)) != len(leavers):
        raise RejectedRequestError(f"duplicate client ids in request: {sorted(leavers)}")
    present = set(cache.clients)
    unknown = sorted(set(leavers) - present)
    if unknown:
        raise RejectedRequestError(f"unknown client ids: {unknown}")
    if len(present) - len(leavers) < 1:
        raise RejectedRequestError("at least one client must remain")
    return tuple(sorted(leavers))


def find_affected(cache: FLCache, leavers: Iterable[int]) -> dict[int, list[int]]:
    """Per stage (1..P): indices of shards holding any leaving client."""
    gone = set(validate_request(cache, leavers))
    return {
        p: [n.index for n in cache.stages[p] if gone.intersection(n.client_ids)]
        for p in range(1, len(cache.stages))
    }


def _p_prime(cache: FLCache, gone: set[int]) -> int:
    """Last stage at which some live shard contains no leaver."""
    best = 0
    for p, st in enumerate(cache.stages):
        if any(n.client_ids and not gone.intersection(n.client_ids) for n in st):
            best = p
    return best


def count_cost(cache: FLCache, leavers: Iterable[int]) -> tuple[int, int]:
    """(pre-removal size, post-removal size) client-rounds of unlearning ``leavers``; no training."""
    gone = set(leavers)
    full_size = actual = 0
    for st in cache.stages[1:]:
        for n in st:
            if gone.intersection(n.client_ids):
                full_size += n.rounds * len(n.client_ids)
                actual += n.rounds * len(set(n.client_ids) - gone)
    return full_size, actual


def unlearn(
    cache: FLCache, leavers: Sequence[int], clients: Sequence[ClientDataset]
) -> tuple[FLCache, np.ndarray, CostLedger]:
    """Remove ``leavers`` and retrain their root paths from the cached tree.

    Unaffected shards keep their cached parameters.  Affected shards restart
    from the re-aggregated models of their surviving children, with their
    cached round count and the original keyed random streams.  Shards left
    without clients are dropped.
    """
    gone_t = validate_request(cache, leavers)
    gone = set(gone_t)
    by_id = {c.client_id: c for c in clients}
    missing = [c for c in cache.clients if c not in gone and c not in by_id]
    if missing:
        raise RejectedRequestError(f"no data supplied for remaining clients {missing[:5]}")
    affected = {p: [n.index for n in cache.stages[p] if gone.intersection(n.client_ids)]
                for p in range(1, len(cache.stages))}
    full_size, actual = count_cost(cache, gone)
    p_prime = _p_prime(cache, gone)

    t0 = time.perf_counter()
    new = clone_cache(cache)
    for n in new.stages[0]:
        if gone.intersection(n.client_ids):
            n.client_ids, n.weight, n.theta_final = (), 0.0, None
    config = new.config
    for p in range(1, len(new.stages)):
        prev = new.stages[p - 1]
        hit = set(affected[p])
        if not hit:
            continue
        inits = {}
        for n in new.stages[p]:
            if n.dropped:
                continue
            kids = [prev[i] for i in n.children]
            if n.index not in hit:
                inits[n.index], _ = init_super_shard(kids)
                continue
            n.client_ids = tuple(c for c in n.client_ids if c not in gone)
            if not n.client_ids:
                n.weight, n.theta_final = 0.0, None
                continue
            theta_init, n.weight = init_super_shard(kids)
            inits[n.index] = theta_init
            res = train_shard(theta_init, [by_id[c] for c in n.client_ids], n.rounds, config, p, n.index)
            n.theta_final = res.theta
            for cid, a in res.client_alphas.items():
                new.client_alphas[cid] = a
                new.alpha_stage[cid] = p
        stage_alphas(new.stages[p], inits)
    for cid in gone:
        new.client_alphas.pop(cid, None)
        new.alpha_stage.pop(cid, None)
    new.removed = tuple(sorted(set(cache.removed) | gone))
    ledger = CostLedger(gone_t, affected, full_size, actual, p_prime, time.perf_counter() - t0)
    return new, new.final_model, ledger


def unlearn_multi(cache, leavers, clients):
    """Simultaneous removal of m >= 2 clients; same semantics as :func:`unlearn`."""
    if len(list(leavers)) < 2:
        raise RejectedRequestError("multi-client unlearning needs at least two leavers")
    return unlearn(cache, leavers, clients)


def structured_scratch(
    cache: FLCache, clients: Sequence[ClientDataset], exclude: Iterable[int]
) -> FLCache:
    """Retrain the whole recorded tree from the initial model without ``exclude``."""
    gone = set(exclude) | set(cache.removed)
    keep = [c for c in clients if c.client_id not in gone]
    return run_training(cache.config, keep, plan=TreePlan.from_cache(cache))


def sweep_all_single_costs(
    cache: FLCache, mode: str = "count", clients: Sequence[ClientDataset] | None = None
) -> dict[int, float]:
    """Per-client unlearning cost Z_c.

    ``count``: pre-removal-size client-rounds read off the tree, no training.
    ``full``: wall-clock seconds of an actual :func:`unlearn` per client.
    """
    if mode == "count":
        return {c: float(count_cost(cache, [c])[0]) for c in cache.clients}
    if mode == "full":
        if clients is None:
            raise ValueError("full-retrain sweep needs client data")
        return {c: unlearn(cache, [c], clients)[2].wall_clock for c in cache.clients}
    raise ValueError(f"unknown sweep mode {mode!r}")


def unlearn_report(cache: FLCache, ledger: CostLedger, theta: np.ndarray) -> dict:
    return {
        "schema_version": 1,
        "config_digest": cache.config_digest,
        "master_seed": cache.config.master_seed,
        "request": list(ledger.leavers),
        "affected": {str(p): idx for p, idx in ledger.affected.items()},
        "paper_mode_client_rounds": ledger.paper_mode_client_rounds,
        "actual_client_rounds": ledger.actual_client_rounds,
        "p_prime": ledger.p_prime,
        "wall_clock": ledger.wall_clock,
        "model_digest": model_digest(theta),
    }
