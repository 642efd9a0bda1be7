"""Experiment harnesses: cascaded leaving, unlearning-triggered poisoning, baselines."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numkit
from .datagen import ClientDataset, label_group_population
from .engine import FLCache, RunConfig, model_digest, run_training, train_shard
from .fairmetrics import FairnessInputs, fairness_report
from .numkit import RejectedInputError
from .unlearn import count_cost, structured_scratch, sweep_all_single_costs, unlearn

BASELINE_STAGE = -1  # stream key for flat FedAvg, disjoint from any tree stage


@dataclass(frozen=True)
class PayoffParams:
    """Leave-or-stay payoff settings.

    A remaining client leaves when its accuracy drop exceeds what it would
    forfeit by leaving (its post-unlearning accuracy) minus the prospective
    cost of its own later unlearning.  That cost is ``Z_c / max Z`` scaled by
    ``cost_weight``.  ``y_star`` / ``z`` override the derived per-client values.
    ``lam`` is carried for completeness; it appears on both sides and cancels.
    """

    cost_weight: float = 0.5
    lam: float = 0.0
    y_star: Mapping[int, float] | None = None
    z: Mapping[int, float] | None = None

    def __post_init__(self):
        if self.cost_weight < 0:
            raise RejectedInputError("cost_weight must be >= 0")


def leaves(delta_y: float, y_star: float, z: float, lam: float = 0.0) -> bool:
    stay = -delta_y - z + lam
    go = -y_star + lam
    return stay < go


@dataclass
class ScenarioReport:
    kind: str
    unlearner: str
    leavers: list[int]
    lc: int = 0
    decisions: dict[int, bool] = field(default_factory=dict)
    precision: float | None = None
    m_p: float = float("nan")
    m_e: float = float("nan")
    delta_y: dict[int, float] = field(default_factory=dict)
    model_digest: str = ""
    reference_digest: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.precision is not None and not 0.0 <= self.precision <= 1.0:
            raise ValueError("precision outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "unlearner": self.unlearner,
            "leavers": self.leavers,
            "LC": self.lc,
            "decisions": {str(k): v for k, v in sorted(self.decisions.items())},
            "precision": self.precision,
            "M_p": self.m_p,
            "M_e": self.m_e,
            "delta_y": {str(k): v for k, v in sorted(self.delta_y.items())},
            "model_digest": self.model_digest,
            "reference_digest": self.reference_digest,
            "master_seed": self.seed,
        }


def client_accuracy(theta, clients: Sequence[ClientDataset], spec) -> dict[int, float]:
    """Held-out accuracy of ``theta`` on each client's own test split."""
    return {c.client_id: numkit.evaluate(theta, c.test.features, c.test.labels, spec).accuracy
            for c in clients}


def similar_clients(alphas: Mapping[int, float], leavers: Sequence[int], remaining: Sequence[int],
                    n: int) -> list[int]:
    """The ``n`` remaining clients whose angle is closest to any leaver's."""
    dist = {r: min(abs(alphas[r] - alphas[l]) for l in leavers) for r in remaining}
    return sorted(sorted(dist, key=lambda r: (dist[r], r))[:n])


def mock_unfair_unlearner(
    cache: FLCache,
    leavers: Sequence[int],
    clients: Sequence[ClientDataset],
    gamma: int,
    ascent_lr: float | None = None,
    n_similar: int | None = None,
):
    """Exact unlearning followed by ``gamma`` gradient-ascent steps.

    The ascent runs on the pooled training data of the remaining clients
    closest in angle to the leavers (``n_similar``, default one per leaver),
    so those clients pay for the removal.  ``ascent_lr`` defaults to the
    training learning rate.  Returns ``(theta, new_cache, similar_ids)``.
    """
    if gamma < 0:
        raise RejectedInputError("gamma must be >= 0")
    new, theta, _ = unlearn(cache, leavers, clients)
    remaining = list(new.clients)
    n = len(leavers) if n_similar is None else n_similar
    victims = similar_clients(cache.client_alphas, leavers, remaining, min(n, len(remaining)))
    if gamma == 0:
        return theta, new, victims
    lr = cache.config.lr if ascent_lr is None else ascent_lr
    by_id = {c.client_id: c for c in clients}
    x = np.concatenate([by_id[v].train.features for v in victims])
    y = np.concatenate([by_id[v].train.labels for v in victims])
    theta = np.array(theta, copy=True)
    for _ in range(gamma):
        _, g = numkit.loss_and_grad(theta, x, y, cache.config.model)
        theta = theta + lr * g
    return theta, new, victims


def _unlearn_with(kind, cache, leavers, clients, gamma, ascent_lr):
    if kind == "exact":
        new, theta, _ = unlearn(cache, leavers, clients)
        return theta, new
    if kind == "mock":
        theta, new, _ = mock_unfair_unlearner(cache, leavers, clients, gamma, ascent_lr)
        return theta, new
    raise RejectedInputError(f"unknown unlearner {kind!r}")


def _fairness(cache, pre, post, leavers, remaining, costs=None):
    delta = {c: pre[c] - post[c] for c in sorted(pre)}
    alphas = {c: cache.client_alphas[c] for c in delta}
    inputs = FairnessInputs(delta, alphas, frozenset(remaining), frozenset(leavers),
                            costs or {})
    return delta, fairness_report(inputs)


def run_cascade(
    cache: FLCache,
    clients: Sequence[ClientDataset],
    leavers: Sequence[int],
    payoff: PayoffParams = PayoffParams(),
    unlearner: str = "exact",
    gamma: int = 0,
    ascent_lr: float | None = None,
) -> ScenarioReport:
    """Unlearn ``leavers`` and count the remaining clients that choose to follow."""
    spec = cache.config.model
    pre = client_accuracy(cache.final_model, clients, spec)
    leavers = sorted(leavers)
    if not leavers:
        return ScenarioReport("cascade", unlearner, [], 0, {c: False for c in pre},
                              model_digest=model_digest(cache.final_model), seed=cache.config.master_seed)
    theta, new = _unlearn_with(unlearner, cache, leavers, clients, gamma, ascent_lr)
    post = client_accuracy(theta, clients, spec)
    remaining = list(new.clients)

    if payoff.z is not None:
        z = dict(payoff.z)
    else:
        # prospective cost of each remaining client's own exit, on the updated tree
        costs = sweep_all_single_costs(new) if len(remaining) > 1 else {remaining[0]: 1.0}
        zmax = max(costs.values())
        z = {c: payoff.cost_weight * costs[c] / zmax for c in remaining}
    y_star = dict(payoff.y_star) if payoff.y_star is not None else post
    decisions = {c: leaves(pre[c] - post[c], y_star[c], z[c], payoff.lam) for c in remaining}

    z_c = {c: float(count_cost(cache, [c])[0]) for c in cache.clients}
    delta, fair = _fairness(cache, pre, post, leavers, remaining, z_c)
    return ScenarioReport(
        kind="cascade", unlearner=unlearner, leavers=leavers, lc=sum(decisions.values()),
        decisions=decisions, m_p=fair.m_p, m_e=fair.m_e, delta_y=delta,
        model_digest=model_digest(theta), seed=cache.config.master_seed,
    )


def cascade_fixture(config: RunConfig, n_leavers: int | None = None, minority_fraction: float = 0.25):
    """Two-label-group population, trained, plus a seeded draw of minority leavers.

    By default about 5/16 of the minority group leaves.
    """
    config = replace(config, data=replace(config.data, partition="label_groups",
                                          minority_fraction=minority_fraction))
    clients, minority = label_group_population(config.data, config.K, minority_fraction)
    cache = run_training(config, clients)
    n = n_leavers if n_leavers is not None else max(1, round(len(minority) * 5 / 16))
    rng = np.random.default_rng([config.master_seed, 0xCA5C])
    leavers = sorted(int(c) for c in rng.choice(minority, size=n, replace=False))
    return cache, clients, leavers


def run_dpa(
    config: RunConfig,
    attacker_fraction: float = 0.25,
    tau: float = 0.01,
    unlearner: str = "exact",
    gamma: int = 0,
    ascent_lr: float | None = None,
) -> ScenarioReport:
    """Attackers join with second-group data, then all ask to be unlearned.

    A remaining client counts as poisoned when its accuracy under the
    unlearned model falls more than ``tau`` below its accuracy under the
    model that never saw the attackers.  Precision is poisoned / K.
    """
    config = replace(config, data=replace(config.data, partition="label_groups",
                                          minority_fraction=attacker_fraction))
    clients, attackers = label_group_population(config.data, config.K, attacker_fraction)
    cache = run_training(config, clients)
    theta, new = _unlearn_with(unlearner, cache, attackers, clients, gamma, ascent_lr)
    reference = structured_scratch(cache, clients, attackers).final_model
    spec = config.model
    remaining = list(new.clients)
    live = [c for c in clients if c.client_id in set(remaining)]
    got = client_accuracy(theta, live, spec)
    ref = client_accuracy(reference, live, spec)
    decisions = {c: got[c] < ref[c] - tau for c in remaining}
    poisoned = sum(decisions.values())

    pre = client_accuracy(cache.final_model, clients, spec)
    post = client_accuracy(theta, clients, spec)
    delta, fair = _fairness(cache, pre, post, attackers, remaining)
    return ScenarioReport(
        kind="dpa", unlearner=unlearner, leavers=list(attackers), lc=poisoned, decisions=decisions,
        precision=poisoned / config.K, m_p=fair.m_p, delta_y=delta,
        model_digest=model_digest(theta), reference_digest=model_digest(reference),
        seed=config.master_seed,
    )


@dataclass
class BaselineCost:
    rounds: int
    paper_mode_client_rounds: int
    actual_client_rounds: int


def baseline_rounds(config: RunConfig) -> int:
    """Per-stage round count used by the flat baseline (T0)."""
    if config.fixed_rounds is not None:
        return config.fixed_rounds
    rr = config.round_range
    return int((rr.low + rr.high + 1) // 2)


def scratch_retrain_baseline(
    config: RunConfig, survivors: Sequence[ClientDataset], rounds_per_stage: int | None = None
):
    """Flat FedAvg over ``survivors`` for P * T0 rounds from the shared initial model.

    The full-size cost charges all K clients for every round; actual cost
    charges only the survivors.
    """
    if not survivors:
        raise RejectedInputError("need at least one surviving client")
    t0 = baseline_rounds(config) if rounds_per_stage is None else rounds_per_stage
    total = config.P * t0
    theta0 = numkit.init_params(config.model, config.master_seed)
    res = train_shard(theta0, survivors, total, config, BASELINE_STAGE, 0)
    cost = BaselineCost(total, total * config.K, total * len(survivors))
    return res.theta, cost


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    """Same experiment, different master and data seeds."""
    return replace(config, master_seed=seed, data=replace(config.data, seed=seed))


def median(values) -> float:
    return float(statistics.median(values))
