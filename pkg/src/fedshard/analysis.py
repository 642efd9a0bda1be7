"""Closed-form speedups of path-only retraining, checked against counted client-rounds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .engine import FLCache, num_stages
from .numkit import RejectedInputError
from .unlearn import _p_prime, count_cost


class ComplexityError(AssertionError):
    pass


def r1(K: int, R: int) -> float:
    """Train-to-unlearn cost ratio for one leaver under uniform rounds."""
    if K < 2 or R < 2:
        raise RejectedInputError("need K >= 2 and R >= 2")
    return (R - 1) / R * (K / (K - 1)) * num_stages(K, R)


def r1_bounds(K: int, R: int, t0_mean: float, t_min: float, t_max: float) -> tuple[float, float]:
    if not 0 < t_min <= t0_mean <= t_max:
        raise RejectedInputError(f"need 0 < T_min <= T0 <= T_max, got {t_min}, {t0_mean}, {t_max}")
    base = r1(K, R)
    return base * t0_mean / t_max, base * t0_mean / t_min


def r2_bounds(K: int, R: int, m: int, p_prime: int) -> tuple[float, float, bool]:
    """(lower, upper, inconsistent) for m simultaneous leavers.

    The lower value comes from the closed form and can exceed the upper one
    for small R; ``inconsistent`` flags that case instead of hiding it.
    """
    P = num_stages(K, R)
    if not 1 <= m < K:
        raise RejectedInputError(f"need 1 <= m < K, got m={m}")
    if not 0 <= p_prime < P:
        raise RejectedInputError(f"need 0 <= p' < P={P}, got {p_prime}")
    upper = float(m)
    lower = R / (R - 1) * ((K - 1) / K) * m / (P - p_prime)
    return lower, upper, lower > upper


def uniform_joins(K: int, T: int, span: float = 0.9) -> list[int]:
    """Join rounds evenly spread over [0, span*T], first client at round 0."""
    if K == 1:
        return [0]
    return [int(math.floor(span * T * c / (K - 1))) for c in range(K)]


def staggered_cost_model(K: int, T: int, join_rounds: Sequence[int]) -> dict[int, float]:
    """Cost of removing each client when everything after its join is retrained."""
    if len(join_rounds) != K:
        raise RejectedInputError("one join round per client required")
    for j in join_rounds:
        if not 0 <= j < T:
            raise RejectedInputError(f"join round {j} outside [0, {T})")
    return {c: float((T - j) * K) for c, j in enumerate(join_rounds)}


@dataclass
class ComplexityReport:
    un_ratios: dict[str, float]
    mun_steps: dict[str, float]
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def check(self) -> None:
        if self.violations:
            raise ComplexityError("; ".join(self.violations))


def validate_complexity(
    un_costs: Mapping[int, float],
    mun_costs: Mapping[int, float] | None = None,
    K: int | None = None,
    R: int = 2,
    t0: float | None = None,
    band: tuple[float, float] = (1.9, 2.1),
) -> ComplexityReport:
    """Check linear growth of single-leaver cost in K and log growth in m.

    ``un_costs`` maps K to the single-leaver cost; consecutive K must double.
    ``mun_costs`` maps m to a multi-leaver cost at fixed ``K``; each doubling
    of m may add at most ``K * t0 * log_R 2``.
    """
    violations = []
    ratios = {}
    ks = sorted(un_costs)
    for a, b in zip(ks, ks[1:]):
        if b != 2 * a:
            raise RejectedInputError(f"K values must double, got {a} -> {b}")
        r = un_costs[b] / un_costs[a]
        ratios[f"{a}->{b}"] = r
        if not band[0] <= r <= band[1]:
            violations.append(f"T_un({b})/T_un({a}) = {r:.4f} outside [{band[0]}, {band[1]}]")
    steps = {}
    if mun_costs:
        if K is None or t0 is None:
            raise RejectedInputError("multi-leaver check needs K and t0")
        limit = K * t0 * math.log(2, R)
        ms = sorted(mun_costs)
        for a, b in zip(ms, ms[1:]):
            d = mun_costs[b] - mun_costs[a]
            steps[f"{a}->{b}"] = d
            if b == 2 * a and d > limit + 1e-9:
                violations.append(f"T_mun({b}) - T_mun({a}) = {d} exceeds {limit}")
    return ComplexityReport(ratios, steps, violations)


def mean_rounds(cache: FLCache) -> tuple[float, int, int]:
    """(client-weighted mean rounds, min rounds, max rounds) over stages >= 1."""
    nodes = [n for st in cache.stages[1:] for n in st if not n.dropped]
    total = sum(n.rounds * len(n.client_ids) for n in nodes)
    weight = sum(len(n.client_ids) for n in nodes)
    rounds = [n.rounds for n in nodes]
    return total / weight, min(rounds), max(rounds)


def spread_leavers(cache: FLCache, m: int) -> list[int]:
    """m leavers as far apart in the tree as possible (worst case for sharing)."""
    clients = list(cache.clients)
    if not 1 <= m < len(clients):
        raise RejectedInputError(f"need 1 <= m < {len(clients)}")
    # leaf order of the merge tree keeps subtree members contiguous
    order = [c for n in _leaf_order(cache) for c in n]
    step = len(order) / m
    return sorted(order[int(i * step)] for i in range(m))


def packed_leavers(cache: FLCache, m: int) -> list[int]:
    """m leavers as close together in the tree as possible (best case)."""
    order = [c for n in _leaf_order(cache) for c in n]
    return sorted(order[:m])


def _leaf_order(cache: FLCache) -> list[tuple[int, ...]]:
    def walk(p, idx):
        node = cache.stages[p][idx]
        if p == 0:
            return [node.client_ids]
        out = []
        for ch in node.children:
            out.extend(walk(p - 1, ch))
        return out

    return walk(len(cache.stages) - 1, 0)


@dataclass
class EfficiencyReport:
    K: int
    R: int
    P: int
    r1: float
    r1_lower: float
    r1_upper: float
    t_train: int
    t_un: float  # mean pre-removal-size single-leaver cost
    measured_r1: float
    min_client_r1: float
    max_client_r1: float
    beta: float
    m: int | None = None
    t_mun: int | None = None
    t_one_by_one: int | None = None
    measured_r2: float | None = None
    p_prime: int | None = None
    r2_minus: float | None = None
    r2_plus: float | None = None
    r2_inconsistent: bool | None = None

    @property
    def r1_within_bounds(self) -> bool:
        tol = 1e-12 * self.r1
        return self.r1_lower - tol <= self.min_client_r1 and self.max_client_r1 <= self.r1_upper + tol

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r1_within_bounds"] = self.r1_within_bounds
        return d


def efficiency_report(cache: FLCache, leavers: Sequence[int] | None = None) -> EfficiencyReport:
    """Analytic quantities next to client-round counts read off ``cache``."""
    K, R, P = len(cache.clients), cache.R, cache.P
    t_train = cache.training_client_rounds()
    t0, t_min, t_max = mean_rounds(cache)
    singles = {c: count_cost(cache, [c])[0] for c in cache.clients}
    per_client = [t_train / v for v in singles.values()]
    t_un = sum(singles.values()) / len(singles)
    lo, hi = r1_bounds(K, R, t0, t_min, t_max)
    rep = EfficiencyReport(
        K=K, R=R, P=P, r1=r1(K, R), r1_lower=lo, r1_upper=hi, t_train=t_train, t_un=t_un,
        measured_r1=t_train / t_un, min_client_r1=min(per_client), max_client_r1=max(per_client),
        beta=1.0 - t_min / t0,
    )
    if leavers:
        leavers = sorted(leavers)
        multi = count_cost(cache, leavers)[0]
        one_by_one = sum(singles[c] for c in leavers)
        pp = _p_prime(cache, set(leavers))
        lower, upper, bad = r2_bounds(K, R, len(leavers), min(pp, P - 1))
        rep.m, rep.t_mun, rep.t_one_by_one = len(leavers), multi, one_by_one
        rep.measured_r2, rep.p_prime = one_by_one / multi, pp
        rep.r2_minus, rep.r2_plus, rep.r2_inconsistent = lower, upper, bad
    return rep


def balanced_tree_counts(K: int, R: int, t0: int) -> tuple[int, dict[int, int]]:
    """(T_train, per-client T_un) for contiguous R-ary merging with uniform rounds.

    Pure counting: at stage p client c shares a shard with the clients in
    the same block of R**p consecutive ids.
    """
    P = num_stages(K, R)
    t_train = t0 * K * P
    t_un = {}
    for c in range(K):
        total = 0
        for p in range(1, P + 1):
            block = R**p
            start = (c // block) * block
            total += t0 * (min(start + block, K) - start)
        t_un[c] = total
    return t_train, t_un
