"""Shard merging (direction-aware clustering) and per-shard round allocation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import RejectedInputError

DEFAULT_ROUND_RANGE = (4, 7)


@dataclass(frozen=True)
class RoundRange:
    low: int = DEFAULT_ROUND_RANGE[0]
    high: int = DEFAULT_ROUND_RANGE[1]

    def __post_init__(self):
        if not 1 <= self.low <= self.high:
            raise RejectedInputError(f"invalid round range [{self.low}, {self.high}]")


@dataclass(frozen=True)
class MergePlan:
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen = [i for g in self.groups for i in g]
        if len(seen) != len(set(seen)):
            raise RejectedInputError("merge groups overlap")

    @property
    def num_groups(self) -> int:
        return len(self.groups)


def cluster_shards(alphas, max_iter: int = 100) -> list[int]:
    """1-D k-means (k=3) on signed angles.

    Returns a cluster label per shard: 0 = large negative, 1 = near average,
    2 = large positive.  Centroids start at the 1/6, 3/6, 5/6 quantiles;
    distance ties go to the lower cluster.
    """
    a = np.asarray(alphas, dtype=np.float64)
    if a.size == 0:
        return []
    if float(a.max() - a.min()) < 1e-12:
        return [1] * a.size
    centroids = np.quantile(a, [1 / 6, 3 / 6, 5 / 6])
    labels = np.zeros(a.size, dtype=np.int64)
    for it in range(max_iter):
        new = np.argmin(np.abs(a[:, None] - centroids[None, :]), axis=1)
        if it > 0 and np.array_equal(new, labels):
            break
        labels = new
        for k in range(3):
            members = a[labels == k]
            if members.size:
                centroids[k] = members.mean()
    # relabel so cluster ids follow ascending centroid
    rank = np.argsort(np.argsort(centroids, kind="stable"), kind="stable")
    return [int(rank[k]) for k in labels]


def random_partition(n: int, R: int, seed) -> MergePlan:
    """Seeded shuffle chunked into groups of R (last group may be short)."""
    perm = np.random.default_rng(seed).permutation(n)
    groups = [tuple(sorted(int(i) for i in perm[k : k + R])) for k in range(0, n, R)]
    return MergePlan(tuple(groups))


def merge_shards_a1(alphas, client_counts, R: int, seed) -> MergePlan:
    """Direction-balanced merge of previous-stage shards into ceil(N/R) groups.

    Near-average shards are dealt first, each to the currently smallest
    group.  Then the smallest group takes a negative-angle shard when its
    running mean angle is >= 0 and a positive-angle shard otherwise.  Among
    the members of the chosen cluster, the one that leaves the smallest
    max-min spread of per-group client counts wins (lowest index on ties).
    Anything left once one extreme cluster is exhausted goes to the smallest
    open group by the same rule.  If all angles coincide (e.g. the first
    stage) the result is a seeded random partition.
    """
    alphas = [float(x) for x in alphas]
    counts = [int(c) for c in client_counts]
    n = len(alphas)
    if n != len(counts):
        raise RejectedInputError("one client count per shard required")
    if R < 2:
        raise RejectedInputError("merging rate must be >= 2")
    if n == 0:
        return MergePlan(())
    if max(alphas) - min(alphas) < 1e-12:
        return random_partition(n, R, seed)

    labels = cluster_shards(alphas)
    clusters = [sorted(i for i in range(n) if labels[i] == k) for k in range(3)]
    n_groups = math.ceil(n / R)
    groups: list[list[int]] = [[] for _ in range(n_groups)]
    load = [0] * n_groups

    def smallest() -> int:
        open_ = [g for g in range(n_groups) if len(groups[g]) < R]
        return min(open_, key=lambda g: (len(groups[g]), g))

    def allocate(g: int, cluster: list[int]) -> None:
        best, best_spread = None, None
        for cand in cluster:
            trial = list(load)
            trial[g] += counts[cand]
            spread = max(trial) - min(trial)
            if best_spread is None or spread < best_spread:
                best, best_spread = cand, spread
        cluster.remove(best)
        groups[g].append(best)
        load[g] += counts[best]

    while clusters[1]:
        allocate(smallest(), clusters[1])
    while clusters[0] and clusters[2]:
        g = smallest()
        mean = sum(alphas[i] for i in groups[g]) / len(groups[g]) if groups[g] else 0.0
        allocate(g, clusters[0] if mean >= 0 else clusters[2])
    rest = sorted(clusters[0] + clusters[2])
    while rest:
        allocate(smallest(), rest)
    return MergePlan(tuple(tuple(sorted(g)) for g in groups if g))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def allocate_rounds_a2(child_alphas: list[list[float]], rr: RoundRange) -> list[int]:
    """More rounds for shards whose children agree more (lower angle variance).

    Linear map from the stage's variance range onto [rr.low, rr.high]:
    the lowest-variance shard gets ``rr.high``, the highest gets ``rr.low``.
    """
    if not child_alphas:
        raise RejectedInputError("need at least one shard")
    var = [float(np.var(np.asarray(a, dtype=np.float64))) for a in child_alphas]
    vmin, vmax = min(var), max(var)
    span = rr.high - rr.low
    if vmax - vmin < 1e-12:
        return [_round_half_up((rr.low + rr.high) / 2)] * len(var)
    out = []
    for v in var:
        t = rr.low + span * (vmax - v) / (vmax - vmin)
        out.append(min(rr.high, max(rr.low, _round_half_up(t))))
    return out


def allocate_rounds_literal(child_alphas: list[list[float]], rr: RoundRange) -> list[float]:
    """The inverse-ratio form taken at face value, for comparison only.

    Yields values >= rr.high and ``inf`` for the lowest-variance shard, so it
    is never used to drive training.
    """
    var = [float(np.var(np.asarray(a, dtype=np.float64))) for a in child_alphas]
    vmin, vmax = min(var), max(var)
    out = []
    for v in var:
        if v - vmin <= 0.0:
            out.append(math.inf)
        else:
            out.append((vmax - vmin) / (v - vmin) * (rr.high - rr.low) + rr.low)
    return out


def estimate_round_range(observed_rounds=None) -> RoundRange:
    """(min, max) of pilot convergence rounds; [4, 7] when no pilot was run."""
    if not observed_rounds:
        return RoundRange(*DEFAULT_ROUND_RANGE)
    obs = [int(t) for t in observed_rounds]
    return RoundRange(max(1, min(obs)), max(1, max(obs)))
