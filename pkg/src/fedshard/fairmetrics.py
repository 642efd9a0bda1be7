"""Performance-fairness (M_p) and efficiency-fairness (M_e) scores for unlearning."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .numkit import RejectedInputError

DEFAULT_EPS = 1e-6
ALPHA_FLOOR = 1e-9
MAX_ORACLE_SIZE = 8


@dataclass
class FairnessInputs:
    delta_y: Mapping[int, float]  # accuracy drop per client, pre minus post
    alphas: Mapping[int, float]
    remaining: frozenset[int]
    leaving: frozenset[int]
    costs: Mapping[int, float] = field(default_factory=dict)
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        self.remaining = frozenset(self.remaining)
        self.leaving = frozenset(self.leaving)
        if self.remaining & self.leaving:
            raise RejectedInputError("a client cannot both leave and remain")
        if not self.remaining:
            raise RejectedInputError("at least one client must remain")

    @property
    def clients(self) -> list[int]:
        return sorted(self.remaining | self.leaving)


@dataclass
class FairnessReport:
    m_p: float
    m_e: float
    mp_terms: dict[int, float]
    me_terms: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "M_p": self.m_p,
            "M_e": self.m_e,
            "mp_terms": {str(k): v for k, v in self.mp_terms.items()},
            "me_terms": {str(k): v for k, v in self.me_terms.items()},
        }


def dis(a1: float, a2: float) -> float:
    return abs(a1 - a2)


def normalize(values: Sequence[float], eps: float = DEFAULT_EPS) -> np.ndarray:
    """Min-max map onto [eps, 1]; a constant input maps to eps everywhere.

    ``eps + (1 - eps) * (x - min) / (max - min)`` keeps the top value at
    exactly 1 and is unchanged by any positive affine rescaling of ``x``.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise RejectedInputError("nothing to normalize")
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0.0:
        return np.full(x.shape, eps)
    return eps + (1.0 - eps) * (x - lo) / (hi - lo)


def f_oplus(x: float, y: float) -> float:
    """(x + y)(1/x + 1/y); minimum 4 at x == y."""
    if x <= 0 or y <= 0:
        raise RejectedInputError("f_oplus needs positive inputs")
    return (x + y) * (1.0 / x + 1.0 / y)


def uniqueness(alphas: Mapping[int, float], remaining: Iterable[int]) -> dict[int, float]:
    """Distance from each client to its nearest *other* remaining client."""
    remaining = sorted(remaining)
    out = {}
    for c, a in alphas.items():
        others = [alphas[r] for r in remaining if r != c]
        if not others:
            raise RejectedInputError(f"client {c} has no other remaining client to compare with")
        out[c] = min(dis(a, b) for b in others)
    return out


def mp_terms_from_values(delta_y: Sequence[float], uniq: Sequence[float], eps: float = DEFAULT_EPS) -> np.ndarray:
    dy = normalize(delta_y, eps)
    un = normalize(uniq, eps)
    return np.array([f_oplus(a, b) for a, b in zip(dy, un)])


def m_p_from_values(delta_y, uniq, eps: float = DEFAULT_EPS) -> float:
    return float(mp_terms_from_values(delta_y, uniq, eps).mean())


def mp_terms(inputs: FairnessInputs) -> dict[int, float]:
    ids = inputs.clients
    alphas = {c: inputs.alphas[c] for c in ids}
    uniq = uniqueness(alphas, inputs.remaining)
    terms = mp_terms_from_values([inputs.delta_y[c] for c in ids], [uniq[c] for c in ids], inputs.eps)
    return dict(zip(ids, terms.tolist()))


def m_p(inputs: FairnessInputs, subset: Iterable[int] | None = None) -> float:
    """Mean f_oplus term.  ``subset`` averages over a group while keeping the
    normalisation computed on the full population."""
    terms = mp_terms(inputs)
    keys = sorted(subset) if subset is not None else sorted(terms)
    return sum(terms[c] for c in keys) / len(keys)


def me_terms(costs: Mapping[int, float], alphas: Mapping[int, float] | None = None) -> dict[int, float]:
    """(Z_avg - Z_c)^2 / |alpha_c|, with |alpha_c| floored at 1e-9.

    ``alphas=None`` gives the unweighted variant (every alpha taken as 1).
    """
    ids = sorted(costs)
    if not ids:
        raise RejectedInputError("no costs given")
    z_avg = sum(costs[c] for c in ids) / len(ids)
    out = {}
    for c in ids:
        w = 1.0 if alphas is None else max(abs(alphas[c]), ALPHA_FLOOR)
        out[c] = (z_avg - costs[c]) ** 2 / w
    return out


def m_e(costs: Mapping[int, float], alphas: Mapping[int, float] | None = None) -> float:
    terms = me_terms(costs, alphas)
    return sum(terms.values()) / len(terms)


def fairness_report(inputs: FairnessInputs) -> FairnessReport:
    pt = mp_terms(inputs)
    if inputs.costs:
        et = me_terms(inputs.costs, {c: inputs.alphas[c] for c in inputs.costs})
        me = sum(et.values()) / len(et)
    else:
        et, me = {}, math.nan
    return FairnessReport(sum(pt.values()) / len(pt), me, pt, et)


def rank_alignment_oracle(delta_y: Sequence[float], uniq: Sequence[float], eps: float = DEFAULT_EPS):
    """Brute-force the assignment of ``delta_y`` values to clients minimising M_p.

    Returns ``(assignment, score)`` where ``assignment[i]`` is the drop given to
    the client with uniqueness ``uniq[i]``.  First minimiser in
    lexicographic permutation order wins ties.
    """
    n = len(delta_y)
    if n != len(uniq):
        raise RejectedInputError("need as many drops as uniqueness values")
    if n > MAX_ORACLE_SIZE:
        raise RejectedInputError(f"oracle limited to n <= {MAX_ORACLE_SIZE}, got {n}")
    best, best_score = None, math.inf
    for perm in itertools.permutations(range(n)):
        assign = [delta_y[i] for i in perm]
        score = m_p_from_values(assign, uniq, eps)
        if score < best_score:
            best, best_score = assign, score
    return best, best_score
