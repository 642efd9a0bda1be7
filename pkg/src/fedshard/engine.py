"""Hierarchical shard training and the parameter cache that makes unlearning cheap.

Stage 0 holds one shard per client, all starting from the same random model.
Each later stage merges up to R shards of the previous stage, initialises the
merged shard with the weighted average of its children's models and runs
FedAvg inside it.  After ceil(log_R K) stages one shard holds every client.

Every reduction runs in ascending id order and every random stream is keyed
by (seed, stage, shard, round, client), so training a shard again from the
same inputs reproduces its parameters bit for bit.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit
from .adaptive import (
    MergePlan,
    RoundRange,
    allocate_rounds_a2,
    estimate_round_range,
    merge_shards_a1,
    random_partition,
)
from .datagen import ClientDataset, DataConfig
from .numkit import DegenerateVectorError, ModelSpec, RejectedInputError

log = logging.getLogger(__name__)

CACHE_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


class CacheError(Exception):
    pass


class CacheVersionError(CacheError):
    pass


class CacheDigestError(CacheError):
    pass


class CacheTruncatedError(CacheError):
    pass


def num_stages(K: int, R: int) -> int:
    """Smallest P with R**P >= K (integer arithmetic, no float log)."""
    if K < 1 or R < 2:
        raise RejectedInputError("need K >= 1 and R >= 2")
    P, reach = 0, 1
    while reach < K:
        reach *= R
        P += 1
    return P


@dataclass(frozen=True)
class RunConfig:
    K: int
    R: int = 2
    model: ModelSpec = field(default_factory=lambda: ModelSpec(8, 4))
    data: DataConfig = field(default_factory=DataConfig)
    lr: float = 0.1
    local_steps: int = 5
    master_seed: int = 0
    fixed_rounds: int | None = 5  # None -> adaptive rounds over round_range
    round_range: RoundRange = field(default_factory=RoundRange)
    merge: str = "a1"  # "a1" | "random"
    batch_size: int | None = None

    def __post_init__(self):
        if self.K < 2:
            raise RejectedInputError("K must be >= 2")
        if self.R < 2:
            raise RejectedInputError("R must be >= 2")
        if self.merge not in ("a1", "random"):
            raise RejectedInputError(f"unknown merge policy {self.merge!r}")
        if self.fixed_rounds is not None and self.fixed_rounds < 0:
            raise RejectedInputError("fixed_rounds must be >= 0")
        if self.local_steps < 1:
            raise RejectedInputError("local_steps must be >= 1")
        if self.model.input_dim != self.data.input_dim or self.model.num_labels != self.data.num_labels:
            raise RejectedInputError("model and data dimensions disagree")

    @property
    def P(self) -> int:
        return num_stages(self.K, self.R)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "R": self.R,
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "lr": self.lr,
            "local_steps": self.local_steps,
            "master_seed": self.master_seed,
            "fixed_rounds": self.fixed_rounds,
            "round_range": [self.round_range.low, self.round_range.high],
            "merge": self.merge,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelSpec(**d["model"])
        d["data"] = DataConfig(**d["data"])
        d["round_range"] = RoundRange(*d["round_range"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ShardNode:
    stage: int
    index: int
    client_ids: tuple[int, ...]
    children: tuple[int, ...]
    weight: float
    rounds: int
    alpha: float = 0.0
    alpha_signed: float = 0.0
    theta_final: np.ndarray | None = None

    @property
    def dropped(self) -> bool:
        return not self.client_ids


@dataclass
class FLCache:
    config: RunConfig
    theta0: np.ndarray
    stages: list[list[ShardNode]]
    client_alphas: dict[int, float]
    alpha_stage: dict[int, int] = field(default_factory=dict)
    removed: tuple[int, ...] = ()

    @property
    def R(self) -> int:
        return self.config.R

    @property
    def P(self) -> int:
        return len(self.stages) - 1

    @property
    def config_digest(self) -> str:
        return self.config.digest()

    @property
    def final_model(self) -> np.ndarray:
        return self.stages[-1][0].theta_final

    @property
    def clients(self) -> tuple[int, ...]:
        return self.stages[-1][0].client_ids

    def shard_of(self, client_id: int, stage: int) -> ShardNode:
        for node in self.stages[stage]:
            if client_id in node.client_ids:
                return node
        raise KeyError(client_id)

    def blob_count(self) -> int:
        return 1 + sum(1 for st in self.stages[1:] for n in st if n.theta_final is not None)

    def training_client_rounds(self) -> int:
        return sum(n.rounds * len(n.client_ids) for st in self.stages[1:] for n in st)


def stream_seed(master_seed: int, stage: int, shard: int, rnd: int, client: int) -> int:
    key = f"{master_seed}:{stage}:{shard}:{rnd}:{client}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def weighted_average(thetas: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """sum(w_i * theta_i) / sum(w_i), accumulated in the order given."""
    if not thetas:
        raise RejectedInputError("nothing to average")
    if len(thetas) == 1:
        return np.array(thetas[0], copy=True)
    acc = np.zeros_like(thetas[0])
    total = 0.0
    for t, w in zip(thetas, weights):
        acc = acc + w * t
        total += w
    return acc / total


def build_initial_stage(client_ids: Sequence[int], theta0: np.ndarray) -> list[ShardNode]:
    ids = sorted(int(c) for c in client_ids)
    if len(ids) < 2:
        raise RejectedInputError("need at least two clients")
    return [
        ShardNode(stage=0, index=i, client_ids=(c,), children=(), weight=1.0, rounds=0,
                  alpha=0.0, alpha_signed=0.0, theta_final=theta0)
        for i, c in enumerate(ids)
    ]


def init_super_shard(children: Sequence[ShardNode]) -> tuple[np.ndarray, float]:
    """Weighted average of the children's models, children in index order."""
    live = sorted((c for c in children if not c.dropped), key=lambda c: c.index)
    if not live:
        raise RejectedInputError("super-shard has no live children")
    theta = weighted_average([c.theta_final for c in live], [c.weight for c in live])
    return theta, float(sum(c.weight for c in live))


@dataclass
class ShardResult:
    theta: np.ndarray
    client_alphas: dict[int, float]
    round_losses: list[float]


def _safe_angle(u, v, what: str) -> float:
    try:
        return numkit.angle_between(u, v)
    except DegenerateVectorError:
        log.warning("zero update while computing %s; angle set to 0", what)
        return 0.0


def train_shard(
    theta_init: np.ndarray,
    clients: Sequence[ClientDataset],
    rounds: int,
    config: RunConfig,
    stage: int,
    index: int,
    track_loss: bool = False,
) -> ShardResult:
    """FedAvg inside one shard: local training, then sample-count weighted mean."""
    clients = sorted(clients, key=lambda c: c.client_id)
    if not clients or any(len(c.train) == 0 for c in clients):
        raise RejectedInputError(f"shard ({stage}, {index}) has a client without data")
    weights = [float(len(c.train)) for c in clients]
    theta = np.array(theta_init, copy=True)
    alphas: dict[int, float] = {}
    losses: list[float] = []
    for t in range(rounds):
        locals_ = []
        for c in clients:
            rng = None
            if config.batch_size is not None:
                rng = np.random.default_rng(stream_seed(config.master_seed, stage, index, t, c.client_id))
            locals_.append(
                numkit.local_train(theta, c.train.features, c.train.labels, config.local_steps,
                                   config.lr, config.model, config.batch_size, rng)
            )
        new = weighted_average(locals_, weights)
        if t == rounds - 1:
            agg = new - theta
            for c, loc in zip(clients, locals_):
                alphas[c.client_id] = _safe_angle(loc - theta, agg, f"client {c.client_id} angle")
        theta = new
        if track_loss:
            losses.append(_shard_loss(theta, clients, weights, config.model))
    return ShardResult(theta, alphas, losses)


def _shard_loss(theta, clients, weights, spec) -> float:
    total = 0.0
    for c, w in zip(clients, weights):
        total += w * numkit.loss_and_grad(theta, c.train.features, c.train.labels, spec)[0]
    return total / sum(weights)


def stage_alphas(nodes: Sequence[ShardNode], inits: dict[int, np.ndarray]) -> None:
    """Angle of each shard's update against the stage's aggregate update.

    Also signs the angle: the residual of each shard update orthogonal to the
    aggregate update is projected on the leading singular direction of all
    residuals (sign fixed so its largest-magnitude entry is positive).
    """
    live = [n for n in nodes if not n.dropped]
    if not live:
        return
    w = [n.weight for n in live]
    theta_p = weighted_average([n.theta_final for n in live], w)
    start = weighted_average([inits[n.index] for n in live], w)
    g = theta_p - start
    updates = [n.theta_final - inits[n.index] for n in live]
    for n, u in zip(live, updates):
        n.alpha = _safe_angle(u, g, f"shard ({n.stage}, {n.index}) angle")

    gn = float(np.linalg.norm(g))
    if gn == 0.0:
        for n in live:
            n.alpha_signed = n.alpha
        return
    ghat = g / gn
    resid = np.stack([u - float(u @ ghat) * ghat for u in updates])
    if len(live) < 2 or float(np.abs(resid).max()) == 0.0:
        for n in live:
            n.alpha_signed = n.alpha
        return
    _, _, vt = np.linalg.svd(resid, full_matrices=False)
    ref = vt[0]
    if ref[int(np.argmax(np.abs(ref)))] < 0:
        ref = -ref
    for n, r in zip(live, resid):
        n.alpha_signed = -n.alpha if float(r @ ref) < 0 else n.alpha


def _map_shards(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class TreePlan:
    """A fixed merge tree and round schedule, as recorded in a cache."""

    client_ids: tuple[int, ...]
    groups: tuple[tuple[tuple[int, ...], ...], ...]  # per stage >= 1
    rounds: tuple[tuple[int, ...], ...]  # per stage >= 1

    @classmethod
    def from_cache(cls, cache: FLCache) -> "TreePlan":
        return cls(
            client_ids=tuple(n.client_ids[0] if n.client_ids else None for n in cache.stages[0]),
            groups=tuple(tuple(n.children for n in st) for st in cache.stages[1:]),
            rounds=tuple(tuple(n.rounds for n in st) for st in cache.stages[1:]),
        )


def run_training(
    config: RunConfig,
    clients: Sequence[ClientDataset],
    plan: TreePlan | None = None,
    workers: int = 1,
) -> FLCache:
    """Train the full shard hierarchy and return its cache.

    With ``plan`` the merge tree and rounds are replayed instead of being
    decided; clients missing from ``clients`` are treated as absent and their
    shards as empty.  This is the from-scratch reference for unlearning.
    """
    by_id = {c.client_id: c for c in clients}
    theta0 = numkit.init_params(config.model, config.master_seed)
    if plan is None:
        if len(by_id) != config.K:
            raise RejectedInputError(f"config says K={config.K} but {len(by_id)} clients given")
        stage0 = build_initial_stage(sorted(by_id), theta0)
        n_stages = config.P
    else:
        stage0 = []
        for i, cid in enumerate(plan.client_ids):
            present = cid is not None and cid in by_id
            stage0.append(ShardNode(0, i, (cid,) if present else (), (), 1.0 if present else 0.0, 0,
                                    theta_final=theta0 if present else None))
        n_stages = len(plan.groups)
    stages = [stage0]
    client_alphas = {c: 0.0 for n in stage0 for c in n.client_ids}
    alpha_stage = {c: 0 for c in client_alphas}

    for p in range(1, n_stages + 1):
        prev = stages[p - 1]
        if plan is None:
            groups = _merge(prev, config, p)
            rounds = _rounds(prev, groups, config)
        else:
            groups = MergePlan(plan.groups[p - 1])
            rounds = list(plan.rounds[p - 1])
        nodes, inits = [], {}
        for s, (grp, T) in enumerate(zip(groups.groups, rounds)):
            kids = [prev[i] for i in grp]
            ids = tuple(sorted(c for k in kids for c in k.client_ids))
            node = ShardNode(p, s, ids, tuple(grp), float(len(ids)), int(T))
            if ids:
                inits[s], node.weight = init_super_shard(kids)
            else:
                node.weight = 0.0
            nodes.append(node)

        def work(node):
            return train_shard(inits[node.index], [by_id[c] for c in node.client_ids],
                               node.rounds, config, p, node.index)

        live = [n for n in nodes if not n.dropped]
        for node, res in zip(live, _map_shards(work, live, workers)):
            node.theta_final = res.theta
            for cid, a in res.client_alphas.items():
                client_alphas[cid] = a
                alpha_stage[cid] = p
        stage_alphas(nodes, inits)
        stages.append(nodes)
    return FLCache(config, theta0, stages, client_alphas, alpha_stage)


def _merge(prev: list[ShardNode], config: RunConfig, p: int) -> MergePlan:
    seed = [config.master_seed, p, 0x3E46]
    if config.merge == "random":
        return random_partition(len(prev), config.R, seed)
    return merge_shards_a1([n.alpha_signed for n in prev], [len(n.client_ids) for n in prev],
                           config.R, seed)


def _rounds(prev: list[ShardNode], groups: MergePlan, config: RunConfig) -> list[int]:
    if config.fixed_rounds is not None:
        return [config.fixed_rounds] * groups.num_groups
    return allocate_rounds_a2([[prev[i].alpha for i in g] for g in groups.groups], config.round_range)


def stage_model(cache: FLCache, stage: int) -> np.ndarray:
    live = [n for n in cache.stages[stage] if not n.dropped]
    return weighted_average([n.theta_final for n in live], [n.weight for n in live])


def pilot_round_range(
    config: RunConfig, clients: Sequence[ClientDataset], tol: float = 1e-3, cap: int = 50
) -> tuple[RoundRange, list[int]]:
    """Train the first two stages to convergence and take min/max rounds.

    A shard is converged once one round improves its mean training loss by
    less than ``tol``.
    """
    by_id = {c.client_id: c for c in clients}
    theta0 = numkit.init_params(config.model, config.master_seed)
    prev = build_initial_stage(sorted(by_id), theta0)
    observed = []
    for p in (1, 2):
        if len(prev) < 2:
            break
        groups = _merge(prev, config, p)
        nodes, inits = [], {}
        for s, grp in enumerate(groups.groups):
            kids = [prev[i] for i in grp]
            ids = tuple(sorted(c for k in kids for c in k.client_ids))
            theta, w = init_super_shard(kids)
            node = ShardNode(p, s, ids, tuple(grp), w, 0)
            inits[s] = theta
            members = [by_id[c] for c in ids]
            weights = [float(len(c.train)) for c in members]
            last = _shard_loss(theta, members, weights, config.model)
            T = 0
            while T < cap:
                res = train_shard(theta, members, 1, config, p, s)
                theta = res.theta
                T += 1
                cur = _shard_loss(theta, members, weights, config.model)
                improved = last - cur
                last = cur
                if improved < tol:
                    break
            node.rounds, node.theta_final = T, theta
            observed.append(T)
            nodes.append(node)
        stage_alphas(nodes, inits)
        prev = nodes
    return estimate_round_range(observed), observed


# --- persistence ----------------------------------------------------------


def _node_record(n: ShardNode, blob: int | None) -> dict:
    return {
        "stage": n.stage,
        "index": n.index,
        "clients": list(n.client_ids),
        "children": list(n.children),
        "weight": n.weight,
        "rounds": n.rounds,
        "alpha": n.alpha,
        "alpha_signed": n.alpha_signed,
        "blob": blob,
    }


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_cache(cache: FLCache, path) -> None:
    """Write ``manifest.json`` + ``params.bin`` into directory ``path``.

    The blob file is a sequence of records: uint64 little-endian element
    count, then that many little-endian float64 values.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = bytearray()
    blob_meta = []

    def add(theta: np.ndarray) -> int:
        raw = np.ascontiguousarray(theta, dtype="<f8").tobytes()
        blob_meta.append({"offset": len(blobs), "length": theta.shape[0],
                          "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.extend(struct.pack("<Q", theta.shape[0]))
        blobs.extend(raw)
        return len(blob_meta) - 1

    add(cache.theta0)
    stages = []
    for st in cache.stages:
        recs = []
        for n in st:
            if n.stage == 0:
                blob = 0 if not n.dropped else None
            else:
                blob = add(n.theta_final) if n.theta_final is not None else None
            recs.append(_node_record(n, blob))
        stages.append(recs)
    manifest = {
        "version": CACHE_VERSION,
        "R": cache.R,
        "P": cache.P,
        "config_digest": cache.config_digest,
        "config": cache.config.to_dict(),
        "master_seed": cache.config.master_seed,
        "removed": list(cache.removed),
        "client_alphas": {str(k): v for k, v in sorted(cache.client_alphas.items())},
        "alpha_stage": {str(k): v for k, v in sorted(cache.alpha_stage.items())},
        "blobs": blob_meta,
        "stages": stages,
    }
    _atomic_write(path / BLOB_NAME, bytes(blobs))
    _atomic_write(path / MANIFEST_NAME, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())


def load_cache(path) -> FLCache:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
        raw = (path / BLOB_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise CacheError(f"missing cache file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise CacheError(f"unreadable manifest: {exc}") from None
    if manifest.get("version") != CACHE_VERSION:
        raise CacheVersionError(f"cache version {manifest.get('version')!r}, expected {CACHE_VERSION}")
    config = RunConfig.from_dict(manifest["config"])
    if config.digest() != manifest["config_digest"]:
        raise CacheDigestError("config digest does not match the stored config")

    arrays = []
    for i, meta in enumerate(manifest["blobs"]):
        off, length = meta["offset"], meta["length"]
        end = off + 8 + 8 * length
        if end > len(raw):
            raise CacheTruncatedError(f"blob {i} runs past the end of {BLOB_NAME}")
        (stored_len,) = struct.unpack_from("<Q", raw, off)
        if stored_len != length:
            raise CacheDigestError(f"blob {i} length prefix {stored_len} != manifest {length}")
        body = raw[off + 8 : end]
        if hashlib.sha256(body).hexdigest() != meta["sha256"]:
            raise CacheDigestError(f"blob {i} failed its digest check")
        arrays.append(np.frombuffer(body, dtype="<f8").astype(np.float64))

    stages = []
    for recs in manifest["stages"]:
        nodes = []
        for r in recs:
            nodes.append(ShardNode(
                stage=r["stage"], index=r["index"], client_ids=tuple(r["clients"]),
                children=tuple(r["children"]), weight=r["weight"], rounds=r["rounds"],
                alpha=r["alpha"], alpha_signed=r["alpha_signed"],
                theta_final=arrays[r["blob"]] if r["blob"] is not None else None,
            ))
        stages.append(nodes)
    return FLCache(
        config=config,
        theta0=arrays[0],
        stages=stages,
        client_alphas={int(k): v for k, v in manifest["client_alphas"].items()},
        alpha_stage={int(k): v for k, v in manifest["alpha_stage"].items()},
        removed=tuple(manifest["removed"]),
    )


def clone_cache(cache: FLCache) -> FLCache:
    """Deep copy of the structure; parameter arrays are shared (never mutated)."""
    stages = [[copy.copy(n) for n in st] for st in cache.stages]
    return FLCache(cache.config, cache.theta0, stages, dict(cache.client_alphas),
                   dict(cache.alpha_stage), cache.removed)


def model_digest(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


def shard_accuracies(cache: FLCache, clients: Sequence[ClientDataset]) -> list[dict]:
    """Per-stage accuracy of the stage aggregate on the pooled held-out data."""
    by_id = {c.client_id: c for c in clients}
    live = [by_id[c] for c in cache.clients if c in by_id]
    x = np.concatenate([c.test.features for c in live])
    y = np.concatenate([c.test.labels for c in live])
    rows = []
    for p in range(len(cache.stages)):
        rep = numkit.evaluate(stage_model(cache, p), x, y, cache.config.model)
        rows.append({"stage": p, "shards": sum(1 for n in cache.stages[p] if not n.dropped),
                     "accuracy": rep.accuracy, "loss": rep.mean_loss})
    return rows
