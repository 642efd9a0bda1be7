"""Synthetic data, CSV ingestion and label-Dirichlet client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import RejectedInputError


class CSVParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(ValueError):
    pass


@dataclass
class LabeledData:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise RejectedInputError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise RejectedInputError("one label per feature row required")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "LabeledData":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledData(self.features[idx], self.labels[idx])


@dataclass
class ClientDataset:
    client_id: int
    train: LabeledData
    test: LabeledData


@dataclass(frozen=True)
class DataConfig:
    input_dim: int = 8
    num_labels: int = 4
    samples_per_client: int = 40
    rho: float = 0.5
    class_separation: float = 3.0
    noise_scale: float = 1.0
    seed: int = 0
    test_fraction: float = 0.25
    source: str = "synthetic"  # "synthetic" or a CSV path
    partition: str = "dirichlet"  # "dirichlet" or "label_groups"
    minority_fraction: float = 0.25  # label_groups only

    def __post_init__(self):
        if self.partition not in ("dirichlet", "label_groups"):
            raise RejectedInputError(f"unknown partition {self.partition!r}")
        if self.rho <= 0:
            raise RejectedInputError("rho must be > 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise RejectedInputError("test_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def class_means(config: DataConfig) -> np.ndarray:
    """Label means spread on a sphere of radius ``class_separation``."""
    rng = np.random.default_rng([config.seed, 0xC1A55])
    directions = rng.normal(size=(config.num_labels, config.input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return config.class_separation * directions


def sample_labels(labels, config: DataConfig, rng: np.random.Generator) -> LabeledData:
    labels = np.asarray(labels, dtype=np.int64)
    means = class_means(config)
    noise = rng.normal(size=(labels.shape[0], config.input_dim))
    return LabeledData(means[labels] + config.noise_scale * noise, labels)


def gen_synthetic(config: DataConfig, num_samples: int) -> LabeledData:
    """Balanced Gaussian-cluster dataset, fully determined by ``config.seed``."""
    rng = np.random.default_rng([config.seed, 0xDA7A])
    labels = rng.permutation(np.arange(num_samples) % config.num_labels)
    return sample_labels(labels, config, rng)


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties at the lowest index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    data: LabeledData, num_clients: int, rho: float, seed: int, num_labels: int | None = None
) -> list[np.ndarray]:
    """Split sample indices across clients with Dirichlet(rho) label profiles.

    Every client gets ``n // K`` samples (the first ``n % K`` clients one more).
    Per-client label targets use largest-remainder rounding; targets a label's
    supply cannot meet are scaled down and the slack is filled from leftover
    samples, preferring each client's most probable labels.
    """
    n = len(data)
    if num_clients < 1:
        raise RejectedInputError("need at least one client")
    if n == 0:
        raise RejectedInputError("cannot partition an empty dataset")
    if num_clients > n:
        raise RejectedInputError(f"{num_clients} clients but only {n} samples")
    if rho <= 0:
        raise RejectedInputError("rho must be > 0")
    L = int(num_labels if num_labels is not None else data.labels.max() + 1)

    rng = np.random.default_rng([seed, 0xD1B])
    profiles = rng.dirichlet(np.full(L, rho), size=num_clients)
    sizes = np.full(num_clients, n // num_clients, dtype=np.int64)
    sizes[: n % num_clients] += 1

    targets = np.stack([_largest_remainder(profiles[c], int(sizes[c])) for c in range(num_clients)])
    supply = np.bincount(data.labels, minlength=L)
    for lab in range(L):
        demand = int(targets[:, lab].sum())
        if demand > supply[lab]:
            col = targets[:, lab].astype(np.float64)
            targets[:, lab] = _largest_remainder(col / demand, int(supply[lab]))

    pools = [list(rng.permutation(np.flatnonzero(data.labels == lab))) for lab in range(L)]
    parts: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(num_clients):
        for lab in range(L):
            take = int(targets[c, lab])
            parts[c].extend(pools[lab][:take])
            del pools[lab][:take]
    for c in range(num_clients):
        deficit = int(sizes[c]) - len(parts[c])
        for lab in np.argsort(-profiles[c], kind="stable"):
            if deficit <= 0:
                break
            take = min(deficit, len(pools[lab]))
            parts[c].extend(pools[lab][:take])
            del pools[lab][:take]
            deficit -= take
    return [np.sort(np.asarray(p, dtype=np.int64)) for p in parts]


def split_train_test(
    data: LabeledData, test_fraction: float, seed: int
) -> tuple[LabeledData, LabeledData]:
    n = len(data)
    if n < 2:
        raise RejectedInputError("need at least two samples to split")
    if not 0.0 < test_fraction < 1.0:
        raise RejectedInputError("test_fraction must lie in (0, 1)")
    n_test = min(max(int(round(n * test_fraction)), 1), n - 1)
    order = np.random.default_rng([seed, 0x5917]).permutation(n)
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


def load_csv(path) -> LabeledData:
    """Read ``label,f1,...,fd`` rows; errors carry the 1-based line number."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if not header or header[0].strip() != "label":
            raise SchemaError(f"{path}: header must start with 'label'")
        width = len(header) - 1
        if width < 1:
            raise SchemaError(f"{path}: no feature columns")
        feats, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != width + 1:
                raise SchemaError(f"line {line}: expected {width + 1} fields, got {len(row)}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise CSVParseError(line, str(exc)) from None
            if label < 0:
                raise CSVParseError(line, "negative label")
            labels.append(label)
            feats.append(values)
    return LabeledData(np.asarray(feats, dtype=np.float64).reshape(-1, width), labels)


def save_csv(data: LabeledData, path) -> None:
    d = data.features.shape[1]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i + 1}" for i in range(d)])
        for x, y in zip(data.features, data.labels):
            # repr round-trips float64 exactly
            writer.writerow([int(y)] + [repr(float(v)) for v in x])


def make_clients(config: DataConfig, num_clients: int) -> list[ClientDataset]:
    """Generate (or load), Dirichlet-partition and per-client split a dataset."""
    if config.source == "synthetic":
        data = gen_synthetic(config, num_clients * config.samples_per_client)
    else:
        data = load_csv(config.source)
    parts = dirichlet_partition(data, num_clients, config.rho, config.seed, config.num_labels)
    clients = []
    for cid, idx in enumerate(parts):
        train, test = split_train_test(data.subset(idx), config.test_fraction, config.seed + cid)
        clients.append(ClientDataset(cid, train, test))
    return clients


def label_group_population(
    config: DataConfig, num_clients: int, minority_fraction: float = 0.25
) -> tuple[list[ClientDataset], list[int]]:
    """Two-population fixture: labels split in two halves.

    The first ``(1 - minority_fraction) * K`` clients draw only first-half
    labels; the rest draw only second-half labels.  Returns the clients and
    the ids of the minority clients.
    """
    L = config.num_labels
    if L < 2:
        raise RejectedInputError("need at least two labels")
    n_minor = int(round(num_clients * minority_fraction))
    if not 1 <= n_minor < num_clients:
        raise RejectedInputError("minority group must be a proper non-empty subset")
    half = L // 2
    groups = [np.arange(half), np.arange(half, L)]
    rng = np.random.default_rng([config.seed, 0x6209])
    clients, minority = [], []
    for cid in range(num_clients):
        grp = 1 if cid >= num_clients - n_minor else 0
        if grp:
            minority.append(cid)
        labs = rng.choice(groups[grp], size=config.samples_per_client)
        data = sample_labels(labs, config, rng)
        train, test = split_train_test(data, config.test_fraction, config.seed + cid)
        clients.append(ClientDataset(cid, train, test))
    return clients, minority


def pooled_test(clients: list[ClientDataset]) -> LabeledData:
    return LabeledData(
        np.concatenate([c.test.features for c in clients]),
        np.concatenate([c.test.labels for c in clients]),
    )


def build_clients(config: DataConfig, num_clients: int) -> list[ClientDataset]:
    """Client datasets as described by ``config.partition``."""
    if config.partition == "label_groups":
        return label_group_population(config, num_clients, config.minority_fraction)[0]
    return make_clients(config, num_clients)


def minority_ids(config: DataConfig, num_clients: int) -> list[int]:
    """Ids of the second label group under ``label_groups`` partitioning."""
    n_minor = int(round(num_clients * config.minority_fraction))
    return list(range(num_clients - n_minor, num_clients))
