"""Hierarchical federated training with exact, path-only client unlearning.

Modules:

- ``numkit``: flat-parameter softmax models, gradients, local SGD, angles
- ``datagen``: synthetic and CSV data, Dirichlet and label-group partitions
- ``adaptive``: angle-balanced shard merging and per-shard round allocation
- ``engine``: stage-by-stage shard training and the on-disk parameter cache
- ``unlearn``: retraining only the shards a leaving client touched
- ``fairmetrics``: performance- and efficiency-fairness scores
- ``analysis``: closed-form speedups next to counted client-rounds
- ``scenarios``: cascaded leaving, poisoning and flat-retraining baselines
- ``cli``: the ``fedshard`` command
"""

from .datagen import ClientDataset, DataConfig, build_clients
from .engine import FLCache, RunConfig, load_cache, run_training, save_cache
from .fairmetrics import FairnessInputs, fairness_report
from .numkit import ModelSpec
from .unlearn import structured_scratch, unlearn

__version__ = "0.1.0"

__all__ = [
    "ClientDataset",
    "DataConfig",
    "FLCache",
    "FairnessInputs",
    "ModelSpec",
    "RunConfig",
    "build_clients",
    "fairness_report",
    "load_cache",
    "run_training",
    "save_cache",
    "structured_scratch",
    "unlearn",
]
