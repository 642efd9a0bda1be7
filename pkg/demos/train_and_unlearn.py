"""
Train a shard tree, remove one client, check the result
=======================================================

Sixteen clients with skewed label mixes are trained in a binary merge tree.
Client 5 then asks to leave.  Only the four shards on its path to the root
are retrained, and the new global model is compared bit for bit with a run
that never saw client 5.
"""

import numpy as np

from fedshard import DataConfig, RunConfig, build_clients, run_training, structured_scratch, unlearn
from fedshard.engine import model_digest
from fedshard.unlearn import count_cost

config = RunConfig(K=16, R=2, fixed_rounds=None, data=DataConfig(rho=0.3, seed=1), master_seed=1)
clients = build_clients(config.data, config.K)
cache = run_training(config, clients)

# four merge stages for 16 clients; rounds per shard come from the angle spread
print("stages:", cache.P)
for p, stage in enumerate(cache.stages[1:], start=1):
    print(f"  stage {p}: shard sizes {[len(n.client_ids) for n in stage]}, rounds {[n.rounds for n in stage]}")

new, theta, ledger = unlearn(cache, [5], clients)
print("retrained shards per stage:", ledger.affected)
print("client-rounds: training", cache.training_client_rounds(),
      "/ unlearning", ledger.paper_mode_client_rounds, f"(actual {ledger.actual_client_rounds})")

# the reference replays the same tree from scratch without client 5
reference = structured_scratch(cache, clients, [5]).final_model
print("bit-identical to retraining from scratch:", np.array_equal(theta, reference))
print("model digest:", model_digest(theta)[:16])

# every client costs the same here only if the tree is balanced and rounds are uniform
costs = {c: count_cost(cache, [c])[0] for c in cache.clients}
print("single-client costs range:", min(costs.values()), "to", max(costs.values()))
