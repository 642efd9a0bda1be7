"""
Who pays when a client leaves?
==============================

Two label groups share one federation.  A few minority clients leave.  The
exact unlearner returns the model the federation would have had without
them; the mock unlearner adds gradient ascent on the clients most similar
to the leavers, so those clients lose accuracy.  The performance score
(lower is fairer) and the count of clients who would follow the leavers
show the difference.  The efficiency score depends only on the trained
tree, so both unlearners share it.
"""

from fedshard.datagen import DataConfig
from fedshard.engine import RunConfig
from fedshard.scenarios import cascade_fixture, run_cascade

config = RunConfig(K=32, fixed_rounds=None, data=DataConfig(samples_per_client=80))
cache, clients, leavers = cascade_fixture(config)
print("leaving clients:", leavers)

for name, kw in [("exact", {}), ("mock", {"gamma": 50})]:
    rep = run_cascade(cache, clients, leavers, unlearner=name, **kw)
    worst = max(rep.delta_y.items(), key=lambda kv: kv[1])
    print(f"{name:>5}: followers {rep.lc:2d}, M_p {rep.m_p:10.1f}, M_e {rep.m_e:10.1f}, "
          f"largest drop {worst[1]:+.3f} (client {worst[0]})")
