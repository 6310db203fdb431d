"""Three devices exchanging models at drifts.

Shows who asked whom and when, how large the ensembles got, and which
device's model was being used for prediction along each stream.
"""
import sys
from pathlib import Path

import numpy as np

from macpnn.harness import load_config
from macpnn.mal import LOCAL, count_communications, run_network
from macpnn.streams import build_scenario

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml")
if len(sys.argv) > 1:
    cfg.scale = float(sys.argv[1])
scenario = build_scenario(cfg.scaled_scenario())
res = run_network(scenario, seed=0, audit=True)

print("tick  requester <- responder  models  bytes")
for e in res.ledger.entries:
    print(f"{e.tick:5d}  {e.requester:9d} <- {e.responder:<9d} {e.models:6d} {e.bytes:6d}")

n_b = max(-(-len(s) // scenario.hyper.batch_size) for s in scenario.devices)
ours, naive, ratio = count_communications(res.ledger, len(scenario.devices), n_b)
print(f"\n{ours} requests vs {naive} for per-batch exchange ({ratio:.2%})")

for log in res.logs:
    ext = np.mean(log.origin != LOCAL)
    print(f"device {log.device_id}: max ensemble {log.ensemble_size.max()}, "
          f"predictions from a peer's model {ext:.0%} of the time")
