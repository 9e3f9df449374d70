"""Generate a small synthetic world and run the three ablations over a few seeds.

The acceptance suite runs the same experiments on 1000 users and 20 seeds;
this version finishes in a couple of minutes.
"""

import sys

from nearline.sim.harness import default_channel_configs, run_ablations
from nearline.sim.world import World, WorldSpec

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 4
spec = WorldSpec(num_users=300, seed=0)

world = World(spec)
print(f"{len(world.events)} ranking-log events, {len(world.truth.visits)} homepage visits")
first = world.events[0]
print("one event:", first.user_id, first.scenario_id, [i.item_id for i in first.items[:5]], "...")
print("channels:")
for sid, c in default_channel_configs(spec).items():
    print(f"  {sid:<14} truncation={c.truncation} k={c.k} cap={c.category_cap} queue={c.queue_capacity}")

reports = run_ablations(["strategy", "alpha_sweep", "online_offline"], spec, None, list(range(seeds)))
for rep in reports.values():
    print()
    print(rep.summary(), end="")
