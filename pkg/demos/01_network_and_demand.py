"""
Grid network and synthetic demand
=================================

Build the 4x4 grid, enumerate routes for the default OD pair and generate
trajectories under each demand pattern and route-choice model.
"""
import numpy as np

from trajlab import roadnet as rn
from trajlab import demandgen as dg
from trajlab import eval as ev

# a 4x4 grid of intersections, 200 m blocks, with entry and exit stubs
net = rn.build_grid(4, 4)
print("links:", net.n_links, "entry:", len(net.entry_links), "exit:", len(net.exit_links),
      "OD pairs:", len(net.od_pairs()))

# every shortest route between the default origin and destination
o, d = rn.default_single_od(net)
routes = rn.enumerate_routes(net, o, d)
print(f"{len(routes)} shortest routes from link {o} to link {d}")
for r in routes:
    print("  ", r)

# route-choice probabilities over those routes
for kind in dg.CHOICE_KINDS:
    p = dg.route_choice_probabilities(routes, dg.RouteChoiceModel(kind))
    print(f"{kind:>14}", np.round(p, 3))

# datasets grow in complexity from one OD pair to two-way multi-OD demand
for name in ("SingleOD", "OneWayMultiOD", "TwoWayMultiOD"):
    ds = dg.generate_dataset(net, dg.make_pattern(net, name), dg.RouteChoiceModel("Logit"), 3000, seed=0)
    print(f"{name:>14}: {len(ds.route_counts()):4d} distinct routes, "
          f"H(D) = {ev.transition_entropy(ds):.3f} nats")
