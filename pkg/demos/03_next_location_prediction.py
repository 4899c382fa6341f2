"""
Next-location prediction on cells
=================================

Two-way multi-OD trips are rewritten as Voronoi cell sequences. A
transition matrix and a recurrent policy are compared by the probability
they give to the true next cells (CPP), summarised by CCDF area.
"""
import numpy as np

from trajlab import roadnet as rn
from trajlab import demandgen as dg
from trajlab import tessellate as ts
from trajlab import eval as ev
from trajlab.models import CellEnv, fit_transition, rnn_train

net = rn.build_grid(4, 4)
full = dg.generate_dataset(net, dg.two_way_multi_od_pattern(net), dg.RouteChoiceModel("Logit"), 3000, seed=0)

# cluster points sampled along every link at radius 150 m
part = ts.partition_network(net, 150.0)
cells = ts.dataset_to_cells(full, net, part)
print(f"{part.n_cells} cells, example sequence {cells[0].links}")

train, test = dg.split_train_test(cells, 0.7, seed=0)
env = CellEnv(part.n_cells, net.hash())
models = {"TRN": fit_transition(train, env), "RNN": rnn_train(train, env, seed=0)}

for k in (1, 2, 3):
    row = []
    for name, m in models.items():
        _, area, _ = ev.cpp_k(m, test, k, 1)
        row.append(f"{name} {area:.3f}")
    print(f"AUC of CPP_{k} CCDF:", "  ".join(row))

# cell revisits only appear when a trip loops back through a region
stats = ev.region_stats(test, part.n_cells)
print(f"mean revisit ratio D over test trips: {stats.mean_revisit:.2f}%")
