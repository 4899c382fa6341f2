"""
Traffic-state attention
=======================

In the constructed scenario, drivers on one OD pair switch to a detour when
a flagged link is congested just before they depart. A plain recurrent
policy cannot see this, while the attention variant reads link accumulation
from the ten minutes before departure.
"""
from trajlab import roadnet as rn
from trajlab import demandgen as dg
from trajlab.models import LinkEnv, rnn_train, arnn_train, sequence_cross_entropy

net = rn.build_grid(4, 4)
env = LinkEnv(net)
sc = dg.congestion_flip_scenario(net, seed=0)
focal = [sc.dataset[i] for i in sc.focal_ids]
detours = sum(t.links == sc.route_detour for t in focal)
print(f"flagged link {sc.flagged_link}: {detours} of {len(focal)} focal drivers took the detour")

# accumulation before each departure, normalised by each link's historical max
occ = dg.Occupancy(sc.dataset, net.n_links)
train, test = dg.split_train_test(sc.dataset, 0.7, seed=0)
c_train = dg.accumulation_batch(train, net.n_links, occupancy=occ)
c_test = dg.accumulation_batch(test, net.n_links, occupancy=occ)
print("context tensor per trip:", c_train.shape[1:], "(links x bins)")

rnn = rnn_train(train, env, seed=0)
arnn = arnn_train(train, env, c_train, seed=0)
print(f"test cross-entropy  RNN {sequence_cross_entropy(rnn, test):.4f}  "
      f"ARNN {sequence_cross_entropy(arnn, test, c_test):.4f}")
