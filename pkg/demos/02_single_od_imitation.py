"""
Imitating a single-OD route
===========================

Three families learn from 2,000 drivers who all take the same route: a
first-order Markov chain, a recurrent behaviour-cloning policy and an
adversarially trained policy. Each then generates 500 trajectories that are
scored against the expert data.
"""
import sys

import numpy as np

from trajlab import roadnet as rn
from trajlab import demandgen as dg
from trajlab import eval as ev
from trajlab.models import LinkEnv, GailConfig, fit_transition, rnn_train, gail_train, rollout_sample

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 600

net = rn.build_grid(4, 4)
env = LinkEnv(net)
expert = dg.generate_dataset(net, dg.single_od_pattern(net), dg.RouteChoiceModel("Fixed"), 2000, seed=0)
print("expert route:", next(iter(expert.route_counts())))


def report(name, model):
    gen = rollout_sample(model, 500, 30, seed=1)
    bleu = np.mean(ev.max_score_eval(gen, expert, "bleu"))
    meteor = np.mean(ev.max_score_eval(gen, expert, "meteor"))
    print(f"{name:>9}: BLEU {bleu:.4f}  METEOR {meteor:.4f}  distinct routes {len(gen.route_counts())}")


report("MMC", fit_transition(expert, env))
report("RNN", rnn_train(expert, env, seed=0))


# the discriminator loss should drift toward ln 4 once generated and expert
# pairs become indistinguishable
def progress(bundle, row):
    if row[0] % 50 == 0:
        print(f"  iter {row[0]:4d}  J_D {row[3]:.3f}  entropy {row[4]:.3f}  unique routes {row[5]}")


cfg = GailConfig(iters=iters, n_samples=200, hidden=32, layers=2, lr=1e-3, baseline="state", lam=0.1,
                 max_len=30, seed=0)
bundle = gail_train(expert, env, cfg, callback=progress)
print(f"  final-100 mean J_D {np.mean([r[3] for r in bundle.log[-100:]]):.3f} (ln 4 = {np.log(4):.3f})")
report("TrajGAIL", bundle)
