"""
Comparing generators on multi-OD demand
=======================================

Fit several models on one-way multi-OD logit demand and build the
comparison report: BLEU and METEOR against the training set, and the
Jensen-Shannon distance between generated and held-out route distributions.
"""
from trajlab import roadnet as rn
from trajlab import demandgen as dg
from trajlab import eval as ev
from trajlab.models import LinkEnv, fit_transition, rnn_train, maxent_train, rollout_sample

net = rn.build_grid(4, 4)
env = LinkEnv(net)
full = dg.generate_dataset(net, dg.one_way_multi_od_pattern(net), dg.RouteChoiceModel("Logit"), 6000, seed=0)
train, test = dg.split_train_test(full, 4000 / 6000, seed=0)
print(f"train {len(train)}  test {len(test)}  H(D) {ev.transition_entropy(test):.3f}")

models = {"mmc": fit_transition(train, env),
          "rnn": rnn_train(train, env, seed=0),
          "maxent_svf": maxent_train(train, env, "SVF"),
          "maxent_savf": maxent_train(train, env, "SAVF")}
generated = {k: rollout_sample(m, 2000, 40, seed=1) for k, m in models.items()}

# BLEU/METEOR on a 300-trajectory subsample keeps the pairwise search quick
report = ev.compare_models(test, generated, reference=train, n_score=300)
print(report.to_markdown())
