import csv
import math
from fractions import Fraction

import numpy as np
import pytest

from trajlab import ndcore as nd
from trajlab import roadnet as rn
from trajlab import demandgen as dg
from trajlab.ndcore import tensor as T
from trajlab.models import (CellEnv, LinkEnv, GailConfig, TrajGailBundle, Batch, SamplingError,
                            TrainingDivergence, fit_transition, rnn_train, arnn_train, maxent_train,
                            make_batch, rollout, rollout_sample, step_probabilities, encode,
                            discriminator_loss, value_loss, value_targets, policy_objective, gail_value_update,
                            gail_policy_update, gail_discriminator_update, gail_train,
                            reward_from_discriminator, SequencePolicy, save_model, load_model,
                            MaxEntModel, LOG_FIELDS, ModelFileError)
from trajlab.models.policy import AttentionConfig, fit_sequence
from trajlab.trajectory import Trajectory, TrajectoryDataset

SMALL = nd.RecurrentCellConfig("LSTM", 16, 16, 1)


def _ds(seqs, complete=True):
    return TrajectoryDataset([Trajectory(i, tuple(s), 0.0, complete) for i, s in enumerate(seqs)])


@pytest.fixture(scope="module")
def net():
    return rn.build_grid(4, 4)


@pytest.fixture(scope="module")
def env(net):
    return LinkEnv(net)


@pytest.fixture(scope="module")
def routes(net):
    return rn.enumerate_routes(net, *rn.default_single_od(net))


@pytest.fixture(scope="module")
def branch(routes):
    """Two routes that split once and merge once, with the split index."""
    for i, a in enumerate(routes):
        for b in routes[i + 1:]:
            k = next(j for j in range(len(a)) if a[j] != b[j])
            common = [x for x in a[k:] if x in b[k:]]
            m = a.index(common[0])
            if a[m:] == b[b.index(common[0]):] and not set(a[k:m]) & set(b):
                return a, b, k
    raise AssertionError


# -- transition matrices ------------------------------------------------------------
def test_fit_transition_examples():
    env = CellEnv(4)
    tm = fit_transition(_ds([[0, 1]]), env)
    assert tm.probs[0, 1] == 1.0 and tm.kind == "trn"
    tm = fit_transition(_ds([[0, 1]] * 3 + [[0, 2]]), env)
    assert tm.probs[0, 1] == 0.75 and tm.probs[0, 2] == 0.25
    rows = tm.probs[:env.end].sum(axis=1)
    assert np.allclose(rows, 1.0, atol=1e-12)
    # cell 3 is never seen, so it is absorbing to End
    assert tm.absorbing[3] and tm.probs[3, env.end] == 1.0 and not tm.absorbing[2]
    with pytest.raises(ValueError):
        fit_transition(_ds([]), env)


def test_mmc_matches_rational_frequencies(net, env, routes):
    rng = np.random.default_rng(0)
    seqs = [routes[i] for i in rng.integers(0, len(routes), 37)]
    tm = fit_transition(_ds(seqs), env)
    assert tm.kind == "mmc"
    counts = {}
    for s in seqs:
        toks = [env.start] + list(s) + [env.end]
        for a, b in zip(toks, toks[1:]):
            counts.setdefault(a, {}).setdefault(b, 0)
            counts[a][b] += 1
    for a, row in counts.items():
        tot = sum(row.values())
        for b, c in row.items():
            assert Fraction(tm.probs[a, b]).limit_denominator(1000) == Fraction(c, tot)


def test_masked_actions_are_zero_for_every_model(net, env, routes):
    ds = _ds(routes * 3)
    models = [fit_transition(ds, env), maxent_train(ds, env, "SVF", iters=5),
              maxent_train(ds, env, "SAVF", iters=5),
              SequencePolicy(env, SMALL, seed=1), TrajGailBundle(env, GailConfig(hidden=8, layers=1))]
    every = np.arange(env.n_obs - 1)
    for m in models:
        s = m.sampler()
        state = s.initial_state(len(every))
        for _ in range(3):
            state, p = s.step(state, every)
            assert np.all(p[~env.mask[every]] == 0.0)
            # unseen links of a fitted matrix have no valid mass; rollouts never reach them
            seen = ~m.absorbing[every] if hasattr(m, "absorbing") else np.ones(len(every), bool)
            assert np.allclose(p[seen].sum(axis=1), 1.0, atol=1e-12)
        g = rollout_sample(m, 300, 40, seed=2)
        assert all(rn.is_valid_route(net, t.links, complete=t.complete) for t in g)


def test_rollout_contract(env, routes):
    tm = fit_transition(_ds([routes[0]]), env)
    g = rollout_sample(tm, 50, 20, seed=1)
    assert len(g.route_counts()) == 1 and all(t.complete for t in g)
    short = rollout_sample(tm, 5, 3, seed=1)
    assert all(not t.complete and len(t) == 3 for t in short)
    with pytest.raises(ValueError):
        rollout_sample(tm, 5, 1)

    class Dead:
        env = tm.env

        def sampler(self):
            return self

        def initial_state(self, b, ctx=None):
            return None

        def step(self, state, obs):
            return state, np.zeros((len(obs), tm.env.n_actions))

    with pytest.raises(SamplingError):
        rollout_sample(Dead(), 3, 10)


def test_rollout_independent_of_workers(env, routes):
    pol = SequencePolicy(env, SMALL, seed=3)
    a = rollout_sample(pol, 600, 30, seed=4, workers=1)
    b = rollout_sample(pol, 600, 30, seed=4, workers=3)
    assert [t.links for t in a] == [t.links for t in b]
    assert a.to_jsonl() == b.to_jsonl()


# -- recurrent policies -----------------------------------------------------------------
def test_rnn_memorizes_single_route(env, routes):
    ds = _ds([routes[2]] * 64)
    pol = rnn_train(ds, env, epochs=40, lr=1e-2, cell=SMALL, seed=0, batch_size=32)
    p = step_probabilities(pol, _ds([routes[2]]))[0]
    assert np.all(p > 0.99)
    # argmax decoding reproduces the route
    path, obs, s = [], env.start, pol.sampler()
    state = s.initial_state(1)
    while True:
        state, pr = s.step(state, np.array([obs]))
        obs = int(env.nxt[obs, int(np.argmax(pr[0]))])
        if obs == env.end:
            break
        path.append(obs)
    assert tuple(path) == tuple(routes[2])
    # epoch losses fall, allowing 5% upticks
    h = pol.history
    assert all(b <= a * 1.05 for a, b in zip(h, h[1:]))


def test_rnn_learns_junction_split(env, branch):
    a, b, k = branch
    # full-batch steps, so the optimum is not blurred by minibatch noise
    pol = rnn_train(_ds([a, b] * 100), env, epochs=150, lr=1e-2, cell=SMALL, seed=1, batch_size=200)
    obs_prefix = [env.start] + list(a[:k])
    p = pol.next_probs([obs_prefix])[0]
    pa = p[env.action_between(a[k - 1], a[k])]
    assert abs(pa - 0.5) < 0.05


def test_initial_loss_is_uniform_over_valid_actions(env, routes):
    ds = _ds(routes)
    pol = SequencePolicy(env, SMALL, seed=0)
    obs, act, w = encode(env, ds)
    with T.no_grad():
        loss = pol.nll(obs, act, w).item()
    valid = env.mask[obs].sum(axis=2)
    expected = (np.log(valid) * w).sum() / w.sum()
    assert abs(loss - expected) < 0.1


def test_belief_state_is_a_function_of_the_prefix(env, routes):
    pol = SequencePolicy(env, SMALL, seed=5)
    r = routes[0]
    pre = [env.start] + list(r[:3])
    p = pol.next_probs([pre, [env.start] + list(r[:2]), pre])
    assert np.array_equal(p[0], p[2])
    sp = step_probabilities(pol, _ds([r]))[0]
    assert sp[3] == pytest.approx(p[0][env.action_between(r[2], r[3])], abs=1e-12)


def test_training_divergence_is_reported(env, routes):
    pol = SequencePolicy(env, SMALL, seed=0)
    obs, act, w = encode(env, _ds(routes))
    pol.params[pol.head.prefix + "out.b"].data[:] = np.nan
    with pytest.raises(TrainingDivergence):
        fit_sequence(pol, obs, act, w, 1, 1e-3)


def test_attention_weights_and_zero_state(env, net, routes):
    att = AttentionConfig(net.n_links, 10, 8)
    pol = SequencePolicy(env, SMALL, seed=0, attention=att)
    rng = np.random.default_rng(0)
    acc = rng.random((4, net.n_links, 10))
    st = pol.head.initial_state(4, acc)
    with T.no_grad():
        ctx, alpha = pol.head.attend(st)
    assert np.allclose(alpha.data.sum(axis=1), 1.0, atol=1e-9)
    z = np.zeros((2, net.n_links, 10))
    st = pol.head.initial_state(2, z)
    with T.no_grad():
        ctx, alpha = pol.head.attend(st)
    assert np.allclose(alpha.data, 1.0 / net.n_links, atol=1e-12)
    assert np.all(ctx.data == 0.0)
    with pytest.raises(ValueError):
        arnn_train(_ds(routes), env, None)


def test_attention_gradient_check(env, net):
    att = AttentionConfig(net.n_links, 3, 4)
    cell = nd.RecurrentCellConfig("GRU", 4, 4, 2)
    pol = SequencePolicy(env, cell, seed=0, attention=att)
    routes = rn.enumerate_routes(net, *rn.default_single_od(net))[:2]
    obs, act, w = encode(env, _ds(routes))
    acc = np.random.default_rng(1).random((2, net.n_links, 3))
    assert nd.gradient_check(lambda ps: pol.nll(obs, act, w, acc), pol.params) < 1e-4


# -- MaxEnt ---------------------------------------------------------------------------
@pytest.mark.parametrize("mode", ["SVF", "SAVF"])
def test_maxent_single_route(env, routes, mode):
    ds = _ds([routes[1]] * 10)
    m = maxent_train(ds, env, mode, iters=300, lr=0.5)
    path, obs, k = [], env.start, 0
    state = m.initial_state(1)
    while True:
        state, p = m.step(state, np.array([obs]))
        obs = int(env.nxt[obs, int(np.argmax(p[0]))])
        if obs == env.end:
            break
        path.append(obs)
    assert tuple(path) == tuple(routes[1])


@pytest.mark.parametrize("mode", ["SVF", "SAVF"])
def test_maxent_feature_matching_at_optimum(net, env, mode):
    ds = dg.generate_dataset(net, dg.single_od_pattern(net), dg.RouteChoiceModel("Logit"), 400, seed=1)
    m = maxent_train(ds, env, mode, iters=2000, lr=0.1, tol=5e-3)
    assert m.gaps[-1] < 0.01
    assert m.gaps[-1] < m.gaps[0]


def test_maxent_reward_shift_invariance(env, routes):
    rng = np.random.default_rng(0)
    for mode, size in (("SVF", env.net.n_links + 1), ("SAVF", (env.net.n_links + 1) * 4)):
        w = rng.normal(size=size)
        origin = np.full(len(env.net.entry_links), 1.0 / len(env.net.entry_links))
        a = MaxEntModel(env, mode, w, 12, origin)
        b = MaxEntModel(env, mode, w + 3.7, 12, origin)
        assert np.allclose(a.policy, b.policy, atol=1e-12)
        assert np.allclose(a.policy.sum(axis=2)[:, a.valid.any(axis=1)], 1.0, atol=1e-12)


# -- TrajGAIL ----------------------------------------------------------------------------
def _bundle(env, **kw):
    cfg = dict(hidden=6, layers=1, cell="GRU", seed=0)
    cfg.update(kw)
    return TrajGailBundle(env, GailConfig(**cfg))


def test_bundle_modules_share_nothing(env):
    b = _bundle(env)
    names = b.params.names()
    assert set(b.opt["pol"].names()) | set(b.opt["val"].names()) | set(b.opt["dis"].names()) == set(names)
    assert len(b.opt["pol"]) + len(b.opt["val"]) + len(b.opt["dis"]) == len(names)


def test_discriminator_at_half_gives_ln4(env, routes):
    b = _bundle(env)
    b.params["dis.out.W"].data[:] = 0.0
    b.params["dis.out.b"].data[:] = 0.0
    real = make_batch(env, _ds(routes[:3]))
    gen = make_batch(env, _ds(routes[3:]))
    assert discriminator_loss(b, real, gen).item() == pytest.approx(math.log(4), abs=1e-12)
    assert np.all(b.d_prob(gen) == 0.5)


def test_discriminator_separates_toy_batches(env, routes):
    b = _bundle(env, lr=3e-2)
    real = make_batch(env, _ds([routes[0]] * 4))
    gen = make_batch(env, _ds([routes[5]] * 4))
    for _ in range(150):
        j = gail_discriminator_update(b, real, gen)
    # shared Start/origin prefixes are indistinguishable, the rest separates
    assert j < 0.4
    d = b.d_prob(gen)
    assert np.all((d > 0) & (d < 1))


def test_reward_examples():
    assert reward_from_discriminator(0.5) == pytest.approx(math.log(2), abs=1e-15)
    assert reward_from_discriminator(1.0) == pytest.approx(-math.log1p(-1e-8), abs=1e-15)
    assert reward_from_discriminator(0.0) == pytest.approx(-math.log(1e-8), abs=1e-12)
    assert reward_from_discriminator(0.0) == pytest.approx(18.42, abs=5e-3)
    assert np.all(reward_from_discriminator(np.linspace(0, 0.999, 9)) > 0)


@pytest.mark.parametrize("cell", ["GRU", "LSTM"])
def test_gail_objective_gradients(env, routes, cell):
    b = _bundle(env, cell=cell, hidden=4, layers=2)
    real = make_batch(env, _ds(routes[:2]))
    gen = make_batch(env, _ds([routes[3], routes[4][:4]], complete=False))
    rew = np.random.default_rng(0).random(gen.obs.size)
    q = np.random.default_rng(1).normal(size=gen.obs.size)
    assert nd.gradient_check(lambda ps: discriminator_loss(b, real, gen), b.params) < 1e-4
    # bootstrap targets are constants of the semi-gradient loss
    tgt = value_targets(b, gen, rew)
    assert nd.gradient_check(lambda ps: value_loss(b, gen, rew, target=tgt), b.params) < 1e-4
    assert nd.gradient_check(lambda ps: policy_objective(b, gen, q)[0], b.params) < 1e-4


def test_value_bellman_chain():
    # one cell: Start -> cell -> End with a single valid action at each step
    env = CellEnv(1)
    b = _bundle(env, lr=1e-2, gamma=0.95)
    batch = make_batch(env, _ds([[0]]))
    rew = np.array([1.0, 2.0])
    for _ in range(800):
        gail_value_update(b, batch, rew)
    with T.no_grad():
        q = T.pick(b.value.outputs(batch.obs), batch.act.T.ravel()).data
    assert q[1] == pytest.approx(2.0, abs=1e-3)
    assert q[0] == pytest.approx(1.0 + 0.95 * 2.0, abs=1e-3)


def test_value_target_without_discount(env, routes):
    b = _bundle(env, gamma=0.0)
    batch = make_batch(env, _ds(routes[:2]))
    rew = np.random.default_rng(0).random(batch.obs.size)
    with T.no_grad():
        q = T.pick(b.value.outputs(batch.obs), batch.act.T.ravel()).data
        got = value_loss(b, batch, rew).item()
    w = batch.w.T.ravel()
    assert got == pytest.approx(((q - rew) ** 2 * w).sum() / w.sum(), abs=1e-12)


def test_policy_update_zero_q_leaves_parameters(env, routes):
    b = _bundle(env, lam=0.0)
    batch = make_batch(env, _ds(routes[:3]))
    before = b.params.snapshot()
    gail_policy_update(b, batch, q=np.zeros(batch.obs.size))
    after = b.params.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_q_baselines(env, routes):
    from trajlab.models.gail import q_values
    batch = make_batch(env, _ds(routes[:4]))
    w = batch.w.T.ravel()
    b = _bundle(env, baseline="state")
    with T.no_grad():
        q_all = b.value.outputs(batch.obs).data
        pi = np.exp(b.policy.log_probs(batch.obs).data)
    mask = env.mask[batch.obs.T.ravel()]
    act = batch.act.T.ravel()
    expect = [q_all[i, act[i]] - sum(pi[i, a] * q_all[i, a] for a in np.flatnonzero(mask[i]))
              for i in range(len(act))]
    assert np.allclose(q_values(b, batch), expect, atol=1e-12)
    b.config.baseline = "mean"
    assert abs((q_values(b, batch) * w).sum()) < 1e-12
    b.config.baseline = "median"
    with pytest.raises(ValueError):
        q_values(b, batch)


def _cell_batch():
    env = CellEnv(2)
    return env, make_batch(env, _ds([[0]] * 4))


def test_policy_entropy_drives_uniform():
    env, batch = _cell_batch()
    b = _bundle(env, lam=10.0, lr=1e-2)
    b.params["pol.out.b"].data[:] = [3.0, -3.0, 0.0]
    for _ in range(300):
        gail_policy_update(b, batch, q=np.zeros(batch.obs.size))
    p = b.policy.next_probs([[env.start, 0]])[0]
    assert p[1] == pytest.approx(0.5, abs=1e-2) and p[2] == pytest.approx(0.5, abs=1e-2)


def test_policy_gradient_raises_rewarded_action():
    env, batch = _cell_batch()
    b = _bundle(env, lam=0.0, lr=1e-2)
    q = np.zeros(batch.obs.shape[1] * batch.obs.shape[0])
    B = batch.obs.shape[0]
    q[B:] = 1.0               # the End step after cell 0
    before = b.policy.next_probs([[env.start, 0]])[0][2]
    gail_policy_update(b, batch, q=q)
    after = b.policy.next_probs([[env.start, 0]])[0][2]
    assert after > before


def test_gail_train_log_and_collapse_warning(env, routes, tmp_path):
    ds = _ds(routes * 2)
    cfg = GailConfig(iters=4, n_samples=1, hidden=4, layers=1, cell="GRU", max_len=12,
                     collapse_window=3)
    path = tmp_path / "log.csv"
    b = gail_train(ds, env, cfg, log_path=path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == LOG_FIELDS and len(rows) == 5
    assert all(np.isfinite([float(x) for x in r]).all() for r in rows[1:])
    assert len(b.warnings) == 1 and "mode collapse" in b.warnings[0]


# -- model files ----------------------------------------------------------------------------
def test_model_files_round_trip(net, env, routes, tmp_path):
    ds = _ds(routes * 2)
    acc = np.random.default_rng(0).random((len(ds), net.n_links, 10))
    models = {
        "mmc": fit_transition(ds, env),
        "svf": maxent_train(ds, env, "SVF", iters=3),
        "savf": maxent_train(ds, env, "SAVF", iters=3),
        "rnn": rnn_train(ds, env, epochs=1, cell=SMALL),
        "arnn": arnn_train(ds, env, acc, epochs=1, cell=SMALL, attn_size=4),
        "gail": _bundle(env),
    }
    for name, m in models.items():
        path = tmp_path / name
        save_model(m, path)
        m2 = load_model(path, net)
        assert m2.kind == m.kind
        ctx = acc[:5] if name == "arnn" else None
        a = rollout_sample(m, 5, 20, seed=1, contexts=ctx)
        c = rollout_sample(m2, 5, 20, seed=1, contexts=ctx)
        assert a.to_jsonl() == c.to_jsonl()
        assert (tmp_path / name).read_bytes()[:4] == b"TLAB"
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "mmc", rn.build_grid(3, 3))
    cells = CellEnv(4, "abc")
    tm = fit_transition(_ds([[0, 1, 2]]), cells)
    save_model(tm, tmp_path / "trn")
    assert load_model(tmp_path / "trn").env.n_loc == 4
