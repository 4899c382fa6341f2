"""Synthetic expert demand: OD patterns, route choice, departures and
vehicle-accumulation traffic states."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import binom

from . import roadnet as rn
from .parallel import map_chunks
from .trajectory import Trajectory, TrajectoryDataset

PATTERN_KINDS = ("SingleOD", "OneWayMultiOD", "TwoWayMultiOD")
CHOICE_KINDS = ("Fixed", "Logit", "CLogit", "Proportional", "Binomial")


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class DemandPattern:
    kind: str
    pairs: tuple                      # ((origin_link, dest_link), ...)
    weights: tuple
    major_weight: float = 10.0
    background_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise DemandError(f"unknown pattern kind {self.kind!r}")
        if len(self.pairs) != len(self.weights) or not self.pairs:
            raise DemandError("pattern needs one weight per OD pair")
        w = np.asarray(self.weights, dtype=float)
        if (w < 0).any() or not (w > 0).any():
            raise DemandError("weights must be >= 0 with at least one positive")

    def probabilities(self):
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum()

    def to_dict(self):
        return {"kind": self.kind, "pairs": [list(p) for p in self.pairs],
                "weights": list(self.weights), "major_weight": self.major_weight,
                "background_weight": self.background_weight}


def single_od_pattern(net, od=None):
    od = od or rn.default_single_od(net)
    return DemandPattern("SingleOD", (tuple(int(x) for x in od),), (1.0,), 1.0, 0.0)


def _multi_od(net, kind, major, major_weight, background_weight):
    pairs = net.od_pairs()
    majors = set(major)
    weights = tuple(major_weight if p in majors else background_weight for p in pairs)
    return DemandPattern(kind, tuple(pairs), weights, major_weight, background_weight)


def one_way_multi_od_pattern(net, major_weight=10.0, background_weight=1.0):
    """All OD pairs, with west-side entries to east-side exits as the major flow."""
    major = [(o, d) for o in rn.side_links(net, "entry", "W")
             for d in rn.side_links(net, "exit", "E")]
    return _multi_od(net, "OneWayMultiOD", major, major_weight, background_weight)


def two_way_multi_od_pattern(net, major_weight=10.0, background_weight=1.0):
    major = [(o, d) for o in rn.side_links(net, "entry", "W")
             for d in rn.side_links(net, "exit", "E")]
    major += [(o, d) for o in rn.side_links(net, "entry", "E")
              for d in rn.side_links(net, "exit", "W")]
    return _multi_od(net, "TwoWayMultiOD", major, major_weight, background_weight)


def make_pattern(net, kind, **kw):
    builders = {"SingleOD": single_od_pattern, "OneWayMultiOD": one_way_multi_od_pattern,
                "TwoWayMultiOD": two_way_multi_od_pattern}
    if kind not in builders:
        raise DemandError(f"unknown pattern kind {kind!r}")
    return builders[kind](net, **kw)


def pattern_from_dict(d):
    return DemandPattern(d["kind"], tuple(tuple(p) for p in d["pairs"]), tuple(d["weights"]),
                         d.get("major_weight", 10.0), d.get("background_weight", 1.0))


@dataclass(frozen=True)
class RouteChoiceModel:
    kind: str = "Logit"
    theta: float = 1.0
    alpha: float = 2.0
    beta_cf: float = 1.0
    gamma_cf: float = 1.0
    p: float = 0.3
    slack: int = 0

    def __post_init__(self):
        if self.kind not in CHOICE_KINDS:
            raise DemandError(f"unknown route choice model {self.kind!r}")
        if self.theta <= 0 or self.alpha <= 0 or self.gamma_cf <= 0:
            raise DemandError("theta, alpha and gamma_cf must be positive")
        if not 0.0 < self.p < 1.0:
            raise DemandError("p must lie in (0, 1)")
        if self.slack < 0:
            raise DemandError("slack must be >= 0")

    def to_dict(self):
        return asdict(self)


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def commonality_factor(routes, gamma=1.0):
    sets = [set(r) for r in routes]
    lens = np.array([len(r) for r in routes], dtype=float)
    cf = np.empty(len(routes))
    for k in range(len(routes)):
        acc = 0.0
        for j in range(len(routes)):
            shared = len(sets[k] & sets[j])
            acc += (shared / math.sqrt(lens[k] * lens[j])) ** gamma
        cf[k] = math.log(acc)
    return cf


def route_choice_probabilities(routes, model, costs=None):
    """Choice probabilities over ``routes``; ``costs`` default to link counts.

    Ties between equal-cost routes are broken by the link-id tuple, so the
    result is permutation-equivariant.
    """
    if len(routes) == 0:
        raise DemandError("empty route list")
    costs = np.array([len(r) for r in routes] if costs is None else costs, dtype=float)
    if (costs <= 0).any():
        raise DemandError("route costs must be positive")
    K = len(routes)
    order = sorted(range(K), key=lambda k: (costs[k], tuple(routes[k])))
    if model.kind == "Fixed":
        p = np.zeros(K)
        p[order[0]] = 1.0
    elif model.kind == "Logit":
        p = _softmax(-model.theta * costs)
    elif model.kind == "Proportional":
        w = costs ** (-model.alpha)
        p = w / w.sum()
    elif model.kind == "CLogit":
        cf = commonality_factor(routes, model.gamma_cf)
        p = _softmax(-model.theta * costs - model.beta_cf * cf)
    else:
        pmf = binom.pmf(np.arange(K), K - 1, model.p)
        p = np.empty(K)
        p[order] = pmf
        p = p / p.sum()
    return p


# -- dataset generation ---------------------------------------------------------
@dataclass
class _Plan:
    od_cdf: np.ndarray
    pairs: list
    routes: list            # per pair: list of routes
    route_cdfs: list


def _cdf(p):
    c = np.cumsum(p)
    c[-1] = 1.0
    return c


def _draw(cdf, u):
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def _make_plan(net, pattern, model):
    pairs, routes, cdfs, w = [], [], [], []
    for (o, d), wt in zip(pattern.pairs, pattern.weights):
        if not (net.is_link(o) and net.is_link(d)):
            raise DemandError(f"pattern references links absent from the network: {(o, d)}")
        if o not in net.entry_links or d not in net.exit_links:
            raise DemandError(f"{(o, d)} is not an entry/exit pair")
        if net.links[o].head == net.links[d].tail:
            raise DemandError(f"{(o, d)} is a same-intersection pair")
        if wt <= 0:
            continue
        rs = rn.enumerate_routes(net, o, d, slack=model.slack)
        if not rs:
            raise DemandError(f"no route for OD pair {(o, d)}")
        pairs.append((o, d))
        routes.append(rs)
        cdfs.append(_cdf(route_choice_probabilities(rs, model)))
        w.append(wt)
    w = np.asarray(w, dtype=float)
    return _Plan(_cdf(w / w.sum()), pairs, routes, cdfs)


def _gen_chunk(start, stop, plan, seed, horizon):
    out = []
    for i in range(start, stop):
        u = np.random.default_rng([seed, i]).random(3)
        k = _draw(plan.od_cdf, u[0])
        r = plan.routes[k][_draw(plan.route_cdfs[k], u[1])]
        out.append(Trajectory(i, tuple(r), float(horizon * u[2])))
    return out


def generate_dataset(net, pattern, model, n, seed=0, depart_horizon_min=60.0,
                     link_travel_min=1.0, workers=1):
    """Draw ``n`` expert trajectories; trajectory ``i`` depends only on (seed, i)."""
    if n < 1:
        raise DemandError("n must be >= 1")
    plan = _make_plan(net, pattern, model)
    trajs = map_chunks(_gen_chunk, n, (plan, int(seed), float(depart_horizon_min)), workers)
    meta = {"seed": int(seed), "n": int(n), "pattern": pattern.to_dict(),
            "model": model.to_dict(), "depart_horizon_min": float(depart_horizon_min),
            "link_travel_min": float(link_travel_min), "net_hash": net.hash(),
            "granularity": "link"}
    return TrajectoryDataset(trajs, meta)


def split_train_test(ds, ratio=0.7, seed=0):
    """Shuffled disjoint split with ``round(ratio * n)`` training trajectories."""
    if not 0.0 < ratio < 1.0:
        raise DemandError("ratio must lie in (0, 1)")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    k = int(math.floor(ratio * n + 0.5))
    train, test = ds.subset(sorted(perm[:k])), ds.subset(sorted(perm[k:]))
    train.metadata.update(split="train", split_seed=int(seed), ratio=ratio)
    test.metadata.update(split="test", split_seed=int(seed), ratio=ratio)
    return train, test


# -- traffic state ----------------------------------------------------------------
@dataclass
class TrafficState:
    accumulation: np.ndarray          # [N locations, bins]
    bin_min: float = 1.0


class Occupancy:
    """Per-location sorted enter/exit times under a constant per-element travel time."""

    def __init__(self, ds, n_locations, travel_min=1.0):
        self.n = int(n_locations)
        self.travel = float(travel_min)
        locs, enters = [], []
        for t in ds:
            k = np.arange(len(t.links))
            locs.append(np.asarray(t.links, dtype=np.int64))
            enters.append(t.depart + k * self.travel)
        locs = np.concatenate(locs) if locs else np.zeros(0, dtype=np.int64)
        enters = np.concatenate(enters) if enters else np.zeros(0)
        self.enter = []
        self.exit = []
        self.hist_max = np.zeros(self.n)
        for l in range(self.n):
            e = np.sort(enters[locs == l])
            x = e + self.travel
            self.enter.append(e)
            self.exit.append(x)
            if e.size:
                # exact max of concurrent occupancy; exits sort before entries at ties
                times = np.concatenate([x, e])
                delta = np.concatenate([-np.ones(x.size), np.ones(e.size)])
                order = np.lexsort((delta, times))
                self.hist_max[l] = np.cumsum(delta[order]).max()

    def counts(self, instants):
        """Raw vehicle counts, shape [N, len(instants)]."""
        t = np.asarray(instants, dtype=float)
        out = np.zeros((self.n, t.size))
        for l in range(self.n):
            if self.enter[l].size:
                out[l] = (np.searchsorted(self.enter[l], t, side="right")
                          - np.searchsorted(self.exit[l], t, side="right"))
        return out

    def normalized(self, instants):
        c = self.counts(instants)
        den = np.where(self.hist_max > 0, self.hist_max, 1.0)
        return c / den[:, None]


def bin_instants(at_time, bins=10, bin_min=1.0):
    return at_time - (bins - np.arange(bins)) * bin_min


def _n_locations(net):
    return net.n_links if isinstance(net, rn.RoadNetwork) else int(net)


def compute_accumulation(ds, net, at_time, bins=10, bin_min=1.0, link_travel_min=1.0,
                         occupancy=None):
    """Normalized accumulation at the ``bins`` instants before ``at_time``.

    ``net`` may be a RoadNetwork (links as locations) or a location count.
    """
    if at_time < 0:
        raise DemandError("at_time precedes the horizon start")
    occ = occupancy or Occupancy(ds, _n_locations(net), link_travel_min)
    return TrafficState(occ.normalized(bin_instants(at_time, bins, bin_min)), bin_min)


def accumulation_batch(ds, n_locations, bins=10, bin_min=1.0, travel_min=1.0, occupancy=None):
    """Traffic state before every trajectory's departure, shape [n, N, bins]."""
    occ = occupancy or Occupancy(ds, n_locations, travel_min)
    departs = ds.departs()
    inst = departs[:, None] - (bins - np.arange(bins))[None, :] * bin_min
    flat = occ.normalized(inst.ravel())            # [N, n*bins]
    return flat.reshape(occ.n, len(ds), bins).transpose(1, 0, 2)


# -- traffic-state-dependent scenario ------------------------------------------------
@dataclass
class FlipScenario:
    dataset: TrajectoryDataset
    flagged_link: int
    route_free: tuple
    route_detour: tuple
    focal_ids: list = field(default_factory=list)


def congestion_flip_scenario(net, n_focal=600, n_background=900, seed=0, horizon=120.0,
                             burst_len=4.0, threshold=2, travel_min=1.0):
    """Focal drivers avoid a link when it is congested one bin before departure.

    Background traffic crosses the flagged link in bursts; a focal driver
    takes the detour iff at least ``threshold`` vehicles occupy the flagged
    link at ``depart - 1 bin``, and the direct route otherwise.
    """
    rng = np.random.default_rng(seed)
    o, d = rn.default_single_od(net)
    routes = rn.enumerate_routes(net, o, d)
    route_free = tuple(routes[0])
    # detour: the shortest route sharing only the origin and destination links
    route_detour = next(tuple(r) for r in reversed(routes)
                        if len(set(r) & set(route_free)) == 2)
    flagged = route_free[1]
    # background OD through the flagged link that does not start on the focal origin
    bg = None
    for oo, dd in net.od_pairs():
        if oo == o:
            continue
        for r in rn.enumerate_routes(net, oo, dd):
            if flagged in r and r.index(flagged) <= 2:
                bg = tuple(r)
                break
        if bg:
            break
    if bg is None:
        raise DemandError("no background route crosses the flagged link")
    offset = bg.index(flagged) * travel_min
    # bursts of background departures
    n_bursts = max(1, int(horizon / (3 * burst_len)))
    starts = np.sort(rng.uniform(0, horizon, n_bursts))
    which = rng.integers(0, n_bursts, n_background)
    bg_dep = starts[which] + rng.uniform(0, burst_len, n_background)
    fo_dep = rng.uniform(0, horizon, n_focal)
    # focal vehicles enter the flagged link one step after departing
    events = sorted([(t, 0, i) for i, t in enumerate(bg_dep)] +
                    [(t, 1, i) for i, t in enumerate(fo_dep)])
    enters = []           # flagged-link entry times of vehicles already placed
    trajs = []
    focal_ids = []
    for t, is_focal, i in events:
        if is_focal:
            probe = t - 1.0
            e = np.asarray(enters)
            busy = int(((e <= probe) & (probe < e + travel_min)).sum()) if e.size else 0
            route = route_detour if busy >= threshold else route_free
            if route is route_free:
                enters.append(t + 1 * travel_min)
            focal_ids.append(len(trajs))
        else:
            route = bg
            enters.append(t + offset)
        trajs.append(Trajectory(len(trajs), route, float(t)))
    meta = {"seed": int(seed), "scenario": "congestion_flip", "flagged_link": int(flagged),
            "threshold": int(threshold), "link_travel_min": float(travel_min),
            "net_hash": net.hash(), "granularity": "link"}
    return FlipScenario(TrajectoryDataset(trajs, meta), int(flagged), route_free,
                        route_detour, focal_ids)
