"""Trajectory- and dataset-level metrics plus report rendering."""
from __future__ import annotations

import csv
import itertools
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .trajectory import TrajectoryDataset

BLEU_FLOOR = 1e-9
METEOR_EXACT_LIMIT = 8
METEOR_EXACT_BUDGET = math.factorial(8)
UNKNOWN = "UNKNOWN"
CCDF_GRID = np.round(np.arange(101) * 0.01, 2)


class EvaluationError(ValueError):
    pass


# -- BLEU ----------------------------------------------------------------------------
def _ngrams(seq, k):
    return Counter(tuple(seq[i:i + k]) for i in range(len(seq) - k + 1))


def bleu_details(candidate, reference, n=4):
    """(score, flagged, precisions).

    An order ``k`` the candidate is too short for counts as 1 when the
    reference is equally short (nothing to match), else as the 1e-9 floor
    and the result is flagged.
    """
    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        raise EvaluationError("bleu needs non-empty sequences")
    precisions = []
    flagged = False
    for k in range(1, n + 1):
        c = _ngrams(cand, k)
        total = sum(c.values())
        if total == 0:
            if len(ref) >= k:
                flagged = True
                precisions.append(BLEU_FLOOR)
            else:
                precisions.append(1.0)
            continue
        r = _ngrams(ref, k)
        hit = sum(min(v, r[g]) for g, v in c.items())
        precisions.append(max(hit / total, BLEU_FLOOR))
    bp = min(1.0, len(cand) / len(ref))
    score = bp * math.exp(sum(math.log(p) for p in precisions) / n)
    return score, flagged, precisions


def bleu(candidate, reference, n=4):
    return bleu_details(candidate, reference, n)[0]


# -- METEOR --------------------------------------------------------------------------
def _crossings(pairs):
    x = 0
    for (i1, j1), (i2, j2) in itertools.combinations(pairs, 2):
        if (i1 - i2) * (j1 - j2) < 0:
            x += 1
    return x


def chunk_count(pairs):
    if not pairs:
        return 0
    ps = sorted(pairs)
    c = 1
    for (i1, j1), (i2, j2) in zip(ps, ps[1:]):
        if not (i2 == i1 + 1 and j2 == j1 + 1):
            c += 1
    return c


def _exact_alignment(cand, ref):
    """Max mappings, then fewest crossings, then fewest chunks.

    Uncrossing two same-element pairs strictly lowers the crossing count,
    so each element's matched positions are paired in order and only the
    choice of positions is searched.
    """
    pos_c, pos_r = {}, {}
    for i, s in enumerate(cand):
        pos_c.setdefault(s, []).append(i)
    for j, s in enumerate(ref):
        pos_r.setdefault(s, []).append(j)
    options = []
    for s in pos_c:
        if s not in pos_r:
            continue
        ci, rj = pos_c[s], pos_r[s]
        if len(ci) <= len(rj):
            options.append([list(zip(ci, p)) for p in itertools.combinations(rj, len(ci))])
        else:
            options.append([list(zip(p, rj)) for p in itertools.combinations(ci, len(rj))])
    best, best_key = [], None
    for combo in itertools.product(*options):
        pairs = [p for part in combo for p in part]
        key = (_crossings(pairs), chunk_count(pairs))
        if best_key is None or key < best_key:
            best, best_key = pairs, key
    return best


def _greedy_alignment(cand, ref):
    used = set()
    pairs = []
    last_j = -1
    for i, s in enumerate(cand):
        free = [j for j, r in enumerate(ref) if r == s and j not in used]
        if not free:
            continue
        after = [j for j in free if j > last_j]
        j = after[0] if after else free[0]
        used.add(j)
        pairs.append((i, j))
        last_j = j
    return pairs


def _n_alignments(cc, rc):
    n = 1
    for s, a in cc.items():
        b = rc.get(s, 0)
        if b:
            n *= math.comb(max(a, b), min(a, b))
    return n


def align(candidate, reference):
    """Exact search when at most 8 elements map or the search space is no
    larger than 8!, greedy otherwise."""
    cand, ref = list(candidate), list(reference)
    cc, rc = Counter(cand), Counter(ref)
    m = sum(min(v, rc[s]) for s, v in cc.items())
    if m <= METEOR_EXACT_LIMIT or _n_alignments(cc, rc) <= METEOR_EXACT_BUDGET:
        return _exact_alignment(cand, ref)
    return _greedy_alignment(cand, ref)


def meteor(candidate, reference):
    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        raise EvaluationError("meteor needs non-empty sequences")
    pairs = align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    P = m / len(cand)
    R = m / len(ref)
    fmean = 10.0 * P * R / (R + 9.0 * P)
    pen = 0.5 * (chunk_count(pairs) / m) ** 3
    return fmean * (1.0 - pen)


METRICS = {"bleu": bleu, "meteor": meteor}


def _metric(metric):
    return METRICS[metric] if isinstance(metric, str) else metric


def _score_or_zero(f, cand, ref):
    if not cand or not ref:
        return 0.0
    return f(cand, ref)


# -- dataset-level trajectory scores -------------------------------------------------------
def max_score_eval(generated, reference, metric="bleu", dedup=True):
    """Per generated trajectory, the best score against any reference."""
    f = _metric(metric)
    refs = [tuple(t.links) for t in reference]
    if not refs:
        raise EvaluationError("empty reference set")
    if dedup:
        refs = list(dict.fromkeys(refs))
    cache = {}
    out = np.zeros(len(generated))
    for k, t in enumerate(generated):
        key = tuple(t.links)
        if key not in cache:
            cache[key] = max(_score_or_zero(f, key, r) for r in refs)
        out[k] = cache[key]
    return out


def prediction_score_eval(model, test, g, N=100, metric="bleu", max_len=50, seed=0, contexts=None):
    """Mean score of ``N`` sampled completions of each length-``g`` prefix.

    Returns ``(by_length, overall, n_failed)`` where ``by_length`` maps the
    original trajectory length to the mean score.
    """
    from .models.sampling import complete_prefixes
    f = _metric(metric)
    keep = [i for i, t in enumerate(test) if len(t) > g]
    prefixes = [tuple(test[i].links[:g]) for i in keep]
    ctx = None if contexts is None else np.asarray(contexts)[keep]
    comps = complete_prefixes(model, prefixes, N, max_len, seed, ctx)
    by_len = {}
    scores = []
    failed = 0
    for i, outs in zip(keep, comps):
        truth = tuple(test[i].links[g:])
        s = []
        for cont, _, bad in outs:
            failed += bad
            s.append(0.0 if bad else _score_or_zero(f, cont, truth))
        m = float(np.mean(s))
        scores.append(m)
        by_len.setdefault(len(test[i]), []).append(m)
    by_len = {k: float(np.mean(v)) for k, v in sorted(by_len.items())}
    return by_len, float(np.mean(scores)) if scores else float("nan"), failed


# -- CPP_k ---------------------------------------------------------------------------
def ccdf(values, grid=CCDF_GRID):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return np.zeros(len(grid))
    return np.array([(v >= x).mean() for x in grid])


def auc(curve, grid=CCDF_GRID):
    y = np.asarray(curve, dtype=float)
    return float(np.sum((y[1:] + y[:-1]) * np.diff(grid)) / 2.0)


def cpp_values(step_probs, k, g):
    """Product of the true next ``k`` step probabilities after ``g`` locations.

    ``step_probs`` are per-trajectory arrays from the Start step onward, so
    index ``g`` is the decision after the g-th location. Cases without
    ``k`` remaining decisions are skipped.
    """
    if k < 1:
        raise EvaluationError("k must be >= 1")
    return np.array([float(np.prod(p[g:g + k])) for p in step_probs if len(p) >= g + k])


def cpp_k(model, test, k, g, contexts=None):
    """(ccdf on the 0..1 grid, AUC, raw CPP values)."""
    from .models.sampling import step_probabilities
    vals = cpp_values(step_probabilities(model, test, contexts), k, g)
    curve = ccdf(vals)
    return curve, auc(curve), vals


# -- route distributions -----------------------------------------------------------------
def route_distributions(generated, real):
    real_counts = real.route_counts()
    keys = sorted(real_counts, key=lambda k: (len(k), k))
    n_real = sum(real_counts.values())
    p = np.array([real_counts[k] / n_real for k in keys] + [0.0])
    gen_counts = generated.route_counts()
    n_gen = len(generated)
    known = np.array([gen_counts.get(k, 0) for k in keys], dtype=float)
    unknown = n_gen - known.sum()
    q = np.concatenate([known, [unknown]]) / n_gen
    return keys + [UNKNOWN], p, q, int(unknown)


def js_distance(p, q):
    """sqrt of the base-2 Jensen-Shannon divergence."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    d = 0.5 * kl(p) + 0.5 * kl(q)
    return math.sqrt(min(max(d, 0.0), 1.0))


def route_jsd(generated, real):
    if len(real) == 0:
        raise EvaluationError("empty real dataset")
    if len(generated) == 0:
        raise EvaluationError("empty generated dataset")
    _, p, q, unknown = route_distributions(generated, real)
    return js_distance(q, p), unknown


# -- link transition entropy -----------------------------------------------------------------
def transition_entropy(ds):
    """Mean over links with an observed successor link of the successor entropy (nats)."""
    if len(ds) == 0:
        raise EvaluationError("empty dataset")
    succ = {}
    for t in ds:
        for a, b in zip(t.links[:-1], t.links[1:]):
            succ.setdefault(a, Counter())[b] += 1
    if not succ:
        return 0.0
    tot = 0.0
    for c in succ.values():
        n = np.array(list(c.values()), dtype=float)
        pr = n / n.sum()
        tot += float(-(pr * np.log(pr)).sum())
    return tot / len(succ)


def complexity_sensitivity(points):
    """OLS slope and intercept of d_JS against H(D)."""
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    if len(pts) < 2 or np.ptp(x) == 0:
        raise EvaluationError("need at least two distinct H values")
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    return slope, float(ym - slope * xm)


# -- region metrics ------------------------------------------------------------------------------
@dataclass
class RegionStats:
    visits: np.ndarray            # unique-visitor share per cell
    flows: dict                   # (cell_a, cell_b) -> transitions per trajectory
    revisit: np.ndarray           # D per trajectory, percent
    mean_revisit: float


def revisit_ratio(cells):
    m = len(cells)
    return 0.0 if m == 0 else (m - len(set(cells))) / m * 100.0


def region_stats(ds, n_cells):
    n = max(len(ds), 1)
    visits = np.zeros(n_cells)
    flows = Counter()
    rev = []
    for t in ds:
        cells = list(t.links)
        for c in set(cells):
            visits[c] += 1
        for a, b in zip(cells[:-1], cells[1:]):
            flows[(a, b)] += 1
        rev.append(revisit_ratio(cells))
    rev = np.array(rev)
    return RegionStats(visits / n, {k: v / n for k, v in flows.items()}, rev,
                       float(rev.mean()) if rev.size else 0.0)


def region_metrics(generated, real, part):
    """Side-by-side region statistics for two cell-sequence datasets."""
    n = part.n_cells if hasattr(part, "n_cells") else int(part)
    return {"generated": region_stats(generated, n), "real": region_stats(real, n)}


# -- report ------------------------------------------------------------------------------------------
@dataclass
class EvalReport:
    rows: dict = field(default_factory=dict)       # model -> metrics dict or {"error": ...}
    metadata: dict = field(default_factory=dict)
    ccdf: dict = field(default_factory=dict)       # model -> {k: curve}

    def to_dict(self):
        return {"metadata": self.metadata, "models": self.rows,
                "ccdf": {m: {str(k): list(map(float, v)) for k, v in d.items()}
                         for m, d in self.ccdf.items()}}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_markdown(self):
        cols = ["bleu_mean", "bleu_std", "meteor_mean", "meteor_std", "d_js", "unknown"]
        best = {}
        for c, better in (("bleu_mean", max), ("meteor_mean", max), ("d_js", min)):
            vals = [r[c] for r in self.rows.values() if c in r]
            if vals:
                best[c] = better(vals)
        lines = ["| model | " + " | ".join(cols) + " |", "|---" * (len(cols) + 1) + "|"]
        for name, r in self.rows.items():
            if "error" in r:
                lines.append(f"| {name} | error: {r['error']} |" + " |" * (len(cols) - 1))
                continue
            cells = []
            for c in cols:
                v = r.get(c, "")
                s = f"{v:.4f}" if isinstance(v, float) else str(v)
                if c in best and v == best[c]:
                    s = f"**{s}**"
                cells.append(s)
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        if "real_entropy" in self.metadata:
            lines.append("")
            lines.append(f"H(D) of the real dataset: {self.metadata['real_entropy']:.4f}")
        return "\n".join(lines) + "\n"

    def save(self, stem):
        with open(f"{stem}.json", "w") as fh:
            fh.write(self.to_json())
        with open(f"{stem}.md", "w") as fh:
            fh.write(self.to_markdown())
        for model, curves in self.ccdf.items():
            with open(f"{stem}.{model}.ccdf.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                ks = sorted(curves)
                w.writerow(["x"] + [f"k{k}" for k in ks])
                for i, x in enumerate(CCDF_GRID):
                    w.writerow([f"{x:.2f}"] + [repr(float(curves[k][i])) for k in ks])


def score_model(generated, real, reference=None, n=None):
    """One report row: BLEU/METEOR (max over reference) plus d_JS vs ``real``."""
    if len(generated) == 0:
        raise EvaluationError("empty generated dataset")
    reference = real if reference is None else reference
    gen = generated if n is None else TrajectoryDataset(generated.trajectories[:n])
    b = max_score_eval(gen, reference, "bleu")
    m = max_score_eval(gen, reference, "meteor")
    d, unk = route_jsd(generated, real)
    return {"bleu_mean": float(b.mean()), "bleu_std": float(b.std()),
            "meteor_mean": float(m.mean()), "meteor_std": float(m.std()),
            "d_js": d, "unknown": unk, "n_generated": len(generated),
            "incomplete": sum(not t.complete for t in generated)}


def compare_models(real, generated_sets, reference=None, n_score=None):
    """Consolidated report; a failing model gets an error row instead."""
    rep = EvalReport(metadata={"n_real": len(real), "real_entropy": transition_entropy(real)})
    hashes = {real.metadata.get("net_hash")}
    for name, ds in generated_sets.items():
        h = ds.metadata.get("net_hash")
        if h and None not in hashes and h not in hashes:
            raise EvaluationError(f"network hash mismatch for {name}")
        try:
            rep.rows[name] = score_model(ds, real, reference, n_score)
        except EvaluationError as exc:
            rep.rows[name] = {"error": str(exc)}
    return rep
