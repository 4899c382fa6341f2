"""Four-way grid road networks: links, turn actions, masks and route sets.

Observations are integers: link ids ``0..L-1`` followed by the virtual
``Start`` (``L``) and ``End`` (``L + 1``) tokens. Turn actions are indexed
``STRAIGHT, LEFT, RIGHT, TERMINATE``. ``next_obs[o, a]`` holds the successor
observation or ``-1`` when the action is masked at ``o``.
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

STRAIGHT, LEFT, RIGHT, TERMINATE = range(4)
ACTION_NAMES = ("Straight", "Left", "Right", "Terminate")
N_ACTIONS = 4

# compass headings as (drow, dcol); row index grows southwards
HEADINGS = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}
_LEFT_OF = {"N": "W", "E": "N", "S": "E", "W": "S"}
_RIGHT_OF = {"N": "E", "E": "S", "S": "W", "W": "N"}
_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}


_UNREACHABLE = 10 ** 9


class InvalidAction(ValueError):
    """A masked action was requested."""


class NetworkError(ValueError):
    """Network construction or file validation failed."""


@dataclass
class Link:
    id: int
    from_xy: tuple
    to_xy: tuple
    length_m: float
    kind: str          # "internal", "entry" or "exit"
    tail: tuple        # (row, col) of the upstream intersection, None for entries
    head: tuple        # (row, col) of the downstream intersection, None for exits
    heading: str


@dataclass
class RoadNetwork:
    rows: int
    cols: int
    links: list
    next_obs: np.ndarray
    entry_links: list
    exit_links: list
    block_length_m: float = 200.0
    _hash: str = field(default="", repr=False)

    # -- tokens ----------------------------------------------------------
    @property
    def n_links(self):
        return len(self.links)

    @property
    def start(self):
        return len(self.links)

    @property
    def end(self):
        return len(self.links) + 1

    @property
    def n_obs(self):
        return len(self.links) + 2

    def is_link(self, o):
        return 0 <= o < len(self.links)

    # -- transitions -------------------------------------------------------
    def action_mask(self, o):
        if not self.is_link(o):
            raise NetworkError(f"{o} is not a link")
        return self.next_obs[o] >= 0

    def start_mask(self):
        return np.ones(len(self.entry_links), dtype=bool)

    def od_pairs(self):
        """Entry x exit pairs, excluding pairs on the same boundary intersection."""
        return [(o, d) for o in self.entry_links for d in self.exit_links
                if self.links[o].head != self.links[d].tail]

    def hash(self):
        if not self._hash:
            self._hash = hashlib.sha256(dumps(self).encode()).hexdigest()
        return self._hash


def _boundary_stub_heading(r, c, rows, cols):
    """Outward direction of the single stub pair at a boundary intersection.

    Walking clockwise, each corner joins the side that follows it, which
    gives every side the same number of stubs on square grids.
    """
    if r == 0 and c < cols - 1:
        return "N"
    if c == cols - 1 and r < rows - 1:
        return "E"
    if r == rows - 1 and c > 0:
        return "S"
    if c == 0 and r > 0:
        return "W"
    return None


def build_grid(rows, cols, block_length_m=200.0):
    """Grid of rows x cols four-way intersections with one entry and one exit
    stub on every boundary intersection."""
    if not (isinstance(rows, (int, np.integer)) and isinstance(cols, (int, np.integer))):
        raise NetworkError("grid dimensions must be integers")
    if rows < 2 or cols < 2 or rows * cols > 400:
        raise NetworkError(f"grid {rows}x{cols} outside 2..20 range (rows*cols <= 400)")
    if block_length_m <= 0:
        raise NetworkError("block length must be positive")

    def xy(r, c):
        return (float(c * block_length_m), float((rows - 1 - r) * block_length_m))

    stub = 0.5 * block_length_m
    links = []

    def new(kind, tail, head, heading, fxy, txy, length):
        links.append(Link(len(links), fxy, txy, float(length), kind, tail, head, heading))

    for r in range(rows):
        for c in range(cols):
            h = _boundary_stub_heading(r, c, rows, cols)
            if h is None:
                continue
            dr, dc = HEADINGS[h]
            x, y = xy(r, c)
            outside = (x + dc * stub, y - dr * stub)
            new("entry", None, (r, c), _OPPOSITE[h], outside, (x, y), stub)
    for r in range(rows):
        for c in range(cols):
            for h in "NESW":
                dr, dc = HEADINGS[h]
                r2, c2 = r + dr, c + dc
                if 0 <= r2 < rows and 0 <= c2 < cols:
                    new("internal", (r, c), (r2, c2), h, xy(r, c), xy(r2, c2), block_length_m)
    for r in range(rows):
        for c in range(cols):
            h = _boundary_stub_heading(r, c, rows, cols)
            if h is None:
                continue
            dr, dc = HEADINGS[h]
            x, y = xy(r, c)
            new("exit", (r, c), None, h, (x, y), (x + dc * stub, y - dr * stub), stub)

    leaving = {}
    for lk in links:
        if lk.tail is not None:
            leaving[(lk.tail, lk.heading)] = lk.id
    L = len(links)
    nxt = np.full((L, N_ACTIONS), -1, dtype=np.int64)
    for lk in links:
        if lk.kind == "exit":
            nxt[lk.id, TERMINATE] = L + 1
            continue
        for a, turn in ((STRAIGHT, lambda h: h), (LEFT, _LEFT_OF.get), (RIGHT, _RIGHT_OF.get)):
            target = leaving.get((lk.head, turn(lk.heading)))
            if target is not None:
                nxt[lk.id, a] = target
    entry = [lk.id for lk in links if lk.kind == "entry"]
    exits = [lk.id for lk in links if lk.kind == "exit"]
    net = RoadNetwork(rows, cols, links, nxt, entry, exits, float(block_length_m))
    validate(net)
    return net


def next_observation(net, o, a):
    """Successor of observation ``o`` under action ``a``.

    From ``Start`` the action indexes ``net.entry_links``.
    """
    if o == net.start:
        if not 0 <= a < len(net.entry_links):
            raise InvalidAction(f"entry choice {a} out of range")
        return net.entry_links[a]
    if not net.is_link(o):
        raise InvalidAction(f"no actions available from observation {o}")
    if not 0 <= a < N_ACTIONS:
        raise InvalidAction(f"unknown action {a}")
    o2 = int(net.next_obs[o, a])
    if o2 < 0:
        raise InvalidAction(f"action {ACTION_NAMES[a]} is masked on link {o}")
    return o2


def action_between(net, o, o2):
    """Action that moves ``o`` to ``o2``, or -1 if none does."""
    if o == net.start:
        try:
            return net.entry_links.index(o2)
        except ValueError:
            return -1
    hits = np.nonzero(net.next_obs[o] == o2)[0]
    return int(hits[0]) if hits.size else -1


def valid_actions(net, history):
    """Mask for the last observation of ``history``.

    For ``[Start]`` the mask ranges over the entry links; after ``End``
    nothing is available.
    """
    history = list(history)
    if not history or history[0] != net.start:
        raise NetworkError("history must start with the Start token")
    for o in history[1:-1]:
        if not net.is_link(o):
            raise NetworkError("virtual token inside a history")
    last = history[-1]
    if last == net.end:
        return np.zeros(N_ACTIONS, dtype=bool)
    if last == net.start:
        if len(history) > 1:
            raise NetworkError("Start token repeated")
        return net.start_mask()
    return net.action_mask(last)


def is_valid_route(net, links, complete=True):
    """True if ``links`` is a chain of unmasked transitions from an entry
    link (and, when ``complete``, ends on an exit link)."""
    if not links or links[0] not in net.entry_links:
        return False
    for a, b in zip(links[:-1], links[1:]):
        if not net.is_link(b) or b not in net.next_obs[a]:
            return False
    return (not complete) or net.next_obs[links[-1], TERMINATE] == net.end


def _bfs_to(net, dest):
    """Links-remaining distance from every link to ``dest`` (inclusive)."""
    L = net.n_links
    preds = [[] for _ in range(L)]
    for o in range(L):
        for a in range(3):
            o2 = net.next_obs[o, a]
            if o2 >= 0:
                preds[o2].append(o)
    dist = np.full(L, _UNREACHABLE, dtype=np.int64)
    dist[dest] = 1
    queue = deque([dest])
    while queue:
        u = queue.popleft()
        for p in preds[u]:
            if dist[p] > dist[u] + 1:
                dist[p] = dist[u] + 1
                queue.append(p)
    return dist


def enumerate_routes(net, origin, dest, slack=0, cap=1000):
    """All simple routes origin..dest no longer than shortest + slack links,
    sorted by (length, link ids) and truncated to ``cap``."""
    if origin not in net.entry_links:
        raise NetworkError(f"{origin} is not an entry link")
    if dest not in net.exit_links:
        raise NetworkError(f"{dest} is not an exit link")
    if net.links[origin].head == net.links[dest].tail:
        # same-intersection pair: only the direct U-turn counts, and the
        # four-action set cannot express it
        return [[origin, dest]] if dest in net.next_obs[origin, :3] else []
    dist = _bfs_to(net, dest)
    if dist[origin] >= _UNREACHABLE:
        return []
    limit = int(dist[origin]) + slack
    routes = []
    path = [origin]
    on_path = {origin}

    def dfs(u):
        if u == dest:
            routes.append(list(path))
            return
        for a in range(3):
            v = int(net.next_obs[u, a])
            if v < 0 or v in on_path:
                continue
            if len(path) + dist[v] > limit:
                continue
            path.append(v)
            on_path.add(v)
            dfs(v)
            path.pop()
            on_path.discard(v)

    dfs(origin)
    routes.sort(key=lambda r: (len(r), r))
    return routes[:cap]


def route_length_m(net, route):
    return float(sum(net.links[l].length_m for l in route))


def default_single_od(net):
    """Entry/exit pair two blocks down and two blocks across: (0,1) -> (2,3) on a 4x4 grid."""
    want_o = (0, 1)
    want_d = (min(2, net.rows - 1), min(3, net.cols - 1))
    o = next(l for l in net.entry_links if net.links[l].head == want_o)
    d = next(l for l in net.exit_links if net.links[l].tail == want_d)
    return o, d


def side_links(net, kind, side):
    """Entry or exit stubs on one side ("N", "E", "S", "W") of the grid."""
    pool = net.entry_links if kind == "entry" else net.exit_links
    out = []
    for l in pool:
        lk = net.links[l]
        h = lk.heading if kind == "exit" else _OPPOSITE[lk.heading]
        if h == side:
            out.append(l)
    return out


# -- validation & files --------------------------------------------------------
def validate(net):
    L = net.n_links
    nxt = net.next_obs
    if nxt.shape != (L, N_ACTIONS):
        raise NetworkError("next_obs table has wrong shape")
    if sorted(lk.id for lk in net.links) != list(range(L)):
        raise NetworkError("link ids must be dense 0..L-1")
    exits = set(net.exit_links)
    entries = set(net.entry_links)
    if not entries or not exits or entries & exits:
        raise NetworkError("entry/exit sets must be non-empty and disjoint")
    for o in range(L):
        row = nxt[o]
        for a in range(N_ACTIONS):
            v = row[a]
            if v == -1:
                continue
            if a == TERMINATE:
                if v != net.end or o not in exits:
                    raise NetworkError(f"Terminate misconfigured on link {o}")
            elif not 0 <= v < L:
                raise NetworkError(f"link {o} action {a} points at {v}")
            elif v in entries:
                raise NetworkError(f"link {o} re-enters through entry {v}")
        if o in exits and row[TERMINATE] != net.end:
            raise NetworkError(f"exit link {o} cannot terminate")
        if o not in exits and not (row[:3] >= 0).any():
            raise NetworkError(f"link {o} is a dead end")
    return net


def to_dict(net):
    return {
        "rows": net.rows,
        "cols": net.cols,
        "block_length_m": net.block_length_m,
        "links": [{"id": lk.id, "from_xy": list(lk.from_xy), "to_xy": list(lk.to_xy),
                   "length_m": lk.length_m, "kind": lk.kind,
                   "tail": list(lk.tail) if lk.tail else None,
                   "head": list(lk.head) if lk.head else None,
                   "heading": lk.heading} for lk in net.links],
        "next_obs": [{"o": o, "a": a, "o2": int(net.next_obs[o, a])}
                     for o in range(net.n_links) for a in range(N_ACTIONS)
                     if net.next_obs[o, a] >= 0],
        "entry": list(net.entry_links),
        "exit": list(net.exit_links),
    }


def from_dict(d):
    try:
        links = []
        for item in sorted(d["links"], key=lambda x: x["id"]):
            links.append(Link(int(item["id"]), tuple(item["from_xy"]), tuple(item["to_xy"]),
                              float(item["length_m"]), item.get("kind", "internal"),
                              tuple(item["tail"]) if item.get("tail") else None,
                              tuple(item["head"]) if item.get("head") else None,
                              item.get("heading", "")))
        L = len(links)
        nxt = np.full((L, N_ACTIONS), -1, dtype=np.int64)
        for e in d["next_obs"]:
            o, a, o2 = int(e["o"]), int(e["a"]), int(e["o2"])
            if not (0 <= o < L and 0 <= a < N_ACTIONS):
                raise NetworkError(f"bad next_obs entry {e}")
            if nxt[o, a] != -1:
                raise NetworkError(f"duplicate next_obs entry for ({o}, {a})")
            nxt[o, a] = o2
        net = RoadNetwork(int(d["rows"]), int(d["cols"]), links, nxt,
                          [int(x) for x in d["entry"]], [int(x) for x in d["exit"]],
                          float(d.get("block_length_m", links[0].length_m if links else 0)))
    except (KeyError, TypeError) as exc:
        raise NetworkError(f"malformed network file: {exc}") from exc
    return validate(net)


def dumps(net):
    return json.dumps(to_dict(net), sort_keys=True, separators=(",", ":"))


def save(net, path):
    with open(path, "w") as fh:
        fh.write(dumps(net))


def load(path):
    with open(path) as fh:
        return from_dict(json.load(fh))
