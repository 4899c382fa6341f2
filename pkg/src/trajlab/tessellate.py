"""Leader-clustering cell partitions and trajectory-to-cell-sequence conversion.

Cells are Voronoi regions of the centroids; they are never built as
polygons since nearest-centroid lookup gives the same assignment.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .trajectory import Trajectory, TrajectoryDataset


class TessellationError(ValueError):
    pass


@dataclass
class CellPartition:
    centroids: np.ndarray      # [N, 2] metres
    R: float

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1, 2)
        self._tree = cKDTree(self.centroids) if len(self.centroids) else None

    @property
    def n_cells(self):
        return len(self.centroids)

    # cell ids are 0..N-1; the virtual tokens follow, as for links
    @property
    def start(self):
        return self.n_cells

    @property
    def end(self):
        return self.n_cells + 1

    def assign(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if self._tree is None:
            raise TessellationError("empty partition")
        _, idx = self._tree.query(pts)
        return idx.astype(np.int64)

    def to_dict(self):
        return {"R": float(self.R), "centroids": self.centroids.tolist()}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["centroids"], dtype=np.float64), float(d["R"]))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class CellSequence:
    cells: tuple          # real cells only; Start/End are implicit

    def tokens(self, part):
        return (part.start,) + self.cells + (part.end,)


def cluster_points(points, R):
    """Greedy leader clustering at radius ``R`` followed by one refinement.

    Leaders stay fixed during the greedy pass. Centroids become member
    means; a mean within ``R`` of an earlier kept centroid is merged into
    it, then every point is reassigned to its nearest centroid and empty
    cells are dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise TessellationError("no points")
    if not R > 0:
        raise TessellationError("R must be positive")
    leaders = np.empty_like(pts)
    n_lead = 0
    label = np.empty(len(pts), dtype=np.int64)
    for i, p in enumerate(pts):
        if n_lead:
            d2 = ((leaders[:n_lead] - p) ** 2).sum(axis=1)
            j = int(np.argmin(d2))
            if d2[j] <= R * R:
                label[i] = j
                continue
        leaders[n_lead] = p
        label[i] = n_lead
        n_lead += 1
    sums = np.zeros((n_lead, 2))
    np.add.at(sums, label, pts)
    means = sums / np.bincount(label, minlength=n_lead)[:, None]
    kept = []
    for m in means:
        if kept and (((np.array(kept) - m) ** 2).sum(axis=1) <= R * R).any():
            continue
        kept.append(m)
    cents = np.array(kept)
    _, idx = cKDTree(cents).query(pts)
    used = np.unique(idx)
    return CellPartition(cents[used], float(R))


def to_cell_sequence(points, part):
    """Nearest-centroid cells with consecutive repeats collapsed."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise TessellationError("empty point list")
    cells = part.assign(pts)
    keep = np.ones(len(cells), dtype=bool)
    keep[1:] = cells[1:] != cells[:-1]
    return CellSequence(tuple(int(c) for c in cells[keep]))


# -- synthetic point sources ---------------------------------------------------------
def link_points(net, link, spacing):
    """Points along a link every ``spacing`` metres, excluding the downstream end."""
    lk = net.links[link]
    a, b = np.asarray(lk.from_xy, float), np.asarray(lk.to_xy, float)
    n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
    s = np.arange(n) / n
    return a[None, :] + s[:, None] * (b - a)[None, :]


def route_points(net, links, spacing):
    return np.concatenate([link_points(net, l, spacing) for l in links])


def network_points(net, spacing):
    return np.concatenate([link_points(net, l, spacing) for l in range(net.n_links)])


def partition_network(net, R):
    """Partition built from every link polyline sampled at ``R / 3``."""
    return cluster_points(network_points(net, R / 3.0), R)


def dataset_to_cells(ds, net, part, spacing=None):
    spacing = spacing or part.R / 3.0
    out = []
    for t in ds:
        seq = to_cell_sequence(route_points(net, t.links, spacing), part)
        out.append(Trajectory(t.id, seq.cells, t.depart, t.complete))
    meta = dict(ds.metadata, granularity="cell", R=float(part.R), n_cells=part.n_cells)
    return TrajectoryDataset(out, meta)


def save_cell_sequences(ds, path):
    with open(path, "w") as fh:
        for t in ds:
            fh.write(json.dumps([int(c) for c in t.links]) + "\n")


def load_cell_sequences(path):
    out = []
    with open(path) as fh:
        for i, line in enumerate(l for l in fh if l.strip()):
            out.append(Trajectory(i, tuple(int(c) for c in json.loads(line))))
    return TrajectoryDataset(out, {"granularity": "cell"})
