"""Trajectory containers and their JSONL / CSV / sidecar formats.

A trajectory stores only its real locations (link or cell ids); the
virtual Start/End tokens are implicit and added by :meth:`Trajectory.tokens`.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Trajectory:
    id: int
    links: tuple
    depart: float = 0.0
    complete: bool = True

    def tokens(self, start, end):
        tail = (end,) if self.complete else ()
        return (start,) + tuple(self.links) + tail

    @property
    def key(self):
        """Canonical route key; truncated rollouts never share a key with real routes."""
        return tuple(self.links) if self.complete else ("incomplete",) + tuple(self.links)

    def __len__(self):
        return len(self.links)


@dataclass
class TrajectoryDataset:
    trajectories: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def sequences(self):
        return [list(t.links) for t in self.trajectories]

    def departs(self):
        return np.array([t.depart for t in self.trajectories], dtype=np.float64)

    def subset(self, idx):
        return TrajectoryDataset([self.trajectories[i] for i in idx], dict(self.metadata))

    def route_counts(self):
        counts = {}
        for t in self.trajectories:
            counts[t.key] = counts.get(t.key, 0) + 1
        return counts

    def max_len(self):
        return max((len(t) for t in self.trajectories), default=0)

    # -- files -------------------------------------------------------------
    def to_jsonl(self):
        buf = io.StringIO()
        for t in self.trajectories:
            rec = {"id": int(t.id), "links": [int(x) for x in t.links], "depart": float(t.depart)}
            if not t.complete:
                rec["complete"] = False
            buf.write(json.dumps(rec, separators=(",", ":")))
            buf.write("\n")
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text, metadata=None):
        out = []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(Trajectory(int(rec["id"]), tuple(int(x) for x in rec["links"]),
                                  float(rec.get("depart", 0.0)), bool(rec.get("complete", True))))
        return cls(out, dict(metadata or {}))

    def save(self, path, sidecar=True):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())
        if sidecar:
            with open(str(path) + ".meta.json", "w") as fh:
                json.dump(self.metadata, fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        meta = {}
        try:
            with open(str(path) + ".meta.json") as fh:
                meta = json.load(fh)
        except FileNotFoundError:
            pass
        with open(path) as fh:
            return cls.from_jsonl(fh.read(), meta)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "depart", "complete", "n_links", "links"])
            for t in self.trajectories:
                w.writerow([t.id, repr(float(t.depart)), int(t.complete), len(t.links),
                            " ".join(str(x) for x in t.links)])
