"""Library of rays: free-space evidence for change detection on a deforming map.

Each background vertex contributes one ray from the robot position that observed
it. Rays reference graph entities rather than coordinates, so queries always see
the latest optimized positions. A coarse spatial hash indexes every cell a ray
traverses; queries look at the query cell and its 26 neighbours.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import pack_keys, traverse_cells


class Verdict(str, Enum):
    ABSENT = "absent"
    PRESENT = "present"
    OCCLUDED = "occluded"
    OFF_RAY = "off_ray"


@dataclass
class ChangeDetectionConfig:
    d_ray: float = 0.30
    c_ray: float = 0.60
    tau_ray: float = 5.0
    lateral: float = 0.30
    cell: float = 0.5
    support: float = 0.10  # max distance from query point to ray segment
    rebuild_displacement: float = 1.0
    max_query_points: int = 400
    # share of queried surface points that must see an Absent ray in a window
    min_point_coverage: float = 0.25

    def __post_init__(self):
        if self.cell <= 0 or self.tau_ray <= 0 or not 0 < self.c_ray <= 1:
            raise ValueError("invalid change detection config")


@dataclass(frozen=True)
class RayRecord:
    vertex_ref: int
    pose_ref: int
    stamp: float


def ray_metrics(p_q, p_r, p_v):
    """Lateral distance of the vertex from the query line, and vertex depth along it."""
    p_q, p_r, p_v = (np.asarray(x, dtype=float) for x in (p_q, p_r, p_v))
    a = p_q - p_r
    n = np.linalg.norm(a, axis=-1)
    if np.any(n == 0):
        raise ValueError("query point coincides with the ray origin")
    d_r = np.linalg.norm(np.cross(a, p_r - p_v), axis=-1) / n
    d_d = np.sum(a * (p_v - p_r), axis=-1) / n
    return d_r, d_d


def classify(d_r, d_d, query_depth, config: ChangeDetectionConfig = None):
    config = config or ChangeDetectionConfig()
    if d_r > config.lateral:
        return Verdict.OFF_RAY
    if abs(query_depth - d_d) <= config.d_ray:
        return Verdict.PRESENT
    if query_depth < d_d - config.d_ray:
        return Verdict.ABSENT
    return Verdict.OCCLUDED


_CODES = np.array([Verdict.ABSENT, Verdict.PRESENT, Verdict.OCCLUDED, Verdict.OFF_RAY], dtype=object)


def classify_many(d_r, d_d, depth, config):
    code = np.full(len(d_r), 2)
    code[depth < d_d - config.d_ray] = 0
    code[np.abs(depth - d_d) <= config.d_ray] = 1
    code[d_r > config.lateral] = 3
    return code


def point_segment_distance(p, a, b):
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    s = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.maximum(L2, 1e-300), 0.0, 1.0)
    return np.linalg.norm(a + s[:, None] * ab - p, axis=1)


_NEIGHBOURS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


class RayLibrary:
    """Multiset of rays with a coarse cell index.

    Positions are supplied by ``set_positions``: background vertex positions (array
    indexed by vertex_ref) and robot positions (dict pose_ref -> xyz).
    """

    def __init__(self, config: ChangeDetectionConfig = None):
        self.config = config or ChangeDetectionConfig()
        self.records = []
        self._v = np.zeros((0, 3))
        self._poses = {}
        self._pose_arr = None
        self._cols = ([], [], [], [])  # vertex ref, pose ref, stamp, endpoints at indexing
        self._arrays = None
        self._pending = []  # (packed cell, record index)
        self._keys = np.zeros(0, dtype=np.int64)
        self._recs = np.zeros(0, dtype=int)
        self.rebuilds = 0

    def _arr(self):
        if self._arrays is None:
            rv, rp, rt, ends = self._cols
            self._arrays = (
                np.array(rv, dtype=int), np.array(rp, dtype=int), np.array(rt, dtype=float),
                np.array(ends, dtype=float).reshape(-1, 2, 3),
            )
        return self._arrays

    @property
    def _rv(self):
        return self._arr()[0]

    @property
    def _rp(self):
        return self._arr()[1]

    @property
    def _rt(self):
        return self._arr()[2]

    @property
    def _indexed_at(self):
        return self._arr()[3]

    def __len__(self):
        return len(self.records)

    def set_positions(self, vertices=None, poses=None):
        if vertices is not None:
            self._v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        if poses is not None:
            self._poses = {int(k): np.asarray(v, dtype=float) for k, v in poses.items()}
            self._pose_arr = None

    def endpoints(self, idx=None):
        idx = np.arange(len(self.records)) if idx is None else np.asarray(idx, dtype=int)
        if len(idx) == 0:
            return np.zeros((0, 3)), np.zeros((0, 3))
        if self._pose_arr is None:
            self._pose_arr = np.zeros((max(self._poses, default=-1) + 1, 3))
            for k, v in self._poses.items():
                self._pose_arr[k] = v
        pr = self._pose_arr[self._rp[idx]]
        return pr, self._v[self._rv[idx]]

    def insert_ray(self, vertex_ref, pose_ref, stamp):
        if not 0 <= vertex_ref < len(self._v):
            raise KeyError(f"unknown background vertex {vertex_ref}")
        if pose_ref not in self._poses:
            raise KeyError(f"unknown robot pose {pose_ref}")
        p_r = self._poses[pose_ref]
        p_v = self._v[vertex_ref]
        if np.linalg.norm(p_v - p_r) == 0:
            raise ValueError("zero-length ray")
        k = len(self.records)
        self.records.append(RayRecord(int(vertex_ref), int(pose_ref), float(stamp)))
        rv, rp, rt, ends = self._cols
        rv.append(int(vertex_ref))
        rp.append(int(pose_ref))
        rt.append(float(stamp))
        ends.append([p_r.copy(), p_v.copy()])
        self._arrays = None
        self._index_one(k, p_r, p_v)
        return k

    def _index_one(self, k, p_r, p_v):
        cells = pack_keys(np.array(traverse_cells(p_r, p_v, self.config.cell)))
        self._pending.extend((int(c), k) for c in np.unique(cells))

    def _flush(self):
        if not self._pending:
            return
        add = np.array(self._pending, dtype=np.int64)
        keys = np.concatenate([self._keys, add[:, 0]])
        recs = np.concatenate([self._recs, add[:, 1]])
        order = np.argsort(keys, kind="stable")
        self._keys, self._recs = keys[order], recs[order]
        self._pending = []

    def cells_of(self, k):
        self._flush()
        return set(self._keys[self._recs == k].tolist())

    def candidates(self, p_q):
        """Record indices indexed in the query cell or any neighbour."""
        self._flush()
        base = np.floor(np.asarray(p_q, dtype=float) / self.config.cell).astype(np.int64)
        keys = pack_keys(base + _NEIGHBOURS)
        lo = np.searchsorted(self._keys, keys, "left")
        hi = np.searchsorted(self._keys, keys, "right")
        if not np.any(hi > lo):
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate([self._recs[a:b] for a, b in zip(lo, hi)]))

    def _verdicts(self, p_q, idx):
        if len(idx) == 0:
            return []
        p_r, p_v = self.endpoints(idx)
        near = point_segment_distance(np.broadcast_to(p_q, p_r.shape), p_r, p_v) <= self.config.support
        depth = np.linalg.norm(p_q - p_r, axis=1)
        ok = near & (depth > 0)
        if not ok.any():
            return []
        idx, p_r, p_v, depth = idx[ok], p_r[ok], p_v[ok], depth[ok]
        d_r, d_d = ray_metrics(p_q[None], p_r, p_v)
        code = classify_many(d_r, d_d, depth, self.config)
        keep = code != 3
        return [(float(t), _CODES[c]) for t, c in zip(self._rt[idx][keep], code[keep])]

    def query_point(self, p_q):
        p_q = np.asarray(p_q, dtype=float)
        return self._verdicts(p_q, self.candidates(p_q))

    def query_linear(self, p_q):
        """Exhaustive scan; the reference for ``query_point``."""
        return self._verdicts(np.asarray(p_q, dtype=float), np.arange(len(self.records)))

    def query_points(self, points):
        """Vectorized ``query_point`` over many points: (point index, stamp, Verdict) arrays."""
        self._flush()
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        empty = (np.zeros(0, dtype=int), np.zeros(0), np.zeros(0, dtype=object))
        if len(P) == 0 or len(self._keys) == 0:
            return empty
        base = np.floor(P / self.config.cell).astype(np.int64)
        keys = pack_keys((base[:, None, :] + _NEIGHBOURS[None]).reshape(-1, 3))
        lo = np.searchsorted(self._keys, keys, "left")
        hi = np.searchsorted(self._keys, keys, "right")
        counts = hi - lo
        if counts.sum() == 0:
            return empty
        owner = np.repeat(np.arange(len(keys)) // len(_NEIGHBOURS), counts)
        starts = np.repeat(lo - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        recs = self._recs[np.arange(counts.sum()) + starts]
        pair = np.unique(owner * (len(self.records) + 1) + recs)
        pi, ri = pair // (len(self.records) + 1), pair % (len(self.records) + 1)
        p_r, p_v = self.endpoints(ri)
        q = P[pi]
        depth = np.linalg.norm(q - p_r, axis=1)
        ok = (point_segment_distance(q, p_r, p_v) <= self.config.support) & (depth > 0)
        pi, ri, q, p_r, p_v, depth = pi[ok], ri[ok], q[ok], p_r[ok], p_v[ok], depth[ok]
        if len(pi) == 0:
            return empty
        d_r, d_d = ray_metrics(q, p_r, p_v)
        code = classify_many(d_r, d_d, depth, self.config)
        keep = code != 3
        return pi[keep], self._rt[ri][keep], _CODES[code[keep]]

    def query_surface(self, points, rng=None):
        """Verdicts pooled over (a subsample of) surface points.

        Returns ([(stamp, verdict, point index)], number of points queried).
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        m = self.config.max_query_points
        if len(pts) > m:
            rng = rng or np.random.default_rng(0)
            pts = pts[rng.choice(len(pts), m, replace=False)]
        idx, stamps, verdicts = self.query_points(pts)
        return list(zip(stamps.tolist(), verdicts, idx.tolist())), len(pts)

    def max_displacement(self):
        if not self.records:
            return 0.0
        p_r, p_v = self.endpoints()
        now = np.stack([p_r, p_v], axis=1)
        return float(np.linalg.norm(now - self._indexed_at, axis=2).max())

    def rebuild(self, force=False):
        """Re-index every record under current positions. Returns True if it ran."""
        if not self.records:
            return False
        if not force and self.max_displacement() <= self.config.rebuild_displacement:
            return False
        p_r, p_v = self.endpoints()
        self._keys = np.zeros(0, dtype=np.int64)
        self._recs = np.zeros(0, dtype=int)
        self._pending = []
        for k in range(len(self.records)):
            self._index_one(k, p_r[k], p_v[k])
        self._flush()
        self._cols = self._cols[:3] + ([list(e) for e in np.stack([p_r, p_v], axis=1)],)
        self._arrays = None
        self.rebuilds += 1
        return True

    def dump(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"vertex_ref": r.vertex_ref, "pose_ref": r.pose_ref, "stamp": r.stamp}) + "\n")

    @classmethod
    def load(cls, path, vertices, poses, config=None):
        lib = cls(config)
        lib.set_positions(vertices, poses)
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    lib.insert_ray(d["vertex_ref"], d["pose_ref"], d["stamp"])
        return lib


def temporal_filter(verdicts, config: ChangeDetectionConfig = None, n_points=None):
    """Reliable (absence, presence) stamps from windowed verdict ratios.

    Windows of length tau_ray tile time from the earliest verdict. A window
    yields a stamp, the midpoint of its verdict stamps, when the share of
    Absent (or Present) verdicts reaches c_ray. Occluded counts only in the
    denominator. With ``n_points`` and (stamp, verdict, point) triples, absence
    also needs Absent rays on at least ``min_point_coverage`` of the points.
    """
    config = config or ChangeDetectionConfig()
    if not verdicts:
        return [], []
    stamps = np.array([v[0] for v in verdicts], dtype=float)
    kinds = np.array([v[1].value if isinstance(v[1], Verdict) else str(v[1]) for v in verdicts])
    points = np.array([v[2] if len(v) > 2 else -1 for v in verdicts])
    relevant = kinds != Verdict.OFF_RAY.value
    stamps, kinds, points = stamps[relevant], kinds[relevant], points[relevant]
    if len(stamps) == 0:
        return [], []
    win = np.floor((stamps - stamps.min()) / config.tau_ray).astype(int)
    absent, present = [], []
    for w in np.unique(win):
        sel = win == w
        s = stamps[sel]
        total = sel.sum()
        mid = 0.5 * (s.min() + s.max())
        is_absent = kinds[sel] == Verdict.ABSENT.value
        if is_absent.sum() / total >= config.c_ray:
            covered = len(np.unique(points[sel][is_absent]))
            if not n_points or covered >= config.min_point_coverage * n_points:
                absent.append(float(mid))
        if np.sum(kinds[sel] == Verdict.PRESENT.value) / total >= config.c_ray:
            present.append(float(mid))
    return absent, present
