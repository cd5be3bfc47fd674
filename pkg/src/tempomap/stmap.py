"""Object records with presence intervals, time queries and evaluation metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

EXACT = "exact"
ESTIMATED = "estimated"
OPEN = "open"

NONE, APPEARED, DISAPPEARED = "none", "appeared", "disappeared"
CATEGORIES = ("background", "objects", "dynamics", "changes")


@dataclass
class Interval:
    start: float
    end: float
    start_kind: str = EXACT
    end_kind: str = EXACT

    def covers(self, t):
        return self.start <= t <= self.end


@dataclass
class ObjectRecord:
    id: int
    label: int
    fragment_ids: list
    intervals: list
    surface: np.ndarray
    dynamic: bool = False
    centroid_track: list = field(default_factory=list)  # [(t, xyz)]
    appearance: float | None = None
    disappearance: float | None = None
    extent: float | None = None  # diameter override for records loaded without a surface

    @property
    def centroid(self):
        return np.asarray(self.surface).mean(axis=0)

    @property
    def diameter(self):
        if self.extent is not None:
            return self.extent
        s = np.asarray(self.surface)
        return float(np.linalg.norm(s.max(axis=0) - s.min(axis=0)))

    def present(self, t):
        return any(iv.covers(t) for iv in self.intervals)

    def centroid_at(self, t):
        if not self.dynamic or not self.centroid_track:
            return self.centroid
        ts = np.array([s for s, _ in self.centroid_track])
        cs = np.array([c for _, c in self.centroid_track])
        return np.array([np.interp(t, ts, cs[:, k]) for k in range(3)])

    def to_json(self):
        return {
            "id": self.id,
            "label": self.label,
            "fragments": list(self.fragment_ids),
            "dynamic": self.dynamic,
            "intervals": [[iv.start, iv.end, iv.start_kind, iv.end_kind] for iv in self.intervals],
            "appearance": self.appearance,
            "disappearance": self.disappearance,
            "centroid": self.centroid.tolist(),
            "diameter": self.diameter,
            "centroid_track": [[float(t), list(map(float, c))] for t, c in self.centroid_track],
        }


def presence_intervals(spans, absences=(), presences=(), horizon=math.inf, origin=0.0):
    """Merge observation spans and presence stamps into intervals split by absence.

    Absence stamps inside an observation span are ignored. Interval ends with
    no absence evidence beyond them extend to ``origin``/``horizon``.
    """
    spans = sorted((float(a), float(b)) for a, b in spans)
    if not spans:
        return []
    absences = sorted(
        a for a in absences if a <= horizon and not any(s <= a <= e for s, e in spans)
    )
    items = sorted(spans + [(float(p), float(p)) for p in presences if p <= horizon])
    groups = [list(items[0])]
    for s, e in items[1:]:
        g = groups[-1]
        if any(g[1] < a < s for a in absences):
            groups.append([s, e])
        else:
            g[1] = max(g[1], e)
    out = []
    for s, e in groups:
        before = [a for a in absences if a < s]
        after = [a for a in absences if a > e]
        start, sk = ((before[-1] + s) / 2.0, ESTIMATED) if before else (origin, OPEN)
        end, ek = ((e + after[0]) / 2.0, ESTIMATED) if after else (max(horizon, e), OPEN)
        out.append(Interval(start, end, sk, ek))
    return out


def _components(nodes, pairs):
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in pairs:
        if a in parent and b in parent:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for n in sorted(nodes):
        groups.setdefault(find(n), []).append(n)
    return list(groups.values())


def reconcile(fragments, associations=(), evidence=None, horizon=math.inf, surfaces=None, tracks=None):
    """Join fragments into object records and estimate their presence intervals.

    associations: accepted (fragment id, fragment id) pairs.
    evidence: fragment id -> (absence stamps, presence stamps).
    surfaces/tracks: optional world-frame surface and centroid track per fragment id.
    """
    evidence = evidence or {}
    frags = {f.id: f for f in fragments}
    static_ids = [i for i, f in frags.items() if not f.dynamic]
    records = []
    for comp in _components(static_ids, associations):
        members = [frags[i] for i in comp]
        absent, present = [], []
        for i in comp:
            a, p = evidence.get(i, ((), ()))
            absent.extend(a)
            present.extend(p)
        spans = [(f.first_observed, f.last_observed) for f in members]
        ivs = presence_intervals(spans, absent, present, horizon)
        surf = np.concatenate([np.asarray(surfaces[f.id] if surfaces else f.surface) for f in members])
        labels = [f.label for f in members]
        rec = ObjectRecord(
            comp[0], max(set(labels), key=labels.count), comp, ivs, surf,
            appearance=ivs[0].start if ivs[0].start_kind == ESTIMATED else None,
            disappearance=ivs[-1].end if ivs[-1].end_kind == ESTIMATED else None,
        )
        records.append(rec)
    for i in sorted(frags):
        f = frags[i]
        if not f.dynamic:
            continue
        track = tracks[i] if tracks else f.centroid_track
        surf = np.asarray(surfaces[i] if surfaces else f.surface)
        iv = Interval(f.first_observed, f.last_observed)
        records.append(ObjectRecord(i, f.label, [i], [iv], surf, True, [(t, np.asarray(c)) for t, c in track]))
    return records


@dataclass
class Entity:
    label: int
    centroid: np.ndarray
    diameter: float = 1.0
    change: str = NONE
    id: int = -1


@dataclass
class Snapshot:
    t: float
    objects: list
    dynamics: list
    changes: list
    background: np.ndarray


def change_label(present_now, present_initially):
    if present_now and not present_initially:
        return APPEARED
    if present_initially and not present_now:
        return DISAPPEARED
    return NONE


class SpatioTemporalMap:
    def __init__(self, records, background, belief_time, origin=0.0):
        self.records = list(records)
        self.background = np.asarray(background, dtype=float).reshape(-1, 3)
        self.T = float(belief_time)
        self.origin = origin

    def query(self, t) -> Snapshot:
        if t > self.T + 1e-9:
            raise ValueError(f"cannot query t={t} beyond belief time T={self.T}")
        objects, dynamics, changes = [], [], []
        for r in self.records:
            now = r.present(t)
            if r.dynamic:
                if now:
                    dynamics.append(Entity(r.label, r.centroid_at(t), r.diameter, id=r.id))
                continue
            ch = change_label(now, r.present(self.origin))
            e = Entity(r.label, r.centroid, r.diameter, ch, r.id)
            if now:
                objects.append(e)
            if ch != NONE:
                changes.append(e)
        return Snapshot(t, objects, dynamics, changes, self.background)

    def to_lines(self):
        yield {"type": "belief", "T": self.T, "background": self.background.tolist()}
        for r in self.records:
            yield {"type": "object", "T": self.T, **r.to_json()}


def export_beliefs(maps, path):
    """Write a sequence of maps (one per belief time) as JSON lines."""
    with open(path, "w") as fh:
        for m in maps:
            for d in m.to_lines():
                fh.write(json.dumps(d) + "\n")


def load_beliefs(path):
    maps = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed map export at line {n}") from exc
            if d.get("type") == "belief":
                maps.append(SpatioTemporalMap([], d["background"], d["T"]))
                continue
            if not maps:
                raise ValueError(f"{path}: object record before any belief header")
            ivs = [Interval(a, b, sk, ek) for a, b, sk, ek in d["intervals"]]
            track = [(t, np.asarray(c)) for t, c in d.get("centroid_track", [])]
            rec = ObjectRecord(
                d["id"], d["label"], d["fragments"], ivs, np.asarray([d["centroid"]]), d["dynamic"], track,
                d["appearance"], d["disappearance"], d["diameter"],
            )
            maps[-1].records.append(rec)
    return maps


@dataclass
class PRF:
    precision: float
    recall: float

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def prf_counts(tp_est, n_est, tp_gt, n_gt):
    """Precision over estimates, recall over ground truth; empty-vs-empty is perfect."""
    p = tp_est / n_est if n_est else (1.0 if n_gt == 0 else 0.0)
    r = tp_gt / n_gt if n_gt else (1.0 if n_est == 0 else 0.0)
    return PRF(p, r)


def match_entities(est, gt, factor=0.5):
    """Greedy one-to-one matching by centroid distance; same label, dist < factor * GT diameter."""
    cand = []
    for i, e in enumerate(est):
        for j, g in enumerate(gt):
            if e.label != g.label:
                continue
            d = float(np.linalg.norm(np.asarray(e.centroid) - np.asarray(g.centroid)))
            if d < factor * g.diameter:
                cand.append((d, i, j))
    cand.sort()
    used_e, used_g, pairs = set(), set(), []
    for d, i, j in cand:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs


def background_prf(est, gt, radius=0.20):
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    gt = np.asarray(gt, dtype=float).reshape(-1, 3)
    if len(est) == 0 or len(gt) == 0:
        return prf_counts(0, len(est), 0, len(gt))
    d_e, _ = cKDTree(gt).query(est, distance_upper_bound=radius)
    d_g, _ = cKDTree(est).query(gt, distance_upper_bound=radius)
    return prf_counts(int(np.sum(d_e <= radius)), len(est), int(np.sum(d_g <= radius)), len(gt))


def snapshot_prf(est: Snapshot, gt: Snapshot, radius=0.20, factor=0.5, background=True):
    out = {}
    if background:
        out["background"] = background_prf(est.background, gt.background, radius)
    for cat in ("objects", "dynamics"):
        e, g = getattr(est, cat), getattr(gt, cat)
        n = len(match_entities(e, g, factor))
        out[cat] = prf_counts(n, len(e), n, len(g))
    pairs = match_entities(est.changes, gt.changes, factor)
    tp = sum(est.changes[i].change == gt.changes[j].change for i, j in pairs)
    out["changes"] = prf_counts(tp, len(est.changes), tp, len(gt.changes))
    return out


def metric_4d(values):
    """Mean over the triangular (T, t <= T) grid of a scalar metric."""
    vals = [v for (T, t), v in values.items() if t <= T + 1e-9]
    if not vals:
        raise ValueError("empty evaluation grid")
    return float(np.mean(vals))


class GroundTruth:
    """Per-frame ground truth records as written by the simulator."""

    def __init__(self, frames, background):
        self.frames = frames  # sorted list of (t, [records])
        self.times = np.array([t for t, _ in frames])
        self.background = np.asarray(background, dtype=float).reshape(-1, 3)

    @classmethod
    def load(cls, path):
        by_frame = {}
        background = np.zeros((0, 3))
        with open(path) as fh:
            lines = fh.readlines()
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["frame"], rec["t"], rec["object_id"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed ground truth at line {n}") from exc
            by_frame.setdefault(rec["frame"], []).append(rec)
            if rec.get("background") and "points" in rec:
                background = np.asarray(rec["points"])
        if not by_frame:
            raise ValueError(f"{path}: no ground truth records")
        sizes = {len(v) for v in by_frame.values()}
        frames = sorted(by_frame)
        if len(sizes) != 1 or frames != list(range(len(frames))):
            raise ValueError(f"{path}: truncated ground truth (inconsistent frames)")
        if not lines[-1].endswith("\n"):
            raise ValueError(f"{path}: truncated ground truth (incomplete last line)")
        return cls([(by_frame[i][0]["t"], by_frame[i]) for i in frames], background)

    def records_at(self, t):
        k = int(np.searchsorted(self.times, t + 1e-9, side="right")) - 1
        return self.frames[max(k, 0)][1]

    def snapshot(self, t) -> Snapshot:
        initial = {r["object_id"]: r["present"] for r in self.frames[0][1]}
        objects, dynamics, changes = [], [], []
        for r in self.records_at(t):
            if r["background"]:
                continue
            e = Entity(r["label"], np.asarray(r["centroid"]), r["diameter"], id=r["object_id"])
            if r["dynamic"]:
                if r["present"]:
                    dynamics.append(e)
                continue
            e.change = change_label(r["present"], initial[r["object_id"]])
            if r["present"]:
                objects.append(e)
            if e.change != NONE:
                changes.append(e)
        return Snapshot(t, objects, dynamics, changes, self.background)


class GroundTruthMap:
    """Perfect belief at time T, answered straight from ground truth."""

    def __init__(self, gt: GroundTruth, T):
        self.gt = gt
        self.T = float(T)

    def query(self, t) -> Snapshot:
        if t > self.T + 1e-9:
            raise ValueError(f"cannot query t={t} beyond belief time T={self.T}")
        return self.gt.snapshot(t)


def _is_ground_truth_export(path):
    with open(path) as fh:
        for line in fh:
            if line.strip():
                try:
                    return "object_id" in json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}: malformed first line") from exc
    return False


def load_map_export(path, grid=5.0):
    """Belief sequence from a map export. A ground-truth export is accepted too
    and becomes perfect beliefs every ``grid`` seconds."""
    if not _is_ground_truth_export(path):
        return load_beliefs(path)
    if grid <= 0:
        raise ValueError("grid spacing must be positive")
    gt = GroundTruth.load(path)
    end = float(gt.times[-1])
    return [GroundTruthMap(gt, k * grid) for k in range(int(np.floor(end / grid + 1e-9)) + 1)]
