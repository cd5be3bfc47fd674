"""Local estimation over a short temporal horizon.

Per frame: free-space motion detection, greedy hypothesis tracking by voxel
IoU, closing hypotheses once their last observation leaves the window, and
extracting background vertices that exit the window.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import Aabb, Pose, compose, pack_keys, packed_voxels, voxel_filter, voxel_keys
from .simulator import BACKGROUND_LABEL, Measurement

UNLABELED = -1


@dataclass
class ActiveWindowConfig:
    delta: float = 10.0
    voxel_size: float = 0.08
    min_observations: int = 15
    min_displacement: float = 1.0
    iou_threshold: float = 0.3
    dynamic_assoc_radius: float = 1.0
    # fraction of flagged points above which a measurement counts as dynamic
    dynamic_fraction: float = 0.5
    min_dynamic_cluster: int = 20
    free_space_margin: int = 1
    # rays also stop this fraction short; keeps grazing rays from clearing the floor
    free_space_rel_margin: float = 0.15
    # fallback match: share of observation voxels already in the hypothesis
    containment_threshold: float = 0.5
    background_voxel: float = 0.2

    def __post_init__(self):
        for name in ("delta", "voxel_size", "min_observations", "min_displacement",
                     "iou_threshold", "dynamic_assoc_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class FreeSpaceMap:
    """Voxel hash of last-observed-free and last-observed-occupied timestamps."""

    def __init__(self, resolution, horizon=math.inf):
        self.resolution = resolution
        self.horizon = horizon
        self.free = {}
        self.occupied = {}
        self.latest = -math.inf  # newest stamp written

    def __len__(self):
        return len(self.free)

    def free_since(self, packed, t_min):
        uniq, inv = np.unique(packed, return_inverse=True)
        get = self.free.get
        hit = np.fromiter((get(k, -math.inf) >= t_min for k in uniq.tolist()), dtype=bool, count=len(uniq))
        return hit[inv.reshape(-1)]

    def prune(self, t_min):
        self.free = {k: v for k, v in self.free.items() if v >= t_min}
        self.occupied = {k: v for k, v in self.occupied.items() if v >= t_min}


def sensor_origin(robot_pose_odom: Pose, m: Measurement):
    return compose(robot_pose_odom, m.sensor_pose).translation


def to_odom(m: Measurement, robot_pose_odom: Pose):
    return compose(robot_pose_odom, m.sensor_pose).apply(m.points)


def ray_free_keys(origin, endpoints, resolution, margin_voxels=1, rel_margin=0.0):
    """Packed voxels traversed by rays origin->endpoint.

    Each ray stops ``margin_voxels`` voxels or ``rel_margin`` of its length
    short of the endpoint, whichever is more. Rays are sampled every half voxel.
    """
    o = np.asarray(origin, dtype=float) / resolution
    d = np.asarray(endpoints, dtype=float).reshape(-1, 3) / resolution - o
    length = np.linalg.norm(d, axis=1)
    stop = np.minimum(length - margin_voxels, length * (1.0 - rel_margin))
    keep = stop > 0
    if not keep.any():
        return np.zeros(0, dtype=np.int64)
    d = d[keep] / length[keep, None]
    stop = stop[keep]
    counts = np.floor(stop / 0.5).astype(np.int64) + 2  # samples plus the exact stop point
    ray = np.repeat(np.arange(len(stop)), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    s = 0.5 * (np.arange(len(ray)) - first)
    last = np.cumsum(counts) - 1
    s[last] = stop
    keys = pack_keys(np.floor(o + d[ray] * s[:, None]).astype(np.int64))
    # consecutive samples along a ray mostly share a voxel
    keys = keys[np.r_[True, keys[1:] != keys[:-1]]]
    return np.unique(keys)


def update_free_space(fsm: FreeSpaceMap, m, robot_pose_odom: Pose, margin_voxels=1, rel_margin=0.0):
    """Mark voxels along each ray as free at the measurement time and endpoint voxels as occupied.

    ``m`` is one Measurement or a list of them; rays sharing a sensor origin
    and stamp are carved together.
    """
    groups = {}
    for meas in ([m] if isinstance(m, Measurement) else m):
        if len(meas.points) == 0:
            continue
        origin = sensor_origin(robot_pose_odom, meas)
        key = (meas.t, *np.round(origin, 9).tolist())
        groups.setdefault(key, (origin, []))[1].append(to_odom(meas, robot_pose_odom))
    for key, (origin, chunks) in groups.items():
        _carve(fsm, key[0], origin, np.concatenate(chunks), margin_voxels, rel_margin)


def _carve(fsm: FreeSpaceMap, t, origin, pts, margin_voxels, rel_margin):
    ends, occ_keys = voxel_filter(pts, fsm.resolution)
    free_keys = ray_free_keys(origin, ends, fsm.resolution, margin_voxels, rel_margin)
    t_min = t - fsm.horizon
    occ, free = fsm.occupied, fsm.free
    keys = set(free_keys.tolist())
    keys.difference_update(occ_keys.tolist())
    # recently occupied voxels keep their static evidence
    keys.difference_update([k for k in keys.intersection(occ) if occ[k] >= t_min])
    occ_list = occ_keys.tolist()
    if t >= fsm.latest:
        free.update(dict.fromkeys(keys, t))
        occ.update(dict.fromkeys(occ_list, t))
        fsm.latest = t
        return
    for k in keys:
        if free.get(k, -math.inf) < t:
            free[k] = t
    for k in occ_list:
        if occ.get(k, -math.inf) < t:
            occ[k] = t


def detect_dynamic_points(m: Measurement, fsm: FreeSpaceMap, robot_pose_odom: Pose, delta=math.inf):
    """Boolean mask: point lies in a voxel observed free within the last ``delta`` seconds."""
    if len(fsm.free) == 0:
        return np.zeros(len(m.points), dtype=bool)
    pts = to_odom(m, robot_pose_odom)
    return fsm.free_since(packed_voxels(pts, fsm.resolution), m.t - delta)


def voxel_iou(a, b, resolution):
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    ka = np.unique(packed_voxels(a, resolution)) if len(a) else np.zeros(0, np.int64)
    kb = np.unique(packed_voxels(b, resolution)) if len(b) else np.zeros(0, np.int64)
    return _iou_keys(ka, kb)


def _iou_keys(ka, kb):
    inter = len(np.intersect1d(ka, kb, assume_unique=True))
    union = len(ka) + len(kb) - inter
    return inter / union if union else 0.0


@dataclass
class Hypothesis:
    id: int
    label: int
    observations: list = field(default_factory=list)  # [(t, points in odom frame, dynamic flag)]
    keys: np.ndarray = None  # voxel set of the latest observation
    seen: np.ndarray = None  # union of all observed voxels
    centroid_track: list = field(default_factory=list)
    first_seen: float = math.inf
    last_seen: float = -math.inf
    dynamic_votes: int = 0

    @property
    def observation_count(self):
        return len(self.observations)

    @property
    def dynamic(self):
        return self.dynamic_votes * 2 > self.observation_count

    @property
    def centroid(self):
        return self.centroid_track[-1][1]

    def displacement(self):
        if not self.centroid_track:
            return 0.0
        c = np.array([c for _, c in self.centroid_track])
        return float(np.linalg.norm(c - c[0], axis=1).max())

    def add(self, obs: Measurement, keys):
        self.observations.append((obs.t, obs.points, obs.dynamic_flag))
        self.keys = keys
        self.seen = keys if self.seen is None else np.union1d(self.seen, keys)
        self.centroid_track.append((obs.t, obs.points.mean(axis=0)))
        self.first_seen = min(self.first_seen, obs.t)
        self.last_seen = max(self.last_seen, obs.t)
        self.dynamic_votes += int(obs.dynamic_flag)


@dataclass
class Fragment:
    id: int
    label: int
    surface: np.ndarray  # world/odom-frame points at extraction
    stamps: np.ndarray  # per-point last observation time
    first_observed: float
    last_observed: float
    observation_times: np.ndarray
    dynamic: bool = False
    centroid_track: list = field(default_factory=list)
    sequence: list = field(default_factory=list)  # dynamic only: [(t, points)]
    frame: Pose = None  # set by the global optimizer

    @property
    def aabb(self):
        return Aabb.from_points(self.surface)

    @property
    def centroid(self):
        return self.surface.mean(axis=0)


def check_gaps(times, delta):
    times = np.sort(np.asarray(times, dtype=float))
    if len(times) > 1 and np.diff(times).max() >= delta:
        raise AssertionError("fragment observations violate the consistency horizon")


def fragment_from_hypothesis(h: Hypothesis, config: ActiveWindowConfig, dynamic: bool) -> Fragment:
    times = np.array([t for t, _, _ in h.observations])
    check_gaps(times, config.delta)
    pts = np.concatenate([p for _, p, _ in h.observations])
    stamps = np.concatenate([np.full(len(p), t) for t, p, _ in h.observations])
    if dynamic:
        surface, sequence = pts, [(t, p) for t, p, _ in h.observations]
        point_stamps = stamps
    else:
        surface, _, point_stamps = voxel_filter(pts, config.voxel_size, stamps)
        sequence = []
    return Fragment(
        id=h.id,
        label=h.label,
        surface=surface,
        stamps=point_stamps,
        first_observed=float(times.min()),
        last_observed=float(times.max()),
        observation_times=times,
        dynamic=dynamic,
        centroid_track=list(h.centroid_track) if dynamic else [],
        sequence=sequence,
    )


def validate(h: Hypothesis, config: ActiveWindowConfig):
    """None if rejected, else the dynamic flag the fragment should carry."""
    if h.observation_count < config.min_observations:
        return None
    if h.dynamic and h.displacement() >= config.min_displacement:
        return True
    if h.label == UNLABELED:
        return None  # unlabeled static clusters are background, not objects
    return False


def close_and_validate(pool: dict, now: float, config: ActiveWindowConfig):
    """Remove hypotheses last seen >= delta ago; return fragments for those that validate."""
    out = []
    for hid in sorted(pool):
        h = pool[hid]
        if now - h.last_seen < config.delta:
            continue
        del pool[hid]
        dyn = validate(h, config)
        if dyn is not None:
            out.append(fragment_from_hypothesis(h, config, dyn))
    return out


def associate(observations, pool: dict, config: ActiveWindowConfig, obs_keys=None):
    """Greedy assignment of odom-frame observations to hypotheses.

    Returns ``{observation index: hypothesis id or None}``; None means spawn.
    Also returns the IoU table for debugging.
    """
    if obs_keys is None:
        obs_keys = [np.unique(packed_voxels(o.points, config.voxel_size)) for o in observations]
    candidates = []
    ious = {}
    for j, obs in enumerate(observations):
        if obs.label == UNLABELED:
            continue
        for hid, h in pool.items():
            if h.label != obs.label or h.keys is None:
                continue
            iou = _iou_keys(obs_keys[j], h.keys)
            ious[(j, hid)] = iou
            if iou >= config.iou_threshold:
                candidates.append((-iou, -len(obs.points), j, hid))
    candidates.sort()
    assignment = {}
    used = set()
    for _, _, j, hid in candidates:
        if j in assignment or hid in used:
            continue
        assignment[j] = hid
        used.add(hid)
    # fallback for partial views: most of the observation already belongs to a hypothesis
    fallback = []
    for j, obs in enumerate(observations):
        if j in assignment or obs.label == UNLABELED or len(obs_keys[j]) == 0:
            continue
        for hid, h in pool.items():
            if hid in used or h.label != obs.label or h.seen is None:
                continue
            share = len(np.intersect1d(obs_keys[j], h.seen, assume_unique=True)) / len(obs_keys[j])
            if share >= config.containment_threshold:
                fallback.append((-share, j, hid))
    fallback.sort()
    for _, j, hid in fallback:
        if j in assignment or hid in used:
            continue
        assignment[j] = hid
        used.add(hid)
    # dynamic observations: nearest dynamic hypothesis by centroid distance
    pairs = []
    for j, obs in enumerate(observations):
        if j in assignment or not obs.dynamic_flag:
            continue
        c = obs.points.mean(axis=0)
        for hid, h in pool.items():
            if hid in used or not (h.dynamic or h.dynamic_votes > 0):
                continue
            if obs.label != UNLABELED and h.label not in (UNLABELED, obs.label):
                continue
            d = float(np.linalg.norm(h.centroid - c))
            if d <= config.dynamic_assoc_radius:
                pairs.append((d, j, hid))
    pairs.sort()
    for _, j, hid in pairs:
        if j in assignment or hid in used:
            continue
        assignment[j] = hid
        used.add(hid)
    for j in range(len(observations)):
        assignment.setdefault(j, None)
    return assignment, ious


def cluster_points(points, cell):
    """Connected components of occupied ``cell``-sized voxels (26-neighbourhood)."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = voxel_keys(points, cell)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    packed = pack_keys(uniq)
    index = {k: i for i, k in enumerate(packed.tolist())}
    rows, cols = [], []
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off == (0, 0, 0):
            continue
        nb = pack_keys(uniq + np.array(off))
        for i, k in enumerate(nb.tolist()):
            j = index.get(k)
            if j is not None:
                rows.append(i)
                cols.append(j)
    n = len(uniq)
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    return comp[inv]


class BackgroundAccumulator:
    """Occupied background voxels inside the window: key -> [sx, sy, sz, n, first_t, last_t]."""

    def __init__(self, resolution):
        self.resolution = resolution
        self.voxels = {}

    def add(self, points, t):
        if len(points) == 0:
            return
        pts, keys = voxel_filter(points, self.resolution)
        vox = self.voxels
        for k, p in zip(keys.tolist(), pts.tolist()):
            v = vox.get(k)
            if v is None:
                vox[k] = [p[0], p[1], p[2], 1, t, t]
            else:
                v[0] += p[0]
                v[1] += p[1]
                v[2] += p[2]
                v[3] += 1
                v[5] = t


def extract_background(acc: BackgroundAccumulator, now, delta, frame_times):
    """Emit one vertex per voxel untouched for >= delta.

    Returns a list of (vertex, frame index, stamp) where the stamp is the last
    time the voxel was observed, so the frame at that index saw the vertex.
    """
    out = []
    frame_times = np.asarray(frame_times, dtype=float)
    done = [k for k, v in acc.voxels.items() if now - v[5] >= delta]
    for k in done:
        sx, sy, sz, n, t0, t1 = acc.voxels.pop(k)
        idx = int(np.argmin(np.abs(frame_times - t1))) if len(frame_times) else 0
        out.append((np.array([sx / n, sy / n, sz / n]), idx, t1))
    return out


class ActiveWindow:
    """Frame-ordered local mapper. Poses passed in are in the odometry frame."""

    def __init__(self, config: ActiveWindowConfig = None, debug_path=None):
        self.config = config or ActiveWindowConfig()
        self.fsm = FreeSpaceMap(self.config.voxel_size, horizon=self.config.delta)
        self.background = BackgroundAccumulator(self.config.background_voxel)
        self.pool = {}
        self.frame_times = []
        self.robot_poses = []
        self._ids = itertools.count(1)
        self._debug = open(debug_path, "w") if debug_path else None
        self._last_prune = -math.inf

    def close(self):
        if self._debug:
            self._debug.close()
            self._debug = None

    def process(self, t, measurements, robot_pose_odom: Pose):
        """Integrate one frame; returns (fragments, background vertices) that left the window."""
        cfg = self.config
        self.frame_times.append(t)
        self.robot_poses.append(robot_pose_odom)
        observations = []
        masks = []
        for m in measurements:
            mask = detect_dynamic_points(m, self.fsm, robot_pose_odom, cfg.delta)
            masks.append(int(mask.sum()))
            pts = to_odom(m, robot_pose_odom)
            if m.label == BACKGROUND_LABEL:
                self.background.add(pts[~mask], t)
                dyn = pts[mask]
                if len(dyn) >= cfg.min_dynamic_cluster:
                    comp = cluster_points(dyn, 2 * cfg.voxel_size)
                    for c in np.unique(comp):
                        sel = dyn[comp == c]
                        if len(sel) >= cfg.min_dynamic_cluster:
                            observations.append(Measurement(t, sel, UNLABELED, dynamic_flag=True))
                continue
            flag = mask.mean() >= cfg.dynamic_fraction if len(mask) else False
            observations.append(replace(m, points=pts, sensor_pose=Pose.identity(), dynamic_flag=bool(flag)))
        update_free_space(self.fsm, measurements, robot_pose_odom, cfg.free_space_margin, cfg.free_space_rel_margin)

        # close stale hypotheses first so nothing bridges a gap of delta or more
        fragments = close_and_validate(self.pool, t, cfg)
        keys = [np.unique(packed_voxels(o.points, cfg.voxel_size)) for o in observations]
        assignment, ious = associate(observations, self.pool, cfg, keys)
        for j, obs in enumerate(observations):
            hid = assignment[j]
            if hid is None:
                hid = next(self._ids)
                self.pool[hid] = Hypothesis(hid, obs.label)
            h = self.pool[hid]
            if h.label == UNLABELED and obs.label != UNLABELED:
                h.label = obs.label
            h.add(obs, keys[j])
        vertices = extract_background(self.background, t, cfg.delta, self.frame_times)
        if t - self._last_prune > cfg.delta:
            self.fsm.prune(t - cfg.delta)
            self._last_prune = t
        if self._debug:
            self._debug.write(json.dumps({
                "t": t,
                "assignment": {str(j): assignment[j] for j in assignment},
                "iou": {f"{j}:{h}": round(v, 4) for (j, h), v in ious.items()},
                "dynamic_points": masks,
                "pool": sorted(self.pool),
            }) + "\n")
        return fragments, vertices

    def validated_hypotheses(self):
        """Open hypotheses that already pass validation (provisional fragments)."""
        out = []
        for hid in sorted(self.pool):
            h = self.pool[hid]
            dyn = validate(h, self.config)
            if dyn is not None:
                out.append(fragment_from_hypothesis(h, self.config, dyn))
        return out

    def flush(self):
        """Close everything (end of sequence)."""
        now = math.inf
        fragments = close_and_validate(self.pool, now, self.config)
        vertices = extract_background(self.background, now, self.config.delta, self.frame_times)
        return fragments, vertices
