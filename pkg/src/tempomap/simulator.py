"""Deterministic scripted-world generator.

A scenario is a set of rigid objects (box or sphere surfaces sampled as point
sets) moving along piecewise-linear tracks, a static background built from
axis-aligned boxes, and a robot following timed waypoints. Each frame yields
noisy per-object measurements in the robot frame, a noisy relative odometry
and, optionally, loop-closure candidates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .geometry import Pose, boxplus, compose, interpolate

BACKGROUND_ID = 0
BACKGROUND_LABEL = 0


@dataclass
class ScenarioConfig:
    seed: int = 0
    frame_rate: float = 5.0
    duration: float = 10.0
    sensor_range: float = 5.0
    fov_half_angle: float = math.radians(60.0)
    point_noise_sigma: float = 0.0
    label_flip_prob: float = 0.0
    missed_detection_prob: float = 0.0
    odom_rot_sigma: float = 0.0
    odom_trans_sigma: float = 0.0
    loop_closure_radius: float = 0.0
    robot_waypoints: list = field(default_factory=list)
    # extras
    loop_closure_min_age: float = 30.0
    loop_closure_stride: int = 5
    loop_closure_rot_sigma: float = 0.0
    loop_closure_trans_sigma: float = 0.0
    loop_closure_outlier_rate: float = 0.0
    hallucination_prob: float = 0.0
    occlusion: bool = False
    surface_spacing: float = 0.04
    background_spacing: float = 0.08
    min_visible_points: int = 10
    num_labels: int = 10

    def __post_init__(self):
        for name in ("point_noise_sigma", "odom_rot_sigma", "odom_trans_sigma",
                     "loop_closure_rot_sigma", "loop_closure_trans_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("label_flip_prob", "missed_detection_prob", "loop_closure_outlier_rate", "hallucination_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be > 0")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")

    @property
    def num_frames(self):
        return int(round(self.duration * self.frame_rate))


@dataclass
class Primitive:
    """Box (``size`` = full extents) or sphere (``radius``) centered on the object origin."""

    kind: str
    size: np.ndarray = None
    radius: float = 0.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def sample(self, spacing):
        if self.kind == "box":
            return sample_box_surface(self.center - self.size / 2, self.center + self.size / 2, spacing)
        if self.kind == "sphere":
            return sample_sphere_surface(self.center, self.radius, spacing)
        raise ValueError(f"unknown primitive {self.kind!r}")


@dataclass
class WorldObject:
    id: int
    label: int
    base_points: np.ndarray
    trajectory: list  # [(t, Pose)], piecewise linear; single entry for static
    appear_time: float = 0.0
    disappear_time: float = math.inf
    is_background: bool = False
    primitives: list = field(default_factory=list)

    def __post_init__(self):
        if not self.appear_time < self.disappear_time:
            raise ValueError(f"object {self.id}: appear_time must precede disappear_time")
        if not self.trajectory:
            raise ValueError(f"object {self.id}: empty trajectory")
        self.trajectory = sorted(self.trajectory, key=lambda tp: tp[0])
        self.base_points = np.asarray(self.base_points, dtype=float).reshape(-1, 3)

    def present(self, t):
        return self.appear_time <= t < self.disappear_time

    @property
    def is_static(self):
        first = self.trajectory[0][1]
        return all(p.allclose(first, 1e-12) for _, p in self.trajectory[1:])

    def pose_at(self, t) -> Pose:
        return interpolate_track(self.trajectory, t)

    def moving_at(self, t, eps=1e-9):
        if self.is_static:
            return False
        a = self.pose_at(t - 0.05)
        b = self.pose_at(t + 0.05)
        return not a.allclose(b, eps)

    def world_points(self, t):
        return self.pose_at(t).apply(self.base_points)


def interpolate_track(track, t) -> Pose:
    if len(track) == 1 or t <= track[0][0]:
        return track[0][1]
    if t >= track[-1][0]:
        return track[-1][1]
    times = [tp[0] for tp in track]
    k = int(np.searchsorted(times, t, side="right")) - 1
    t0, p0 = track[k]
    t1, p1 = track[k + 1]
    if t1 == t0:
        return p1
    return interpolate(p0, p1, (t - t0) / (t1 - t0))


def sample_box_surface(lo, hi, spacing):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pts = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        nu = max(int(np.ceil((hi[u] - lo[u]) / spacing)), 1)
        nv = max(int(np.ceil((hi[v] - lo[v]) / spacing)), 1)
        gu = lo[u] + (np.arange(nu) + 0.5) * (hi[u] - lo[u]) / nu
        gv = lo[v] + (np.arange(nv) + 0.5) * (hi[v] - lo[v]) / nv
        U, V = np.meshgrid(gu, gv, indexing="ij")
        for side in (lo[axis], hi[axis]):
            face = np.empty((U.size, 3))
            face[:, axis] = side
            face[:, u] = U.ravel()
            face[:, v] = V.ravel()
            pts.append(face)
    return np.concatenate(pts)


def sample_sphere_surface(center, radius, spacing):
    n = max(int(np.ceil(4 * np.pi * radius**2 / spacing**2)), 8)
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5**0.5) * k
    d = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return np.asarray(center) + radius * d


def segment_hits(origin, points, primitive: Primitive, pose: Pose, eps=1e-4):
    """True where the open segment origin->point (minus ``eps`` meters) crosses the primitive."""
    o = pose.inverse().apply(origin)
    p = pose.inverse().apply(points)
    d = p - o
    length = np.linalg.norm(d, axis=1)
    s_end = 1.0 - eps / np.maximum(length, 1e-12)
    if primitive.kind == "box":
        lo = primitive.center - primitive.size / 2
        hi = primitive.center + primitive.size / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tmin = np.where(d != 0, np.minimum(t1, t2), -np.inf)
        tmax = np.where(d != 0, np.maximum(t1, t2), np.inf)
        inside_slab = (o >= lo) & (o <= hi)
        tmin = np.where((d == 0) & ~inside_slab, np.inf, tmin)
        tmax = np.where((d == 0) & ~inside_slab, -np.inf, tmax)
        s_in = tmin.max(axis=1)
        s_out = tmax.min(axis=1)
    else:
        oc = o - primitive.center
        a = np.einsum("ij,ij->i", d, d)
        b = 2 * d @ oc
        c = oc @ oc - primitive.radius**2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0))
        s_in = np.where(disc > 0, (-b - sq) / (2 * a), np.inf)
        s_out = np.where(disc > 0, (-b + sq) / (2 * a), -np.inf)
    return (s_in < s_out) & (s_in < s_end) & (s_out > 0)


@dataclass(frozen=True)
class Measurement:
    t: float
    points: np.ndarray
    label: int
    sensor_pose: Pose = field(default_factory=Pose.identity)
    dynamic_flag: bool = False
    source_id: int = -1  # ground-truth object id, bookkeeping only

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError("measurement point set must be non-empty")


@dataclass(frozen=True)
class LoopClosure:
    past_index: int
    relative: Pose
    is_outlier: bool = False


@dataclass
class FrameBundle:
    index: int
    t: float
    measurements: list
    odometry: Pose
    loop_closures: list
    gt_robot_pose: Pose
    gt_snapshot: list  # [(object id, pose, present, moving)]


class Scenario:
    """Immutable scripted world; ``render_frame`` is pure in (scenario, index)."""

    def __init__(self, config: ScenarioConfig, objects: list, waypoints: list):
        self.config = config
        self.objects = objects
        self.by_id = {o.id: o for o in objects}
        self.waypoints = waypoints
        n = config.num_frames
        self.times = np.arange(n) / config.frame_rate
        self.gt_poses = [interpolate_track(waypoints, t) for t in self.times]
        self.gt_positions = np.array([p.translation for p in self.gt_poses]).reshape(-1, 3)
        self.labels = sorted({o.label for o in objects if not o.is_background} | set(range(1, config.num_labels)))

    @property
    def num_frames(self):
        return len(self.times)

    @property
    def background(self):
        return self.by_id[BACKGROUND_ID]

    def rng(self, frame_index, stream):
        seq = np.random.SeedSequence([int(self.config.seed), int(frame_index), int(stream) + 1000])
        return np.random.Generator(np.random.Philox(seq))

    def true_odometry(self, i):
        if i == 0:
            return Pose.identity()
        return compose(self.gt_poses[i - 1].inverse(), self.gt_poses[i])

    def odometry(self, i):
        c = self.config
        true_rel = self.true_odometry(i)
        if i == 0 or (c.odom_rot_sigma == 0 and c.odom_trans_sigma == 0):
            return true_rel
        rng = self.rng(i, -1)
        xi = np.concatenate([rng.normal(0, c.odom_rot_sigma, 3), rng.normal(0, c.odom_trans_sigma, 3)])
        return boxplus(true_rel, xi)

    def gt_snapshot(self, t):
        return [(o.id, o.pose_at(t), o.present(t), o.moving_at(t)) for o in self.objects]

    def _visible(self, t, X, obj, world_pts):
        c = self.config
        rel = X.inverse().apply(world_pts)
        dist = np.linalg.norm(rel, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_angle = rel[:, 0] / dist
        mask = (dist <= c.sensor_range) & (dist > 1e-6) & (cos_angle >= math.cos(c.fov_half_angle))
        if c.occlusion and mask.any():
            idx = np.flatnonzero(mask)
            occluded = np.zeros(len(idx), dtype=bool)
            for other in self.objects:
                if not other.present(t) or not other.primitives:
                    continue
                pose = other.pose_at(t)
                for prim in other.primitives:
                    occluded |= segment_hits(X.translation, world_pts[idx], prim, pose)
            mask[idx[occluded]] = False
        return mask, rel

    def render_frame(self, i) -> FrameBundle:
        c = self.config
        if not 0 <= i < self.num_frames:
            raise IndexError(f"frame index {i} out of range [0, {self.num_frames})")
        t = float(self.times[i])
        X = self.gt_poses[i]
        measurements = []
        for obj in self.objects:
            if not obj.present(t):
                continue
            world_pts = obj.world_points(t)
            mask, rel = self._visible(t, X, obj, world_pts)
            if mask.sum() < (1 if obj.is_background else c.min_visible_points):
                continue
            rng = self.rng(i, obj.id)
            missed = rng.random() < c.missed_detection_prob
            flip = rng.random() < c.label_flip_prob
            if missed and not obj.is_background:
                continue
            pts = rel[mask]
            if c.point_noise_sigma > 0:
                pts = pts + rng.normal(0, c.point_noise_sigma, pts.shape)
            label = obj.label
            if flip and not obj.is_background:
                others = [lab for lab in self.labels if lab != obj.label]
                if others:
                    label = int(others[rng.integers(len(others))])
            measurements.append(Measurement(t, pts, label, source_id=obj.id))
        if c.hallucination_prob > 0:
            rng = self.rng(i, -2)
            if rng.random() < c.hallucination_prob:
                center = np.array([rng.uniform(1, c.sensor_range * 0.8), rng.uniform(-1, 1), rng.uniform(-0.5, 0.5)])
                pts = center + rng.normal(0, 0.1, (30, 3))
                measurements.append(Measurement(t, pts, int(rng.choice(self.labels)), source_id=-1))
        return FrameBundle(
            index=i,
            t=t,
            measurements=measurements,
            odometry=self.odometry(i),
            loop_closures=self.detect_loop_closures(i),
            gt_robot_pose=X,
            gt_snapshot=self.gt_snapshot(t),
        )

    def detect_loop_closures(self, i):
        c = self.config
        if c.loop_closure_radius <= 0 or i % max(c.loop_closure_stride, 1) != 0:
            return []
        t = self.times[i]
        old = np.flatnonzero(self.times <= t - c.loop_closure_min_age)
        if len(old) == 0:
            return []
        d = np.linalg.norm(self.gt_positions[old] - self.gt_positions[i], axis=1)
        if d.min() > c.loop_closure_radius:
            return []
        j = int(old[np.argmin(d)])
        rng = self.rng(i, -3)
        rel = compose(self.gt_poses[j].inverse(), self.gt_poses[i])
        xi = np.concatenate([rng.normal(0, c.loop_closure_rot_sigma, 3), rng.normal(0, c.loop_closure_trans_sigma, 3)])
        rel = boxplus(rel, xi)
        outlier = rng.random() < c.loop_closure_outlier_rate
        if outlier:
            wrong = np.concatenate([[0, 0, rng.uniform(-np.pi / 2, np.pi / 2)], rng.uniform(1.0, 3.0, 3) * rng.choice([-1, 1], 3)])
            wrong[5] = 0.0
            rel = boxplus(rel, wrong)
        return [LoopClosure(j, rel, outlier)]

    def frames(self):
        for i in range(self.num_frames):
            yield self.render_frame(i)

    def gt_records(self, i):
        """Ground-truth JSON records for frame ``i``, one per object."""
        t = float(self.times[i])
        out = []
        for obj in self.objects:
            pose = obj.pose_at(t)
            rec = {
                "frame": i,
                "t": t,
                "object_id": obj.id,
                "label": obj.label,
                "pose": pose.to_list(),
                "present": obj.present(t),
                "moving": obj.moving_at(t),
                "dynamic": not obj.is_static,
                "background": obj.is_background,
            }
            if not obj.is_background:
                pts = pose.apply(obj.base_points)
                rec["centroid"] = pts.mean(axis=0).tolist()
                rec["diameter"] = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
            elif i == 0:
                rec["points"] = np.round(pose.apply(obj.base_points), 4).tolist()
            out.append(rec)
        return out

    def export_ground_truth(self, path):
        with open(path, "w") as fh:
            for i in range(self.num_frames):
                for rec in self.gt_records(i):
                    fh.write(json.dumps(rec) + "\n")


def _track_from_spec(spec):
    """[[t, x, y, z, yaw], ...] or [x, y, z, yaw] -> [(t, Pose)]."""
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 1:
        return [(0.0, Pose.from_yaw(*arr[:4]))]
    return [(float(row[0]), Pose.from_yaw(*row[1:5])) for row in arr]


def object_from_spec(spec, spacing):
    shape = spec.get("shape", {"type": "box", "size": [0.5, 0.5, 0.5]})
    if shape["type"] == "box":
        prim = Primitive("box", size=np.asarray(shape["size"], dtype=float))
    elif shape["type"] == "sphere":
        prim = Primitive("sphere", radius=float(shape["radius"]))
    else:
        raise ValueError(f"unknown shape type {shape['type']!r}")
    track = spec.get("trajectory")
    if track is None:
        track = spec.get("pose", [0, 0, 0, 0])
    return WorldObject(
        id=int(spec["id"]),
        label=int(spec["label"]),
        base_points=prim.sample(float(shape.get("spacing", spacing))),
        trajectory=_track_from_spec(track),
        appear_time=float(spec.get("appear_time", 0.0)),
        disappear_time=float(spec.get("disappear_time", math.inf)),
        primitives=[prim],
    )


def background_from_boxes(boxes, spacing):
    prims = []
    pts = []
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 6)
    for b in boxes:
        lo, hi = b[:3], b[3:]
        prims.append(Primitive("box", size=hi - lo, center=(lo + hi) / 2))
        pts.append(sample_box_surface(lo, hi, spacing))
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    # drop samples buried inside a neighbouring box
    keep = np.ones(len(pts), dtype=bool)
    for b in boxes:
        lo, hi = b[:3], b[3:]
        keep &= ~np.all((pts > lo + 1e-6) & (pts < hi - 1e-6), axis=1)
    return WorldObject(
        id=BACKGROUND_ID,
        label=BACKGROUND_LABEL,
        base_points=pts[keep],
        trajectory=[(0.0, Pose.identity())],
        is_background=True,
        primitives=prims,
    )


DEFAULT_BACKGROUND = [[-10, -10, -0.2, 10, 10, 0.0]]


def build_scenario(config: ScenarioConfig, script: list, background_boxes=None) -> Scenario:
    """Validate the script and freeze a scenario."""
    if not config.robot_waypoints:
        raise ValueError("robot_waypoints must not be empty")
    waypoints = _track_from_spec(config.robot_waypoints)
    if waypoints[0][0] > 0 or waypoints[-1][0] < config.duration - 1e-9:
        raise ValueError("robot waypoints must cover [0, duration]")
    ids = [o.id for o in script]
    if len(ids) != len(set(ids)) or BACKGROUND_ID in ids and not any(o.is_background for o in script):
        raise ValueError("object ids must be unique and must not reuse the background id")
    objects = list(script)
    if not any(o.is_background for o in objects):
        boxes = DEFAULT_BACKGROUND if background_boxes is None else background_boxes
        objects.insert(0, background_from_boxes(boxes, config.background_spacing))
    return Scenario(config, objects, waypoints)


def config_from_dict(d) -> ScenarioConfig:
    d = dict(d)
    if "fov_half_angle_deg" in d:
        d["fov_half_angle"] = math.radians(d.pop("fov_half_angle_deg"))
    names = {f.name for f in fields(ScenarioConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown scenario config keys: {sorted(unknown)}")
    return ScenarioConfig(**d)


def load_scenario(path, seed_override=None) -> Scenario:
    """Load a scenario file: keys ``config``, ``background`` (``boxes``) and ``objects``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scenario file not found: {path}")
    doc = yaml.safe_load(path.read_text())
    cfg = config_from_dict(doc.get("config", {}))
    if seed_override is not None:
        cfg.seed = int(seed_override)
    script = [object_from_spec(o, cfg.surface_spacing) for o in doc.get("objects", []) or []]
    boxes = (doc.get("background") or {}).get("boxes")
    return build_scenario(cfg, script, boxes)
