"""End-to-end run: simulate, map, optimize, detect changes, reconcile and evaluate."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .active_window import ActiveWindow, ActiveWindowConfig
from .change_detection import ChangeDetectionConfig, RayLibrary, temporal_filter
from .geometry import Aabb, Pose, compose
from .global_opt import (
    DeformationGraph, Edge, EdgeKind, NodeKind, OptimizerConfig,
    add_control_points, add_fragment, deform_background, optimize, propose_associations,
)
from .simulator import Scenario, load_scenario
from .stmap import (
    CATEGORIES, GroundTruth, SpatioTemporalMap, export_beliefs, metric_4d, reconcile, snapshot_prf,
)

log = logging.getLogger(__name__)

POSE_MODES = ("ground-truth", "odometry")
TIMING_COLUMNS = ["frame", "t", "frame_ms", "optimize_ms", "ray_query_ms", "reconcile_ms"]
METRIC_COLUMNS = ["T", "t"] + [f"{c}_{m}" for c in CATEGORIES for m in ("precision", "recall", "f1")]


@dataclass
class PipelineConfig:
    active_window: ActiveWindowConfig = field(default_factory=ActiveWindowConfig)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(truncation_by_kind={"LC": 5.0}))
    change: ChangeDetectionConfig = field(default_factory=ChangeDetectionConfig)
    pose_mode: str = "odometry"
    global_optimization: bool = True
    loop_closures: bool = True
    change_detection: bool = True
    keyframe_interval: float = 1.0
    control_cell: float = 1.0
    blend_k: int = 4
    eval_interval: float = 5.0
    min_sigma_rot: float = 0.002
    min_sigma_trans: float = 0.005
    fragment_sigma: float = 0.05
    control_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.pose_mode not in POSE_MODES:
            raise ValueError(f"pose_mode must be one of {POSE_MODES}")
        if self.eval_interval <= 0 or self.keyframe_interval <= 0:
            raise ValueError("intervals must be positive")


def _build(cls, d):
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def config_from_dict(d) -> PipelineConfig:
    d = dict(d or {})
    sub = {
        "active_window": ActiveWindowConfig,
        "optimizer": OptimizerConfig,
        "change": ChangeDetectionConfig,
    }
    kwargs = {}
    for key, cls in sub.items():
        if key in d:
            kwargs[key] = _build(cls, d.pop(key) or {})
    if "optimizer" not in kwargs:
        kwargs["optimizer"] = PipelineConfig().optimizer
    kwargs.update(d)
    return _build(PipelineConfig, kwargs)


def config_to_dict(cfg):
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = config_to_dict(v) if is_dataclass(v) else v
    return out


def load_run_config(path):
    """Run config YAML: ``scenario`` path plus pipeline settings."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    scenario = doc.pop("scenario", None)
    if scenario is not None:
        scenario = str((path.parent / scenario).resolve()) if not Path(scenario).is_absolute() else scenario
    return scenario, config_from_dict(doc)


@dataclass
class RunResult:
    beliefs: list
    metrics: list  # rows (T, t, category, p, r, f1)
    summary: dict
    timing: list
    solution: object = None
    graph: object = None
    fragments: list = field(default_factory=list)


class Mapper:
    """Streaming mapper. Feed frames with ``step``; snapshot beliefs with ``belief``."""

    def __init__(self, scenario: Scenario, config: PipelineConfig):
        self.scn = scenario
        self.cfg = config
        self.aw = ActiveWindow(config.active_window)
        self.graph = DeformationGraph()
        self.lib = RayLibrary(config.change)
        c = scenario.config
        self.sig_rot = max(c.odom_rot_sigma, config.min_sigma_rot)
        self.sig_trans = max(c.odom_trans_sigma, config.min_sigma_trans)
        self.lc_rot = max(c.loop_closure_rot_sigma, config.min_sigma_rot)
        self.lc_trans = max(c.loop_closure_trans_sigma, config.min_sigma_trans)
        self.odom_pose = Pose.identity()
        self.frame_odom = []  # odometry-frame pose per frame
        self.kf_nodes = []  # (frame index, node id)
        self.frame_kf = []  # keyframe node governing each frame
        self.node_odom = {}
        self.fragments = []
        self.vertices = []  # odometry-frame positions
        self.vertex_world = np.zeros((0, 3))
        self.vertex_anchor = []  # (anchor control ids, world position at insertion)
        self.control_init = {}
        self.solution = None
        self.dirty = False

    # -- pose bookkeeping
    def correction(self, node):
        return compose(self.graph.nodes[node].estimate, self.node_odom[node].inverse())

    def node_for_time(self, t):
        k = int(np.argmin(np.abs(self.scn.times[: len(self.frame_kf)] - t)))
        return self.frame_kf[k]

    def _add_keyframe(self, i, first):
        info = (1.0 / self.sig_rot**2, 1.0 / self.sig_trans**2)
        if first:
            est = self.odom_pose
        else:
            prev_i, prev = self.kf_nodes[-1]
            rel = compose(self.node_odom[prev].inverse(), self.odom_pose)
            est = compose(self.graph.nodes[prev].estimate, rel)
        nid = self.graph.add_node(NodeKind.ROBOT, est, float(self.scn.times[i]))
        self.node_odom[nid] = self.odom_pose
        if not first:
            n = i - prev_i
            self.graph.add_edge(Edge(prev, nid, EdgeKind.XX, rel, info[0] / n, info[1] / n))
        self.kf_nodes.append((i, nid))
        return nid

    def _add_loop_closure(self, lc, nid):
        past_node = self.frame_kf[lc.past_index]
        # express the closure between keyframe nodes using local odometry
        a = compose(self.node_odom[past_node].inverse(), self.frame_odom[lc.past_index])
        rel = compose(compose(a, lc.relative), compose(self.odom_pose.inverse(), self.node_odom[nid]))
        self.graph.add_edge(Edge(past_node, nid, EdgeKind.LC, rel, 1 / self.lc_rot**2, 1 / self.lc_trans**2, lc.is_outlier))
        self.dirty = True

    def step(self, bundle):
        cfg = self.cfg
        i, t = bundle.index, bundle.t
        if cfg.pose_mode == "ground-truth" or i == 0:
            # the start pose is known; odometry integrates from there
            self.odom_pose = bundle.gt_robot_pose
        else:
            self.odom_pose = compose(self.odom_pose, bundle.odometry)
        self.frame_odom.append(self.odom_pose)
        is_kf = not self.kf_nodes or t - self.scn.times[self.kf_nodes[-1][0]] >= cfg.keyframe_interval - 1e-9
        nid = self._add_keyframe(i, not self.kf_nodes) if is_kf else self.kf_nodes[-1][1]
        self.frame_kf.append(nid)
        if is_kf and cfg.global_optimization and cfg.loop_closures:
            for lc in bundle.loop_closures:
                self._add_loop_closure(lc, nid)
        frags, verts = self.aw.process(t, bundle.measurements, self.odom_pose)
        self._ingest(frags, verts)

    def finish(self):
        frags, verts = self.aw.flush()
        self._ingest(frags, verts)

    def _ingest(self, frags, verts):
        cfg = self.cfg
        if verts:
            items = [(v, self.frame_kf[idx], stamp) for v, idx, stamp in verts]
            if cfg.global_optimization:
                add_control_points(
                    self.graph, items, cfg.control_cell, cfg.active_window.delta,
                    (1 / cfg.control_sigma**2,) * 2, self.node_odom,
                )
                ctrl = np.array(self.graph.control_nodes)
                c_stamp = np.array([self.graph.nodes[c].stamp for c in ctrl])
                c_pos = np.array([self.graph.nodes[c].estimate.translation for c in ctrl])
            new_world = []
            for v, node, stamp in items:
                w = self.correction(node).apply(v)
                new_world.append(w)
                anchors = []
                if cfg.global_optimization:
                    near = np.flatnonzero(np.abs(c_stamp - stamp) < cfg.active_window.delta)
                    order = np.argsort(np.linalg.norm(c_pos[near] - w, axis=1))[: cfg.blend_k]
                    anchors = ctrl[near[order]].tolist()
                    for c in anchors:
                        self.control_init.setdefault(c, self.graph.nodes[c].estimate)
                self.vertex_anchor.append(anchors)
                self.vertices.append(v)
            base = len(self.vertex_world)
            self.vertex_world = np.concatenate([self.vertex_world, np.array(new_world)])
            self._vertex_init = getattr(self, "_vertex_init", np.zeros((0, 3)))
            self._vertex_init = np.concatenate([self._vertex_init, np.array(new_world)])
            if not cfg.change_detection:
                items = []
            else:
                self.lib.set_positions(self.vertex_world, self._robot_positions())
            for k, (v, node, stamp) in enumerate(items):
                if np.linalg.norm(self.vertex_world[base + k] - self.lib._poses[node]) > 1e-9:
                    self.lib.insert_ray(base + k, node, stamp)
        for f in frags:
            self.fragments.append(f)
            if cfg.global_optimization and not f.dynamic:
                add_fragment(self.graph, f, self.node_odom, weights=(1 / cfg.fragment_sigma**2,) * 2)
        if frags and cfg.global_optimization:
            if propose_associations(
                self.graph, self.fragments, cfg.active_window.voxel_size, cfg.optimizer.assoc_weight,
                {f.id: self.world_surface(f) for f in self.fragments if not f.dynamic},
            ):
                self.dirty = True

    def _robot_positions(self):
        return {nid: self.graph.nodes[nid].estimate.translation for _, nid in self.kf_nodes}

    def world_surface(self, f):
        node = self.graph.fragment_nodes.get(f.id)
        if node is not None:
            odom = Pose(np.eye(3), np.asarray(f.surface).mean(axis=0))
            return compose(self.graph.nodes[node].estimate, odom.inverse()).apply(f.surface)
        return self.correction(self.node_for_time(f.last_observed)).apply(f.surface)

    def world_track(self, f):
        return [(t, self.correction(self.node_for_time(t)).apply(c)) for t, c in f.centroid_track]

    def optimize(self):
        if not (self.cfg.global_optimization and self.dirty):
            return False
        self.solution = optimize(self.graph, self.cfg.optimizer)
        self.graph.set_estimates(self.solution.estimates)
        self.dirty = False
        self._deform()
        return True

    def _deform(self):
        if len(self.vertex_world) == 0:
            return
        ids = sorted(self.control_init)
        col = {c: k for k, c in enumerate(ids)}
        m = max((len(a) for a in self.vertex_anchor), default=0)
        anchors = -np.ones((len(self.vertex_anchor), max(m, 1)), dtype=int)
        for r, a in enumerate(self.vertex_anchor):
            anchors[r, : len(a)] = [col[c] for c in a]
        old = [self.control_init[c] for c in ids]
        new = [self.graph.nodes[c].estimate for c in ids]
        self.vertex_world = deform_background(self._vertex_init, old, new, self.cfg.blend_k, anchors)
        self.lib.set_positions(self.vertex_world, self._robot_positions())
        self.lib.rebuild()

    def associations(self, provisional=(), surfaces=None):
        """Accepted fragment pairs; provisional fragments join the nearest earlier
        fragment that would pass the association inlier test."""
        out = []
        if self.solution is not None:
            back = {n: fid for fid, n in self.graph.fragment_nodes.items()}
            out = [(back[a], back[b]) for a, b in self.solution.associations if a in back and b in back]
        c_bar = self.cfg.optimizer.c_bar(EdgeKind.YY)
        margin = self.cfg.active_window.voxel_size
        closed = [f for f in self.fragments if not f.dynamic]
        for p in provisional:
            if p.dynamic:
                continue
            box = Aabb.from_points(surfaces[p.id]).inflated(margin)
            best = None
            for f in closed:
                if f.label != p.label or f.last_observed >= p.first_observed:
                    continue
                if not box.overlaps(Aabb.from_points(surfaces[f.id]).inflated(margin)):
                    continue
                d = float(np.linalg.norm(surfaces[f.id].mean(axis=0) - surfaces[p.id].mean(axis=0)))
                if d <= c_bar and (best is None or d < best[0]):
                    best = (d, f.id)
            if best is not None:
                out.append((best[1], p.id))
        return out

    def belief(self, T, timings=None):
        """Reconcile everything known at time T into a map."""
        t0 = time.perf_counter()
        provisional = self.aw.validated_hypotheses()
        frags = self.fragments + provisional
        surfaces = {f.id: self.world_surface(f) for f in frags}
        evidence = {}
        for f in frags:
            if f.dynamic or not self.cfg.change_detection:
                continue
            verdicts, n = self.lib.query_surface(surfaces[f.id])
            evidence[f.id] = temporal_filter(verdicts, self.cfg.change, n)
        t1 = time.perf_counter()
        tracks = {f.id: self.world_track(f) for f in frags if f.dynamic}
        records = reconcile(frags, self.associations(provisional, surfaces), evidence, T, surfaces, tracks)
        belief = SpatioTemporalMap(records, self.vertex_world, T)
        if timings is not None:
            timings["ray_query_ms"] += 1e3 * (t1 - t0)
            timings["reconcile_ms"] += 1e3 * (time.perf_counter() - t1)
        return belief


def grid_times(scn: Scenario, interval):
    if scn.num_frames == 0:
        return []
    return regular_grid(float(scn.times[-1]), interval)


def regular_grid(end, interval):
    if interval <= 0:
        raise ValueError("grid spacing must be positive")
    return [k * interval for k in range(int(math.floor(end / interval + 1e-9)) + 1)]


def evaluate_beliefs(beliefs, gt: GroundTruth):
    """Metric rows for every (T, t <= T) grid pair plus the 4D summary."""
    rows = []
    values = {(c, m): {} for c in CATEGORIES for m in ("precision", "recall", "f1")}
    for b in beliefs:
        for t in [bt.T for bt in beliefs if bt.T <= b.T + 1e-9]:
            res = snapshot_prf(b.query(t), gt.snapshot(t))
            for cat in CATEGORIES:
                p = res[cat]
                rows.append((b.T, t, cat, p.precision, p.recall, p.f1))
                values[(cat, "precision")][(b.T, t)] = p.precision
                values[(cat, "recall")][(b.T, t)] = p.recall
                values[(cat, "f1")][(b.T, t)] = p.f1
    summary = {}
    if rows:
        for (cat, m), v in values.items():
            summary[f"{cat}_{m}"] = metric_4d(v)
    return rows, summary


def ground_truth_from_scenario(scn: Scenario):
    frames = [(float(scn.times[i]), scn.gt_records(i)) for i in range(scn.num_frames)]
    # same (rounded) background points as the exported ground truth, so offline eval matches
    first = frames[0][1] if frames else []
    bg = next((r["points"] for r in first if r.get("background") and "points" in r), np.zeros((0, 3)))
    return GroundTruth(frames, np.asarray(bg, dtype=float))


def run(scn: Scenario, config: PipelineConfig, progress=None) -> RunResult:
    mapper = Mapper(scn, config)
    grid = grid_times(scn, config.eval_interval)
    beliefs, timing = [], []
    gi = 0
    for i in range(scn.num_frames):
        bundle = scn.render_frame(i)
        tm = {"frame": i, "t": bundle.t, "frame_ms": 0.0, "optimize_ms": 0.0, "ray_query_ms": 0.0, "reconcile_ms": 0.0}
        t0 = time.perf_counter()
        mapper.step(bundle)
        last = i == scn.num_frames - 1
        if last:
            mapper.finish()
        tm["frame_ms"] = 1e3 * (time.perf_counter() - t0)
        while gi < len(grid) and (bundle.t >= grid[gi] - 1e-9 or last):
            if grid[gi] > bundle.t + 1e-9:
                break
            t0 = time.perf_counter()
            mapper.optimize()
            tm["optimize_ms"] += 1e3 * (time.perf_counter() - t0)
            beliefs.append(mapper.belief(grid[gi], tm))
            gi += 1
        timing.append(tm)
        if progress:
            progress(i, scn.num_frames)
    if timing:
        # fragments closed by finish() after the last grid time still enter the final graph
        t0 = time.perf_counter()
        mapper.optimize()
        timing[-1]["optimize_ms"] += 1e3 * (time.perf_counter() - t0)
    gt = ground_truth_from_scenario(scn)
    rows, summary = evaluate_beliefs(beliefs, gt) if beliefs else ([], {})
    if mapper.solution is not None:
        sol = mapper.solution
        lc = [k for k in sol.omega if mapper.graph.edges[k].kind == EdgeKind.LC]
        summary["lc_accepted"] = sum(sol.omega[k] for k in lc)
        summary["lc_candidates"] = len(lc)
        summary["lc_outliers_accepted"] = sum(sol.omega[k] for k in lc if mapper.graph.edges[k].is_outlier)
        summary["associations"] = len(sol.associations)
    summary["fragments"] = len(mapper.fragments)
    summary["background_vertices"] = len(mapper.vertex_world)
    summary["rays"] = len(mapper.lib)
    return RunResult(beliefs, rows, summary, timing, mapper.solution, mapper.graph, mapper.fragments)


def write_metrics(rows, path):
    """One line per (T, t) grid pair with a ``{category}_{metric}`` column each."""
    table = {}
    for T, t, cat, p, r, f in rows:
        d = table.setdefault((T, t), {})
        d[f"{cat}_precision"], d[f"{cat}_recall"], d[f"{cat}_f1"] = p, r, f
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for (T, t), d in table.items():
            w.writerow([f"{T:.6g}", f"{t:.6g}"] + [repr(float(d[c])) for c in METRIC_COLUMNS[2:]])


def read_metrics(path):
    """Inverse of ``write_metrics``: long rows (T, t, category, p, r, f1)."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            for cat in CATEGORIES:
                rows.append((float(r["T"]), float(r["t"]), cat, float(r[f"{cat}_precision"]),
                             float(r[f"{cat}_recall"]), float(r[f"{cat}_f1"])))
    return rows


def write_summary(summary, path, extra=None):
    row = dict(extra or {})
    row.update(summary)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)


def write_timing(timing, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS)
        w.writeheader()
        for tm in timing:
            w.writerow({k: (f"{v:.3f}" if isinstance(v, float) and k != "t" else v) for k, v in tm.items()})


def run_to_dir(scenario_path, config: PipelineConfig, out_dir, seed_override=None, plots=True):
    """Run a scenario and write every artifact into ``out_dir``."""
    scn = load_scenario(scenario_path, seed_override)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run(scn, config)
    export_beliefs(result.beliefs, out / "map.jsonl")
    scn.export_ground_truth(out / "ground_truth.jsonl")
    write_metrics(result.metrics, out / "metrics.csv")
    write_summary(result.summary, out / "summary.csv", {"scenario": Path(scenario_path).stem, "seed": scn.config.seed,
                                                        "pose_mode": config.pose_mode})
    write_timing(result.timing, out / "timing.csv")
    (out / "config.json").write_text(json.dumps(config_to_dict(config), indent=2, default=str))
    if result.graph is not None and result.graph.nodes and config.global_optimization:
        from .global_opt import write_g2o

        write_g2o(result.graph, out / "graph.g2o")
    if plots and result.metrics:
        from .plotting import plot_run

        plot_run(result, scn, out)
    return result


def resample_measurements(measurements, n, rng):
    """Redistribute a frame's points so it holds ``n`` in total (sampling with jitter)."""
    sizes = np.array([len(m.points) for m in measurements], dtype=float)
    if not len(sizes):
        return []
    counts = np.maximum(1, np.round(n * sizes / sizes.sum()).astype(int))
    out = []
    for m, c in zip(measurements, counts):
        idx = rng.integers(0, len(m.points), c)
        pts = m.points[idx] + rng.normal(0.0, 0.005, (c, 3))
        out.append(replace(m, points=pts))
    return out


def bench_active_window(scn: Scenario, config: PipelineConfig, points_per_frame=10_000, max_frames=100):
    """Active-window throughput with every frame resampled to ``points_per_frame`` points."""
    aw = ActiveWindow(config.active_window)
    rng = np.random.default_rng(config.seed)
    n = min(scn.num_frames, max_frames)
    odom = [scn.render_frame(i) for i in range(n)]
    frames = [(b.t, resample_measurements(b.measurements, points_per_frame, rng), b.gt_robot_pose) for b in odom]
    times = []
    for t, meas, pose in frames:
        t0 = time.perf_counter()
        aw.process(t, meas, pose)
        times.append(time.perf_counter() - t0)
    total = float(sum(times))
    points = [sum(len(m.points) for m in meas) for _, meas, _ in frames]
    return {
        "frames": n,
        "points_per_frame": float(np.mean(points)) if points else 0.0,
        "mean_frame_ms": 1e3 * total / n if n else 0.0,
        "fps": n / total if total > 0 else 0.0,
    }
