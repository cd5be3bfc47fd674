"""Acceptance criteria 1-10. Each test records a pass/fail line shown in the
terminal summary; run ``pytest tests/test_acceptance.py -v``."""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from pgo_circle import noisy_circle, rms_error
from tempomap.active_window import ActiveWindowConfig, Fragment, voxel_iou
from tempomap.change_detection import RayLibrary, Verdict, classify, ray_metrics
from tempomap.geometry import Pose, boxminus, boxplus, compose, so3_exp, voxel_keys
from tempomap.global_opt import DeformationGraph, OptimizerConfig, optimize, single_edge_residual
from tempomap.pipeline import bench_active_window, config_from_dict, load_run_config, run
from tempomap.simulator import ScenarioConfig, build_scenario, load_scenario, object_from_spec
from tempomap.stmap import reconcile

ROOT = Path(__file__).resolve().parents[1]
NU = 0.08


def random_pose(rng, scale=3.0):
    return Pose(so3_exp(rng.normal(size=3)), rng.normal(scale=scale, size=3))


# 1

def test_geometry_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        p, q = random_pose(rng), random_pose(rng)
        back = boxplus(p, boxminus(q, p))
        worst = max(worst, np.abs(back.rotation - q.rotation).max(), np.abs(back.translation - q.translation).max())
        xi = np.r_[rng.uniform(-1, 1, 3), rng.normal(size=3)]
        worst = max(worst, np.abs(boxminus(boxplus(p, xi), p) - xi).max())
    iou_ok = True
    for _ in range(100):
        a = rng.uniform(-0.5, 0.5, (rng.integers(1, 500), 3))
        b = rng.uniform(-0.5, 0.5, (rng.integers(1, 500), 3)) + rng.uniform(-0.3, 0.3, 3)
        sa, sb = {tuple(k) for k in voxel_keys(a, NU)}, {tuple(k) for k in voxel_keys(b, NU)}
        iou_ok &= voxel_iou(a, b, NU) == len(sa & sb) / len(sa | sb)
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and iou_ok and dt < 5.0
    criterion(1, ok, f"round-trip max err {worst:.1e}, iou exact={iou_ok}, {dt:.1f} s")
    assert ok


# 2

def test_gnc_circle(criterion):
    g, truth, init = noisy_circle(seed=0)
    t0 = time.perf_counter()
    sol = optimize(g, OptimizerConfig(truncation=5.0))
    dt = time.perf_counter() - t0
    lc = [k for k, e in enumerate(g.edges) if e.kind.value == "LC"]
    classified = all(sol.omega[k] == int(not g.edges[k].is_outlier) for k in lc)
    ratio = rms_error(sol.estimates, truth) / rms_error(init, truth)
    # the same graph with the outliers removed by hand: the best any weighting can do
    clean = DeformationGraph()
    clean.nodes, clean.robot_nodes = g.nodes, g.robot_nodes
    clean.edges = [e for e in g.edges if not e.is_outlier]
    oracle = rms_error(optimize(clean, OptimizerConfig(truncation=5.0)).estimates, truth) / rms_error(init, truth)
    ok = classified and ratio < 0.25 and dt < 30
    criterion(2, ok, f"weights correct={classified}, rms ratio {ratio:.3f} (outlier-free oracle {oracle:.3f}), "
                     f"{dt:.1f} s")
    assert classified and dt < 30
    assert ratio < 0.25


# 3

def test_residual_jacobians(criterion):
    rng = np.random.default_rng(1)
    eps = 1e-6
    worst = 0.0
    for _ in range(50):
        Ti, Tm = random_pose(rng), random_pose(rng)
        Tj = compose(compose(Ti, Tm), Pose(so3_exp(rng.normal(scale=0.5, size=3)), rng.normal(size=3)))
        _, Ji, Jj = single_edge_residual(Ti, Tj, Tm, jacobians=True)
        for J, which in ((Ji, 0), (Jj, 1)):
            num = np.zeros((6, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = eps
                plus, minus = [Ti, Tj], [Ti, Tj]
                plus[which] = boxplus(plus[which], d)
                minus[which] = boxplus(minus[which], -d)
                num[:, k] = (single_edge_residual(*plus, Tm) - single_edge_residual(*minus, Tm)) / (2 * eps)
            worst = max(worst, np.abs(J - num).max() / max(1.0, np.abs(num).max()))
    ok = worst < 1e-5
    criterion(3, ok, f"max relative error {worst:.1e}")
    assert ok


# 4

def test_ray_classification(criterion):
    rng = np.random.default_rng(2)
    p_q, p_r, p_v = (rng.uniform(-10, 10, (10_000, 3)) for _ in range(3))
    d_r, d_d = ray_metrics(p_q, p_r, p_v)
    # independent: Lagrange identity for the lateral distance, explicit sums for depth
    a, w = p_q - p_r, p_v - p_r
    aa, ww, aw = (a * a).sum(1), (w * w).sum(1), (a * w).sum(1)
    o_d = aw / np.sqrt(aa)
    o_r = np.sqrt(np.maximum(ww - aw**2 / aa, 0.0))
    err = max(np.abs(d_d - o_d).max(), np.abs(d_r - o_r).max())
    table = [
        classify(*ray_metrics([5, 0, 0], [0, 0, 0], [10, 0, 0]), 5.0) == Verdict.ABSENT,
        classify(*ray_metrics([10.2, 0, 0], [0, 0, 0], [10, 0, 0]), 10.2) == Verdict.PRESENT,
        classify(*ray_metrics([9.8, 0, 0], [0, 0, 0], [10, 0, 0]), 9.8) == Verdict.PRESENT,
        classify(*ray_metrics([11, 0, 0], [0, 0, 0], [10, 0, 0]), 11.0) == Verdict.OCCLUDED,
    ]
    ok = err < 1e-12 and all(table)
    criterion(4, ok, f"max metric deviation {err:.1e}, truth table {sum(table)}/{len(table)}")
    assert ok


# 5

def test_hash_vs_scan(criterion):
    rng = np.random.default_rng(3)
    poses = {k: rng.uniform(-10, 10, 3) for k in range(200)}
    refs = rng.integers(0, 200, 10_000)
    dirs = rng.normal(size=(10_000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.array([poses[k] for k in refs])
    verts = origins + dirs * rng.uniform(0.5, 5, (10_000, 1))
    lib = RayLibrary()
    lib.set_positions(verts, poses)
    for i in range(10_000):
        lib.insert_ray(i, int(refs[i]), float(rng.uniform(0, 100)))
    pick = rng.integers(0, 10_000, 1000)
    queries = origins[pick] + rng.uniform(0.05, 1.2, (1000, 1)) * (verts[pick] - origins[pick])
    queries += rng.normal(scale=0.05, size=queries.shape)

    def multiset(v):
        return sorted((t, x.value) for t, x in v)

    before = sum(multiset(lib.query_point(q)) == multiset(lib.query_linear(q)) for q in queries)
    c, s = math.cos(0.2), math.sin(0.2)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    lib.set_positions(verts @ R.T + [3, 0, 0], {k: R @ v + [3, 0, 0] for k, v in poses.items()})
    rebuilt = lib.rebuild()
    moved = queries @ R.T + [3, 0, 0]
    after = sum(multiset(lib.query_point(q)) == multiset(lib.query_linear(q)) for q in moved)
    ok = before == 1000 and after == 1000 and rebuilt
    criterion(5, ok, f"agreement {before}/1000 before, {after}/1000 after rebuild")
    assert ok


# 6

def test_reconciliation_midpoint(criterion):
    pts = np.zeros((5, 3))
    f = Fragment(1, 2, pts, np.full(5, 35.0), 20.0, 35.0, np.array([20.0, 35.0]))
    (rec,) = reconcile([f], [], {1: ([60.0], [40.0])}, horizon=100.0)
    ok = rec.disappearance == 50.0
    criterion(6, ok, f"disappearance estimate {rec.disappearance}")
    assert ok


# 7

def test_apartment_ground_truth_poses(criterion):
    scenario, cfg = load_run_config(ROOT / "configs" / "apartment_mini.yaml")
    scn = load_scenario(scenario)
    assert cfg.pose_mode == "ground-truth" and cfg.eval_interval == 5.0 and scn.config.point_noise_sigma == 0
    t0 = time.perf_counter()
    s = run(scn, cfg).summary
    dt = time.perf_counter() - t0
    ok = s["objects_recall"] >= 0.9 and s["changes_f1"] >= 0.9 and s["dynamics_precision"] == 1.0 and dt < 120
    criterion(7, ok, f"objects recall {s['objects_recall']:.3f}, changes F1 {s['changes_f1']:.3f}, "
                     f"dynamics precision {s['dynamics_precision']:.3f}, {dt:.0f} s")
    assert ok


# 8

def test_office_loop_closure_ablation(criterion):
    scenario, cfg = load_run_config(ROOT / "configs" / "office_loop.yaml")
    _, cfg_off = load_run_config(ROOT / "configs" / "office_loop_no_opt.yaml")
    assert cfg.pose_mode == cfg_off.pose_mode == "odometry" and not cfg_off.global_optimization
    scn = load_scenario(scenario)
    on = run(scn, cfg).summary
    off = run(load_scenario(scenario), cfg_off).summary
    ok = on["changes_f1"] > off["changes_f1"] and on["background_precision"] >= 0.8
    criterion(8, ok, f"changes F1 {on['changes_f1']:.3f} with loop closures vs {off['changes_f1']:.3f} without, "
                     f"background precision {on['background_precision']:.3f}")
    assert ok


# 9

ROOM = [[-3, -3, -0.1, 3, 3, 0.0], [-3, -3, 0, 3, -2.9, 1.5], [-3, 2.9, 0, 3, 3, 1.5],
        [-3, -3, 0, -2.9, 3, 1.5], [2.9, -3, 0, 3, 3, 1.5]]


def one_object_scene(waypoints, duration):
    cfg = ScenarioConfig(duration=duration, frame_rate=5.0, robot_waypoints=waypoints, occlusion=True,
                         fov_half_angle=math.radians(45), sensor_range=5.0)
    box = object_from_spec({"id": 1, "label": 4, "shape": {"type": "box", "size": [0.5, 0.5, 0.6]},
                            "pose": [2.0, 0.0, 0.3, 0]}, 0.04)
    return build_scenario(cfg, [box], background_boxes=ROOM)


def test_fragment_semantics(criterion):
    cfg = config_from_dict({"pose_mode": "ground-truth", "eval_interval": 10.0})
    delta = ActiveWindowConfig().delta
    # one turn every 30 s starting side-on: the box is in view during [3.75, 11.25] and
    # [33.75, 41.25]; headings are interpolated the short way round, hence eighth-turn waypoints
    spin = [[3.75 * k, 0, 0, 0.8, -math.pi / 2 + k * math.pi / 4] for k in range(15)]
    res = run(one_object_scene(spin, 50.0), cfg)
    frags = sorted((f for f in res.fragments if f.label == 4 and not f.dynamic), key=lambda f: f.first_observed)
    gap = frags[1].first_observed - frags[0].last_observed if len(frags) == 2 else float("nan")
    records = [r for r in res.beliefs[-1].records if r.label == 4]
    nodes = {res.graph.fragment_nodes[f.id] for f in frags}
    accepted = [a for a in res.solution.associations if set(a) <= nodes]
    two_visits = (len(frags) == 2 and gap > delta and len(accepted) == 1
                  and len(records) == 1 and len(records[0].fragment_ids) == 2)

    stare = [[0, 0, 0, 0.8, 0], [40, 0, 0, 0.8, 0]]
    res = run(one_object_scene(stare, 40.0), cfg)
    steady = [f for f in res.fragments if f.label == 4]
    ok = two_visits and len(steady) == 1
    criterion(9, ok, f"two visits: {len(frags)} fragments, gap {gap:.1f} s, {len(accepted)} accepted association, "
                     f"{len(records)} record(s); "
                     f"continuous: {len(steady)} fragment(s)")
    assert ok


# 10

def test_throughput(criterion):
    scenario, cfg = load_run_config(ROOT / "configs" / "apartment_mini.yaml")
    b = bench_active_window(load_scenario(scenario), cfg, 10_000, 100)
    criterion(10, b["fps"] >= 20, f"{b['fps']:.1f} frames/s at {b['points_per_frame']:.0f} points/frame "
                                  "(soft target 20, not gating)", soft=True)
    assert b["fps"] > 0


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
