import math

import numpy as np
import pytest

from tempomap.active_window import (
    UNLABELED, ActiveWindow, ActiveWindowConfig, BackgroundAccumulator, FreeSpaceMap, Hypothesis, associate,
    close_and_validate, cluster_points, detect_dynamic_points, extract_background, ray_free_keys, update_free_space,
    validate, voxel_iou,
)
from tempomap.geometry import Pose, pack_keys, packed_voxels, voxel_keys
from tempomap.simulator import BACKGROUND_LABEL, Measurement, ScenarioConfig, build_scenario, object_from_spec

NU = 0.08


def meas(t, pts, label=1, dynamic=False):
    return Measurement(t, np.asarray(pts, dtype=float).reshape(-1, 3), label, dynamic_flag=dynamic)


def cube(center, side=0.4, step=0.04):
    g = np.arange(-side / 2, side / 2 + 1e-9, step)
    X, Y, Z = np.meshgrid(g, g, g)
    return np.c_[X.ravel(), Y.ravel(), Z.ravel()] + center


def hyp_with(n, t0=0.0, dt=0.2, label=1, center=(0, 0, 0), drift=(0, 0, 0), dynamic=False):
    h = Hypothesis(1, label)
    for k in range(n):
        pts = cube(np.asarray(center) + k * np.asarray(drift))
        h.add(meas(t0 + k * dt, pts, label, dynamic), np.unique(packed_voxels(pts, NU)))
    return h


# free space

def test_empty_fsm_flags_nothing():
    fsm = FreeSpaceMap(NU)
    m = meas(0.0, np.random.default_rng(0).normal(size=(50, 3)))
    assert not detect_dynamic_points(m, fsm, Pose.identity()).any()


def test_point_in_recently_free_voxel_is_flagged():
    fsm = FreeSpaceMap(NU)
    update_free_space(fsm, meas(0.0, [[2.0, 0.0, 0.0]]), Pose.identity())
    m = meas(1.0, [[0.5, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert detect_dynamic_points(m, fsm, Pose.identity(), delta=10).tolist() == [True, False]
    # outside the consistency horizon the old free evidence is ignored
    assert not detect_dynamic_points(meas(20.0, [[0.5, 0, 0]]), fsm, Pose.identity(), delta=10).any()


def test_single_ray_voxel_counts():
    fsm = FreeSpaceMap(NU)
    update_free_space(fsm, meas(0.0, [[1.0, 0.01, 0.01]]), Pose.identity(), margin_voxels=1, rel_margin=0.0)
    # march oracle: every NU/100 along the ray up to one voxel short of the endpoint
    s = np.arange(0, 1.0 - NU, NU / 100)
    oracle = set(packed_voxels(np.c_[s, np.full_like(s, 0.01), np.full_like(s, 0.01)], NU).tolist())
    assert set(fsm.free) == oracle and len(oracle) in (11, 12)
    assert len(fsm.occupied) == 1


def test_ray_free_keys_matches_dense_march():
    rng = np.random.default_rng(1)
    origin = np.array([0.3, -0.2, 0.8])
    ends = origin + rng.normal(size=(40, 3)) * 2
    got = set(ray_free_keys(origin, ends, NU, 1, 0.15).tolist())
    march = set()
    for e in ends:
        L = np.linalg.norm(e - origin)
        stop = min(L - NU, 0.85 * L)
        if stop <= 0:
            continue
        s = np.arange(0, stop, NU / 2)
        s = np.r_[s, stop]
        march |= set(packed_voxels(origin + (e - origin) / L * s[:, None], NU).tolist())
    assert got == march


def test_empty_measurement_list_is_noop():
    fsm = FreeSpaceMap(NU)
    update_free_space(fsm, [], Pose.identity())
    assert len(fsm.free) == 0 and len(fsm.occupied) == 0


def test_free_stamps_never_decrease():
    fsm = FreeSpaceMap(NU)
    update_free_space(fsm, meas(5.0, [[2.0, 0, 0]]), Pose.identity())
    before = dict(fsm.free)
    update_free_space(fsm, meas(3.0, [[2.0, 0, 0]]), Pose.identity())
    assert all(fsm.free[k] >= v for k, v in before.items())
    update_free_space(fsm, meas(7.0, [[2.0, 0, 0]]), Pose.identity())
    assert all(fsm.free[k] == 7.0 for k in before)


def test_mover_crossing_scanned_corridor_is_flagged():
    # robot stands still looking at a wall; a box slides across in front of it
    cfg = ScenarioConfig(duration=8.0, frame_rate=5.0, robot_waypoints=[[0, 0, 0, 0.5, 0], [8, 0, 0, 0.5, 0]],
                         occlusion=True, fov_half_angle=math.radians(60))
    mover = object_from_spec({"id": 1, "label": 5, "shape": {"type": "box", "size": [0.4, 0.4, 0.8]},
                              "trajectory": [[0, 2.0, -3.5, 0.4, 0], [3, 2.0, -3.5, 0.4, 0], [7, 2.0, 3.5, 0.4, 0]]}, 0.04)
    scn = build_scenario(cfg, [mover], background_boxes=[[-1, -9, -0.2, 6, 9, 0.0], [3.5, -9, 0, 3.7, 9, 2]])
    # with a 5 m range the wall is scanned for |y| < ~2 at the mover's depth
    fsm = FreeSpaceMap(NU, horizon=10.0)
    flagged = total = 0
    for i in range(scn.num_frames):
        b = scn.render_frame(i)
        for m in b.measurements:
            if m.source_id == 1 and 3.0 < b.t < 7.0 and abs(mover.pose_at(b.t).translation[1]) < 1.5:
                mask = detect_dynamic_points(m, fsm, b.gt_robot_pose, 10.0)
                flagged += mask.sum()
                total += len(mask)
        update_free_space(fsm, b.measurements, b.gt_robot_pose, 1, 0.15)
    assert total > 0 and flagged / total >= 0.8


# voxel IoU

def test_voxel_iou_identity_and_disjoint():
    a = cube((0, 0, 0))
    assert voxel_iou(a, a, NU) == 1.0
    assert voxel_iou(a, a + [2 * NU + 0.5, 0, 0], NU) == 0.0


def test_voxel_iou_matches_set_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.uniform(-0.5, 0.5, (1000, 3))
        b = rng.uniform(-0.3, 0.7, (1000, 3))
        sa = {tuple(k) for k in voxel_keys(a, NU)}
        sb = {tuple(k) for k in voxel_keys(b, NU)}
        assert voxel_iou(a, b, NU) == len(sa & sb) / len(sa | sb)


# association

def test_cold_start_spawns():
    assignment, _ = associate([meas(0, cube((0, 0, 0)))], {}, ActiveWindowConfig())
    assert assignment == {0: None}


def test_high_iou_same_label_associates():
    pool = {7: hyp_with(1)}
    pts = cube((0, 0, 0))
    keep = pts[: int(0.95 * len(pts))]
    assert voxel_iou(keep, pts, NU) >= 0.9
    assignment, _ = associate([meas(1, keep)], pool, ActiveWindowConfig())
    assert assignment == {0: 7}
    assignment, _ = associate([meas(1, keep, label=2)], pool, ActiveWindowConfig())
    assert assignment == {0: None}


def test_contention_higher_iou_wins():
    pool = {3: hyp_with(1)}
    obs = [meas(1, cube((0.12, 0, 0))), meas(1, cube((0.02, 0, 0)))]
    cfg = ActiveWindowConfig()
    assignment, ious = associate(obs, pool, cfg)
    # brute force over the two possible single matches
    best = max((0, 1), key=lambda j: voxel_iou(obs[j].points, pool[3].observations[-1][1], NU))
    assert assignment[best] == 3 and assignment[1 - best] is None


def test_dynamic_observation_matches_nearest_dynamic_hypothesis():
    h = hyp_with(3, drift=(0.3, 0, 0), dynamic=True, label=UNLABELED)
    pool = {4: h}
    obs = meas(1.0, cube(h.centroid + [0.9, 0, 0]), UNLABELED, dynamic=True)
    assert associate([obs], pool, ActiveWindowConfig())[0] == {0: 4}
    far = meas(1.0, cube(h.centroid + [3.0, 0, 0]), UNLABELED, dynamic=True)
    assert associate([far], pool, ActiveWindowConfig())[0] == {0: None}


# validation and closing

def test_too_few_observations_rejected():
    cfg = ActiveWindowConfig()
    assert validate(hyp_with(14), cfg) is None
    assert validate(hyp_with(15), cfg) is False


def test_small_displacement_dynamic_becomes_static():
    cfg = ActiveWindowConfig()
    h = hyp_with(20, drift=(0.5 / 19, 0, 0), dynamic=True)
    assert validate(h, cfg) is False
    h = hyp_with(20, drift=(2.0 / 19, 0, 0), dynamic=True)
    assert validate(h, cfg) is True


def test_close_boundary_is_strict():
    cfg = ActiveWindowConfig(delta=10.0)
    pool = {1: hyp_with(20)}
    last = pool[1].last_seen
    assert close_and_validate(pool, last + 9.9, cfg) == [] and 1 in pool
    frags = close_and_validate(pool, last + 10.0, cfg)
    assert len(frags) == 1 and not pool
    assert frags[0].first_observed == 0.0 and frags[0].last_observed == pytest.approx(last)


# background

def test_background_voxel_emitted_after_horizon():
    acc = BackgroundAccumulator(0.2)
    for t in (2.0, 3.0, 4.0):
        acc.add(np.array([[1.05, 1.05, 0.05]]), t)
    frame_times = np.arange(0, 21, 1.0)
    assert extract_background(acc, 10.0, 10.0, frame_times) == []
    out = extract_background(acc, 20.0, 10.0, frame_times)
    assert len(out) == 1
    v, idx, stamp = out[0]
    assert np.allclose(v, [1.05, 1.05, 0.05]) and stamp == 4.0 and frame_times[idx] == 4.0


def test_active_voxel_not_emitted():
    acc = BackgroundAccumulator(0.2)
    acc.add(np.array([[0.0, 0, 0]]), 15.0)
    assert extract_background(acc, 20.0, 10.0, [15.0]) == []


def test_background_count_matches_offline_replay():
    rng = np.random.default_rng(3)
    acc = BackgroundAccumulator(0.2)
    chunks = [rng.uniform(-3, 3, (300, 3)) for _ in range(20)]
    for t, c in enumerate(chunks):
        acc.add(c, float(t))
    out = extract_background(acc, math.inf, 10.0, np.arange(20.0))
    offline = np.unique(packed_voxels(np.concatenate(chunks), 0.2))
    assert len(out) == len(offline)


def test_cluster_points_splits_separated_blobs():
    pts = np.r_[cube((0, 0, 0)), cube((3, 0, 0))]
    comp = cluster_points(pts, 0.16)
    assert len(np.unique(comp)) == 2


def test_window_separates_two_visits_and_keeps_one_visit_whole():
    cfg = ActiveWindowConfig(delta=5.0)
    aw = ActiveWindow(cfg)
    frags = []
    pose = Pose.identity()
    obj = cube((2.0, 0, 0.3))
    wall = np.c_[np.full(200, 4.0), np.linspace(-2, 2, 200), np.full(200, 0.5)]
    times = list(np.arange(0, 6, 0.2)) + list(np.arange(20, 26, 0.2))
    for t in times:
        m = [meas(t, obj), Measurement(t, wall, BACKGROUND_LABEL)]
        f, _ = aw.process(float(t), m, pose)
        frags += f
    f, _ = aw.flush()
    frags += f
    assert len(frags) == 2
    assert frags[0].last_observed < 6 and frags[1].first_observed >= 20


def test_config_validation():
    with pytest.raises(ValueError):
        ActiveWindowConfig(delta=0)
