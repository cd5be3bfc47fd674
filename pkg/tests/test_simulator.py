from pathlib import Path

import numpy as np
import pytest

from tempomap.geometry import Pose, compose_chain
from tempomap.simulator import (
    BACKGROUND_LABEL, Primitive, ScenarioConfig, WorldObject, build_scenario, load_scenario, object_from_spec,
)

ROOT = Path(__file__).resolve().parents[1]


def box(id, label, pose, appear=0.0, disappear=np.inf, size=(0.5, 0.5, 0.5)):
    return object_from_spec(
        {"id": id, "label": label, "shape": {"type": "box", "size": list(size)}, "pose": list(pose),
         "appear_time": appear, "disappear_time": disappear},
        0.04,
    )


def line_config(**kw):
    base = dict(duration=20.0, frame_rate=5.0, robot_waypoints=[[0, 0, 0, 0.8, 0], [20, 10, 0, 0.8, 0]])
    base.update(kw)
    return ScenarioConfig(**base)


def square_config(**kw):
    wp = [[0, 0, 0, 0.8, 0], [10, 4, 0, 0.8, 0], [20, 4, 4, 0.8, 0], [30, 0, 4, 0.8, 0], [40, 0, 0, 0.8, 0]]
    base = dict(duration=40.0, frame_rate=5.0, robot_waypoints=wp, loop_closure_radius=1.0, loop_closure_min_age=20.0,
                loop_closure_stride=1)
    base.update(kw)
    return ScenarioConfig(**base)


def test_empty_script_has_background_only():
    scn = build_scenario(line_config(duration=2), [])
    assert [o.is_background for o in scn.objects] == [True]
    for m in scn.render_frame(0).measurements:
        assert m.label == BACKGROUND_LABEL


def test_presence_window():
    scn = build_scenario(line_config(), [box(1, 1, [3, 0, 0.25, 0], appear=10.0)])
    present = {oid: p for oid, _, p, _ in scn.gt_snapshot(5.0)}
    assert not present[1]
    present = {oid: p for oid, _, p, _ in scn.gt_snapshot(15.0)}
    assert present[1]


def test_same_seed_identical_frames():
    cfg = dict(point_noise_sigma=0.01, odom_rot_sigma=0.01, odom_trans_sigma=0.01)
    a = build_scenario(line_config(**cfg), [box(1, 1, [3, 0, 0.25, 0])])
    b = build_scenario(line_config(**cfg), [box(1, 1, [3, 0, 0.25, 0])])
    for i in (0, 7, 50):
        fa, fb = a.render_frame(i), b.render_frame(i)
        assert len(fa.measurements) == len(fb.measurements)
        for ma, mb in zip(fa.measurements, fb.measurements):
            assert ma.points.tobytes() == mb.points.tobytes() and ma.label == mb.label
        assert fa.odometry.matrix().tobytes() == fb.odometry.matrix().tobytes()


def test_object_out_of_range_not_measured():
    scn = build_scenario(line_config(), [box(1, 1, [30, 0, 0.25, 0])])
    for i in range(0, scn.num_frames, 10):
        assert all(m.source_id != 1 for m in scn.render_frame(i).measurements)


def test_noiseless_odometry_composes_to_trajectory():
    scn = build_scenario(square_config(), [])
    rel = [scn.render_frame(i).odometry for i in range(1, scn.num_frames)]
    end = compose_chain([scn.gt_poses[0]] + rel)
    assert end.allclose(scn.gt_poses[-1], 1e-9)


def test_missed_detection_one_drops_all_objects():
    scn = build_scenario(line_config(missed_detection_prob=1.0), [box(1, 1, [3, 0, 0.25, 0])])
    for i in range(scn.num_frames):
        assert all(m.label == BACKGROUND_LABEL for m in scn.render_frame(i).measurements)


def test_straight_line_has_no_loop_closures():
    scn = build_scenario(line_config(loop_closure_radius=1.0, loop_closure_min_age=5.0, loop_closure_stride=1), [])
    assert all(not scn.detect_loop_closures(i) for i in range(scn.num_frames))


def test_square_path_closes_near_end():
    scn = build_scenario(square_config(), [])
    hits = [i for i in range(scn.num_frames) if scn.detect_loop_closures(i)]
    assert hits and max(hits) >= scn.num_frames - 10
    i = hits[-1]
    lc = scn.detect_loop_closures(i)[0]
    # relative pose maps frame i into past frame j
    true_rel = scn.gt_poses[lc.past_index].inverse()
    assert np.linalg.norm(scn.gt_positions[lc.past_index] - scn.gt_positions[i]) <= 1.0
    assert not lc.is_outlier
    assert np.allclose(lc.relative.translation, (true_rel.apply(scn.gt_positions[i])), atol=1e-9)


def test_outlier_rate_one_marks_every_closure():
    scn = build_scenario(square_config(loop_closure_outlier_rate=1.0), [])
    lcs = [lc for i in range(scn.num_frames) for lc in scn.detect_loop_closures(i)]
    assert lcs and all(lc.is_outlier for lc in lcs)


def test_occlusion_hides_points_behind_objects():
    front = box(1, 1, [2, 0, 0.8, 0], size=(0.2, 1.5, 1.5))
    back = box(2, 2, [4, 0, 0.8, 0], size=(0.3, 0.6, 0.6))
    scn = build_scenario(line_config(occlusion=True, duration=1), [front, back])
    assert all(m.source_id != 2 for m in scn.render_frame(0).measurements)
    scn = build_scenario(line_config(occlusion=False, duration=1), [box(1, 1, [2, 0, 0.8, 0], size=(0.2, 1.5, 1.5)),
                                                                    box(2, 2, [4, 0, 0.8, 0], size=(0.3, 0.6, 0.6))])
    assert any(m.source_id == 2 for m in scn.render_frame(0).measurements)


def test_validation_errors():
    with pytest.raises(ValueError):
        ScenarioConfig(point_noise_sigma=-1)
    with pytest.raises(ValueError):
        ScenarioConfig(missed_detection_prob=1.5)
    with pytest.raises(ValueError):
        WorldObject(1, 1, np.zeros((1, 3)), [(0.0, Pose.identity())], appear_time=5, disappear_time=5)
    with pytest.raises(ValueError):
        build_scenario(ScenarioConfig(), [])
    with pytest.raises(ValueError):
        Primitive("cone").sample(0.1)
    with pytest.raises(IndexError):
        build_scenario(line_config(duration=1), []).render_frame(99)


def test_bundled_scenarios_load():
    for name in ("apartment_mini", "office_loop"):
        scn = load_scenario(ROOT / "scenarios" / f"{name}.yaml")
        assert scn.num_frames > 0
    a = load_scenario(ROOT / "scenarios" / "apartment_mini.yaml", seed_override=3)
    assert a.config.seed == 3
    with pytest.raises(FileNotFoundError, match="nope.yaml"):
        load_scenario(ROOT / "nope.yaml")


def test_ground_truth_records(tmp_path):
    scn = build_scenario(line_config(duration=1), [box(1, 4, [3, 0, 0.25, 0])])
    path = tmp_path / "gt.jsonl"
    scn.export_ground_truth(path)
    lines = path.read_text().splitlines()
    assert len(lines) == scn.num_frames * len(scn.objects)
    rec = scn.gt_records(0)[1]
    assert rec["label"] == 4 and np.allclose(rec["centroid"], [3, 0, 0.25], atol=1e-6)
