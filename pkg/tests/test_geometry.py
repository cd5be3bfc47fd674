import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempomap.geometry import (
    Aabb, Pose, boxminus, boxplus, compose, compose_chain, hat, interpolate, matrix_to_quat, pack_keys,
    quat_to_matrix, so3_exp, so3_log, so3_right_jacobian_inv, traverse_cells, unpack_keys, voxel_filter,
    voxel_key, voxel_keys,
)


def rotz(a):
    return Pose(so3_exp([0, 0, a]), np.zeros(3))


def random_pose(rng, scale=3.0):
    return Pose(so3_exp(rng.normal(size=3)), rng.normal(scale=scale, size=3))


def log_series(R, terms=80):
    # log(I + A) = A - A^2/2 + A^3/3 - ...; converges for small rotations
    A = R - np.eye(3)
    out = np.zeros((3, 3))
    P = np.eye(3)
    for k in range(1, terms):
        P = P @ A
        out += (-1) ** (k + 1) * P / k
    return np.array([out[2, 1], out[0, 2], out[1, 0]])


vec3 = st.lists(st.floats(-3, 3, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(1)
    p = random_pose(rng)
    assert compose(Pose.identity(), p).allclose(p)
    assert compose(p, p.inverse()).allclose(Pose.identity())


def test_pure_translations_commute():
    a = compose(Pose.from_translation(1, 0, 0), Pose.from_translation(0, 2, 0))
    assert np.allclose(a.translation, [1, 2, 0]) and np.allclose(a.rotation, np.eye(3))


def test_boxminus_simple_cases():
    rng = np.random.default_rng(2)
    p = random_pose(rng)
    assert np.allclose(boxminus(p, p), 0)
    assert np.allclose(boxminus(Pose.from_translation(1, 0, 0), Pose.identity()), [0, 0, 0, 1, 0, 0])


def test_boxminus_rotation_matches_series_log():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_pose(rng)
        q = compose(rotz(0.3), p)
        xi = boxminus(q, p)
        oracle = log_series(p.rotation.T @ q.rotation)
        assert np.allclose(xi[:3], oracle, atol=1e-9)
    # world-frame rotz about the origin: body-frame axis is R^T z
    p = Pose.identity()
    assert np.allclose(boxminus(compose(rotz(0.3), p), p)[:3], [0, 0, 0.3], atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(vec3, vec3, vec3, vec3)
def test_boxplus_boxminus_roundtrip(r, t, dr, dt):
    p = Pose(so3_exp(r), t)
    xi = np.concatenate([dr * 0.9, dt])  # keep the angle below pi
    if np.linalg.norm(xi[:3]) >= math.pi - 1e-3:
        return
    q = boxplus(p, xi)
    assert np.allclose(boxminus(q, p), xi, atol=1e-8)
    assert boxplus(p, boxminus(q, p)).allclose(q, 1e-9)


def test_so3_log_small_and_near_pi():
    assert np.allclose(so3_log(np.eye(3)), 0)
    w = np.array([1e-9, -2e-9, 3e-9])
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-15)
    w = np.array([0, 0, math.pi - 1e-6])
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-6)


def test_right_jacobian_inverse_numerically():
    rng = np.random.default_rng(4)
    phi = rng.normal(size=3) * 0.7
    # Jr(phi) = d log(exp(phi) exp(eps)) / d eps at 0, inverse of which we expose
    eps = 1e-6
    J = np.zeros((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        J[:, k] = (so3_log(so3_exp(phi) @ so3_exp(e)) - so3_log(so3_exp(phi) @ so3_exp(-e))) / (2 * eps)
    assert np.allclose(so3_right_jacobian_inv(phi), J, atol=1e-7)


def test_quaternion_roundtrip():
    rng = np.random.default_rng(5)
    for _ in range(50):
        R = so3_exp(rng.normal(size=3))
        assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


def test_hat_is_cross_product():
    a, b = np.array([1.0, 2, 3]), np.array([-2.0, 0.5, 4])
    assert np.allclose(hat(a) @ b, np.cross(a, b))


def test_interpolate_endpoints_and_midpoint():
    a = Pose.identity()
    b = Pose(so3_exp([0, 0, 1.0]), np.array([2.0, 0, 0]))
    assert interpolate(a, b, 0).allclose(a) and interpolate(a, b, 1).allclose(b)
    m = interpolate(a, b, 0.5)
    assert np.allclose(so3_log(m.rotation), [0, 0, 0.5])


def test_compose_chain_stays_orthonormal():
    rng = np.random.default_rng(6)
    steps = [Pose(so3_exp(rng.normal(scale=0.01, size=3)), rng.normal(size=3)) for _ in range(1000)]
    R = compose_chain(steps).rotation
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)


def test_voxel_key_examples():
    assert voxel_key((0, 0, 0), 0.08) == (0, 0, 0)
    assert voxel_key((0.09, -0.01, 0.08), 0.08) == (1, -1, 1)
    with pytest.raises(ValueError):
        voxel_keys(np.zeros((1, 3)), 0.0)


def test_voxel_keys_match_floor_division():
    rng = np.random.default_rng(7)
    P = rng.uniform(-20, 20, (1000, 3))
    expect = [tuple(int(math.floor(v / 0.08)) for v in p) for p in P]
    assert [tuple(k) for k in voxel_keys(P, 0.08)] == expect


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-(1 << 19), 1 << 19), min_size=3, max_size=3))
def test_pack_unpack(k):
    k = np.array([k])
    assert np.array_equal(unpack_keys(pack_keys(k)), k)


def test_voxel_filter_one_point_per_voxel():
    pts = np.array([[0.01, 0.01, 0.01], [0.03, 0.02, 0.01], [0.5, 0.5, 0.5]])
    out, keys, vals = voxel_filter(pts, 0.08, np.array([1.0, 5.0, 2.0]))
    assert len(out) == 2 and len(set(keys.tolist())) == 2
    assert np.allclose(out[0], [0.02, 0.015, 0.01]) and vals[0] == 5.0


def test_aabb_overlap():
    a = Aabb.from_points([[0, 0, 0], [1, 1, 1]])
    assert a.overlaps(Aabb.from_points([[0.5, 0.5, 0.5], [2, 2, 2]]))
    assert not a.overlaps(Aabb.from_points([[5, 5, 5], [6, 6, 6]]))
    assert a.inflated(4.1).overlaps(Aabb.from_points([[5, 5, 5], [6, 6, 6]]))
    with pytest.raises(ValueError):
        Aabb([1, 0, 0], [0, 0, 0])


def test_traverse_cells_axis_aligned():
    cells = traverse_cells([0.1, 0.1, 0.1], [1.1, 0.1, 0.1], 0.5)
    assert cells == [(0, 0, 0), (1, 0, 0), (2, 0, 0)]


def test_traverse_cells_hits_every_sampled_cell():
    rng = np.random.default_rng(8)
    for _ in range(50):
        a, b = rng.uniform(-3, 3, 3), rng.uniform(-3, 3, 3)
        cells = set(traverse_cells(a, b, 0.5))
        s = np.linspace(0, 1, 4000)[:, None]
        sampled = {tuple(k) for k in np.floor((a + s * (b - a)) / 0.5).astype(int)}
        assert sampled <= cells
