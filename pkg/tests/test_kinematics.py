import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffstate import autodiff as ad
from diffstate.geometry import is_watertight, signed_volume
from diffstate.kinematics import (Box, Cylinder, DHLink, KinematicChain, PoseSE3, VertexOffsets,
                                  apply_offsets, assemble_robot_mesh, chain_from_dict, chain_to_dict,
                                  dh_forward, dh_matrix, end_effector_position, load_robot,
                                  primitive_mesh, rotation_log, rotation_matrix, save_robot, se3_exp)

from conftest import check_gradient

angles = arrays(np.float64, (3,), elements=st.floats(-4.0, 4.0, allow_nan=False))


def three_link():
    return KinematicChain([
        DHLink(0.0, np.pi / 2, 0.3, 0.0, Cylinder(0.05, 0.3, 8)),
        DHLink(0.4, 0.0, 0.0, 0.1, Box(0.05, 0.05, 0.4)),
        DHLink(0.3, 0.0, 0.0, 0.0, Cylinder(0.03, 0.3, 8)),
    ], end_effector=np.array([0.05, 0.0, 0.0]))


def is_rigid(T, tol=1e-10):
    R = T[:3, :3]
    return np.max(np.abs(R.T @ R - np.eye(3))) < tol and abs(np.linalg.det(R) - 1) < tol


def test_identity_chain():
    links = [DHLink(0, 0, 0, 0, Box(1, 1, 1)) for _ in range(3)]
    for T in dh_forward(links, np.zeros(3)):
        np.testing.assert_allclose(T, np.eye(4), atol=1e-15)


def test_single_link_quarter_turn():
    T = dh_forward([DHLink(1.0, 0.0, 0.0, 0.0, Box(1, 1, 1))], [np.pi / 2])[0]
    np.testing.assert_allclose(T[:3, 3], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(T[:3, :3], rotation_matrix([0, 0, np.pi / 2]), atol=1e-15)


@given(q=angles)
def test_chain_composes(q):
    chain = three_link()
    Ts = dh_forward(chain.links, q)
    prev = np.eye(4)
    for T, link, qk in zip(Ts, chain.links, q):
        expect = prev @ dh_matrix(link.a, link.alpha, link.d, qk + link.theta_offset)
        np.testing.assert_allclose(T, expect, atol=1e-12)
        assert is_rigid(T)
        prev = T


def test_joint_count_mismatch():
    with pytest.raises(ValueError):
        dh_forward(three_link().links, [0.0, 0.0])


def test_unit_box():
    m = primitive_mesh(Box(1, 1, 1))
    assert m.n_vertices == 8 and m.faces.shape[0] == 12
    np.testing.assert_allclose(np.abs(m.vertex_array), 0.5)
    assert is_watertight(m.faces)


def test_cylinder_counts():
    m = primitive_mesh(Cylinder(0.1, 1.0, 16))
    assert m.n_vertices == 34
    assert is_watertight(m.faces)


@pytest.mark.parametrize("shape,volume", [
    (Box(1, 2, 3), 6.0),
    (Box(0.05, 0.05, 0.4), 0.001),
    (Cylinder(0.1, 1.0, 16), np.pi * 0.01),
    (Cylinder(0.03, 0.3, 8), np.pi * 0.03 ** 2 * 0.3),
])
def test_primitive_volume(shape, volume):
    m = primitive_mesh(shape)
    assert abs(signed_volume(m.vertex_array, m.faces) - volume) < 0.02 * volume


def test_nonpositive_dimensions_rejected():
    with pytest.raises(ValueError):
        Box(1, 0, 1)
    with pytest.raises(ValueError):
        Cylinder(-0.1, 1)


def test_offsets_identity_and_shift():
    m = primitive_mesh(Box(1, 1, 1))
    np.testing.assert_array_equal(apply_offsets(m, np.zeros((8, 3))).vertex_array, m.vertex_array)
    v = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(apply_offsets(m, np.tile(v, (8, 1))).vertex_array, m.vertex_array + v)
    with pytest.raises(ValueError):
        apply_offsets(m, np.zeros((7, 3)))


def test_offset_jacobian_is_identity():
    m = primitive_mesh(Box(1, 1, 1))
    t = ad.Tape()
    off = t.leaf(np.zeros((8, 3)))
    out = apply_offsets(m, off)
    for i, k in [(0, 0), (3, 2), (7, 1)]:
        g = ad.backward(out.vertices[i, k])[off]
        expect = np.zeros((8, 3))
        expect[i, k] = 1.0
        np.testing.assert_array_equal(g, expect)


def test_rodrigues_examples():
    np.testing.assert_allclose(se3_exp(PoseSE3(np.zeros(3), np.zeros(3))), np.eye(4))
    R = rotation_matrix([0, 0, np.pi / 2])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


@given(w=angles)
def test_rodrigues_orthogonal(w):
    R = rotation_matrix(w)
    assert np.max(np.abs(R @ R.T - np.eye(3))) < 1e-10
    assert abs(np.linalg.det(R) - 1) < 1e-10


@given(w=arrays(np.float64, (3,), elements=st.floats(-1e-9, 1e-9)))
def test_small_angle_branch(w):
    R = rotation_matrix(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    np.testing.assert_allclose(R, np.eye(3) + K, atol=1e-17)


@given(w=arrays(np.float64, (3,), elements=st.floats(-1.0, 1.0)))
def test_rotation_log_inverts_exp(w):
    np.testing.assert_allclose(rotation_matrix(rotation_log(rotation_matrix(w))), rotation_matrix(w), atol=1e-10)


def test_identity_assembly_is_union_of_primitives():
    links = [DHLink(0, 0, 0, 0, Box(1, 1, 1), attach=np.eye(4)), DHLink(0, 0, 0, 0, Box(1, 2, 3), attach=np.eye(4))]
    chain = KinematicChain(links)
    mesh = assemble_robot_mesh(chain, np.zeros(2), VertexOffsets.zeros(chain), PoseSE3(np.zeros(3), np.zeros(3)))
    prims = [primitive_mesh(l.primitive) for l in links]
    np.testing.assert_allclose(mesh.vertex_array, np.concatenate([p.vertex_array for p in prims]))
    np.testing.assert_array_equal(mesh.faces[12:], prims[1].faces + 8)


def test_translation_shifts_depth():
    chain = three_link()
    q = np.array([0.3, -0.2, 0.5])
    z0 = assemble_robot_mesh(chain, q, VertexOffsets.zeros(chain), PoseSE3(np.zeros(3), np.zeros(3))).vertex_array
    z1 = assemble_robot_mesh(chain, q, VertexOffsets.zeros(chain), PoseSE3(np.zeros(3), [0, 0, 1])).vertex_array
    np.testing.assert_allclose(z1 - z0, np.tile([0, 0, 1.0], (len(z0), 1)), atol=1e-14)


@given(w=angles, t=arrays(np.float64, (3,), elements=st.floats(-2, 2)),
       g_w=angles, g_t=arrays(np.float64, (3,), elements=st.floats(-2, 2)))
def test_assembly_equivariance(w, t, g_w, g_t):
    chain = three_link()
    q = np.array([0.2, 0.4, -0.3])
    off = VertexOffsets.zeros(chain)
    G = se3_exp(PoseSE3(g_w, g_t))
    base = assemble_robot_mesh(chain, q, off, PoseSE3(w, t)).vertex_array
    moved = assemble_robot_mesh(chain, q, off, PoseSE3.from_matrix(G @ se3_exp(PoseSE3(w, t)))).vertex_array
    np.testing.assert_allclose(moved, base @ G[:3, :3].T + G[:3, 3], atol=1e-9)


def test_pose_and_offset_gradients(rng):
    chain = three_link()
    q = np.array([0.2, 0.4, -0.3])
    n = sum(chain.vertex_counts())
    wts = rng.normal(size=(n, 3))
    for _ in range(5):
        w0, t0 = rng.normal(size=3), rng.normal(size=3)
        off0 = rng.normal(scale=0.01, size=(n, 3))
        f_rot = lambda x: ad.total(assemble_robot_mesh(chain, q, off0, PoseSE3(x, t0)).vertices * wts)  # noqa: E731
        f_t = lambda x: ad.total(assemble_robot_mesh(chain, q, off0, PoseSE3(w0, x)).vertices * wts)  # noqa: E731
        f_off = lambda x: ad.total(assemble_robot_mesh(chain, q, x, PoseSE3(w0, t0)).vertices * wts)  # noqa: E731
        assert check_gradient(f_rot, w0, 1e-6) < 1e-5
        assert check_gradient(f_t, t0, 1e-6) < 1e-5
        assert check_gradient(f_off, off0, 1e-6) < 1e-5


def test_vertex_counts_stable():
    chain = three_link()
    counts = chain.vertex_counts()
    for q in np.random.default_rng(0).normal(size=(5, 3)):
        mesh = assemble_robot_mesh(chain, q, VertexOffsets.zeros(chain), PoseSE3(q, q))
        assert mesh.n_vertices == sum(counts)
    assert chain.vertex_counts() == counts


def test_end_effector_of_planar_arm():
    chain = KinematicChain([DHLink(1.0, 0, 0, 0, Box(1, 0.1, 0.1)), DHLink(1.0, 0, 0, 0, Box(1, 0.1, 0.1))])
    ee = end_effector_position(chain, [np.pi / 2, -np.pi / 2], PoseSE3(np.zeros(3), [0, 0, 2]))
    np.testing.assert_allclose(ee, [1, 1, 2], atol=1e-12)


def test_description_round_trip(tmp_path):
    chain = three_link()
    save_robot(chain, tmp_path / "robot.json")
    back = load_robot(tmp_path / "robot.json")
    assert chain_to_dict(back) == chain_to_dict(chain)
    q = [0.1, 0.2, 0.3]
    np.testing.assert_allclose(end_effector_position(back, q, PoseSE3(np.ones(3), np.ones(3))),
                               end_effector_position(chain, q, PoseSE3(np.ones(3), np.ones(3))))


def test_description_rejects_unknown_keys():
    desc = chain_to_dict(three_link())
    desc["links"][0]["colour"] = "red"
    with pytest.raises(ValueError, match="unknown keys"):
        chain_from_dict(desc)
    desc = json.loads(json.dumps(chain_to_dict(three_link())))
    desc["links"][1]["primitive"]["type"] = "sphere"
    with pytest.raises(ValueError):
        chain_from_dict(desc)
