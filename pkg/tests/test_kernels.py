"""Numeric kernels: the selected backend must match the numpy reference."""

import numpy as np
import pytest

from meshtrack import kernels
from meshtrack.mesh import Mesh, build_edge_list


def _random_inputs(rng, n=257):
    vertices = rng.standard_normal((n, 3))
    triangles = np.array(
        [[i % n, (i * 7 + 1) % n, (i * 13 + 5) % n] for i in range(2 * n)],
        dtype=np.int64,
    )
    ok = (
        (triangles[:, 0] != triangles[:, 1])
        & (triangles[:, 1] != triangles[:, 2])
        & (triangles[:, 0] != triangles[:, 2])
    )
    triangles = triangles[ok]
    field = rng.standard_normal((4 * n, 3))
    targets = rng.standard_normal((n, 3))
    weights = (rng.random(n) > 0.25).astype(np.float64)
    return vertices, triangles, field, targets, weights


def test_backends_agree(rng):
    vertices, triangles, field, targets, weights = _random_inputs(rng)
    edges = build_edge_list(Mesh(vertices, triangles))

    ref = kernels.accumulate_face_normals_numpy(vertices, triangles)
    got = kernels.accumulate_face_normals(vertices, triangles)
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-12)

    ref = kernels.affine_transform_vertices_numpy(field, vertices)
    got = kernels.affine_transform_vertices(field, vertices)
    assert np.allclose(got, ref, rtol=1e-12, atol=1e-14)

    ref = kernels.stiffness_energy_numpy(field, edges, 0.7)
    got = kernels.stiffness_energy(field, edges, 0.7)
    assert got == pytest.approx(ref, rel=1e-12)

    ref = kernels.weighted_sq_error_numpy(vertices, targets, weights)
    got = kernels.weighted_sq_error(vertices, targets, weights)
    assert got == pytest.approx(ref, rel=1e-12)


def test_affine_identity_field():
    n = 11
    rng = np.random.default_rng(3)
    vertices = rng.standard_normal((n, 3))
    field = np.tile(np.vstack([np.eye(3), np.zeros(3)]), (n, 1))
    out = kernels.affine_transform_vertices(field, vertices)
    assert np.allclose(out, vertices, atol=1e-15)


def test_affine_known_block():
    # single vertex through a hand-checked affine map
    v = np.array([[1.0, 2.0, 3.0]])
    A = np.array([[2.0, 0, 0], [0, 3.0, 0], [0, 0, 4.0]])
    t = np.array([10.0, 20.0, 30.0])
    field = np.vstack([A.T, t])
    out = kernels.affine_transform_vertices(field, v)
    assert np.allclose(out, [[12.0, 26.0, 42.0]])


def test_face_normal_accumulation_hand_case():
    # one right triangle in the z=0 plane: cross product (1,0,0)x(0,1,0)
    # has magnitude 1 (= 2 * area 0.5) along +z, summed on all 3 corners
    vertices = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]])
    triangles = np.array([[0, 1, 2]])
    acc = kernels.accumulate_face_normals(vertices, triangles)
    assert np.allclose(acc, np.tile([0.0, 0.0, 1.0], (3, 1)))


def test_stiffness_energy_hand_case():
    # two vertices, one edge; blocks differ by 1 in one linear entry and
    # by 2 in one translation entry, skew weight 0.5 applies to the
    # translation row only: 1^2 + (0.5 * 2)^2 = 2
    field = np.zeros((8, 3))
    field[0, 0] = 1.0  # linear part of vertex 0
    field[3, 1] = 2.0  # translation of vertex 0
    edges = np.array([[0, 1]], dtype=np.int64)
    assert kernels.stiffness_energy(field, edges, 0.5) == pytest.approx(2.0)


def test_weighted_error_zero_weight_drops_term():
    points = np.array([[0.0, 0, 0], [1.0, 1, 1]])
    targets = np.array([[1.0, 0, 0], [1.0, 1, 1]])
    weights = np.array([0.0, 1.0])
    assert kernels.weighted_sq_error(points, targets, weights) == 0.0
    weights = np.array([1.0, 1.0])
    assert kernels.weighted_sq_error(points, targets, weights) == pytest.approx(1.0)


def test_empty_inputs():
    assert kernels.stiffness_energy(np.zeros((8, 3)), np.zeros((0, 2), np.int64), 1.0) == 0.0
    acc = kernels.accumulate_face_normals(np.zeros((4, 3)), np.zeros((0, 3), np.int64))
    assert np.array_equal(acc, np.zeros((4, 3)))


def test_backend_flag_forces_numpy_path():
    import subprocess
    import sys

    code = (
        "from meshtrack import kernels; "
        "assert not kernels.NUMBA_ENABLED; "
        "assert kernels.affine_transform_vertices "
        "is kernels.affine_transform_vertices_numpy"
    )
    import os

    env = dict(os.environ, MESHTRACK_NUMBA="0")
    subprocess.run([sys.executable, "-c", code], check=True, env=env)
