"""Similarity estimation, rigid alignment, and cube normalization."""

import numpy as np
import pytest

from meshtrack import (
    DegenerateGeometryError,
    apply_similarity,
    estimate_similarity,
    rescale_to_unit_cube,
    rigid_icp_with_scale,
    sphere_section_mesh,
)


def _random_rotation(rng):
    # QR of a Gaussian matrix, det fixed to +1
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_apply_then_recover(rng):
    # recovery must invert a known similarity on unstructured points
    for _ in range(20):
        src = rng.standard_normal((30, 3))
        R = _random_rotation(rng)
        s = float(rng.uniform(0.1, 10.0))
        t = rng.standard_normal(3)
        dst = s * src @ R.T + t
        tf = estimate_similarity(src, dst)
        got = apply_similarity(tf, src)
        assert np.allclose(got, dst, atol=1e-9)
        assert tf.scale == pytest.approx(s, rel=1e-10)
        assert np.allclose(tf.rotation, R, atol=1e-10)


def test_reflection_is_never_returned(rng):
    # mirrored data must still yield a proper rotation (det +1)
    src = rng.standard_normal((25, 3))
    dst = src.copy()
    dst[:, 0] = -dst[:, 0]
    tf = estimate_similarity(src, dst)
    assert np.linalg.det(tf.rotation) == pytest.approx(1.0, abs=1e-12)


def test_degenerate_point_sets_rejected():
    from meshtrack import ValidationError

    pts = np.zeros((5, 3))  # coincident: no scale or rotation is defined
    with pytest.raises(DegenerateGeometryError):
        estimate_similarity(pts, pts)
    with pytest.raises(ValidationError):
        estimate_similarity(np.zeros((2, 3)), np.zeros((2, 3)))


def test_transform_compose_and_inverse(rng):
    src = rng.standard_normal((10, 3))
    a = estimate_similarity(src, 2.0 * src @ _random_rotation(rng).T + 1.0)
    b = a.inverse()
    round_trip = apply_similarity(b, apply_similarity(a, src))
    assert np.allclose(round_trip, src, atol=1e-12)
    c = a.compose(b)  # apply b, then a: cancels to the identity
    assert np.allclose(apply_similarity(c, src), src, atol=1e-12)


def test_rescale_to_unit_cube(sphere_patch):
    cube, tf = rescale_to_unit_cube(sphere_patch)
    lo, hi = cube.bounding_box()
    assert np.all(lo >= -1e-12) and np.all(hi <= 1.0 + 1e-12)
    # largest extent spans the cube exactly, centered on the other axes
    extents = hi - lo
    assert np.max(extents) == pytest.approx(1.0)
    mids = (lo + hi) / 2.0
    assert np.allclose(mids, 0.5, atol=1e-12)
    # transform maps original into the cube, inverse undoes it
    assert np.allclose(tf.apply(sphere_patch.vertices), cube.vertices)
    assert np.allclose(
        tf.inverse().apply(cube.vertices), sphere_patch.vertices, atol=1e-12
    )


def test_rigid_icp_recovers_similarity(sphere_patch, rng):
    # landmark-seeded alignment of a transformed copy must land on it
    from meshtrack import LandmarkSet, ValidationError

    R = _random_rotation(rng)
    s, t = 1.7, np.array([0.4, -0.2, 0.9])
    target = sphere_patch.with_vertices(s * sphere_patch.vertices @ R.T + t)
    lm_idx = np.arange(0, sphere_patch.n_vertices, 37)
    landmarks = LandmarkSet(lm_idx, target.vertices[lm_idx])
    tf = rigid_icp_with_scale(sphere_patch, target, landmarks)
    aligned = apply_similarity(tf, sphere_patch.vertices)
    assert np.allclose(aligned, target.vertices, atol=1e-6)
    assert tf.scale == pytest.approx(s, rel=1e-7)
    with pytest.raises(ValidationError):
        rigid_icp_with_scale(
            sphere_patch, target, LandmarkSet(lm_idx[:2], target.vertices[lm_idx[:2]])
        )
