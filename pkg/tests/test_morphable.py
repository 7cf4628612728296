"""Linear shape model, weak-perspective camera, and landmark fitting."""

import numpy as np
import pytest

from meshtrack import (
    FileFormatError,
    ValidationError,
    build_synthetic_model,
    fit_to_landmarks,
    load_model,
    project_weak_perspective,
    save_model,
)


@pytest.fixture(scope="module")
def model():
    return build_synthetic_model(n_vertices=300, k_id=6, k_exp=4, seed=7)


def test_joint_basis_orthonormal(model):
    joint = np.hstack([model.basis_id, model.basis_exp])
    gram = joint.T @ joint
    assert np.allclose(gram, np.eye(joint.shape[1]), atol=1e-12)
    assert np.all(model.std_id > 0) and np.all(model.std_exp > 0)
    # stronger modes come first
    assert np.all(np.diff(model.std_id) < 0)
    assert np.all(np.diff(model.std_exp) < 0)


def test_synthesize_is_linear(model, rng):
    a = rng.standard_normal(6)
    b = rng.standard_normal(4)
    base = model.synthesize_vertices()
    va = model.synthesize_vertices(alpha_id=a)
    vb = model.synthesize_vertices(alpha_exp=b)
    vab = model.synthesize_vertices(alpha_id=a, alpha_exp=b)
    assert np.allclose(vab, va + vb - base, atol=1e-12)
    assert np.allclose(base.reshape(-1), model.mean)
    with pytest.raises(ValidationError):
        model.synthesize_vertices(alpha_id=np.zeros(5))


def test_weak_perspective_hand_case():
    # rotation by 90 degrees about z maps +x to +y; the camera then drops
    # z and scales by the focal factor
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    pts = np.array([[1.0, 0.0, 5.0]])
    out = project_weak_perspective(pts, 2.0, Rz, np.zeros(3))
    assert np.allclose(out, [[0.0, 2.0]])
    # depth translation along the camera axis is invisible
    t_axis = Rz.T @ np.array([0.0, 0.0, 3.7])
    out2 = project_weak_perspective(pts, 2.0, Rz, t_axis)
    assert np.allclose(out2, out, atol=1e-12)


def _random_rotation(rng, scale=0.5):
    from scipy.spatial.transform import Rotation

    vec = rng.standard_normal(3)
    vec *= scale / np.linalg.norm(vec)
    return Rotation.from_rotvec(vec).as_matrix()


def test_fit_recovers_ground_truth(model, rng):
    # noiseless synthesize-then-fit on 40 landmarks
    lm = rng.choice(model.n_vertices, size=40, replace=False)
    a = 0.8 * model.std_id * rng.standard_normal(6)
    b = 0.8 * model.std_exp * rng.standard_normal(4)
    R = _random_rotation(rng)
    focal, t3d = 1.4, np.array([0.1, -0.2, 0.15])
    pts = model.synthesize_vertices(alpha_id=a, alpha_exp=b)[lm]
    obs = project_weak_perspective(pts, focal, R, t3d)
    fit = fit_to_landmarks(model, lm, obs, lam=1e-10, max_iters=800, tol=0.0)
    assert np.allclose(fit.alpha_id, a, atol=1e-5)
    assert np.allclose(fit.alpha_exp, b, atol=1e-5)
    assert fit.focal == pytest.approx(focal, rel=1e-6)
    assert np.allclose(fit.rotation, R, atol=1e-6)
    # only the image-plane component of the translation is observable
    want = focal * (R @ t3d)[:2]
    got = fit.focal * (fit.rotation @ fit.t3d)[:2]
    assert np.allclose(got, want, atol=1e-6)


def test_fit_objective_never_increases(model, rng):
    lm = rng.choice(model.n_vertices, size=25, replace=False)
    pts = model.synthesize_vertices(
        alpha_id=0.5 * model.std_id, alpha_exp=-0.5 * model.std_exp
    )[lm]
    obs = project_weak_perspective(
        pts, 1.1, _random_rotation(rng, 0.3), np.array([0.05, 0.0, 0.1])
    )
    fit = fit_to_landmarks(model, lm, obs, max_iters=60)
    assert np.all(np.diff(fit.history) <= 1e-12 * np.maximum(fit.history[:-1], 1.0))


def test_fit_requires_four_landmarks(model):
    with pytest.raises(ValidationError):
        fit_to_landmarks(model, np.array([0, 1, 2]), np.zeros((3, 2)))


def test_model_save_load_round_trip(tmp_path, model):
    path = tmp_path / "model.mm"
    save_model(model, path)
    back = load_model(path)
    assert np.array_equal(back.mean, model.mean)
    assert np.array_equal(back.basis_id, model.basis_id)
    assert np.array_equal(back.basis_exp, model.basis_exp)
    assert np.array_equal(back.std_id, model.std_id)
    assert np.array_equal(back.std_exp, model.std_exp)
    assert np.array_equal(back.triangles, model.triangles)
    with open(path, "ab") as fh:
        fh.write(b"junk")
    with pytest.raises(FileFormatError):
        load_model(path)


def test_model_magic_checked(tmp_path, model):
    path = tmp_path / "model.mm"
    save_model(model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FileFormatError):
        load_model(path)
