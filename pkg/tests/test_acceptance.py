"""Release gate: eleven end-to-end checks with pinned tolerances.

Each test prints one line with its measured values (visible with
``pytest -s`` or in the captured output of a failing run). Tolerances
and runtime budgets are part of the contract and must not be loosened
to make a run pass; a red test here means the build is not releasable.

Golden values marked FROZEN were recorded from the first validated run
of the exact configuration in the test and then fixed. The pipeline is
deterministic, so reruns on the same platform reproduce them exactly;
the committed bounds add headroom for BLAS/libm variation only.
"""

import hashlib
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest

from meshtrack import (
    CorrespondenceSet,
    KalmanBank,
    LandmarkSet,
    Mesh,
    NicpConfig,
    TrackConfig,
    build_edge_list,
    estimate_similarity,
    evaluate_registration,
    nonrigid_icp,
    track_sequence,
)
from meshtrack.evaluation import evaluate_sequence
from meshtrack.morphable import (build_synthetic_model, fit_to_landmarks,
                                 project_weak_perspective)
from meshtrack.nonrigid import (DeformationField, _solve, _stiffness_matrix,
                                assemble_system, energy_terms)
from meshtrack.rigid import rescale_to_unit_cube
from meshtrack.synthetic import (SyntheticConfig, generate_sequence,
                                 sphere_section_mesh)

from test_evaluation import naive_region_metric


def _random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _random_instance(rng, n):
    """Template, edges, correspondences, landmarks, predictions; sizes ~n."""
    vertices = rng.standard_normal((n, 3))
    tri = np.array([[i, i + 1, i + 2] for i in range(n - 2)], dtype=np.int64)
    mesh = Mesh(vertices, tri)
    edges = build_edge_list(mesh)
    cs = CorrespondenceSet(
        target_indices=rng.integers(0, n, n),
        target_points=rng.standard_normal((n, 3)),
        weights=(rng.random(n) > 0.2).astype(np.float64),
    )
    lm_idx = np.array(sorted(rng.choice(n, 5, replace=False)))
    lm_pos = rng.standard_normal((5, 3))
    preds = rng.standard_normal((n, 3))
    return vertices, edges, cs, lm_idx, lm_pos, preds


# ---------------------------------------------------------------------------
# 1. similarity recovery


def test_a01_similarity_recovery():
    rng = np.random.default_rng(101)
    worst_rot, worst_scale, worst_trans = 0.0, 0.0, 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        rot = _random_rotation(rng)
        scale = 0.1 + 9.9 * rng.random()
        trans = 3.0 * rng.standard_normal(3)
        pts = rng.standard_normal((50, 3))
        tf = estimate_similarity(pts, scale * pts @ rot.T + trans)
        # geodesic angle via the chord: stable near zero, where the
        # arccos-of-trace form floors at ~1.5e-8
        chord = np.linalg.norm(tf.rotation - rot)
        worst_rot = max(worst_rot, float(2.0 * np.arcsin(
            min(chord / (2.0 * np.sqrt(2.0)), 1.0))))
        worst_scale = max(worst_scale, abs(tf.scale - scale) / scale)
        worst_trans = max(worst_trans, float(np.linalg.norm(tf.translation - trans)))
    dt = time.perf_counter() - t0
    print(f"PASS similarity recovery: rot {worst_rot:.2e} rad, "
          f"scale {worst_scale:.2e}, trans {worst_trans:.2e}, {dt:.2f}s")
    assert worst_rot < 1e-8
    assert worst_scale < 1e-8
    assert worst_trans < 1e-8
    assert dt < 1.0


# ---------------------------------------------------------------------------
# 2. system matrix reproduces the energy


def test_a02_system_energy_equivalence():
    rng = np.random.default_rng(202)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(50):
        n = int(rng.integers(20, 101))
        vertices, edges, cs, lm_idx, lm_pos, preds = _random_instance(rng, n)
        alpha = 1.0 + 99.0 * rng.random()
        beta = 1.0 + 20.0 * rng.random()
        gamma = 0.1 + 5.0 * rng.random()
        skew = 0.5 + rng.random()
        stiff = _stiffness_matrix(edges, n, skew)
        A, B = assemble_system(vertices, stiff, cs, alpha, beta=beta,
                               landmark_indices=lm_idx, landmark_targets=lm_pos,
                               gamma=gamma, motion_predictions=preds)
        X = rng.standard_normal((4 * n, 3))
        frob = float(np.sum((A @ X - B) ** 2))
        terms = energy_terms(DeformationField(X), vertices, edges, cs, alpha,
                             beta=beta, landmark_indices=lm_idx,
                             landmark_targets=lm_pos, gamma=gamma,
                             motion_predictions=preds, skew_weight=skew)
        worst = max(worst, abs(frob - sum(terms)) / frob)
    dt = time.perf_counter() - t0
    print(f"PASS system/energy equivalence: worst rel diff {worst:.2e}, {dt:.2f}s")
    assert worst < 1e-9
    assert dt < 5.0


# ---------------------------------------------------------------------------
# 3. solver returns a stationary minimum


def test_a03_solver_optimality():
    rng = np.random.default_rng(303)
    n = 40
    vertices, edges, cs, lm_idx, lm_pos, preds = _random_instance(rng, n)
    alpha, beta, gamma, skew = 7.0, 3.0, 1.3, 0.8
    stiff = _stiffness_matrix(edges, n, skew)
    A, B = assemble_system(vertices, stiff, cs, alpha, beta=beta,
                           landmark_indices=lm_idx, landmark_targets=lm_pos,
                           gamma=gamma, motion_predictions=preds)
    degrees = np.bincount(edges.ravel(), minlength=n)
    t0 = time.perf_counter()
    X = _solve(A, B, cs.weights, degrees)

    def energy(x):
        return sum(energy_terms(DeformationField(x), vertices, edges, cs,
                                alpha, beta=beta, landmark_indices=lm_idx,
                                landmark_targets=lm_pos, gamma=gamma,
                                motion_predictions=preds, skew_weight=skew))

    h = 1e-6
    grad_max = 0.0
    for flat in range(X.size):
        i, j = divmod(flat, 3)
        xp = X.copy()
        xp[i, j] += h
        xm = X.copy()
        xm[i, j] -= h
        grad_max = max(grad_max, abs(energy(xp) - energy(xm)) / (2 * h))

    e_star = energy(X)
    n_not_above = 0
    for _ in range(1000):
        e_pert = energy(X + 1e-2 * rng.standard_normal(X.shape))
        n_not_above += e_star <= e_pert
    dt = time.perf_counter() - t0
    print(f"PASS solver optimality: FD grad max {grad_max:.2e}, minimum held "
          f"on {n_not_above}/1000 perturbations, {dt:.2f}s")
    assert grad_max < 1e-6
    assert n_not_above == 1000
    assert dt < 10.0


# ---------------------------------------------------------------------------
# 4. zero motion coefficient reduces to the motion-free assembly


def test_a04_zero_gamma_bit_identical():
    rng = np.random.default_rng(404)
    for _ in range(20):
        n = int(rng.integers(20, 80))
        vertices, edges, cs, lm_idx, lm_pos, preds = _random_instance(rng, n)
        stiff = _stiffness_matrix(edges, n, 1.0)
        with_zero = assemble_system(vertices, stiff, cs, 10.0, beta=5.0,
                                    landmark_indices=lm_idx,
                                    landmark_targets=lm_pos,
                                    gamma=0.0, motion_predictions=preds)
        without = assemble_system(vertices, stiff, cs, 10.0, beta=5.0,
                                  landmark_indices=lm_idx,
                                  landmark_targets=lm_pos)
        assert np.array_equal(with_zero[0].data, without[0].data)
        assert np.array_equal(with_zero[0].indices, without[0].indices)
        assert np.array_equal(with_zero[0].indptr, without[0].indptr)
        assert np.array_equal(with_zero[1], without[1])
    print("PASS zero-gamma reduction: 20/20 systems bit-identical")


# ---------------------------------------------------------------------------
# 5. trajectory predictor on noiseless constant-velocity tracks


def test_a05_kalman_constant_velocity():
    rng = np.random.default_rng(505)
    n = 50
    p0 = rng.standard_normal((n, 3))
    vel = rng.standard_normal((n, 3))
    step = np.linalg.norm(vel, axis=1)

    bank = KalmanBank(n)
    bank.observe(p0)
    assert np.array_equal(bank.predict_positions(), p0)

    def error_curve(q, r, frames=40):
        bank = KalmanBank(n, q=q, r=r)
        bank.observe(p0)
        curve = {}
        for t in range(1, frames):
            pred = bank.predict_positions()
            err = np.linalg.norm(pred - (p0 + t * vel), axis=1)
            curve[t] = float(np.max(err / step))  # relative to one step
            bank.observe(p0 + t * vel)
        return curve

    # strongly observation-driven regime (r/q = 1e-2): the error decays
    # monotonically and every prediction from frame 15 on is < 1e-6
    curve = error_curve(1e-2, 1e-4)
    tail = [curve[t] for t in range(15, 40)]
    assert all(a < 1e-6 for a in tail)
    # decay is monotone until the curve reaches the roundoff floor
    assert all(b < a or b < 1e-12 for a, b in zip(tail, tail[1:]))

    # sweep of noise settings, the shipped default included; each must be
    # < 1e-6 once 15 frames are observed (the default rebounds slightly
    # above afterwards before settling; its transient is underdamped)
    swept = {}
    for q, r in ((1e-2, 1e-4), (1e-3, 1e-3), (1e-4, 1e-3)):
        swept[(q, r)] = error_curve(q, r)[15]
        assert swept[(q, r)] < 1e-6
    print("PASS constant-velocity prediction: single-obs exact; rel error "
          "at frame 15: " + ", ".join(
              f"q={q:g},r={r:g}: {v:.2e}" for (q, r), v in swept.items()))


# ---------------------------------------------------------------------------
# 6. fitting a template to itself is a fixed point


def test_a06_self_fit_fixed_point():
    mesh = sphere_section_mesh(n_target=2000)
    cube, _ = rescale_to_unit_cube(mesh)
    rng = np.random.default_rng(606)
    idx = rng.choice(cube.n_vertices, size=10, replace=False)
    landmarks = LandmarkSet(idx, cube.vertices[idx])
    t0 = time.perf_counter()
    res = nonrigid_icp(cube, cube, landmarks, NicpConfig(),
                       motion_predictions=cube.vertices.copy())
    dt = time.perf_counter() - t0
    disp = float(np.mean(np.linalg.norm(
        res.deformed.vertices - cube.vertices, axis=1)))
    print(f"PASS self-fit fixed point: n={cube.n_vertices}, "
          f"mean displacement {disp:.2e} cube units, {dt:.1f}s")
    assert disp < 1e-6
    assert dt < 30.0


# ---------------------------------------------------------------------------
# 7. dense tracking error on a frozen synthetic benchmark


# FROZEN 2026-08-15: the first validated run of this exact configuration
# measured a mean dense error of 9.937350e-04 cube units (124 s). Reruns
# are deterministic; the bound adds ~5% headroom for platform variation.
GOLDEN_DENSE_ERROR = 1.05e-3


def test_a07_synthetic_tracking_below_golden():
    config = SyntheticConfig(base_shape="sphere", n_vertices=2000, frames=20,
                             bend_amplitude=0.08, noise_sigma=1e-3,
                             landmark_count=51, seed=0)
    seq = generate_sequence(config)
    t0 = time.perf_counter()
    out = track_sequence(seq.base, seq.landmarks[0].vertex_indices,
                         seq.frames, seq.landmarks, config=TrackConfig())
    dt = time.perf_counter() - t0
    errs = []
    for k in range(len(seq.frames)):
        _, tf = rescale_to_unit_cube(seq.base.with_vertices(seq.truth[k]))
        diff = tf.apply(out.fitted_frames[k].vertices) - tf.apply(seq.truth[k])
        errs.append(float(np.mean(np.linalg.norm(diff, axis=1))))
    mean_err = float(np.mean(errs))
    print(f"PASS synthetic tracking: mean dense error {mean_err:.6e} cube "
          f"units (frozen bound {GOLDEN_DENSE_ERROR:.3e}), {dt:.0f}s")
    assert mean_err < GOLDEN_DENSE_ERROR
    assert dt < 15 * 60


# ---------------------------------------------------------------------------
# 8. the motion term helps on noisy sequences (paired runs)


def test_a08_motion_term_benefit():
    deltas = []
    for seed in range(5):
        config = SyntheticConfig(base_shape="sphere", n_vertices=400,
                                 frames=12, bend_amplitude=0.2,
                                 bulge_amplitude=0.5, noise_sigma=5e-3,
                                 landmark_count=6, seed=seed)
        seq = generate_sequence(config)
        lm_idx = seq.landmarks[0].vertex_indices
        truth_frames = [seq.base.with_vertices(p) for p in seq.truth]
        scores = {}
        for tag, nicp in (("gamma", NicpConfig()),
                          ("nogamma", NicpConfig().without_motion())):
            res = track_sequence(seq.base, lm_idx, seq.frames, seq.landmarks,
                                 config=TrackConfig(nicp=nicp))
            metrics = evaluate_sequence(res.fitted_frames, truth_frames,
                                        lm_idx, ring=2)
            scores[tag] = float(np.mean(
                [m.mean_coordinate_error for m in metrics.per_frame]))
        deltas.append(scores["nogamma"] - scores["gamma"])
        print(f"  seed {seed}: with motion {scores['gamma']:.5f}, "
              f"without {scores['nogamma']:.5f}, delta {deltas[-1]:+.5f}")
    mean_delta = float(np.mean(deltas))
    print(f"PASS motion-term benefit: mean delta {mean_delta:+.5f} over "
          f"{len(deltas)} seeds ({sum(d > 0 for d in deltas)} positive)")
    assert mean_delta >= 0.0


# ---------------------------------------------------------------------------
# 9. landmark-region evaluator


def test_a09_region_evaluator():
    rng = np.random.default_rng(909)
    from meshtrack import grid_mesh
    mesh = grid_mesh(12, 12)
    lm_idx = np.array(sorted(rng.choice(mesh.n_vertices, 8, replace=False)))

    same = evaluate_registration(mesh, mesh, lm_idx, ring=2)
    assert np.all(same.coordinate_errors == 0.0)
    assert np.all(same.normal_errors < 1e-7)

    delta = np.array([0.013, -0.007, 0.004])
    moved = mesh.with_vertices(mesh.vertices + delta)
    shift = evaluate_registration(moved, mesh, lm_idx, ring=2)
    assert shift.coordinate_errors == pytest.approx(
        np.full(8, np.linalg.norm(delta)), abs=1e-12)

    worst = 0.0
    for ring in (1, 2, 3):
        pts = mesh.vertices.copy()
        pts[:, 2] += 0.05 * np.sin(3.0 * pts[:, 0]) * np.cos(2.0 * pts[:, 1])
        pts += 0.01 * rng.standard_normal(pts.shape)
        warped = mesh.with_vertices(pts)
        got = evaluate_registration(warped, mesh, lm_idx, ring=ring)
        want_c, want_n, want_deg = naive_region_metric(warped, mesh, lm_idx, ring)
        assert np.array_equal(got.degenerate, want_deg)
        assert not np.any(want_deg)
        worst = max(worst,
                    float(np.max(np.abs(got.coordinate_errors - want_c))),
                    float(np.max(np.abs(got.normal_errors - want_n))))
    print(f"PASS region evaluator: exact on identity/translation, naive "
          f"re-implementation diff {worst:.2e}")
    assert worst < 1e-12


# ---------------------------------------------------------------------------
# 10. morphable model round trip


def test_a10_morphable_round_trip():
    model = build_synthetic_model(n_vertices=300, k_id=6, k_exp=4, seed=7)
    rng = np.random.default_rng(1010)
    worst = dict.fromkeys(("a_id", "a_exp", "focal", "rot", "trans"), 0.0)
    for _ in range(20):
        a_id = (0.3 + 0.7 * rng.random(model.k_id)) * model.std_id \
            * rng.choice([-1.0, 1.0], model.k_id)
        a_exp = (0.3 + 0.7 * rng.random(model.k_exp)) * model.std_exp \
            * rng.choice([-1.0, 1.0], model.k_exp)
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        ang = 0.6 * rng.random()
        K = np.array([[0.0, -axis[2], axis[1]],
                      [axis[2], 0.0, -axis[0]],
                      [-axis[1], axis[0], 0.0]])
        rot = np.eye(3) + np.sin(ang) * K + (1.0 - np.cos(ang)) * (K @ K)
        focal = 0.8 + 1.4 * rng.random()
        t3d = np.array([0.08 * rng.standard_normal(),
                        0.08 * rng.standard_normal(),
                        3.0 + 2.0 * rng.random()])
        verts = model.synthesize_vertices(a_id, a_exp)
        idx = rng.choice(model.n_vertices, size=60, replace=False)
        obs = project_weak_perspective(verts[idx], focal, rot, t3d)

        fit = fit_to_landmarks(model, idx, obs, lam=1e-10, max_iters=2000,
                               tol=0.0)
        worst["a_id"] = max(worst["a_id"], float(np.max(np.abs(fit.alpha_id - a_id))))
        worst["a_exp"] = max(worst["a_exp"], float(np.max(np.abs(fit.alpha_exp - a_exp))))
        worst["focal"] = max(worst["focal"], abs(fit.focal - focal) / focal)
        worst["rot"] = max(worst["rot"], float(np.max(np.abs(fit.rotation - rot))))
        # depth translation is invisible under weak perspective; the
        # observable part of (focal, t) is focal * (R t)_xy
        want_t = focal * (rot @ t3d)[:2]
        got_t = fit.focal * (fit.rotation @ fit.t3d)[:2]
        worst["trans"] = max(worst["trans"], float(np.max(np.abs(got_t - want_t))))
    print("PASS morphable round trip: worst errors "
          + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    assert all(v < 1e-6 for v in worst.values())


# ---------------------------------------------------------------------------
# 11. tracked output trees are hash-identical across reruns


def _tree_digest(root):
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def test_a11_track_determinism(tmp_path):
    from meshtrack import cli
    data = tmp_path / "data"
    rc = cli.main(["synth", "--out", str(data), "--frames", "3",
                   "--vertices", "150", "--landmark-count", "6",
                   "--noise-sigma", "1e-3", "--seed", "5"])
    assert rc == 0
    digests = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "meshtrack.cli", "track",
             "--manifest", str(data / "manifest.json"),
             "--out", str(out), "--threads", "1"],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        digests.append(_tree_digest(out))
    print(f"PASS determinism: two tracked trees share digest {digests[0][:16]}")
    assert digests[0] == digests[1]
