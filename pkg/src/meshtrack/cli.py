"""Command-line front end: synth, align, fit-model, track, eval.

Exit codes: 0 success, 2 invalid arguments or inputs, 3 numerical
failure, 4 file/format problems. `--threads 1` (the default) makes every
command bit-reproducible; flags override config-file values, which
override built-in defaults.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfg
from . import morphable, nonrigid, pipeline, synthetic
from .errors import (FileFormatError, NumericalError, TrackingError,
                     ValidationError)
from .evaluation import evaluate_registration
from .mesh import (Mesh, load_landmarks, load_mesh, save_landmarks, save_mesh)
from .rigid import rescale_to_unit_cube, rigid_icp_with_scale

__all__ = ["main"]

EVAL_CSV_COLUMNS = ("frame", "landmark", "coordinate_error",
                    "normal_error_rad", "degenerate")
TRACK_REPORT_COLUMNS = ("frame",) + nonrigid.ENERGY_COLUMNS


def _schedule_arg(text):
    return cfg.parse_schedule(text)


def _add_solver_flags(p):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--threads", type=int, dest="workers",
                   help="internal parallelism; 1 is bit-reproducible")
    p.add_argument("--alpha-schedule", type=_schedule_arg, dest="alpha_schedule")
    p.add_argument("--beta-schedule", type=_schedule_arg, dest="beta_schedule")
    p.add_argument("--gamma-schedule", type=_schedule_arg, dest="gamma_schedule")
    p.add_argument("--skew-weight", type=float, dest="skew_weight")
    p.add_argument("--inner-tol", type=float, dest="inner_tol")
    p.add_argument("--max-inner-iters", type=int, dest="max_inner_iters")
    p.add_argument("--max-normal-angle", type=float, dest="max_normal_angle")
    p.add_argument("--max-distance", type=float, dest="max_distance")


_SOLVER_KEYS = ("alpha_schedule", "beta_schedule", "gamma_schedule",
                "skew_weight", "inner_tol", "max_inner_iters",
                "max_normal_angle", "max_distance", "workers",
                "rigid_max_iters", "rigid_tol", "kalman_order", "kalman_q",
                "kalman_r", "motion_start_frame", "ring")


def _settings(args):
    file_layer = cfg.load_config_file(args.config) \
        if getattr(args, "config", None) else {}
    flag_layer = {k: getattr(args, k, None) for k in _SOLVER_KEYS}
    return cfg.merge_settings(file_layer, flag_layer)


def _transform_json(tf):
    return {"rotation": tf.rotation.tolist(),
            "translation": tf.translation.tolist(),
            "scale": tf.scale}


# ---------------------------------------------------------------------------
# synth


def _cmd_synth(args):
    config = synthetic.SyntheticConfig(
        base_shape=args.base_shape, n_vertices=args.vertices,
        frames=args.frames, bend_amplitude=args.bend_amplitude,
        bend_frequency=args.bend_frequency,
        bulge_amplitude=args.bulge_amplitude,
        drift_rotation=args.drift_rotation,
        drift_translation=args.drift_translation,
        drift_scale=args.drift_scale, noise_sigma=args.noise_sigma,
        landmark_count=args.landmark_count, seed=args.seed)
    seq = synthetic.generate_sequence(config)

    out = args.out
    os.makedirs(os.path.join(out, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out, "landmarks"), exist_ok=True)
    ext = args.format
    frame_paths, lm_paths = [], []
    for k, (mesh, lms) in enumerate(zip(seq.frames, seq.landmarks)):
        fp = f"frames/frame_{k:04d}.{ext}"
        lp = f"landmarks/frame_{k:04d}.json"
        save_mesh(mesh, os.path.join(out, fp))
        save_landmarks(lms, os.path.join(out, lp))
        frame_paths.append(fp)
        lm_paths.append(lp)
    save_mesh(seq.base, os.path.join(out, f"base.{ext}"))
    pipeline.save_trajectories(seq.truth, os.path.join(out, "truth.traj"))
    manifest = {"template": f"base.{ext}", "truth": "truth.traj",
                "frames": frame_paths, "landmarks": lm_paths}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"wrote {len(frame_paths)} frames ({seq.base.n_vertices} vertices, "
          f"{args.landmark_count} landmarks) to {out}")
    return 0


# ---------------------------------------------------------------------------
# align (rigid similarity registration)


def _cmd_align(args):
    template = load_mesh(args.template)
    target = load_mesh(args.target)
    landmarks = load_landmarks(args.landmarks)
    settings = _settings(args)

    tf = rigid_icp_with_scale(
        template, target, landmarks,
        max_iters=settings["rigid_max_iters"], tol=settings["rigid_tol"],
        max_normal_angle=settings["max_normal_angle"],
        max_distance=settings["max_distance"],
        workers=settings["workers"])
    print("transform: " + json.dumps(_transform_json(tf)))
    if args.out:
        save_mesh(template.with_vertices(tf.apply(template.vertices)),
                  args.out)
    if args.transform_out:
        with open(args.transform_out, "w") as fh:
            json.dump(_transform_json(tf), fh, indent=2)
    return 0


# ---------------------------------------------------------------------------
# fit-model


def _load_landmarks2d(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        idx = np.array([e["vertex"] for e in raw], dtype=np.int64)
        pts = np.array([e["point"] for e in raw], dtype=np.float64)
    except (TypeError, KeyError) as exc:
        raise FileFormatError(
            f"{path}: expected a list of {{vertex, point}} entries") from exc
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FileFormatError(f"{path}: points must be 2D")
    return idx, pts


def _cmd_fit_model(args):
    model = None
    if args.build_synthetic:
        model = morphable.build_synthetic_model(
            n_vertices=args.vertices, k_id=args.k_id, k_exp=args.k_exp,
            seed=args.seed, smoothness=args.smoothness)
        if args.model_out:
            morphable.save_model(model, args.model_out)
            print(f"wrote model ({model.n_vertices} vertices, "
                  f"{model.k_id}+{model.k_exp} modes) to {args.model_out}")
    if model is None:
        if not args.model:
            raise ValidationError("need --model or --build-synthetic")
        model = morphable.load_model(args.model)

    if args.landmarks_2d:
        idx, pts = _load_landmarks2d(args.landmarks_2d)
        fit = morphable.fit_to_landmarks(model, idx, pts, lam=args.lam,
                                         max_iters=args.max_iters,
                                         tol=args.tol)
        if args.out:
            save_mesh(model.synthesize(fit.alpha_id, fit.alpha_exp), args.out)
        if args.params_out:
            params = {"focal": fit.focal,
                      "rotation": fit.rotation.tolist(),
                      "t3d": fit.t3d.tolist(),
                      "alpha_id": fit.alpha_id.tolist(),
                      "alpha_exp": fit.alpha_exp.tolist(),
                      "objective": fit.objective,
                      "iterations": fit.n_iterations,
                      "converged": fit.converged}
            with open(args.params_out, "w") as fh:
                json.dump(params, fh, indent=2)
        print(f"fit {'converged' if fit.converged else 'stopped'} after "
              f"{fit.n_iterations} iterations, objective {fit.objective:.6g}")
    elif not args.build_synthetic:
        raise ValidationError("nothing to do: give --landmarks-2d or "
                              "--build-synthetic")
    return 0


# ---------------------------------------------------------------------------
# track


def _load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "frames" not in raw or "landmarks" not in raw:
        raise FileFormatError(
            f"{path}: manifest needs 'frames' and 'landmarks' lists")
    if len(raw["frames"]) != len(raw["landmarks"]):
        raise ValidationError(
            f"{path}: frames and landmarks lists differ in length")
    if not raw["frames"]:
        raise ValidationError(f"{path}: manifest lists no frames")

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    return {
        "frames": [resolve(p) for p in raw["frames"]],
        "landmarks": [resolve(p) for p in raw["landmarks"]],
        "template": resolve(raw["template"]) if raw.get("template") else None,
        "truth": resolve(raw["truth"]) if raw.get("truth") else None,
        "template_landmarks": raw.get("template_landmarks"),
    }


def _scaled_gamma(settings, gamma_scale):
    if gamma_scale is None:
        return settings
    if gamma_scale < 0.0:
        raise ValidationError("--gamma-scale must be >= 0")
    out = dict(settings)
    out["gamma_schedule"] = [gamma_scale * g for g in settings["gamma_schedule"]]
    return out


def _cmd_track(args):
    manifest = _load_manifest(args.manifest)
    settings = _scaled_gamma(_settings(args), args.gamma_scale)
    config = cfg.track_config_from(settings)

    frames = [load_mesh(p) for p in manifest["frames"]]
    frame_landmarks = [load_landmarks(p) for p in manifest["landmarks"]]
    if args.template:
        template = load_mesh(args.template)
    elif manifest["template"]:
        template = load_mesh(manifest["template"])
    else:
        template = frames[0]
    if manifest["template_landmarks"] is not None:
        lm_idx = np.asarray(manifest["template_landmarks"], dtype=np.int64)
    else:
        # frames share the template topology, so the first frame's landmark
        # vertex ids address template vertices too
        lm_idx = frame_landmarks[0].vertex_indices

    result = pipeline.track_sequence(
        template, lm_idx, frames, frame_landmarks, config,
        checkpoint_path=args.checkpoint, resume=args.resume)

    out = args.out
    os.makedirs(os.path.join(out, "fitted"), exist_ok=True)
    ext = args.format
    fitted_paths = []
    for k, mesh in enumerate(result.fitted_frames):
        fp = f"fitted/fitted_{k:04d}.{ext}"
        save_mesh(mesh, os.path.join(out, fp))
        fitted_paths.append(fp)
    pipeline.save_trajectories(result.trajectories,
                               os.path.join(out, "trajectories.traj"))
    if args.trajectories_csv:
        pipeline.export_trajectories_csv(
            result.trajectories, os.path.join(out, "trajectories.csv"))
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(",".join(TRACK_REPORT_COLUMNS) + "\n")
        for k, log in enumerate(result.energy_logs):
            for row in log:
                vals = ",".join("%.17g" % v for v in row[2:])
                fh.write(f"{k},{int(row[0])},{int(row[1])},{vals}\n")
    summary = {
        "n_frames": result.n_frames,
        "n_vertices": result.n_vertices,
        "fitted": fitted_paths,
        "trajectories": "trajectories.traj",
        "converged": [list(map(bool, c)) for c in result.converged],
        "normalizations": [_transform_json(t) for t in result.normalizations],
        "rigid_transforms": [_transform_json(t) for t in result.rigid_transforms],
        "final_energy": [log[-1][-1] for log in result.energy_logs],
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"tracked {result.n_frames} frames ({result.n_vertices} vertices) "
          f"into {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _cmd_eval(args):
    manifest = _load_manifest(args.manifest)
    if not manifest["truth"]:
        raise ValidationError("manifest has no 'truth' trajectory entry")
    if not manifest["template"]:
        raise ValidationError("manifest has no 'template' mesh entry")
    template = load_mesh(manifest["template"])
    truth = pipeline.load_trajectories(manifest["truth"])
    fitted = pipeline.load_trajectories(args.trajectories)
    if fitted.shape != truth.shape:
        raise ValidationError(
            f"fitted {fitted.shape} and truth {truth.shape} shapes differ")
    lm_idx = load_landmarks(manifest["landmarks"][0]).vertex_indices

    ring = _settings(args)["ring"]
    rows = []
    frame_means = []
    for k in range(truth.shape[0]):
        # both meshes into the reference frame's unit cube, so coordinate
        # errors read in cube units
        ref, tf = rescale_to_unit_cube(Mesh(truth[k], template.triangles))
        fit = Mesh(tf.apply(fitted[k]), template.triangles)
        m = evaluate_registration(fit, ref, lm_idx, ring=ring)
        frame_means.append((m.mean_coordinate_error, m.mean_normal_error))
        for j in range(len(lm_idx)):
            rows.append((k, int(lm_idx[j]), m.coordinate_errors[j],
                         m.normal_errors[j], int(m.degenerate[j])))

    coord_mean = float(np.mean([c for c, _ in frame_means]))
    normal_vals = [a for _, a in frame_means if not np.isnan(a)]
    normal_mean = float(np.mean(normal_vals)) if normal_vals else float("nan")
    for k, (c, a) in enumerate(frame_means):
        print(f"frame {k:4d}: coords {c:.6g}  normals {a:.6g} rad")
    print()
    print(f"{'':>10s}{'coords':>14s}{'normals':>14s}")
    print(f"{'mean':>10s}{coord_mean:>14.6g}{normal_mean:>14.6g}")

    if args.out:
        with open(args.out, "w") as fh:
            fh.write(",".join(EVAL_CSV_COLUMNS) + "\n")
            for frame, lm, c, a, deg in rows:
                fh.write("%d,%d,%.17g,%.17g,%d\n" % (frame, lm, c, a, deg))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="meshtrack",
        description="Dense tracking of deforming triangle mesh sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--vertices", type=int, default=2000)
    p.add_argument("--base-shape", choices=["sphere", "grid"], default="sphere")
    p.add_argument("--bend-amplitude", type=float, default=0.08)
    p.add_argument("--bend-frequency", type=float, default=1.0)
    p.add_argument("--bulge-amplitude", type=float, default=0.0)
    p.add_argument("--drift-rotation", type=float, default=0.0)
    p.add_argument("--drift-translation", type=float, default=0.0)
    p.add_argument("--drift-scale", type=float, default=1.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--landmark-count", type=int, default=51)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["ply", "obj"], default="ply")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("align",
                       help="similarity-align a template onto a target")
    p.add_argument("--template", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--landmarks", required=True,
                   help="template-index to target-position JSON")
    p.add_argument("--out", help="write the aligned template mesh here")
    p.add_argument("--transform-out", help="write the transform as JSON")
    p.add_argument("--rigid-max-iters", type=int, dest="rigid_max_iters")
    p.add_argument("--rigid-tol", type=float, dest="rigid_tol")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("fit-model", help="build or fit a morphable model")
    p.add_argument("--model", help="model container to load")
    p.add_argument("--build-synthetic", action="store_true")
    p.add_argument("--model-out", help="where to save a built model")
    p.add_argument("--vertices", type=int, default=2000)
    p.add_argument("--k-id", type=int, default=10)
    p.add_argument("--k-exp", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--smoothness", type=float, default=0.6)
    p.add_argument("--landmarks-2d", help="2D observations JSON")
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out", help="synthesized mesh for the fit")
    p.add_argument("--params-out", help="fitted parameters JSON")
    p.set_defaults(func=_cmd_fit_model)

    p = sub.add_parser("track", help="track a template through a sequence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--template", help="override the manifest template mesh")
    p.add_argument("--gamma-scale", type=float, dest="gamma_scale",
                   help="scale the gamma schedule; 0 disables the motion term")
    p.add_argument("--checkpoint", help="checkpoint file path")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--trajectories-csv", action="store_true",
                   help="also write trajectories as CSV")
    p.add_argument("--format", choices=["ply", "obj"], default="ply")
    p.add_argument("--rigid-max-iters", type=int, dest="rigid_max_iters")
    p.add_argument("--rigid-tol", type=float, dest="rigid_tol")
    p.add_argument("--kalman-order", type=int, dest="kalman_order")
    p.add_argument("--kalman-q", type=float, dest="kalman_q")
    p.add_argument("--kalman-r", type=float, dest="kalman_r")
    p.add_argument("--motion-start-frame", type=int, dest="motion_start_frame")
    _add_solver_flags(p)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("eval", help="score tracked output against truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--trajectories", required=True,
                   help="fitted trajectory container from `track`")
    p.add_argument("--ring", type=int, dest="ring")
    p.add_argument("--out", help="per-landmark CSV report path")
    p.add_argument("--config", help="JSON config file")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except TrackingError as exc:
        done = exc.partial_result.n_frames if exc.partial_result else 0
        print(f"error: {exc} ({done} frames completed)", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
