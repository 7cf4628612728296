"""Frame-by-frame dense tracking: normalize, rigid align, non-rigid fit.

Every frame is rescaled into the unit cube, the running template is
similarity-aligned to it (landmark-seeded), and the non-rigid solver fits
the template onto the frame. The fitted mesh becomes the next frame's
template and feeds the per-vertex Kalman bank, whose one-step predictions
regularize the fit from ``motion_start_frame`` on (the first frames run
with the motion term off, before the filters have seen enough to carry a
velocity). All solver work happens in cube coordinates; results are
mapped back to each frame's original coordinates.

Checkpoints make interrupted runs resumable bit for bit: the template
chain, filter bank, and accumulated outputs are pickled after each frame,
and nothing in the pipeline draws random numbers.
"""

import os
import pickle
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (FileFormatError, MeshtrackError, TrackingError,
                     ValidationError)
from .mesh import LandmarkSet, Mesh
from .motion import KalmanBank
from .nonrigid import NicpConfig, nonrigid_icp
from .rigid import rescale_to_unit_cube, rigid_icp_with_scale

__all__ = [
    "TrackConfig",
    "TrackResult",
    "track_sequence",
    "save_trajectories",
    "load_trajectories",
    "export_trajectories_csv",
]

_TRAJ_MAGIC = b"MTTJ"
_TRAJ_VERSION = 1
_CHECKPOINT_TAG = "meshtrack-checkpoint-v1"


@dataclass
class TrackConfig:
    nicp: NicpConfig = dc_field(default_factory=NicpConfig)
    rigid_max_iters: int = 100
    rigid_tol: float = 1e-7
    kalman_order: int = 2
    kalman_q: float = 1e-4
    kalman_r: float = 1e-3
    motion_start_frame: int = 2  # 0-based; earlier frames run with gamma = 0

    def __post_init__(self):
        if self.rigid_max_iters < 0:
            raise ValidationError("rigid max iterations must be >= 0")
        if self.motion_start_frame < 2:
            # one observation pins position only; a velocity needs two
            raise ValidationError("motion cannot start before frame 2")
        if self.kalman_order not in (2, 3):
            raise ValidationError("kalman order must be 2 or 3")
        if self.kalman_q <= 0.0 or self.kalman_r <= 0.0:
            raise ValidationError("kalman noise parameters must be positive")


@dataclass
class TrackResult:
    fitted_frames: list  # Mesh per frame, template topology, original coords
    fields: list  # DeformationField per frame (cube coordinates)
    normalizations: list  # SimilarityTransform: original -> cube, per frame
    rigid_transforms: list  # SimilarityTransform aligning template, per frame
    energy_logs: list  # per-frame energy rows
    converged: list  # per-frame list of per-ladder-step flags
    n_vertices: int = 0

    @property
    def n_frames(self):
        return len(self.fitted_frames)

    @property
    def trajectories(self):
        """(F, n, 3) fitted vertex positions in original coordinates."""
        return np.stack([m.vertices for m in self.fitted_frames])


def _landmark_positions(entry):
    if isinstance(entry, LandmarkSet):
        return entry.positions
    pos = np.asarray(entry, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValidationError("frame landmarks must be (k, 3) positions")
    return pos


class _TrackerState:
    """Everything needed to continue tracking after frame ``next_frame - 1``."""

    def __init__(self, template, config):
        self.template = template  # current template, cube coordinates
        self.bank = KalmanBank(template.n_vertices, order=config.kalman_order,
                               q=config.kalman_q, r=config.kalman_r)
        self.next_frame = 0
        self.result = TrackResult([], [], [], [], [], [], template.n_vertices)


def _save_checkpoint(state, path):
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        pickle.dump({"tag": _CHECKPOINT_TAG, "state": state}, fh,
                    protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, path)


def _load_checkpoint(path):
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if not isinstance(payload, dict) or payload.get("tag") != _CHECKPOINT_TAG:
        raise FileFormatError(f"{path}: not a tracking checkpoint")
    return payload["state"]


def track_sequence(template, template_landmark_indices, frames,
                   frame_landmarks, config=None, checkpoint_path=None,
                   resume=False):
    """Track the template through ``frames``; returns a TrackResult.

    template_landmark_indices address template vertices; frame_landmarks
    holds, per frame, the matching observed 3D positions (a LandmarkSet
    or a (k, 3) array) in that frame's original coordinates.

    A stage failure raises TrackingError carrying the frame index, the
    stage name, and the frames completed so far. Non-convergence of the
    inner solver is only a warning. With ``checkpoint_path`` set, state
    is written after every frame; ``resume=True`` continues from it.
    """
    if config is None:
        config = TrackConfig()
    frames = list(frames)
    if not frames:
        raise ValidationError("no frames to track")
    if len(frame_landmarks) != len(frames):
        raise ValidationError("need one landmark set per frame")
    lm_idx = np.asarray(template_landmark_indices, dtype=np.int64)
    if lm_idx.ndim != 1 or lm_idx.size < 3:
        raise ValidationError("tracking needs at least 3 template landmarks")
    if lm_idx.min() < 0 or lm_idx.max() >= template.n_vertices:
        raise ValidationError("template landmark index out of range")
    positions = [_landmark_positions(e) for e in frame_landmarks]
    for k, pos in enumerate(positions):
        if pos.shape != (lm_idx.size, 3):
            raise ValidationError(
                f"frame {k} has {pos.shape[0]} landmarks, expected {lm_idx.size}")

    if resume:
        if not checkpoint_path:
            raise ValidationError("resume requires a checkpoint path")
        if not os.path.exists(checkpoint_path):
            raise ValidationError(f"cannot resume: no checkpoint at {checkpoint_path}")
        state = _load_checkpoint(checkpoint_path)
        if state.template.n_vertices != template.n_vertices:
            raise ValidationError("checkpoint does not match this template")
    else:
        state = _TrackerState(template, config)

    quiet_config = config.nicp.without_motion()
    for k in range(state.next_frame, len(frames)):
        stage = "normalize"
        try:
            normalized, norm_tf = rescale_to_unit_cube(frames[k])
            lm_cube = norm_tf.apply(positions[k])

            stage = "rigid"
            landmarks = LandmarkSet(lm_idx, lm_cube)
            rigid_tf = rigid_icp_with_scale(
                state.template, normalized, landmarks,
                max_iters=config.rigid_max_iters, tol=config.rigid_tol,
                max_normal_angle=config.nicp.max_normal_angle,
                max_distance=config.nicp.max_distance,
                workers=config.nicp.workers)
            aligned = state.template.with_vertices(
                rigid_tf.apply(state.template.vertices))

            stage = "nonrigid"
            use_motion = (config.nicp.motion_enabled
                          and k >= config.motion_start_frame
                          and state.bank.n_observations >= 2)
            if use_motion:
                fit = nonrigid_icp(aligned, normalized, landmarks,
                                   config.nicp,
                                   motion_predictions=state.bank.predict_positions())
            else:
                fit = nonrigid_icp(aligned, normalized, landmarks, quiet_config)

            stage = "observe"
            state.bank.observe(fit.deformed.vertices)
            original = norm_tf.inverse().apply(fit.deformed.vertices)
            state.result.fitted_frames.append(
                Mesh(original, template.triangles))
            state.result.fields.append(fit.field)
            state.result.normalizations.append(norm_tf)
            state.result.rigid_transforms.append(rigid_tf)
            state.result.energy_logs.append(fit.energy_log)
            state.result.converged.append(fit.converged)
            state.template = fit.deformed
            state.next_frame = k + 1
        except (MeshtrackError, np.linalg.LinAlgError) as exc:
            if isinstance(exc, TrackingError):
                raise
            raise TrackingError(f"frame {k}, {stage} stage: {exc}", k, stage,
                                state.result) from exc
        if checkpoint_path:
            _save_checkpoint(state, checkpoint_path)

    return state.result


def save_trajectories(trajectories, path):
    """Container: magic, version u32, n u64, frames u64, then frame-major f64."""
    arr = np.ascontiguousarray(trajectories, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError("trajectories must be (frames, n, 3)")
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(struct.pack("<IQQ", _TRAJ_VERSION, arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


def export_trajectories_csv(trajectories, path):
    """CSV mirror of the trajectory container: frame,vertex,x,y,z."""
    arr = np.asarray(trajectories, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError("trajectories must be (frames, n, 3)")
    with open(path, "w") as fh:
        fh.write("frame,vertex,x,y,z\n")
        for k in range(arr.shape[0]):
            for v in range(arr.shape[1]):
                fh.write("%d,%d,%.17g,%.17g,%.17g\n"
                         % (k, v, arr[k, v, 0], arr[k, v, 1], arr[k, v, 2]))


def load_trajectories(path):
    fmt = "<IQQ"
    with open(path, "rb") as fh:
        if fh.read(4) != _TRAJ_MAGIC:
            raise FileFormatError(f"{path}: not a trajectory file")
        header = fh.read(struct.calcsize(fmt))
        if len(header) != struct.calcsize(fmt):
            raise FileFormatError(f"{path}: truncated trajectory header")
        version, n, n_frames = struct.unpack(fmt, header)
        if version != _TRAJ_VERSION:
            raise FileFormatError(f"{path}: unsupported trajectory version")
        body = fh.read(8 * 3 * n * n_frames)
        if len(body) != 8 * 3 * n * n_frames or fh.read(1):
            raise FileFormatError(f"{path}: trajectory payload has wrong size")
    return np.frombuffer(body, dtype="<f8").reshape(n_frames, n, 3).copy()
