"""Layered runtime settings for the command-line tools.

Precedence, lowest to highest: built-in defaults, JSON config file,
command-line flags. Flags left at None fall through to the layer below.
Unknown keys in a config file are rejected rather than ignored.
"""

import json

import numpy as np

from .errors import FileFormatError, ValidationError
from .nonrigid import NicpConfig
from .pipeline import TrackConfig

__all__ = ["DEFAULTS", "load_config_file", "merge_settings",
           "nicp_config_from", "track_config_from", "parse_schedule"]

DEFAULTS = {
    "alpha_schedule": [100.0, 90.0, 80.0, 70.0, 60.0, 50.0, 40.0, 30.0,
                       20.0, 10.0],
    "beta_schedule": [100.0, 90.0, 80.0, 70.0, 60.0, 50.0, 40.0, 30.0,
                      20.0, 10.0],
    "gamma_schedule": [5.0, 4.5, 4.0, 3.5, 3.0, 2.5, 2.0, 1.5, 1.0, 0.5],
    "skew_weight": 1.0,
    "inner_tol": 1e-4,
    "max_inner_iters": 20,
    "max_normal_angle": float(np.pi / 4),
    "max_distance": None,
    "workers": 1,
    "rigid_max_iters": 100,
    "rigid_tol": 1e-7,
    "kalman_order": 2,
    "kalman_q": 1e-4,
    "kalman_r": 1e-3,
    "motion_start_frame": 2,
    "ring": 2,
}


def load_config_file(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise FileFormatError(f"{path}: config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ValidationError(
            f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    return raw


def merge_settings(*layers):
    """Later layers win; None values never override."""
    out = dict(DEFAULTS)
    for layer in layers:
        if not layer:
            continue
        for key, val in layer.items():
            if val is not None:
                out[key] = val
    return out


def parse_schedule(text):
    """Comma-separated floats, e.g. '100,90,80'."""
    try:
        vals = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ValidationError(f"bad schedule '{text}': {exc}") from exc
    if not vals:
        raise ValidationError(f"bad schedule '{text}': empty")
    return vals


def nicp_config_from(settings, motion=True):
    gamma = settings["gamma_schedule"]
    if not motion:
        gamma = [0.0] * len(settings["alpha_schedule"])
    return NicpConfig(
        alpha_schedule=settings["alpha_schedule"],
        beta_schedule=settings["beta_schedule"],
        gamma_schedule=gamma,
        skew_weight=settings["skew_weight"],
        inner_tol=settings["inner_tol"],
        max_inner_iters=settings["max_inner_iters"],
        max_normal_angle=settings["max_normal_angle"],
        max_distance=settings["max_distance"],
        workers=settings["workers"],
    )


def track_config_from(settings, motion=True):
    return TrackConfig(
        nicp=nicp_config_from(settings, motion=motion),
        rigid_max_iters=settings["rigid_max_iters"],
        rigid_tol=settings["rigid_tol"],
        kalman_order=settings["kalman_order"],
        kalman_q=settings["kalman_q"],
        kalman_r=settings["kalman_r"],
        motion_start_frame=settings["motion_start_frame"],
    )
