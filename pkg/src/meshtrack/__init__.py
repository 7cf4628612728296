"""Dense tracking of deforming triangle-mesh sequences.

Rigid similarity alignment, motion-regularized non-rigid ICP, a linear
morphable shape model, per-vertex Kalman prediction, a synthetic sequence
generator, and region-based registration scoring, behind one CLI.
"""

from .errors import (DegenerateGeometryError, FileFormatError, MeshtrackError,
                     NumericalError, SolverError, TrackingError,
                     ValidationError)
from .mesh import (LandmarkSet, Mesh, build_edge_list, compute_vertex_normals,
                   load_landmarks, load_mesh, n_ring, save_landmarks,
                   save_mesh)
from .correspondence import (CorrespondenceSet, SpatialIndex,
                             build_spatial_index, find_correspondences)
from .rigid import (SimilarityTransform, apply_similarity,
                    estimate_similarity, rescale_to_unit_cube,
                    rigid_icp_with_scale)
from .nonrigid import (DeformationField, NicpConfig, NicpResult,
                       load_field, nonrigid_icp, save_field,
                       write_energy_report)
from .morphable import (LandmarkFit, MorphableModel, build_synthetic_model,
                        fit_to_landmarks, load_model,
                        project_weak_perspective, save_model)
from .motion import KalmanBank, load_bank, save_bank
from .synthetic import (SyntheticConfig, SyntheticSequence, generate_sequence,
                        grid_mesh, sphere_section_mesh)
from .evaluation import (RegionMetrics, SequenceMetrics, dense_errors,
                         evaluate_registration, evaluate_sequence)
from .pipeline import (TrackConfig, TrackResult, load_trajectories,
                       save_trajectories, track_sequence)

__version__ = "0.1.0"

__all__ = [
    "MeshtrackError", "ValidationError", "FileFormatError", "NumericalError",
    "DegenerateGeometryError", "SolverError", "TrackingError",
    "Mesh", "LandmarkSet", "compute_vertex_normals", "build_edge_list",
    "n_ring", "load_mesh", "save_mesh", "load_landmarks", "save_landmarks",
    "CorrespondenceSet", "SpatialIndex", "build_spatial_index",
    "find_correspondences",
    "SimilarityTransform", "apply_similarity", "estimate_similarity",
    "rescale_to_unit_cube", "rigid_icp_with_scale",
    "NicpConfig", "DeformationField", "NicpResult", "nonrigid_icp",
    "save_field", "load_field", "write_energy_report",
    "MorphableModel", "LandmarkFit", "fit_to_landmarks",
    "project_weak_perspective", "build_synthetic_model", "save_model",
    "load_model",
    "KalmanBank", "save_bank", "load_bank",
    "SyntheticConfig", "SyntheticSequence", "generate_sequence", "grid_mesh",
    "sphere_section_mesh",
    "RegionMetrics", "SequenceMetrics", "evaluate_registration",
    "evaluate_sequence", "dense_errors",
    "TrackConfig", "TrackResult", "track_sequence", "save_trajectories",
    "load_trajectories",
    "__version__",
]
