"""Offline multi-person motion capture from per-frame monocular observations.

Recovers absolute 3D position, per-person scale, shape and articulated pose of
multiple humans plus a consistent scene point cloud by two-stage energy
minimization over a whole video sequence.
"""

from .body import (BodyModel, load_body_model, pose_in_world, regress_joints,
                   save_body_model, skin, synthetic_body)
from .camera import CameraIntrinsics, back_project, project
from .energy import (EnergyReport, EnergyWeights, FilteredTargets, OptimState,
                     PreparedSequence, one_euro_filter, total_energy)
from .metrics import ap_root, evaluate, jitter, mpjpe, mrpe, pck3d
from .observations import (FrameObservations, TrackedSequence, load_sequence,
                           match_pose_to_joints, postprocess_masks)
from .render import rasterize_depth, rasterize_silhouette, visibility_masks
from .scene import (FrameDepthParams, ScenePointCloud, aggregate_background,
                    build_point_cloud, disparity_to_depth)
from .solver import SolverConfig, rmsprop_step, run
from .synth import ScenarioSpec, generate, preset

__version__ = "0.1.0"
