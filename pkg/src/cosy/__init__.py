"""Multi-view multi-object 6D pose consolidation.

Takes per-view object pose candidates (label, score, pose) from any
single-view estimator, matches them across views with a symmetry-aware
RANSAC over relative camera motions, and jointly refines object and camera
poses with an object-level bundle adjustment. Includes evaluation metrics
and a synthetic-scene simulator for end-to-end testing.
"""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, Pose

__all__ = ["CameraIntrinsics", "Pose", "__version__"]
