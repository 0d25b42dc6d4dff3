"""Object symmetry groups and the symmetry-aware pose distance.

An object's symmetries are rigid motions that leave its appearance
unchanged: a finite discrete set plus optional continuous rotation axes.
Continuous axes are discretized into a finite group; distances between two
poses of the same object then minimize over that group, so two estimates
that differ only by a symmetry compare as equal.

The distance between poses t1, t2 over model points X is

    d = min_S mean_x || t1 S x - t2 x ||

with S ranging over the discretized group. Computation applies S to the
points first (never forming t1 @ S), keeping results bit-identical to a
scalar double loop; exactness tests depend on this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, apply_matrices, apply_matrix, rotation_about_axis
from .numeric import point_l1, point_norms, seq_sum

DEFAULT_ANGLES_PER_AXIS = 64
MAX_GROUP_ELEMENTS = 4096
_DEDUP_TOL = 1e-9


class GroupTooLargeError(ValueError):
    """Discretization would produce more elements than the configured cap."""


@dataclass(frozen=True)
class SymmetrySpec:
    """Raw symmetry annotation for one object.

    discrete: rigid motions (identity must be among them).
    continuous_axes: (unit axis, offset point) pairs; rotation by any angle
    about the line through offset along axis preserves appearance.
    """

    discrete: tuple[Pose, ...] = (Pose.identity(),)
    continuous_axes: tuple[tuple[np.ndarray, np.ndarray], ...] = ()

    def __post_init__(self):
        discrete = tuple(self.discrete)
        if not any(
            np.max(np.abs(d.matrix - np.eye(4))) <= _DEDUP_TOL for d in discrete
        ):
            raise ValueError("discrete symmetry set must contain the identity")
        axes = []
        for axis, offset in self.continuous_axes:
            axis = np.asarray(axis, dtype=np.float64).reshape(3)
            offset = np.asarray(offset, dtype=np.float64).reshape(3)
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ValueError(f"symmetry axis must have unit norm: {axis}")
            axis.setflags(write=False)
            offset.setflags(write=False)
            axes.append((axis, offset))
        object.__setattr__(self, "discrete", discrete)
        object.__setattr__(self, "continuous_axes", tuple(axes))

    @staticmethod
    def none() -> "SymmetrySpec":
        """No symmetry beyond the identity."""
        return SymmetrySpec()


@dataclass(frozen=True)
class SymmetryGroup:
    """Finite set of symmetry poses; element 0 is always the identity."""

    elements: tuple[Pose, ...]
    matrices: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if not self.elements:
            raise ValueError("symmetry group must be non-empty")
        if np.max(np.abs(self.elements[0].matrix - np.eye(4))) > _DEDUP_TOL:
            raise ValueError("first group element must be the identity")
        mats = np.stack([e.matrix for e in self.elements])
        mats.setflags(write=False)
        object.__setattr__(self, "matrices", mats)

    def __len__(self) -> int:
        return len(self.elements)

    @staticmethod
    def identity_only() -> "SymmetryGroup":
        return SymmetryGroup(elements=(Pose.identity(),))


def axis_rotation_pose(axis, offset, angle: float) -> Pose:
    """Rotation about the line through `offset` with direction `axis`."""
    R = rotation_about_axis(axis, angle)
    offset = np.asarray(offset, dtype=np.float64).reshape(3)
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = offset - R @ offset
    return Pose(m)


def discretize(
    spec: SymmetrySpec,
    angles_per_axis: int = DEFAULT_ANGLES_PER_AXIS,
    max_elements: int = MAX_GROUP_ELEMENTS,
) -> SymmetryGroup:
    """Expand a symmetry spec into a finite group.

    Each continuous axis contributes rotations at angles 2*pi*k/n; these are
    combined with every discrete element (product set, unioned over axes)
    and deduplicated. Raises GroupTooLargeError rather than truncating when
    the product set exceeds max_elements.
    """
    if angles_per_axis < 1:
        raise ValueError("angles_per_axis must be >= 1")
    axis_rotations: list[np.ndarray] = []
    if spec.continuous_axes:
        for axis, offset in spec.continuous_axes:
            for k in range(angles_per_axis):
                angle = 2.0 * np.pi * k / angles_per_axis
                axis_rotations.append(axis_rotation_pose(axis, offset, angle).matrix)
    else:
        axis_rotations.append(np.eye(4))

    total = len(spec.discrete) * len(axis_rotations)
    if total > max_elements:
        raise GroupTooLargeError(
            f"discretization yields {total} elements, cap is {max_elements}"
        )

    kept = [np.eye(4)]
    stack = np.eye(4)[None]
    for d in spec.discrete:
        for rot in axis_rotations:
            m = d.matrix @ rot
            if np.min(np.max(np.abs(stack - m), axis=(1, 2))) <= _DEDUP_TOL:
                continue
            kept.append(m)
            stack = np.concatenate([stack, m[None]])
    return SymmetryGroup(elements=tuple(Pose(m) for m in kept))


def _distances_per_element(
    points: np.ndarray, group: SymmetryGroup, t1: Pose, t2: Pose
) -> np.ndarray:
    """Mean point error for every group element; order matches the group."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("point set must be non-empty")
    sym_pts = apply_matrices(group.matrices, pts)  # (G, M, 3)
    g, m, _ = sym_pts.shape
    a = apply_matrix(t1.matrix, sym_pts.reshape(g * m, 3)).reshape(g, m, 3)
    b = apply_matrix(t2.matrix, pts)  # (M, 3)
    per_point = point_norms(a - b[None, :, :])  # (G, M)
    return seq_sum(per_point, axis=1) / m


def symmetric_distance(points, group: SymmetryGroup, t1: Pose, t2: Pose) -> float:
    """min over S in group of mean_x || t1 S x - t2 x ||, in meters."""
    return float(np.min(_distances_per_element(points, group, t1, t2)))


def best_symmetry(points, group: SymmetryGroup, t1: Pose, t2: Pose) -> Pose:
    """Group element attaining symmetric_distance; ties go to the lowest index."""
    d = _distances_per_element(points, group, t1, t2)
    return group.elements[int(np.argmin(d))]


def best_symmetry_index(points, group: SymmetryGroup, t1: Pose, t2: Pose) -> int:
    d = _distances_per_element(points, group, t1, t2)
    return int(np.argmin(d))


def symmetric_distance_l1(points, group: SymmetryGroup, t1: Pose, t2: Pose) -> float:
    """L1-norm variant: min over S of mean_x | t1 S x - t2 x |_1.

    Used as the pose-error term of the single-view training loss.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("point set must be non-empty")
    sym_pts = apply_matrices(group.matrices, pts)
    g, m, _ = sym_pts.shape
    a = apply_matrix(t1.matrix, sym_pts.reshape(g * m, 3)).reshape(g, m, 3)
    b = apply_matrix(t2.matrix, pts)
    per_point = point_l1(a - b[None, :, :])
    return float(np.min(seq_sum(per_point, axis=1) / m))
