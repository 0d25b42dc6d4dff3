"""Object-level bundle adjustment.

Stage 3 of the pipeline: place all cameras and physical objects in one
world frame (root camera = identity, others chained through the accepted
two-view relative poses), then jointly refine every pose by minimizing a
symmetry-aware truncated reprojection loss with Levenberg-Marquardt.

The objective for one candidate is the minimum over the object's
discretized symmetries S of the mean truncated pixel distance between the
candidate's own projection (with S applied to the model points) and the
projection induced by the current world state. The symmetry choice is
re-selected at the start of each outer iteration and frozen inside the
linearized step, which keeps the inner problem smooth; re-selection can
only lower the loss, so accepted steps descend monotonically in the true
objective as well.
"""

from __future__ import annotations

import hashlib
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    apply_matrices,
    apply_matrix,
    project_masked,
    retract,
)
from .matching import PhysicalObject, TwoViewHypothesis
from .scene_io import Candidate, ModelDB, ObjectModel, SceneObservations
from .symmetry import SymmetryGroup, discretize

DEFAULT_TRUNCATION_PX = 25.0
MAX_RESIDUAL_POINTS = 500
_DAMPING_CEILING = 1e12


class DisconnectedViews(RuntimeError):
    """Some member-hosting views cannot be reached from the root camera."""

    def __init__(self, views):
        self.views = tuple(views)
        super().__init__(f"views unreachable from the root camera: {self.views}")


@dataclass(frozen=True)
class SceneState:
    """World-frame placement of all cameras and physical objects."""

    camera_poses: dict[str, Pose]
    object_poses: dict[int, Pose]

    def require_views(self, objects) -> None:
        missing = sorted(
            {v for o in objects for v, _ in o.members} - set(self.camera_poses)
        )
        if missing:
            raise ValueError(f"state lacks cameras for member views: {missing}")


@dataclass(frozen=True)
class RefineConfig:
    max_iterations: int = 100
    truncation: float = DEFAULT_TRUNCATION_PX
    damping_init: float = 1e-4
    damping_factor: float = 10.0
    rel_tol: float = 1e-6
    seed: int = 0
    symmetry_angles: int = 64

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("truncation", "damping_init", "damping_factor", "rel_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.symmetry_angles < 1:
            raise ValueError("symmetry_angles must be >= 1")


def residual_points(model: ObjectModel) -> np.ndarray:
    """Model points used in residuals: a deterministic subsample when large.

    Residual count scales with points x symmetries x candidates, so big
    clouds are cut to MAX_RESIDUAL_POINTS, chosen by a label-seeded draw
    (stable across runs and processes).
    """
    pts = model.points
    if pts.shape[0] <= MAX_RESIDUAL_POINTS:
        return pts
    digest = hashlib.blake2b(model.label.encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "big"))
    idx = np.sort(rng.choice(pts.shape[0], MAX_RESIDUAL_POINTS, replace=False))
    return pts[idx]


# ------------------------------------------------------------ initialization


def initialize_scene(
    objects: list[PhysicalObject],
    hypotheses: dict[tuple[str, str], TwoViewHypothesis],
    obs: SceneObservations,
    rng: np.random.Generator,
) -> SceneState:
    """World-frame initialization from the match stage's relative poses.

    A random member-hosting view becomes the root (world frame = that
    camera). Remaining cameras are placed by breadth-first chaining of the
    accepted two-view poses; each object is placed from one randomly drawn
    member candidate: T_world_object = T_camera * T_camera_object.
    Raises DisconnectedViews if some member-hosting view cannot be reached;
    callers may prune those members and retry.
    """
    member_views = sorted({v for o in objects for v, _ in o.members})
    if not member_views:
        return SceneState(camera_poses={}, object_poses={})
    root = member_views[int(rng.integers(len(member_views)))]

    neighbors: dict[str, list[tuple[str, Pose]]] = {}
    for (va, vb), hyp in sorted(hypotheses.items()):
        # relative_pose maps view-b camera coordinates into view-a's
        neighbors.setdefault(va, []).append((vb, hyp.relative_pose))
        neighbors.setdefault(vb, []).append((va, hyp.relative_pose.inverse()))

    cameras: dict[str, Pose] = {root: Pose.identity()}
    queue = deque([root])
    while queue:
        cur = queue.popleft()
        for nxt, rel in sorted(neighbors.get(cur, []), key=lambda p: p[0]):
            if nxt in cameras:
                continue
            cameras[nxt] = cameras[cur].compose(rel)
            queue.append(nxt)

    unreachable = [v for v in member_views if v not in cameras]
    if unreachable:
        raise DisconnectedViews(unreachable)

    object_poses: dict[int, Pose] = {}
    for obj in sorted(objects, key=lambda o: o.id):
        view_id, cand_idx = obj.members[int(rng.integers(len(obj.members)))]
        object_poses[obj.id] = cameras[view_id].compose(
            obs.candidates[cand_idx].pose
        )
    return SceneState(camera_poses=cameras, object_poses=object_poses)


def prune_unreachable_members(
    objects: list[PhysicalObject], unreachable_views
) -> list[PhysicalObject]:
    """Drop members hosted in unreachable views; drop objects left with < 2."""
    bad = set(unreachable_views)
    kept = []
    for obj in objects:
        members = tuple(m for m in obj.members if m[0] not in bad)
        if len(members) >= 2:
            kept.append(
                PhysicalObject(id=obj.id, label=obj.label, members=members)
            )
    return kept


def initialize_scene_with_pruning(
    objects: list[PhysicalObject],
    hypotheses: dict[tuple[str, str], TwoViewHypothesis],
    obs: SceneObservations,
    rng: np.random.Generator,
) -> tuple[SceneState, list[PhysicalObject]]:
    """initialize_scene, dropping candidates in unreachable views on demand.

    Views outside the root camera's connected component cannot be placed;
    their member candidates are warned about and removed, and objects
    falling below two members disappear with them. Returns the state and
    the (possibly pruned) object list actually covered by it.
    """
    while True:
        try:
            return initialize_scene(objects, hypotheses, obs, rng), objects
        except DisconnectedViews as exc:
            warnings.warn(
                "dropping candidates in views unreachable from the root "
                f"camera: {exc.views}",
                stacklevel=2,
            )
            objects = prune_unreachable_members(objects, exc.views)
            if not objects:
                return SceneState(camera_poses={}, object_poses={}), []


# ------------------------------------------------------------------- loss


def _groups_for(db: ModelDB, labels, angles: int, groups):
    if groups is not None:
        return groups
    return {
        label: discretize(db[label].symmetries, angles)
        for label in sorted(set(labels))
    }


def _per_symmetry_losses(
    state_pose: Pose,
    cand_pose: Pose,
    pts: np.ndarray,
    group: SymmetryGroup,
    intrinsics: CameraIntrinsics,
    truncation: float,
):
    """Per-group-element truncated mean pixel error plus reusable pieces.

    Returns (losses (G,), predicted pixels (M,2), predicted valid (M,),
    target pixels (G,M,2), target valid (G,M)).
    """
    m = pts.shape[0]
    u = apply_matrix(state_pose.matrix, pts)
    pred_px, pred_valid = project_masked(intrinsics, u)

    sym_pts = apply_matrices(group.matrices, pts)  # (G, M, 3)
    g = sym_pts.shape[0]
    cam_pts = apply_matrix(cand_pose.matrix, sym_pts.reshape(g * m, 3))
    tgt_px, tgt_valid = project_masked(intrinsics, cam_pts)
    tgt_px = tgt_px.reshape(g, m, 2)
    tgt_valid = tgt_valid.reshape(g, m)

    diff = pred_px[None, :, :] - tgt_px
    err = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    both = pred_valid[None, :] & tgt_valid
    contrib = np.where(both, np.minimum(err, truncation), truncation)
    return contrib.mean(axis=1), pred_px, pred_valid, tgt_px, tgt_valid


def candidate_loss(
    state: SceneState,
    candidate: Candidate,
    physical_object: PhysicalObject,
    db: ModelDB,
    intrinsics: CameraIntrinsics,
    truncation: float = DEFAULT_TRUNCATION_PX,
    *,
    angles_per_axis: int = 64,
    groups: dict[str, SymmetryGroup] | None = None,
) -> float:
    """Truncated symmetric reprojection loss of one candidate, in pixels.

    Points that land behind either projection contribute the truncation
    value, so the loss saturates instead of blowing up off-image.
    """
    if candidate.label != physical_object.label:
        raise ValueError("candidate label does not match the physical object")
    if candidate.view_id not in {v for v, _ in physical_object.members}:
        raise ValueError("candidate's view is not a member of the object")
    groups = _groups_for(db, [candidate.label], angles_per_axis, groups)
    model = db[candidate.label]
    cam = state.camera_poses[candidate.view_id]
    state_pose = cam.inverse().compose(state.object_poses[physical_object.id])
    losses, *_ = _per_symmetry_losses(
        state_pose,
        candidate.pose,
        model.points,
        groups[candidate.label],
        intrinsics,
        truncation,
    )
    return float(np.min(losses))


def total_loss(
    state: SceneState,
    objects: list[PhysicalObject],
    obs: SceneObservations,
    db: ModelDB,
    cfg: RefineConfig = RefineConfig(),
    *,
    groups: dict[str, SymmetryGroup] | None = None,
) -> float:
    """Sum of candidate losses over every physical object's members."""
    state.require_views(objects)
    groups = _groups_for(db, [o.label for o in objects], cfg.symmetry_angles, groups)
    intr = {v.view_id: v.intrinsics for v in obs.views}
    total = 0.0
    for obj in sorted(objects, key=lambda o: o.id):
        for view_id, cand_idx in obj.members:
            total += candidate_loss(
                state,
                obs.candidates[cand_idx],
                obj,
                db,
                intr[view_id],
                cfg.truncation,
                groups=groups,
            )
    return float(total)


# ------------------------------------------------------------ linearization


@dataclass(frozen=True)
class ParamLayout:
    """Order of the 6-dof blocks in the parameter vector.

    The gauge view's camera is held fixed (a free global rigid transform
    would otherwise make the normal equations singular).
    """

    gauge_view: str
    camera_ids: tuple[str, ...]
    object_ids: tuple[int, ...]

    @property
    def size(self) -> int:
        return 6 * (len(self.camera_ids) + len(self.object_ids))

    def camera_offset(self, view_id: str) -> int | None:
        if view_id == self.gauge_view:
            return None
        return 6 * self.camera_ids.index(view_id)

    def object_offset(self, object_id: int) -> int:
        return 6 * (len(self.camera_ids) + self.object_ids.index(object_id))


def parameter_layout(state: SceneState, objects) -> ParamLayout:
    member_views = sorted({v for o in objects for v, _ in o.members})
    if not member_views:
        raise ValueError("no member views to parameterize")
    gauge = member_views[0]
    return ParamLayout(
        gauge_view=gauge,
        camera_ids=tuple(v for v in member_views if v != gauge),
        object_ids=tuple(sorted(o.id for o in objects)),
    )


def apply_delta(state: SceneState, layout: ParamLayout, delta) -> SceneState:
    """Left-multiplicative 6-dof update of every parameterized pose."""
    delta = np.asarray(delta, dtype=np.float64).reshape(layout.size)
    cameras = dict(state.camera_poses)
    for k, vid in enumerate(layout.camera_ids):
        cameras[vid] = retract(cameras[vid], delta[6 * k : 6 * k + 6])
    off = 6 * len(layout.camera_ids)
    obj_poses = dict(state.object_poses)
    for k, oid in enumerate(layout.object_ids):
        obj_poses[oid] = retract(obj_poses[oid], delta[off + 6 * k : off + 6 * k + 6])
    return SceneState(camera_poses=cameras, object_poses=obj_poses)


@dataclass(frozen=True)
class _Target:
    """One candidate's frozen measurement for the current outer iteration."""

    view_id: str
    object_id: int
    intrinsics: CameraIntrinsics
    points: np.ndarray  # residual subsample, (M, 3)
    target_px: np.ndarray  # (M, 2), candidate projection under S*
    target_valid: np.ndarray  # (M,)
    active: np.ndarray  # (M,), points that carry gradient at selection
    weight: float  # 1 / M

    candidate_index: int = field(default=-1)


def select_targets(
    state: SceneState,
    objects: list[PhysicalObject],
    obs: SceneObservations,
    db: ModelDB,
    cfg: RefineConfig,
    *,
    groups: dict[str, SymmetryGroup] | None = None,
) -> tuple[list[_Target], float]:
    """Pick the best symmetry per candidate; freeze its projected points.

    Returns the frozen targets and the (true) total loss at `state`.
    """
    state.require_views(objects)
    groups = _groups_for(db, [o.label for o in objects], cfg.symmetry_angles, groups)
    intr = {v.view_id: v.intrinsics for v in obs.views}
    targets: list[_Target] = []
    loss = 0.0
    for obj in sorted(objects, key=lambda o: o.id):
        pts = residual_points(db[obj.label])
        group = groups[obj.label]
        t_obj = state.object_poses[obj.id]
        for view_id, cand_idx in obj.members:
            cand = obs.candidates[cand_idx]
            state_pose = state.camera_poses[view_id].inverse().compose(t_obj)
            losses, pred_px, pred_valid, tgt_px, tgt_valid = _per_symmetry_losses(
                state_pose, cand.pose, pts, group, intr[view_id], cfg.truncation
            )
            best = int(np.argmin(losses))
            loss += float(losses[best])
            diff = pred_px - tgt_px[best]
            err = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)
            active = pred_valid & tgt_valid[best] & (err < cfg.truncation)
            targets.append(
                _Target(
                    view_id=view_id,
                    object_id=obj.id,
                    intrinsics=intr[view_id],
                    points=pts,
                    target_px=tgt_px[best],
                    target_valid=tgt_valid[best],
                    active=active,
                    weight=1.0 / pts.shape[0],
                    candidate_index=cand_idx,
                )
            )
    return targets, float(loss)


def frozen_loss(state: SceneState, targets: list[_Target], truncation: float) -> float:
    """Truncated loss with the symmetry selection (targets) held fixed."""
    total = 0.0
    for t in targets:
        state_pose = state.camera_poses[t.view_id].inverse().compose(
            state.object_poses[t.object_id]
        )
        u = apply_matrix(state_pose.matrix, t.points)
        pred_px, pred_valid = project_masked(t.intrinsics, u)
        diff = pred_px - t.target_px
        err = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)
        both = pred_valid & t.target_valid
        contrib = np.where(both, np.minimum(err, truncation), truncation)
        total += float(contrib.mean())
    return total


def residual_vector(
    state: SceneState, targets: list[_Target], layout: ParamLayout
) -> np.ndarray:
    """Stacked weighted pixel residuals over each target's active points.

    Meaningful near the linearization state: the active set is frozen, so
    points that wander behind the camera keep their placeholder projection.
    """
    chunks = []
    for t in targets:
        if not np.any(t.active):
            continue
        state_pose = state.camera_poses[t.view_id].inverse().compose(
            state.object_poses[t.object_id]
        )
        u = apply_matrix(state_pose.matrix, t.points[t.active])
        pred_px, _ = project_masked(t.intrinsics, u)
        r = (pred_px - t.target_px[t.active]) * np.sqrt(t.weight)
        chunks.append(r.ravel())
    if not chunks:
        return np.zeros(0)
    return np.concatenate(chunks)


def linearize(
    state: SceneState, targets: list[_Target], layout: ParamLayout
) -> tuple[np.ndarray, np.ndarray]:
    """Residuals and their analytic Jacobian at `state`.

    Blocks per active point, for world point w and camera rotation R:
    with A = d(pixel)/d(camera point) and B = A R^T, C = B [w]x, the
    camera columns are [+C | -B] and the object columns [-C | +B]
    (rotation increment first, translation second, matching `retract`).
    """
    rows_r = []
    rows_j = []
    for t in targets:
        if not np.any(t.active):
            continue
        cam = state.camera_poses[t.view_id]
        t_obj = state.object_poses[t.object_id]
        pts = t.points[t.active]
        w = apply_matrix(t_obj.matrix, pts)  # world points
        u = apply_matrix(cam.inverse().matrix, w)  # camera frame
        pred_px, _ = project_masked(t.intrinsics, u)
        sw = np.sqrt(t.weight)
        rows_r.append(((pred_px - t.target_px[t.active]) * sw).ravel())

        n = u.shape[0]
        x, y, z = u[:, 0], u[:, 1], u[:, 2]
        a = np.zeros((n, 2, 3))
        a[:, 0, 0] = t.intrinsics.fx / z
        a[:, 0, 2] = -t.intrinsics.fx * x / z**2
        a[:, 1, 1] = t.intrinsics.fy / z
        a[:, 1, 2] = -t.intrinsics.fy * y / z**2
        rt = cam.rotation.T
        b = a @ rt  # (n, 2, 3)
        wx = np.zeros((n, 3, 3))
        wx[:, 0, 1] = -w[:, 2]
        wx[:, 0, 2] = w[:, 1]
        wx[:, 1, 0] = w[:, 2]
        wx[:, 1, 2] = -w[:, 0]
        wx[:, 2, 0] = -w[:, 1]
        wx[:, 2, 1] = w[:, 0]
        c = b @ wx  # (n, 2, 3)

        block = np.zeros((n, 2, layout.size))
        cam_off = layout.camera_offset(t.view_id)
        if cam_off is not None:
            block[:, :, cam_off : cam_off + 3] = c
            block[:, :, cam_off + 3 : cam_off + 6] = -b
        obj_off = layout.object_offset(t.object_id)
        block[:, :, obj_off : obj_off + 3] = -c
        block[:, :, obj_off + 3 : obj_off + 6] = b
        rows_j.append((block * sw).reshape(2 * n, layout.size))

    if not rows_r:
        return np.zeros(0), np.zeros((0, layout.size))
    return np.concatenate(rows_r), np.concatenate(rows_j, axis=0)


# --------------------------------------------------------------------- LM


def refine(
    state: SceneState,
    objects: list[PhysicalObject],
    obs: SceneObservations,
    db: ModelDB,
    cfg: RefineConfig = RefineConfig(),
    *,
    groups: dict[str, SymmetryGroup] | None = None,
    trace: list | None = None,
) -> SceneState:
    """Levenberg-Marquardt descent on the truncated symmetric loss.

    Steps solve (J^T J + lambda I) d = -J^T r on the frozen-symmetry
    squared surrogate and are accepted only when the frozen truncated loss
    strictly decreases, so the returned state never scores worse than the
    input. Damping multiplies up on rejection and divides down on
    acceptance. Stops on max_iterations, a relative decrease below
    rel_tol, an exactly-zero loss, or a fully saturated (gradient-free)
    residual set.

    `trace`, when given, collects the true total loss at the start of each
    outer iteration plus the final value; it is non-increasing.
    """
    if not objects:
        return state
    state.require_views(objects)
    groups = _groups_for(db, [o.label for o in objects], cfg.symmetry_angles, groups)
    layout = parameter_layout(state, objects)
    lam = cfg.damping_init
    eye = np.eye(layout.size)

    for _ in range(cfg.max_iterations):
        targets, loss0 = select_targets(state, objects, obs, db, cfg, groups=groups)
        if trace is not None:
            trace.append(loss0)
        if loss0 <= 1e-12:  # numerically zero; nothing left to gain
            return state
        r, jac = linearize(state, targets, layout)
        if r.size == 0:
            return state
        g = jac.T @ r
        h = jac.T @ jac

        accepted = False
        rel_decrease = 0.0
        while lam <= _DAMPING_CEILING:
            try:
                delta = np.linalg.solve(h + lam * eye, -g)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_factor
                continue
            trial = apply_delta(state, layout, delta)
            trial_loss = frozen_loss(trial, targets, cfg.truncation)
            if trial_loss < loss0:
                rel_decrease = (loss0 - trial_loss) / loss0
                state = trial
                lam = max(lam / cfg.damping_factor, 1e-15)
                accepted = True
                break
            lam *= cfg.damping_factor
        if not accepted:
            break
        if rel_decrease < cfg.rel_tol:
            break

    if trace is not None:
        _, final_loss = select_targets(state, objects, obs, db, cfg, groups=groups)
        trace.append(final_loss)
    return state


def refine_best_of(
    objects: list[PhysicalObject],
    hypotheses: dict[tuple[str, str], TwoViewHypothesis],
    obs: SceneObservations,
    db: ModelDB,
    cfg: RefineConfig = RefineConfig(),
    n_starts: int = 4,
) -> tuple[SceneState, list[PhysicalObject], SceneState]:
    """Initialize, refine, and keep the lowest-loss result of n_starts runs.

    Initialization chains noisy pairwise relative poses, so different
    random roots land in different descent basins. All starts share one
    rng stream seeded from cfg.seed and one pruned object set, keeping the
    whole procedure deterministic; ties keep the earliest start. Returns
    (best refined state, surviving objects, first initialization).
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    first_init, kept = initialize_scene_with_pruning(objects, hypotheses, obs, rng)
    if not kept:
        return first_init, kept, first_init
    groups = _groups_for(db, [o.label for o in kept], cfg.symmetry_angles, None)
    best_state = None
    best_loss = np.inf
    state0 = first_init
    for start in range(n_starts):
        if start > 0:
            state0 = initialize_scene(kept, hypotheses, obs, rng)
        refined = refine(state0, kept, obs, db, cfg, groups=groups)
        loss = total_loss(refined, kept, obs, db, cfg, groups=groups)
        if loss < best_loss:
            best_state, best_loss = refined, loss
    return best_state, kept, first_init


# ------------------------------------------------------------------ output


@dataclass(frozen=True)
class ViewObjectPose:
    """One refined object expressed in one camera's frame."""

    view_id: str
    object_id: int
    label: str
    pose: Pose
    score: float  # sum of member detection scores


def express_in_camera_frames(
    state: SceneState,
    objects: list[PhysicalObject],
    obs: SceneObservations,
) -> list[ViewObjectPose]:
    """Camera-frame poses of every object in every placed view.

    The per-object score aggregates its members' detection scores, so
    objects confirmed by more views rank higher downstream.
    """
    records = []
    scores = {
        obj.id: float(sum(obs.candidates[i].score for _, i in obj.members))
        for obj in objects
    }
    for view_id in sorted(state.camera_poses):
        cam_inv = state.camera_poses[view_id].inverse()
        for obj in sorted(objects, key=lambda o: o.id):
            records.append(
                ViewObjectPose(
                    view_id=view_id,
                    object_id=obj.id,
                    label=obj.label,
                    pose=cam_inv.compose(state.object_poses[obj.id]),
                    score=scores[obj.id],
                )
            )
    return records
