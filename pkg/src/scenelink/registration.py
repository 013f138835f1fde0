"""Recovering the scan-to-CAD similarity transform from fiducial tags.

Pipeline: triangulate tag corners from the sparse reconstruction, estimate
the metric scale from known tag side lengths, then solve the rigid part with
Arun's SVD method on the scaled corners. Constraint tags on moving parts
resolve joint values; single frames localize against known tag geometry.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assembly import CONSTRAINT, GROUNDING, Assembly, DofSpec, TagAnchor, \
    part_world_transform, tag_corners_world
from .errors import DegenerateGeometryError, InsufficientViewsError, \
    NonConvergedError, ValidationError
from .sfm import CameraIntrinsics, ImagePose, SfmModel, project, undistort_pixel
from .transforms import RigidTransform, SimilarityTransform, axis_angle_mat, \
    mat_to_quat, mat_to_rotvec, rotvec_to_mat

MIN_TRIANGULATION_ANGLE_DEG = 0.5
DEFAULT_RMS_WARN_MM = 5.0


@dataclass(frozen=True)
class TagObservation:
    """Detected tag corners in one image, in detector corner order."""

    image_id: int
    tag_id: int
    corners_px: np.ndarray  # (4, 2)

    def __post_init__(self):
        c = np.asarray(self.corners_px, dtype=np.float64).reshape(4, 2)
        if not np.all(np.isfinite(c)):
            raise ValidationError(
                f"tag {self.tag_id} in image {self.image_id}: non-finite corners")
        object.__setattr__(self, "corners_px", c)


@dataclass(frozen=True)
class TriangulatedTag:
    tag_id: int
    corners_sfm: np.ndarray  # (4, 3)
    rms_reprojection: float
    n_views: int

    @property
    def center(self) -> np.ndarray:
        return self.corners_sfm.mean(axis=0)


@dataclass(frozen=True)
class AlignmentResult:
    transform: SimilarityTransform
    rms_mm: float
    n_tags: int
    n_views: int
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class JointEstimate:
    dof_id: str
    status: str  # resolved | unresolved
    value: float | None = None
    residual_mm: float | None = None
    out_of_limits: bool = False
    reason: str | None = None


@dataclass(frozen=True)
class FrameLocalization:
    pose: ImagePose  # world (CAD mm) -> camera
    rms_px: float
    n_points: int
    rms_history: tuple[float, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class VideoFrameResult:
    frame_index: int
    localization: FrameLocalization | None
    error: str | None = None

    @property
    def localized(self) -> bool:
        return self.localization is not None


# ---------------------------------------------------------------------------
# triangulation


def _camera_center(pose: ImagePose) -> np.ndarray:
    R = pose.rotation_matrix()
    return -R.T @ pose.translation


def _triangulate_point_dlt(views: list[tuple[ImagePose, CameraIntrinsics, np.ndarray]]
                           ) -> np.ndarray:
    rows = []
    for pose, cam, pixel in views:
        xn, yn = undistort_pixel(cam, pixel)
        P = np.hstack([pose.rotation_matrix(), pose.translation[:, None]])
        rows.append(xn * P[2] - P[0])
        rows.append(yn * P[2] - P[1])
    A = np.array(rows)
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-14 * np.linalg.norm(X[:3]):
        raise DegenerateGeometryError("triangulation produced a point at infinity")
    return X[:3] / X[3]


def _check_triangulation_angle(point: np.ndarray, views) -> None:
    dirs = []
    for pose, _, _ in views:
        ray = point - _camera_center(pose)
        n = np.linalg.norm(ray)
        if n < 1e-12:
            raise DegenerateGeometryError("triangulated point at a camera center")
        dirs.append(ray / n)
    best = 0.0
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            cosang = np.clip(abs(dirs[i] @ dirs[j]), -1.0, 1.0)
            best = max(best, np.degrees(np.arccos(cosang)))
    if best < MIN_TRIANGULATION_ANGLE_DEG:
        raise DegenerateGeometryError(
            f"rays nearly parallel: max triangulation angle {best:.4f} deg "
            f"< {MIN_TRIANGULATION_ANGLE_DEG} deg")


def _refine_point(point: np.ndarray, views, iterations: int = 10,
                  step_tol: float = 1e-12) -> np.ndarray:
    """Gauss-Newton on pixel reprojection error, numeric Jacobian."""
    x = point.copy()

    def residuals(p):
        r = []
        for pose, cam, pixel in views:
            proj, _ = project(p, pose, cam)
            r.extend(proj - pixel)
        return np.array(r)

    for _ in range(iterations):
        r = residuals(x)
        J = np.zeros((len(r), 3))
        eps = 1e-7 * max(1.0, float(np.linalg.norm(x)))
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = eps
            J[:, k] = (residuals(x + dx) - residuals(x - dx)) / (2 * eps)
        try:
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        new_r = residuals(x + step)
        if new_r @ new_r < r @ r:
            x = x + step
        if np.linalg.norm(step) < step_tol:
            break
    return x


def triangulate_tag_corners(model: SfmModel, obs: list[TagObservation],
                            tag_id: int) -> TriangulatedTag:
    """Triangulate all four corners of one tag across its observing views."""
    tag_obs = [o for o in obs if o.tag_id == tag_id and o.image_id in model.images]
    if len(tag_obs) < 2:
        raise InsufficientViewsError(
            f"tag {tag_id} observed in {len(tag_obs)} view(s); need at least 2")

    corners = np.zeros((4, 3))
    sq_err = 0.0
    n_res = 0
    for c in range(4):
        views = []
        for o in tag_obs:
            pose = model.images[o.image_id]
            cam = model.cameras[pose.camera_id]
            views.append((pose, cam, o.corners_px[c]))
        point = _triangulate_point_dlt(views)
        _check_triangulation_angle(point, views)
        point = _refine_point(point, views)
        corners[c] = point
        for pose, cam, pixel in views:
            proj, _ = project(point, pose, cam)
            sq_err += float(np.sum((proj - pixel) ** 2))
            n_res += 1
    rms = float(np.sqrt(sq_err / max(1, n_res)))
    return TriangulatedTag(tag_id, corners, rms, len(tag_obs))


# ---------------------------------------------------------------------------
# scale + rigid fit


def estimate_scale(triangulated: list[TriangulatedTag],
                   anchors: list[TagAnchor]) -> float:
    """Mean ratio of physical to measured tag side length, mm per SfM unit."""
    by_id = {a.tag_id: a for a in anchors}
    ratios = []
    for tri in triangulated:
        anchor = by_id.get(tri.tag_id)
        if anchor is None:
            continue
        for i in range(4):
            measured = float(np.linalg.norm(tri.corners_sfm[(i + 1) % 4] - tri.corners_sfm[i]))
            if measured < 1e-12:
                raise DegenerateGeometryError(
                    f"tag {tri.tag_id}: measured side {i} is degenerate")
            ratios.append(anchor.side_length / measured)
    if not ratios:
        raise ValidationError("no triangulated tag matches a declared anchor")
    return float(np.mean(ratios))


def fit_rigid_arun(source: np.ndarray, target: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares rigid fit R @ source + t ~= target via SVD.

    Returns (R, t, rms). Degenerate configurations (collinear or coincident
    points) are rejected: with no planar spread the reflection ambiguity makes
    the rotation unrecoverable.
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if source.shape != target.shape:
        raise ValidationError("source and target must have the same shape")
    if len(source) < 3:
        raise ValidationError(f"need at least 3 point pairs, got {len(source)}")

    p_bar = source.mean(axis=0)
    q_bar = target.mean(axis=0)
    H = (source - p_bar).T @ (target - q_bar)
    U, S, Vt = np.linalg.svd(H)
    if S[0] < 1e-300 or S[1] < 1e-12 * S[0]:
        raise DegenerateGeometryError(
            "point sets are collinear or coincident: the rigid fit cannot "
            "distinguish a rotation from its reflection")
    V = Vt.T
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(V @ U.T)))])
    R = V @ D @ U.T
    t = q_bar - R @ p_bar
    residuals = target - (source @ R.T + t)
    rms = float(np.sqrt(np.mean(np.sum(residuals ** 2, axis=1))))
    return R, t, rms


def align_splat_to_cad(model: SfmModel, obs: list[TagObservation], asm: Assembly,
                       rms_warn_mm: float = DEFAULT_RMS_WARN_MM) -> AlignmentResult:
    """Recover the SfM -> CAD similarity from grounding-tag corners.

    Grounding tags with at least two observing views are triangulated, the
    scale is estimated from their side lengths, and a single rigid fit pools
    all their corners. CAD point = scale * R @ p_sfm + t.
    """
    grounding = [t for t in asm.tags if t.role == GROUNDING]
    if not grounding:
        raise ValidationError("assembly declares no grounding tag")

    triangulated = []
    usable_anchors = []
    errors = []
    for anchor in grounding:
        try:
            triangulated.append(triangulate_tag_corners(model, obs, anchor.tag_id))
            usable_anchors.append(anchor)
        except InsufficientViewsError as exc:
            errors.append(str(exc))
    if not triangulated:
        raise InsufficientViewsError(
            "no grounding tag observed in >= 2 views: " + "; ".join(errors))

    s = estimate_scale(triangulated, usable_anchors)
    source = np.concatenate([s * tri.corners_sfm for tri in triangulated])
    target = np.concatenate(
        [tag_corners_world(asm, anchor) for anchor in usable_anchors])
    R, t, rms = fit_rigid_arun(source, target)

    warnings = tuple(errors)
    if rms > rms_warn_mm:
        warnings += (f"alignment rms {rms:.3f} mm exceeds {rms_warn_mm} mm threshold",)
    n_views = sum(tri.n_views for tri in triangulated)
    return AlignmentResult(SimilarityTransform(s, R, t), rms, len(triangulated),
                           n_views, warnings)


# ---------------------------------------------------------------------------
# joint resolution


_MIN_REVOLUTE_RADIUS_MM = 1.0


def resolve_constraints(model: SfmModel, obs: list[TagObservation], asm: Assembly,
                        base: SimilarityTransform) -> list[JointEstimate]:
    """Resolve each DOF's joint value from its constraint tag's observed center.

    DOFs whose tag cannot be triangulated come back `unresolved` rather than
    failing the batch; the scene stays usable without them.
    """
    estimates = []
    for dof in asm.dofs:
        try:
            tri = triangulate_tag_corners(model, obs, dof.constraint_tag)
        except (InsufficientViewsError, DegenerateGeometryError) as exc:
            estimates.append(JointEstimate(dof.dof_id, "unresolved", reason=str(exc)))
            continue
        observed = base.apply(tri.center)
        estimates.append(_estimate_joint(asm, dof, observed))
    return estimates


def _estimate_joint(asm: Assembly, dof: DofSpec, observed_center: np.ndarray
                    ) -> JointEstimate:
    zero_pose = part_world_transform(asm, dof.moving_part, {})
    axis = zero_pose.R @ dof.axis
    nominal = dof.nominal_tag_center

    if dof.kind == "prismatic":
        value = float(axis @ (observed_center - nominal))
        predicted = nominal + value * axis
    else:
        origin = zero_pose.apply(dof.origin)
        u = nominal - origin
        v = observed_center - origin
        u_p = u - (u @ axis) * axis
        v_p = v - (v @ axis) * axis
        if np.linalg.norm(u_p) < _MIN_REVOLUTE_RADIUS_MM or \
           np.linalg.norm(v_p) < _MIN_REVOLUTE_RADIUS_MM:
            raise DegenerateGeometryError(
                f"dof {dof.dof_id}: revolute radius below {_MIN_REVOLUTE_RADIUS_MM} mm")
        value = float(np.arctan2(axis @ np.cross(u_p, v_p), u_p @ v_p))
        predicted = origin + axis_angle_mat(axis, value) @ u
    residual = float(np.linalg.norm(observed_center - predicted))
    lo, hi = dof.limits
    return JointEstimate(dof.dof_id, "resolved", value, residual,
                         out_of_limits=not (lo <= value <= hi))


# ---------------------------------------------------------------------------
# single-frame localization (pose from 2D-3D tag-corner correspondences)


def _pose_from_dlt(points_3d: np.ndarray, points_norm: np.ndarray) -> RigidTransform:
    """Full 3x4 DLT; needs >= 6 well-spread, non-coplanar points."""
    n = len(points_3d)
    A = np.zeros((2 * n, 12))
    for i in range(n):
        X = np.append(points_3d[i], 1.0)
        x, y = points_norm[i]
        A[2 * i, 0:4] = X
        A[2 * i, 8:12] = -x * X
        A[2 * i + 1, 4:8] = X
        A[2 * i + 1, 8:12] = -y * X
    _, _, vt = np.linalg.svd(A)
    P = vt[-1].reshape(3, 4)
    # pick the sign putting the points in front of the camera
    hom = np.hstack([points_3d, np.ones((n, 1))])
    if np.median(hom @ P[2]) < 0:
        P = -P
    M = P[:, :3]
    U, S, Vt = np.linalg.svd(M)
    if S[-1] < 1e-12 * S[0]:
        raise DegenerateGeometryError("camera matrix is rank-deficient")
    R = U @ np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))]) @ Vt
    t = P[:, 3] / float(np.mean(S))
    return RigidTransform(R, t)


def _pose_from_plane(points_3d: np.ndarray, points_norm: np.ndarray
                     ) -> RigidTransform:
    """Homography-based pose for (near-)coplanar 3D points."""
    centroid = points_3d.mean(axis=0)
    centered = points_3d - centroid
    _, _, vt = np.linalg.svd(centered)
    e1, e2 = vt[0], vt[1]
    plane_uv = np.stack([centered @ e1, centered @ e2], axis=1)

    n = len(points_3d)
    A = np.zeros((2 * n, 9))
    for i in range(n):
        u, v = plane_uv[i]
        x, y = points_norm[i]
        A[2 * i] = [u, v, 1, 0, 0, 0, -x * u, -x * v, -x]
        A[2 * i + 1] = [0, 0, 0, u, v, 1, -y * u, -y * v, -y]
    _, _, vt_h = np.linalg.svd(A)
    H = vt_h[-1].reshape(3, 3)

    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1 = h1 * lam
    r2 = h2 * lam
    t = h3 * lam
    if t[2] < 0:  # plane must sit in front of the camera
        r1, r2, t = -r1, -r2, -t
    r3 = np.cross(r1, r2)
    R_plane = np.stack([r1, r2, r3], axis=1)
    U, _, Vt = np.linalg.svd(R_plane)
    R_plane = U @ np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))]) @ Vt
    # world -> camera: x_cam = R_plane @ [u, v, w] + t with plane basis (e1,e2,n)
    basis = np.stack([e1, e2, np.cross(e1, e2)], axis=0)
    R = R_plane @ basis
    t_full = t - R @ centroid
    return RigidTransform(R, t_full)


def _lm_refine_pose(pose: RigidTransform, points_3d: np.ndarray, pixels: np.ndarray,
                    cam: CameraIntrinsics, max_iterations: int = 100
                    ) -> tuple[RigidTransform, float, list[float]]:
    """Levenberg-Marquardt on pixel reprojection, rotation-vector + translation
    parameterization. Only improving steps are accepted, so rms is monotone."""

    from .sfm import _distort

    def residuals(params):
        R = rotvec_to_mat(params[:3])
        t = params[3:]
        cam_pts = points_3d @ R.T + t
        z = np.where(np.abs(cam_pts[:, 2]) < 1e-12, 1e-12, cam_pts[:, 2])
        xn = cam_pts[:, 0] / z
        yn = cam_pts[:, 1] / z
        fx, fy = cam.focal
        cx, cy = cam.principal_point
        out = np.zeros(2 * len(points_3d))
        for i in range(len(points_3d)):
            xd, yd = _distort(cam.model, cam.distortion, xn[i], yn[i])
            out[2 * i] = fx * xd + cx - pixels[i, 0]
            out[2 * i + 1] = fy * yd + cy - pixels[i, 1]
        return out

    params = np.concatenate([mat_to_rotvec(pose.R), pose.t])
    r = residuals(params)
    cost = float(r @ r)
    history = [_rms_from_residuals(r)]
    lam = 1e-3
    converged = False
    for _ in range(max_iterations):
        J = np.zeros((len(r), 6))
        for k in range(6):
            eps = 1e-7 * max(1.0, abs(params[k]))
            dp = np.zeros(6)
            dp[k] = eps
            J[:, k] = (residuals(params + dp) - residuals(params - dp)) / (2 * eps)
        JtJ = J.T @ J
        g = J.T @ r
        step = None
        try:
            step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -g)
        except np.linalg.LinAlgError:
            pass
        if step is None or not np.all(np.isfinite(step)):
            lam *= 10
            continue
        new_params = params + step
        new_r = residuals(new_params)
        new_cost = float(new_r @ new_r)
        if new_cost < cost:
            params, r, cost = new_params, new_r, new_cost
            history.append(_rms_from_residuals(r))
            lam = max(lam / 10, 1e-12)
            if float(np.linalg.norm(step)) < 1e-12:
                converged = True
                break
        else:
            lam *= 10
            if lam > 1e12:
                converged = True  # damping saturated: no step improves the cost
                break
    if not converged:
        raise NonConvergedError(
            f"pose refinement still moving after {max_iterations} iterations",
            _rms_from_residuals(r))
    R = rotvec_to_mat(params[:3])
    return RigidTransform(R, params[3:]), _rms_from_residuals(r), history


def _rms_from_residuals(r: np.ndarray) -> float:
    pts = r.reshape(-1, 2)
    return float(np.sqrt(np.mean(np.sum(pts ** 2, axis=1))))


def localize_frame(obs: list[TagObservation], asm: Assembly, cam: CameraIntrinsics,
                   joint_values: dict[str, float] | None = None,
                   image_id: int = 0, name: str = "") -> FrameLocalization:
    """Camera pose (CAD mm -> camera) from the frame's tag detections.

    Tag corners are placed in world space by the kinematic chain under
    `joint_values`; unknown tag ids in `obs` are ignored.
    """
    known = {t.tag_id: t for t in asm.tags}
    points_3d = []
    pixels = []
    for o in obs:
        anchor = known.get(o.tag_id)
        if anchor is None:
            continue
        world = tag_corners_world(asm, anchor, joint_values)
        points_3d.extend(world)
        pixels.extend(o.corners_px)
    points_3d = np.array(points_3d, dtype=np.float64).reshape(-1, 3)
    pixels = np.array(pixels, dtype=np.float64).reshape(-1, 2)

    if len(points_3d) < 4:
        raise InsufficientViewsError(
            f"need >= 4 tag-corner correspondences, got {len(points_3d)}")
    centered = points_3d - points_3d.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-12):
        raise DegenerateGeometryError("tag corners are collinear; pose is ambiguous")

    points_norm = np.array([undistort_pixel(cam, px) for px in pixels])
    coplanar = sv[2] < 1e-6 * sv[0]
    if coplanar or len(points_3d) < 6:
        init = _pose_from_plane(points_3d, points_norm)
    else:
        init = _pose_from_dlt(points_3d, points_norm)

    pose, rms, history = _lm_refine_pose(init, points_3d, pixels, cam)
    image_pose = ImagePose(image_id, cam.camera_id, mat_to_quat(pose.R), pose.t,
                           name or f"frame_{image_id:06d}")
    return FrameLocalization(image_pose, rms, len(points_3d), tuple(history))


def localize_video(frames: list[list[TagObservation]], asm: Assembly,
                   cam: CameraIntrinsics,
                   joint_values: dict[str, float] | None = None
                   ) -> list[VideoFrameResult]:
    """Localize every frame independently; failures never abort the batch."""
    results = []
    for i, frame_obs in enumerate(frames):
        try:
            loc = localize_frame(frame_obs, asm, cam, joint_values, image_id=i)
            results.append(VideoFrameResult(i, loc))
        except (InsufficientViewsError, DegenerateGeometryError,
                NonConvergedError) as exc:
            results.append(VideoFrameResult(i, None, str(exc)))
    return results
