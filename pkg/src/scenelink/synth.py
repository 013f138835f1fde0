"""Synthetic capture generator with known ground truth.

Real captures (video, reconstruction, trained splats) are produced upstream;
tests and the CLI need inputs whose correct answers are known exactly. This
module builds a small rig (base + prismatic carriage + revolute arm, tagged
and meshed), poses a camera ring around it, and emits every artifact the
pipeline ingests: a sparse SfM model, a splat cloud, tag detections, a frame
manifest, video detections, the assembly GLB + sidecar manifest, and the
generating transform/joints as ground truth.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import (Assembly, Part, load_assembly, part_world_transform,
                       tag_corners_world, write_glb)
from .meshdist import TriangleMesh
from .registration import TagObservation
from .sfm import (CameraIntrinsics, CameraModel, FrameManifest, ImagePose, SfmModel,
                  TrackPoint, project, write_sfm_model)
from .splats import SplatCloud, write_splat_ply
from .transforms import (RigidTransform, SimilarityTransform, mat_to_quat,
                         quat_normalize, rotvec_to_mat)

GROUNDING_TAG_ID = 1
CARRIAGE_TAG_ID = 2
ARM_TAG_ID = 3
SLIDE_DOF = "slide_x"
SPIN_DOF = "spin_z"


def _tag_corners(center, u, v, side: float) -> np.ndarray:
    """Square corner positions in detector order (TL, TR, BR, BL)."""
    c = np.asarray(center, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h = side / 2.0
    return np.array([c + h * (-u + v), c + h * (u + v),
                     c + h * (u - v), c + h * (-u - v)])


def rig_manifest(tag_side_mm: float = 20.0) -> dict:
    """Sidecar manifest for the synthetic rig; corners are part-local mm."""
    ex, ey = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)
    return {
        "units": "mm",
        "tags": [
            {"tag_id": GROUNDING_TAG_ID, "role": "grounding", "part": "base",
             "corners": _tag_corners((-40.0, 20.0, 20.0), ex, ey, tag_side_mm).tolist(),
             "side_length": tag_side_mm},
            {"tag_id": CARRIAGE_TAG_ID, "role": "constraint", "part": "carriage",
             "corners": _tag_corners((0.0, 0.0, 5.0), ex, ey, tag_side_mm).tolist(),
             "side_length": tag_side_mm},
            {"tag_id": ARM_TAG_ID, "role": "constraint", "part": "arm",
             "corners": _tag_corners((30.0, 0.0, 4.0), ex, ey, tag_side_mm).tolist(),
             "side_length": tag_side_mm},
        ],
        "dofs": [
            {"dof_id": SLIDE_DOF, "part": "carriage", "kind": "prismatic",
             "axis": [1.0, 0.0, 0.0], "constraint_tag": CARRIAGE_TAG_ID,
             "nominal_tag_center": [0.0, 0.0, 30.0], "limits": [-60.0, 60.0]},
            {"dof_id": SPIN_DOF, "part": "arm", "kind": "revolute",
             "axis": [0.0, 0.0, 1.0], "origin": [0.0, 0.0, 0.0],
             "constraint_tag": ARM_TAG_ID,
             "nominal_tag_center": [70.0, 30.0, 24.0], "limits": [-math.pi, math.pi]},
        ],
        "docs": [
            {"parts": ["nozzle"], "title": "Nozzle assembly and seals",
             "url": "https://docs.example/nozzle"},
            {"parts": ["base"], "title": "Frame overview",
             "url": "https://docs.example/frame"},
        ],
    }


def rig_parts() -> tuple[dict[str, Part], str]:
    """Part tree of the synthetic rig, meshes in part-local mm."""
    base_mesh = TriangleMesh.box((60.0, 40.0, 10.0), center=(0.0, 0.0, 10.0))
    carriage_mesh = TriangleMesh.box((15.0, 15.0, 2.5), center=(0.0, 0.0, 2.5))
    arm_mesh = TriangleMesh.box((12.0, 5.0, 2.0), center=(18.0, 0.0, 2.0))
    nozzle_mesh = TriangleMesh.box((2.0, 2.0, 4.0), center=(0.0, 0.0, -4.0))
    parts = {
        "base": Part("base", "base", None, RigidTransform.identity(), base_mesh,
                     ("carriage", "arm")),
        "carriage": Part("carriage", "carriage", "base",
                         RigidTransform(np.eye(3), np.array([0.0, 0.0, 25.0])),
                         carriage_mesh, ("nozzle",)),
        "nozzle": Part("nozzle", "nozzle", "carriage",
                       RigidTransform(np.eye(3), np.array([0.0, 12.0, 0.0])),
                       nozzle_mesh, ()),
        "arm": Part("arm", "arm", "base",
                    RigidTransform(np.eye(3), np.array([40.0, 30.0, 20.0])),
                    arm_mesh, ()),
    }
    return parts, "base"


def build_rig_assembly(tag_side_mm: float = 20.0) -> tuple[bytes, dict, Assembly]:
    parts, root = rig_parts()
    glb = write_glb(parts, root, units="mm")
    manifest = rig_manifest(tag_side_mm)
    return glb, manifest, load_assembly(glb, manifest)


def _look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera pose for a camera at `position` looking at `target`
    (camera frame: x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    f = f / np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if abs(f @ up) > 0.98:
        up = np.array([0.0, 1.0, 0.0])
    r = np.cross(f, up)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f], axis=0)
    return RigidTransform(R, -R @ position)


def _random_similarity(rng: np.random.Generator, scale_range=(10.0, 1000.0)
                       ) -> SimilarityTransform:
    s = float(rng.uniform(*scale_range))
    R = rotvec_to_mat(rng.normal(size=3) * math.pi / 2)
    t = rng.uniform(-500.0, 500.0, size=3)
    return SimilarityTransform(s, R, t)


def _cad_pose_to_sfm(cam_pose: RigidTransform, to_cad: SimilarityTransform
                     ) -> RigidTransform:
    """Express a CAD-space camera pose against SfM-space points.

    A point p_sfm maps to CAD as s*R_g @ p + t_g; the camera ray direction is
    unchanged by uniform scaling, so the SfM-space pose is rigid."""
    R = cam_pose.R @ to_cad.R
    t = (cam_pose.R @ to_cad.t + cam_pose.t) / to_cad.scale
    return RigidTransform(R, t)


@dataclass
class SyntheticScene:
    assembly_glb: bytes
    assembly_manifest: dict
    assembly: Assembly
    camera: CameraIntrinsics
    model: SfmModel
    observations: list[TagObservation]
    splat: SplatCloud
    frame_manifest: FrameManifest
    video_frames: list[list[TagObservation]]
    video_poses_cad: list[RigidTransform | None]
    to_cad: SimilarityTransform
    joints: dict[str, float]
    splat_group_sizes: dict[str, int] = field(default_factory=dict)

    def ground_truth_doc(self) -> dict:
        return {
            "transform": self.to_cad.to_doc(),
            "joints": self.joints,
            "n_images": len(self.model.images),
            "n_points": len(self.model.points),
            "n_gaussians": len(self.splat),
            "splat_groups": self.splat_group_sizes,
            "video_poses": [
                None if p is None else
                {"rotation": mat_to_quat(p.R).tolist(), "translation": p.t.tolist()}
                for p in self.video_poses_cad
            ],
        }

    def detections_doc(self) -> dict:
        by_image: dict[int, list] = {}
        for o in self.observations:
            by_image.setdefault(o.image_id, []).append(o)
        images = []
        for image_id in sorted(by_image):
            name = self.model.images[image_id].name
            images.append({
                "image": name,
                "detections": [
                    {"tag_id": o.tag_id, "corners": o.corners_px.tolist()}
                    for o in by_image[image_id]
                ],
            })
        return {"images": images}

    def video_detections_doc(self) -> dict:
        frames = []
        for i, frame in enumerate(self.video_frames):
            frames.append({
                "frame_index": i,
                "detections": [
                    {"tag_id": o.tag_id, "corners": o.corners_px.tolist()}
                    for o in frame
                ],
            })
        return {"camera": camera_doc(self.camera), "frames": frames}


def camera_doc(cam: CameraIntrinsics) -> dict:
    return {
        "camera_id": cam.camera_id,
        "model": cam.model.value,
        "width": cam.width,
        "height": cam.height,
        "focal": list(cam.focal),
        "principal_point": list(cam.principal_point),
        "distortion": list(cam.distortion),
    }


def camera_from_doc(doc: dict) -> CameraIntrinsics:
    return CameraIntrinsics(
        camera_id=int(doc["camera_id"]), model=CameraModel(doc["model"]),
        width=int(doc["width"]), height=int(doc["height"]),
        focal=tuple(doc["focal"]), principal_point=tuple(doc["principal_point"]),
        distortion=tuple(doc.get("distortion", ())))


def parse_detections_doc(doc: dict, model: SfmModel) -> list[TagObservation]:
    """Detections keyed by image name -> observations keyed by image id."""
    by_name = {img.name: img.image_id for img in model.images.values()}
    out = []
    for entry in doc.get("images", []):
        image_id = by_name.get(entry["image"])
        if image_id is None:
            continue
        for det in entry.get("detections", []):
            out.append(TagObservation(image_id, int(det["tag_id"]),
                                      np.array(det["corners"], dtype=np.float64)))
    return out


def parse_video_detections_doc(doc: dict) -> tuple[CameraIntrinsics, list[list[TagObservation]]]:
    cam = camera_from_doc(doc["camera"])
    frames = []
    for entry in doc.get("frames", []):
        frames.append([
            TagObservation(int(entry["frame_index"]), int(det["tag_id"]),
                           np.array(det["corners"], dtype=np.float64))
            for det in entry.get("detections", [])
        ])
    return cam, frames


def _surface_samples(mesh: TriangleMesh, world: RigidTransform, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    verts = world.apply(mesh.vertices)
    tris = verts[mesh.triangles]
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    pick = rng.choice(len(tris), size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    t = tris[pick]
    return t[:, 0] + u * (t[:, 1] - t[:, 0]) + v * (t[:, 2] - t[:, 0])


def _random_splat(points_cad: np.ndarray, to_cad: SimilarityTransform,
                  rng: np.random.Generator, sh_degree: int, source_id: str
                  ) -> SplatCloud:
    n = len(points_cad)
    from_cad = to_cad.inverse()
    positions = from_cad.apply(points_cad)
    rotations = quat_normalize(rng.normal(size=(n, 4)))
    log_scales = np.log(rng.uniform(0.5, 4.0, size=(n, 3)) / to_cad.scale)
    opacity = rng.normal(size=n)
    color_dc = rng.normal(size=(n, 3))
    m = (sh_degree + 1) ** 2 - 1
    color_rest = rng.normal(size=(n, m, 3)) * 0.1
    # keep everything exactly representable in the float32 file encoding
    cloud = SplatCloud(positions.astype(np.float32).astype(np.float64),
                       quat_normalize(rotations.astype(np.float32).astype(np.float64)),
                       log_scales.astype(np.float32).astype(np.float64),
                       opacity.astype(np.float32).astype(np.float64),
                       color_dc.astype(np.float32).astype(np.float64),
                       color_rest.astype(np.float32).astype(np.float64),
                       sh_degree, source_id)
    return cloud


def generate(seed: int = 0, scale: float | None = None, noise_px: float = 0.0,
             preset: str = "random", joints: dict[str, float] | None = None,
             n_cameras: int = 14, n_track_points: int = 120,
             n_surface_gaussians: int = 400, n_workspace_gaussians: int = 120,
             n_background_gaussians: int = 200, sh_degree: int = 1,
             n_video_frames: int = 8, tag_side_mm: float = 20.0,
             fps: float = 30.0, duration_s: float = 60.0,
             camera_model: str = "pinhole") -> SyntheticScene:
    """Build a full synthetic capture. `preset="identity"` pins the scan
    frame to CAD (scale 1, identity rotation, zero translation)."""
    rng = np.random.default_rng(seed)
    glb, manifest, asm = build_rig_assembly(tag_side_mm)

    if joints is None:
        joints = {SLIDE_DOF: 42.0, SPIN_DOF: math.radians(30.0)}

    if preset == "identity":
        to_cad = SimilarityTransform.identity()
    elif preset == "random":
        if scale is not None:
            s = float(scale)
            R = rotvec_to_mat(rng.normal(size=3) * math.pi / 2)
            t = rng.uniform(-500.0, 500.0, size=3)
            to_cad = SimilarityTransform(s, R, t)
        else:
            to_cad = _random_similarity(rng)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    from_cad = to_cad.inverse()

    model_enum = CameraModel(camera_model)
    distortion = {
        CameraModel.PINHOLE: (),
        CameraModel.SIMPLE_PINHOLE: (),
        CameraModel.SIMPLE_RADIAL: (0.08,),
        CameraModel.OPENCV_RADIAL: (0.06, -0.01, 0.0005, -0.0003),
    }[model_enum]
    cam = CameraIntrinsics(1, model_enum, 1920, 1080, (1200.0, 1200.0),
                           (960.0, 540.0), distortion)

    # camera ring around the rig (CAD mm)
    target = np.array([0.0, 0.0, 30.0])
    cad_poses = []
    for i in range(n_cameras):
        ang = 2 * math.pi * i / n_cameras
        radius = 420.0 + 40.0 * math.sin(3 * ang)
        height = 260.0 + 120.0 * math.cos(2 * ang + 0.7)
        pos = np.array([radius * math.cos(ang), radius * math.sin(ang), height])
        cad_poses.append(_look_at_pose(pos, target))

    images: dict[int, ImagePose] = {}
    sfm_poses: list[RigidTransform] = []
    for i, cad_pose in enumerate(cad_poses):
        sfm_pose = _cad_pose_to_sfm(cad_pose, to_cad)
        sfm_poses.append(sfm_pose)
        images[i + 1] = ImagePose(i + 1, cam.camera_id, mat_to_quat(sfm_pose.R),
                                  sfm_pose.t, f"frame_{i + 1:06d}.jpg")

    # sparse track points: on and around the hardware
    parts_world = {
        pid: (asm.parts[pid].mesh,
              _zero_world(asm, pid))
        for pid in asm.parts if asm.parts[pid].mesh is not None
    }
    surface_cad = np.concatenate([
        _surface_samples(mesh, world, max(4, n_track_points // len(parts_world)), rng)
        for mesh, world in parts_world.values()
    ])[:n_track_points]
    track_sfm = from_cad.apply(surface_cad)

    obs_lists: dict[int, list] = {i: [] for i in images}
    points: dict[int, TrackPoint] = {}
    for pid, p_sfm in enumerate(track_sfm, start=1):
        track = []
        for image_id, pose in images.items():
            pixel, in_front = project(p_sfm, pose, cam)
            if not in_front or not (0 <= pixel[0] < cam.width and 0 <= pixel[1] < cam.height):
                continue
            obs_lists[image_id].append(((float(pixel[0]), float(pixel[1])), pid))
            track.append((image_id, len(obs_lists[image_id]) - 1))
        if len(track) < 2:
            for image_id, obs_idx in track:
                obs_lists[image_id].pop()
            continue
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        points[pid] = TrackPoint(pid, p_sfm, color, 0.0, tuple(track))

    images = {
        image_id: ImagePose(img.image_id, img.camera_id, img.rotation, img.translation,
                            img.name, tuple(obs_lists[image_id]))
        for image_id, img in images.items()
    }
    model = SfmModel({cam.camera_id: cam}, images, points).validate()

    # tag detections (exact projections + optional noise), every ring camera
    observations: list[TagObservation] = []
    for image_id in images:
        for anchor in asm.tags:
            corners_cad = _anchor_world(asm, anchor.tag_id, joints)
            px = []
            ok = True
            for corner in corners_cad:
                pixel, in_front = project(from_cad.apply(corner), images[image_id], cam)
                if not in_front:
                    ok = False
                    break
                px.append(pixel)
            if not ok:
                continue
            px = np.array(px)
            if noise_px > 0:
                px = px + rng.normal(scale=noise_px, size=px.shape)
            observations.append(TagObservation(image_id, anchor.tag_id, px))

    # splat cloud: hardware surface + work surface + far background
    posed_world = {
        pid: (asm.parts[pid].mesh, _posed_world(asm, pid, joints))
        for pid in asm.parts if asm.parts[pid].mesh is not None
    }
    surface = np.concatenate([
        _surface_samples(mesh, world, max(4, n_surface_gaussians // len(posed_world)), rng)
        for mesh, world in posed_world.values()
    ])
    workspace = np.stack([
        rng.uniform(-140.0, 140.0, size=n_workspace_gaussians),
        rng.uniform(-120.0, 120.0, size=n_workspace_gaussians),
        rng.uniform(-2.0, 2.0, size=n_workspace_gaussians),
    ], axis=1)
    bg_dir = rng.normal(size=(n_background_gaussians, 3))
    bg_dir /= np.linalg.norm(bg_dir, axis=1, keepdims=True)
    background = bg_dir * rng.uniform(600.0, 2500.0, size=(n_background_gaussians, 1))
    background[:, 2] = np.abs(background[:, 2]) + 50.0
    all_points = np.concatenate([surface, workspace, background])
    splat = _random_splat(all_points, to_cad, rng, sh_degree, f"synth-{seed}")
    group_sizes = {"surface": len(surface), "workspace": len(workspace),
                   "background": len(background)}

    # frame manifest: fixed-fps video with a tag-bearing window in the middle
    n_frames = int(round(fps * duration_s))
    tag_lo, tag_hi = int(n_frames * 0.3), int(n_frames * 0.6)
    entries = tuple(
        (i, i / fps, tag_lo <= i <= tag_hi) for i in range(n_frames)
    )
    frame_manifest = FrameManifest(entries)

    # handheld video arc for frame localization; a middle frame sees no tags
    video_frames: list[list[TagObservation]] = []
    video_poses: list[RigidTransform | None] = []
    for i in range(n_video_frames):
        ang = 0.8 * math.pi * i / max(1, n_video_frames - 1) + 0.3
        pos = np.array([380.0 * math.cos(ang), 380.0 * math.sin(ang),
                        230.0 + 15.0 * i])
        pose = _look_at_pose(pos, target)
        if i == n_video_frames // 2:
            video_frames.append([])
            video_poses.append(None)
            continue
        frame_obs = []
        for anchor in asm.tags:
            corners_cad = _anchor_world(asm, anchor.tag_id, joints)
            px = []
            ok = True
            for corner in corners_cad:
                p_cam = pose.apply(corner)
                if p_cam[2] <= 0:
                    ok = False
                    break
                pixel, _ = project(corner, _rigid_as_image_pose(pose, cam), cam)
                px.append(pixel)
            if not ok:
                continue
            px = np.array(px)
            if noise_px > 0:
                px = px + rng.normal(scale=noise_px, size=px.shape)
            frame_obs.append(TagObservation(i, anchor.tag_id, px))
        video_frames.append(frame_obs)
        video_poses.append(pose)

    return SyntheticScene(
        assembly_glb=glb, assembly_manifest=manifest, assembly=asm, camera=cam,
        model=model, observations=observations, splat=splat,
        frame_manifest=frame_manifest, video_frames=video_frames,
        video_poses_cad=video_poses, to_cad=to_cad, joints=joints,
        splat_group_sizes=group_sizes)


def _zero_world(asm: Assembly, part_id: str) -> RigidTransform:
    return part_world_transform(asm, part_id, {})


def _posed_world(asm: Assembly, part_id: str, joints: dict[str, float]) -> RigidTransform:
    return part_world_transform(asm, part_id, joints)


def _anchor_world(asm: Assembly, tag_id: int, joints: dict[str, float]) -> np.ndarray:
    return tag_corners_world(asm, asm.tag(tag_id), joints)


def _rigid_as_image_pose(pose: RigidTransform, cam: CameraIntrinsics) -> ImagePose:
    return ImagePose(0, cam.camera_id, mat_to_quat(pose.R), pose.t, "video")


def write_bundle(scene: SyntheticScene, out_dir: str | Path,
                 sfm_format: str = "binary") -> Path:
    """Write a capture bundle (sfm/, splat.ply, detections.json, manifest.json)
    plus the assembly files and ground truth next to it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sfm_model(scene.model, sfm_format, out / "sfm")
    (out / "splat.ply").write_bytes(write_splat_ply(scene.splat))
    _dump_json(out / "detections.json", scene.detections_doc())
    _dump_json(out / "manifest.json", {
        "kind": "splat_inputs",
        "sfm_format": sfm_format,
        "camera": camera_doc(scene.camera),
        "source_id": scene.splat.source_id,
    })
    (out / "frame_manifest.txt").write_text(scene.frame_manifest.to_text())
    _dump_json(out / "video_detections.json", scene.video_detections_doc())
    (out / "assembly.glb").write_bytes(scene.assembly_glb)
    _dump_json(out / "assembly_manifest.json", scene.assembly_manifest)
    _dump_json(out / "ground_truth.json", scene.ground_truth_doc())
    return out


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
