"""Asynchronous capture-processing jobs.

Registration, pruning, and localization take seconds to minutes, so uploads
return a job id immediately and clients poll. Jobs run on a bounded thread
pool; results land in the store through the same single-writer mutations as
the API handlers.
"""
from __future__ import annotations

import io
import json
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..assembly import part_world_transform
from ..errors import SceneLinkError, SchemaError
from ..meshdist import build_index, compute_background_mask
from ..registration import align_splat_to_cad, localize_video, resolve_constraints
from ..scene import SplatPlacement, VideoAnnotation, pose_doc
from ..sfm import parse_sfm_model
from ..splats import parse_splat_ply, prune_by_mask, transform_splat, write_splat_ply
from ..synth import parse_detections_doc, parse_video_detections_doc


class JobManager:
    def __init__(self, db, max_workers: int = 2):
        self.db = db
        self.pool = ThreadPoolExecutor(max_workers=max_workers,
                                       thread_name_prefix="scenelink-job")

    def submit(self, job_id: str, fingerprint: str, kind: str, fn) -> str:
        self.db.create_job(job_id, fingerprint, kind)

        def run():
            self.db.update_job(job_id, "running", {})
            try:
                detail = fn()
                self.db.update_job(job_id, "done", detail)
            except SceneLinkError as exc:
                self.db.update_job(job_id, "error", {"error": str(exc)})
            except Exception as exc:  # noqa: BLE001 - job boundary
                self.db.update_job(job_id, "error",
                                   {"error": f"{type(exc).__name__}: {exc}"})

        self.pool.submit(run)
        return job_id

    def shutdown(self, wait: bool = True) -> None:
        self.pool.shutdown(wait=wait)


# ---------------------------------------------------------------------------
# capture bundles


def _bundle_member(zf: zipfile.ZipFile, name: str) -> bytes | None:
    names = zf.namelist()
    if name in names:
        return zf.read(name)
    # tolerate one leading directory from zipping a folder
    matches = [n for n in names if n.endswith("/" + name)]
    if len(matches) == 1:
        return zf.read(matches[0])
    return None


def validate_capture_bundle(data: bytes, kind: str) -> None:
    """Cheap synchronous checks so malformed uploads fail at the endpoint."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise SchemaError(f"capture bundle is not a zip archive: {exc}") from exc
    with zf:
        if kind == "splat_inputs":
            required = ["splat.ply", "detections.json", "manifest.json"]
            for name in required:
                if _bundle_member(zf, name) is None:
                    raise SchemaError(f"capture bundle missing {name!r}")
            fmt = _bundle_manifest(zf).get("sfm_format", "binary")
            ext = {"binary": "bin", "text": "txt"}.get(fmt)
            if ext is None:
                raise SchemaError(f"unsupported sfm_format {fmt!r}")
            for table in ("cameras", "images", "points3D"):
                if _bundle_member(zf, f"sfm/{table}.{ext}") is None:
                    raise SchemaError(f"capture bundle missing sfm/{table}.{ext}")
        elif kind == "video":
            for name in ("video_detections.json", "manifest.json"):
                if _bundle_member(zf, name) is None:
                    raise SchemaError(f"capture bundle missing {name!r}")
        else:
            raise SchemaError(f"unknown capture kind {kind!r}")


def _bundle_manifest(zf: zipfile.ZipFile) -> dict:
    raw = _bundle_member(zf, "manifest.json")
    if raw is None:
        raise SchemaError("capture bundle missing 'manifest.json'")
    return json.loads(raw)


def process_splat_inputs(bundle: bytes, asm, config) -> dict:
    """Parse, register, and privacy-filter one splat capture bundle.

    Returns a dict with the pruned splat bytes and the placement metadata;
    the caller stores the blob and applies the store mutation."""
    with zipfile.ZipFile(io.BytesIO(bundle)) as zf:
        manifest = _bundle_manifest(zf)
        fmt = manifest.get("sfm_format", "binary")
        ext = {"binary": "bin", "text": "txt"}[fmt]
        tables = {}
        for table in ("cameras", "images", "points3D"):
            raw = _bundle_member(zf, f"sfm/{table}.{ext}")
            if raw is None:
                raise SchemaError(f"capture bundle missing sfm/{table}.{ext}")
            tables[table] = raw
        model = parse_sfm_model(tables, fmt)
        splat_raw = _bundle_member(zf, "splat.ply")
        detections_raw = _bundle_member(zf, "detections.json")
        if splat_raw is None or detections_raw is None:
            raise SchemaError("capture bundle missing splat.ply or detections.json")
        cloud = parse_splat_ply(splat_raw, source_id=manifest.get("source_id", ""))
        observations = parse_detections_doc(json.loads(detections_raw), model)

    if not observations:
        raise SchemaError("detections.json contains no usable tag detections")

    alignment = align_splat_to_cad(model, observations, asm,
                                   rms_warn_mm=config.rms_warn_mm)
    estimates = resolve_constraints(model, observations, asm, alignment.transform)
    joints = {e.dof_id: e.value for e in estimates if e.status == "resolved"}

    cloud_cad = transform_splat(cloud, alignment.transform)
    kept = len(cloud_cad)
    if config.privacy_filter and len(cloud_cad):
        meshed = [(p.mesh, part_world_transform(asm, pid, {}), pid)
                  for pid, p in asm.parts.items() if p.mesh is not None]
        zero_index = build_index(meshed)
        extra = []
        if joints:
            posed = [(p.mesh, part_world_transform(asm, pid, joints), pid)
                     for pid, p in asm.parts.items() if p.mesh is not None]
            extra.append(build_index(posed))
        mask = compute_background_mask(cloud_cad, zero_index, config.tau_mm,
                                       config.workspace_slab(), extra_indices=extra)
        cloud_cad = prune_by_mask(cloud_cad, mask)

    return {
        "splat_bytes": write_splat_ply(cloud_cad),
        "transform": alignment.transform,
        "rms_mm": alignment.rms_mm,
        "warnings": list(alignment.warnings),
        "joints": joints,
        "joint_estimates": [
            {"dof_id": e.dof_id, "status": e.status, "value": e.value,
             "residual_mm": e.residual_mm, "out_of_limits": e.out_of_limits,
             "reason": e.reason}
            for e in estimates
        ],
        "gaussians_total": kept,
        "gaussians_kept": len(cloud_cad),
    }


def process_video(bundle: bytes, asm, joints: dict) -> dict:
    """Localize a video capture bundle's frames against the assembly."""
    with zipfile.ZipFile(io.BytesIO(bundle)) as zf:
        detections_raw = _bundle_member(zf, "video_detections.json")
        if detections_raw is None:
            raise SchemaError("capture bundle missing 'video_detections.json'")
        cam, frames = parse_video_detections_doc(json.loads(detections_raw))
        clip = _bundle_member(zf, "clip.mp4") or b""

    results = localize_video(frames, asm, cam, joints)
    frame_poses = []
    placement = None
    for r in results:
        if r.localization is None:
            frame_poses.append((r.frame_index, None))
            continue
        doc = pose_doc(r.localization.pose.rotation, r.localization.pose.translation)
        doc["rms_px"] = r.localization.rms_px
        frame_poses.append((r.frame_index, doc))
        if placement is None:
            placement = doc
    return {
        "clip_bytes": clip,
        "frame_poses": frame_poses,
        "placement_pose": placement,
        "n_localized": sum(1 for _, p in frame_poses if p is not None),
        "n_frames": len(frame_poses),
    }


def make_splat_placement(splat_ref: str, detail: dict,
                         capture_time: float | None = None) -> SplatPlacement:
    return SplatPlacement(
        splat_ref=splat_ref, transform=detail["transform"],
        capture_time=time.time() if capture_time is None else capture_time,
        joint_values={k: float(v) for k, v in detail["joints"].items()},
        rms_mm=float(detail["rms_mm"]))


def make_video_annotation(clip_ref: str, detail: dict) -> VideoAnnotation:
    return VideoAnnotation(
        clip_ref=clip_ref,
        frame_poses=tuple((int(i), p) for i, p in detail["frame_poses"]),
        placement_pose=detail["placement_pose"])
