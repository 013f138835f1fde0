"""Command-line driver: the fully offline path through the pipeline, plus
fixture generation (`synth`) and the service launcher (`serve`)."""
from __future__ import annotations

import functools
import io
import json
import sys
import zipfile
from pathlib import Path

import click
import numpy as np

from . import __version__
from .assembly import load_assembly, part_world_transform
from .errors import SceneLinkError
from .meshdist import WorkspaceSlab, build_index, compute_background_mask
from .registration import align_splat_to_cad, localize_video, resolve_constraints
from .scene import SceneStore
from .sfm import parse_sfm_model
from .splats import parse_splat_ply, prune_by_mask, transform_splat, write_splat_ply
from .synth import (camera_doc, generate, parse_detections_doc,
                    parse_video_detections_doc, write_bundle)
from .transforms import SimilarityTransform


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


def _emit(doc: dict, out: Path | None = None) -> None:
    text = _dump(doc) + "\n"
    if out is not None:
        Path(out).write_text(text)
    click.echo(text, nl=False)


def _fail_cleanly(fn):
    """Surface package errors as machine-readable JSON with a nonzero exit."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SceneLinkError as exc:
            click.echo(_dump({"error": type(exc).__name__,
                              "module": type(exc).__module__,
                              "detail": str(exc)}), err=True)
            sys.exit(1)

    return wrapper


@click.group()
@click.version_option(__version__)
def main():
    """Register hardware scans onto CAD and serve part-anchored issues."""


# ---------------------------------------------------------------------------
# bundle access


def _bundle_bytes(bundle: Path, name: str) -> bytes | None:
    if bundle.is_dir():
        path = bundle / name
        return path.read_bytes() if path.exists() else None
    with zipfile.ZipFile(bundle) as zf:
        names = zf.namelist()
        if name in names:
            return zf.read(name)
        matches = [n for n in names if n.endswith("/" + name)]
        return zf.read(matches[0]) if len(matches) == 1 else None


def _load_bundle(bundle: Path):
    from .errors import SchemaError

    manifest_raw = _bundle_bytes(bundle, "manifest.json")
    if manifest_raw is None:
        raise SchemaError("bundle missing manifest.json")
    manifest = json.loads(manifest_raw)
    fmt = manifest.get("sfm_format", "binary")
    ext = {"binary": "bin", "text": "txt"}[fmt]
    tables = {}
    for table in ("cameras", "images", "points3D"):
        raw = _bundle_bytes(bundle, f"sfm/{table}.{ext}")
        if raw is None:
            raise SchemaError(f"bundle missing sfm/{table}.{ext}")
        tables[table] = raw
    model = parse_sfm_model(tables, fmt)
    splat_raw = _bundle_bytes(bundle, "splat.ply")
    if splat_raw is None:
        raise SchemaError("bundle missing splat.ply")
    cloud = parse_splat_ply(splat_raw, source_id=manifest.get("source_id", ""))
    detections_raw = _bundle_bytes(bundle, "detections.json")
    if detections_raw is None:
        raise SchemaError("bundle missing detections.json")
    observations = parse_detections_doc(json.loads(detections_raw), model)
    return manifest, model, cloud, observations


# ---------------------------------------------------------------------------
# commands


@main.command()
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scale", type=float, default=None,
              help="Fix the ground-truth scale (mm per scan unit).")
@click.option("--noise", type=float, default=0.0, show_default=True,
              help="Corner detection noise, pixels (sigma).")
@click.option("--preset", type=click.Choice(["random", "identity"]), default="random",
              show_default=True)
@click.option("--sfm-format", type=click.Choice(["binary", "text"]), default="binary",
              show_default=True)
@click.option("--sh-degree", type=int, default=1, show_default=True)
@click.option("--cameras", "n_cameras", type=int, default=14, show_default=True)
@click.option("--camera-model", type=click.Choice(
    ["pinhole", "simple_pinhole", "simple_radial", "opencv_radial"]),
    default="pinhole", show_default=True)
@_fail_cleanly
def synth(out, seed, scale, noise, preset, sfm_format, sh_degree, n_cameras,
          camera_model):
    """Generate a synthetic capture bundle with known ground truth."""
    scene = generate(seed=seed, scale=scale, noise_px=noise, preset=preset,
                     sh_degree=sh_degree, n_cameras=n_cameras,
                     camera_model=camera_model)
    write_bundle(scene, out, sfm_format=sfm_format)
    _emit({
        "out": str(out), "seed": seed, "preset": preset,
        "ground_truth": scene.ground_truth_doc(),
    })


@main.command()
@click.argument("bundle", type=click.Path(exists=True, path_type=Path))
@_fail_cleanly
def ingest(bundle):
    """Parse and validate a capture bundle, reporting its contents."""
    manifest, model, cloud, observations = _load_bundle(bundle)
    tags = sorted({o.tag_id for o in observations})
    _emit({
        "bundle": str(bundle),
        "sfm": {"cameras": len(model.cameras), "images": len(model.images),
                "points": len(model.points)},
        "splat": {"gaussians": len(cloud), "sh_degree": cloud.sh_degree,
                  "source_id": cloud.source_id},
        "detections": {"observations": len(observations), "tag_ids": tags},
        "manifest": manifest,
    })


@main.command()
@click.option("--bundle", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="Assembly GLB.")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="Assembly sidecar manifest.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
@click.option("--rms-warn", type=float, default=5.0, show_default=True,
              help="Alignment rms threshold for warnings, mm.")
@_fail_cleanly
def register(bundle, model_path, manifest_path, out, rms_warn):
    """Recover the scan-to-CAD transform and joint values from a bundle."""
    _, model, _, observations = _load_bundle(bundle)
    asm = load_assembly(model_path, manifest_path)
    result = align_splat_to_cad(model, observations, asm, rms_warn_mm=rms_warn)
    estimates = resolve_constraints(model, observations, asm, result.transform)
    _emit({
        "transform": result.transform.to_doc(),
        "rms_mm": result.rms_mm,
        "n_tags": result.n_tags,
        "n_views": result.n_views,
        "warnings": list(result.warnings),
        "joints": {e.dof_id: e.value for e in estimates if e.status == "resolved"},
        "joint_estimates": [
            {"dof_id": e.dof_id, "status": e.status, "value": e.value,
             "residual_mm": e.residual_mm, "out_of_limits": e.out_of_limits,
             "reason": e.reason}
            for e in estimates
        ],
    }, out)


@main.command()
@click.option("--splat", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--registration", "reg_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Output of `register` (omit if already in CAD mm).")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--tau", type=float, default=30.0, show_default=True,
              help="Keep gaussians within this distance of the meshes, mm.")
@click.option("--slab/--no-slab", default=True, show_default=True,
              help="Also keep the work surface under the hardware.")
@click.option("--slab-z", nargs=2, type=float, default=(-20.0, 5.0), show_default=True)
@click.option("--slab-margin", type=float, default=100.0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_fail_cleanly
def prune(splat, reg_path, model_path, manifest_path, tau, slab, slab_z,
          slab_margin, out):
    """Apply the privacy mask to a splat and write the pruned PLY."""
    cloud = parse_splat_ply(Path(splat).read_bytes())
    asm = load_assembly(model_path, manifest_path)
    joints = {}
    if reg_path is not None:
        reg = json.loads(Path(reg_path).read_text())
        xf = SimilarityTransform.from_doc(reg["transform"])
        joints = {k: float(v) for k, v in reg.get("joints", {}).items()}
        cloud = transform_splat(cloud, xf)
    meshed = [(p.mesh, part_world_transform(asm, pid, {}), pid)
              for pid, p in asm.parts.items() if p.mesh is not None]
    index = build_index(meshed)
    extra = []
    if joints:
        posed = [(p.mesh, part_world_transform(asm, pid, joints), pid)
                 for pid, p in asm.parts.items() if p.mesh is not None]
        extra.append(build_index(posed))
    workspace = WorkspaceSlab(slab_z[0], slab_z[1], slab_margin) if slab else None
    mask = compute_background_mask(cloud, index, tau, workspace, extra_indices=extra)
    pruned = prune_by_mask(cloud, mask)
    Path(out).write_bytes(write_splat_ply(pruned))
    _emit({"out": str(out), "total": len(cloud), "kept": len(pruned),
           "dropped": len(cloud) - len(pruned), "tau_mm": tau})


@main.command()
@click.option("--detections", type=click.Path(exists=True, path_type=Path),
              required=True, help="Per-frame tag detections with camera intrinsics.")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--joints", "joints_json", type=str, default=None,
              help="Joint values as JSON, e.g. '{\"slide_x\": 42.0}'.")
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_fail_cleanly
def localize(detections, model_path, manifest_path, joints_json, out):
    """Estimate a camera pose for every frame of a video's detections."""
    cam, frames = parse_video_detections_doc(json.loads(Path(detections).read_text()))
    asm = load_assembly(model_path, manifest_path)
    joints = json.loads(joints_json) if joints_json else {}
    results = localize_video(frames, asm, cam, joints)
    _emit({
        "camera": camera_doc(cam),
        "n_frames": len(results),
        "n_localized": sum(1 for r in results if r.localized),
        "frames": [
            {
                "frame_index": r.frame_index,
                "localized": r.localized,
                "pose": None if r.localization is None else {
                    "rotation": r.localization.pose.rotation.tolist(),
                    "translation": r.localization.pose.translation.tolist(),
                    "rms_px": r.localization.rms_px,
                    "n_points": r.localization.n_points,
                },
                "error": r.error,
            }
            for r in results
        ],
    }, out)


@main.group()
def scene():
    """Scene document assembly."""


@scene.command("build")
@click.option("--model", "model_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--registration", "reg_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="Output of `register`.")
@click.option("--splat-ref", type=str, required=True,
              help="Content ref (or path) of the pruned splat.")
@click.option("--created-by", type=str, default="cli")
@click.option("--out", type=click.Path(path_type=Path), default=None)
@_fail_cleanly
def scene_build(model_path, manifest_path, reg_path, splat_ref, created_by, out):
    """Assemble an offline scene document from pipeline outputs."""
    import hashlib

    asm = load_assembly(model_path, manifest_path)
    reg = json.loads(Path(reg_path).read_text())
    assembly_ref = asm.content_hash()
    scene_id = hashlib.sha256(
        f"{assembly_ref}|{splat_ref}|{created_by}".encode()).hexdigest()[:32]
    doc = {
        "scene_id": scene_id,
        "assembly_ref": assembly_ref,
        "created_by": created_by,
        "created_at": 0.0,
        "splats": [{
            "splat_ref": splat_ref,
            "transform": reg["transform"],
            "capture_time": 0.0,
            "joint_values": reg.get("joints", {}),
            "rms_mm": reg.get("rms_mm", 0.0),
        }],
        "videos": [],
        "pending_capture": False,
        "version": 1,
    }
    _emit(doc, out)


@main.group()
def query():
    """Read queries against a service storage root."""


@query.command("part")
@click.option("--store", "store_root", type=click.Path(exists=True, path_type=Path),
              required=True, help="Service storage root (holds store.db, blobs/).")
@click.option("--assembly", "assembly_ref", type=str, required=True)
@click.option("--part", "part_id", type=str, required=True)
@_fail_cleanly
def query_part(store_root, assembly_ref, part_id):
    """Docs and resolved issues for a part, straight from the event log."""
    from .service.storage import BlobStore, Database

    db = Database(Path(store_root) / "store.db")
    blobs = BlobStore(Path(store_root) / "blobs")
    events = db.load_events()
    assemblies = {}
    for event in events:
        if event["kind"] != "assembly_registered":
            continue
        data = event["data"]
        assemblies[data["assembly_ref"]] = load_assembly(
            blobs.get(data["glb_ref"]), blobs.get(data["manifest_ref"]))
    store = SceneStore.replay(events, assemblies)
    docs, issues = store.query_by_part(assembly_ref, part_id)
    _emit({
        "part_id": part_id,
        "docs": [{"parts": list(d.part_ids), "title": d.title, "url": d.url}
                 for d in docs],
        "issues": [i.to_doc() for i in issues],
    })
    db.close()


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              default=None)
@click.option("--host", type=str, default=None)
@click.option("--port", type=int, default=None)
@click.option("--storage-root", type=click.Path(path_type=Path), default=None)
@_fail_cleanly
def serve(config_path, host, port, storage_root):
    """Launch the coordination service."""
    import uvicorn

    from .service import ServiceConfig, create_app

    config = ServiceConfig.load(config_path)
    if host is not None:
        config.host = host
    if port is not None:
        config.port = port
    if storage_root is not None:
        config.storage_root = str(storage_root)
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")


if __name__ == "__main__":
    main()
