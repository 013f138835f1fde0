"""HTTP coordination service: scenes, issues, gestures, uploads, part queries.

Thin adapters over `SceneStore` plus an asynchronous job lane for capture
processing. All state changes flow through the store's event log, which is
persisted per-event to sqlite; restarting the service replays the log.
"""
from __future__ import annotations

import hashlib
import uuid
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .. import __version__
from ..assembly import load_assembly
from ..errors import (BindingError, ConflictError, ParseError, SceneLinkError,
                      SchemaError, UnknownIdError, ValidationError)
from ..scene import Gesture, SceneStore, SplatPlacement, VideoAnnotation
from .config import ServiceConfig
from .jobs import (JobManager, make_splat_placement, make_video_annotation,
                   process_splat_inputs, process_video, validate_capture_bundle)
from .storage import BlobStore, Database

_BAD_REQUEST = (ValidationError, SchemaError, ParseError, BindingError)


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    root = Path(config.storage_root)
    db = Database(root / "store.db")
    db.interrupt_unfinished_jobs()
    blobs = BlobStore(root / "blobs")
    uploads = BlobStore(root / "uploads")

    events = db.load_events()
    assemblies = {}
    for event in events:
        if event["kind"] != "assembly_registered":
            continue
        data = event["data"]
        assemblies[data["assembly_ref"]] = load_assembly(
            blobs.get(data["glb_ref"]), blobs.get(data["manifest_ref"]))
    store = SceneStore.replay(events, assemblies)
    store.set_sink(db.append_event)
    jobs = JobManager(db, max_workers=config.max_workers)

    app = FastAPI(title="scenelink coordination service", version=__version__)
    app.state.store = store
    app.state.db = db
    app.state.blobs = blobs
    app.state.uploads = uploads
    app.state.jobs = jobs
    app.state.config = config

    @app.exception_handler(SceneLinkError)
    async def scenelink_error_handler(request: Request, exc: SceneLinkError):
        if isinstance(exc, UnknownIdError):
            code = 404
        elif isinstance(exc, ConflictError):
            code = 409
        elif isinstance(exc, _BAD_REQUEST):
            code = 400
        else:
            code = 500
        return JSONResponse(status_code=code,
                            content={"error": type(exc).__name__, "detail": str(exc)})

    @app.on_event("shutdown")
    def shutdown():
        jobs.shutdown(wait=True)
        db.close()

    # -- health ------------------------------------------------------------

    @app.get("/health")
    def health():
        from ..kernels import resolve_backend

        return {"status": "ok", "version": __version__,
                "kernel_backend": resolve_backend(),
                "events": len(store.events)}

    # -- assemblies ----------------------------------------------------------

    @app.post("/assemblies")
    async def post_assembly(request: Request):
        form = await request.form()
        model_file = form.get("model")
        manifest_file = form.get("manifest")
        if model_file is None or manifest_file is None:
            raise SchemaError("multipart fields 'model' and 'manifest' are required")
        glb = await model_file.read()
        manifest_bytes = await manifest_file.read()
        asm = load_assembly(glb, manifest_bytes)
        glb_ref = blobs.put(glb)
        manifest_ref = blobs.put(manifest_bytes)
        ref = store.register_assembly(asm, glb_ref, manifest_ref)
        return {"assembly_ref": ref, "glb_ref": glb_ref, "manifest_ref": manifest_ref,
                "parts": sorted(asm.parts)}

    @app.get("/assemblies/{ref}")
    def get_assembly(ref: str):
        asm = store.assembly(ref)
        glb_ref, manifest_ref = store.assembly_blobs.get(ref, ("", ""))
        return {
            "assembly_ref": ref, "glb_ref": glb_ref, "manifest_ref": manifest_ref,
            "root": asm.root,
            "parts": {
                pid: {"name": p.name, "parent": p.parent, "children": list(p.children)}
                for pid, p in sorted(asm.parts.items())
            },
            "dofs": [
                {"dof_id": d.dof_id, "part": d.moving_part, "kind": d.kind,
                 "axis": d.axis.tolist(), "limits": list(d.limits)}
                for d in asm.dofs
            ],
            "tags": [
                {"tag_id": t.tag_id, "role": t.role, "part": t.attached_part}
                for t in asm.tags
            ],
        }

    @app.get("/assemblies/{ref}/parts/{part_id}/docs")
    def get_part_docs(ref: str, part_id: str):
        docs, _ = store.query_by_part(ref, part_id)
        return {"part_id": part_id,
                "docs": [{"parts": list(d.part_ids), "title": d.title, "url": d.url}
                         for d in docs]}

    @app.get("/assemblies/{ref}/parts/{part_id}/issues")
    def get_part_issues(ref: str, part_id: str):
        _, issues = store.query_by_part(ref, part_id)
        return {"part_id": part_id, "issues": [i.to_doc() for i in issues]}

    # -- scenes --------------------------------------------------------------

    @app.post("/scenes")
    async def post_scene(request: Request):
        body = await request.json()
        scene = store.create_scene(body["assembly_ref"],
                                   body.get("created_by", "anonymous"),
                                   scene_id=body.get("scene_id"))
        return scene.to_doc()

    @app.get("/scenes/{scene_id}")
    def get_scene(scene_id: str):
        return store.scene(scene_id).to_doc()

    @app.post("/scenes/{scene_id}/captures")
    async def post_capture(scene_id: str, request: Request,
                           kind: str = "splat_inputs",
                           element_id: str | None = None):
        scene = store.scene(scene_id)
        if element_id is not None:
            element = store.element(element_id)
            if element.gesture is None or element.gesture.kind != "request":
                raise ValidationError(f"element {element_id!r} is not a request")
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/"):
            form = await request.form()
            upload = form.get("bundle")
            if upload is None:
                raise SchemaError("multipart field 'bundle' is required")
            bundle = await upload.read()
        else:
            bundle = await request.body()
        if not bundle:
            raise SchemaError("empty capture bundle")
        validate_capture_bundle(bundle, kind)

        upload_ref = uploads.put(bundle)
        fingerprint = hashlib.sha256(
            f"{scene_id}|{kind}|{upload_ref}|{element_id or ''}".encode()).hexdigest()
        existing = db.find_job(fingerprint)
        if existing is not None:
            return JSONResponse(status_code=200,
                                content={"job_id": existing["job_id"],
                                         "status": existing["status"],
                                         "deduplicated": True})
        job_id = uuid.uuid4().hex
        asm = store.assembly(scene.assembly_ref)

        if kind == "splat_inputs":
            def run() -> dict:
                try:
                    result = process_splat_inputs(bundle, asm, config)
                except SceneLinkError as exc:
                    if element_id is not None:
                        store.fulfill_request(element_id, upload_ref, status="error",
                                              diagnostics=str(exc))
                    raise
                splat_ref = blobs.put(result.pop("splat_bytes"))
                placement = make_splat_placement(splat_ref, result)
                if element_id is not None:
                    store.fulfill_request(element_id, splat_ref,
                                          artifact_kind="splat", placement=placement)
                else:
                    store.add_splat(scene_id, placement)
                result["transform"] = result["transform"].to_doc()
                result["splat_ref"] = splat_ref
                result["scene_id"] = scene_id
                result["upload_ref"] = upload_ref
                result["placement"] = placement.to_doc()
                return result
        else:
            def run() -> dict:
                joints = store.scene(scene_id).latest_joints()
                try:
                    result = process_video(bundle, asm, joints)
                except SceneLinkError as exc:
                    if element_id is not None:
                        store.fulfill_request(element_id, upload_ref, status="error",
                                              diagnostics=str(exc))
                    raise
                clip_ref = blobs.put(result.pop("clip_bytes"))
                annotation = make_video_annotation(clip_ref, result)
                if element_id is not None:
                    store.fulfill_request(element_id, clip_ref,
                                          artifact_kind="video", video=annotation)
                else:
                    store.add_video(scene_id, annotation)
                result["clip_ref"] = clip_ref
                result["scene_id"] = scene_id
                result["upload_ref"] = upload_ref
                result["annotation"] = annotation.to_doc()
                return result

        jobs.submit(job_id, fingerprint, kind, run)
        return JSONResponse(status_code=202, content={"job_id": job_id,
                                                      "status": "pending"})

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        return db.get_job(job_id)

    # -- issues --------------------------------------------------------------

    @app.post("/scenes/{scene_id}/issues")
    async def post_issue(scene_id: str, request: Request):
        body = await request.json()
        issue = store.open_issue(scene_id, body.get("title", ""),
                                 body.get("created_by", "anonymous"),
                                 issue_id=body.get("issue_id"))
        return issue.to_doc()

    def _element_doc(element) -> dict:
        doc = element.to_doc()
        gesture = element.gesture
        if gesture is not None and gesture.kind == "request" and \
                element.fulfillment is None:
            issue = store.issue(element.issue_id)
            doc["capture_url"] = (
                f"/scenes/{issue.scene_id}/captures"
                f"?kind={'splat_inputs' if gesture.request_kind == 'splat' else 'video'}"
                f"&element_id={element.element_id}")
        return doc

    @app.get("/issues/{issue_id}")
    def get_issue(issue_id: str):
        issue = store.issue(issue_id)
        doc = issue.to_doc()
        doc["timeline"] = [_element_doc(e) for e in store.timeline(issue_id)]
        return doc

    @app.post("/issues/{issue_id}/gestures")
    async def post_gesture(issue_id: str, request: Request):
        body = await request.json()
        expected_version = body.pop("expected_version", None)
        body.setdefault("gesture_id", uuid.uuid4().hex)
        gesture = Gesture.from_doc(body)
        element, warnings = store.author_gesture(issue_id, gesture,
                                                 expected_version=expected_version)
        doc = _element_doc(element)
        doc["warnings"] = list(warnings)
        return doc

    @app.post("/issues/{issue_id}/messages")
    async def post_message(issue_id: str, request: Request):
        body = await request.json()
        element = store.post_message(issue_id, body.get("author", "anonymous"),
                                     body.get("text", ""))
        return _element_doc(element)

    @app.post("/elements/{element_id}/replies")
    async def post_reply(element_id: str, request: Request):
        body = await request.json()
        element = store.add_reply(element_id, body.get("author", "anonymous"),
                                  body.get("text", ""))
        return _element_doc(element)

    @app.get("/elements/{element_id}")
    def get_element(element_id: str):
        return _element_doc(store.element(element_id))

    @app.post("/elements/{element_id}/fulfill")
    async def post_fulfill(element_id: str, request: Request):
        body = await request.json()
        job_id = body.get("job_id")
        if job_id is None:
            raise ValidationError("fulfillment requires a job_id")
        job = db.get_job(job_id)
        if job["status"] in ("pending", "running"):
            raise ConflictError(f"job {job_id!r} is still {job['status']}")
        if job["status"] == "error":
            element = store.fulfill_request(
                element_id, job["detail"].get("upload_ref", ""), status="error",
                diagnostics=job["detail"].get("error", "capture processing failed"))
            return _element_doc(element)
        detail = job["detail"]
        if job["kind"] == "splat_inputs":
            placement = SplatPlacement.from_doc(detail["placement"])
            element = store.fulfill_request(element_id, placement.splat_ref,
                                            artifact_kind="splat", placement=placement)
        else:
            annotation = VideoAnnotation.from_doc(detail["annotation"])
            element = store.fulfill_request(element_id, annotation.clip_ref,
                                            artifact_kind="video", video=annotation)
        return _element_doc(element)

    @app.post("/issues/{issue_id}/resolve")
    async def post_resolve(issue_id: str):
        return store.resolve_issue(issue_id).to_doc()

    @app.get("/issues/{issue_id}/recontextualize")
    def get_recontextualize(issue_id: str, scene: str):
        placed = store.recontextualize(issue_id, scene)
        return {"issue_id": issue_id, "scene_id": scene,
                "gestures": [p.to_doc() for p in placed]}

    # -- blobs ---------------------------------------------------------------

    @app.get("/blobs/{ref}")
    def get_blob(ref: str):
        if ref not in store.published_refs():
            raise UnknownIdError(f"unknown blob {ref!r}")
        return Response(content=blobs.get(ref), media_type="application/octet-stream")

    return app
