"""Scenes, gestures, timelines, and issues: the shared record two parties
troubleshoot against, indexed by CAD part.

State lives in a `SceneStore`, an event-sourced aggregate store: every
mutation appends one event and is applied by a pure handler, so replaying the
log reconstructs identical state. The coordination service persists the log;
tests replay it directly.
"""
from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import Assembly, docs_for_part, part_world_transform
from .errors import ConflictError, UnknownIdError, ValidationError
from .transforms import RigidTransform, SimilarityTransform, mat_to_quat, mat_to_rotvec

GESTURE_KINDS = ("pointing", "move", "request", "action")
REQUEST_KINDS = ("video", "splat")
ACTION_KINDS = ("tighten", "loosen", "probe")


@dataclass(frozen=True)
class Gesture:
    gesture_id: str
    author: str
    kind: str
    anchor_part: str
    text: str = ""
    anchor_point: tuple[float, float, float] | None = None  # part-local (pointing/action)
    move_target: dict | None = None  # rigid transform doc, part-local (move)
    request_kind: str | None = None
    action_kind: str | None = None

    def __post_init__(self):
        if self.kind not in GESTURE_KINDS:
            raise ValidationError(f"unknown gesture kind {self.kind!r}")
        needs = {
            "pointing": {"anchor_point"},
            "action": {"anchor_point", "action_kind"},
            "move": {"move_target"},
            "request": {"request_kind"},
        }[self.kind]
        for name in ("anchor_point", "move_target", "request_kind", "action_kind"):
            value = getattr(self, name)
            if name in needs and value is None:
                raise ValidationError(f"{self.kind} gesture requires {name}")
            if name not in needs and value is not None:
                raise ValidationError(f"{self.kind} gesture must not carry {name}")
        if self.request_kind is not None and self.request_kind not in REQUEST_KINDS:
            raise ValidationError(f"unknown request kind {self.request_kind!r}")
        if self.action_kind is not None and self.action_kind not in ACTION_KINDS:
            raise ValidationError(f"unknown action kind {self.action_kind!r}")
        if self.anchor_point is not None:
            object.__setattr__(self, "anchor_point",
                               tuple(float(v) for v in self.anchor_point))

    def move_transform(self) -> RigidTransform:
        doc = self.move_target
        return RigidTransform(np.array(doc["rotation"]), np.array(doc["translation"]))

    def to_doc(self) -> dict:
        doc = {"gesture_id": self.gesture_id, "author": self.author, "kind": self.kind,
               "anchor_part": self.anchor_part, "text": self.text}
        if self.anchor_point is not None:
            doc["anchor_point"] = list(self.anchor_point)
        if self.move_target is not None:
            doc["move_target"] = self.move_target
        if self.request_kind is not None:
            doc["request_kind"] = self.request_kind
        if self.action_kind is not None:
            doc["action_kind"] = self.action_kind
        return doc

    @staticmethod
    def from_doc(doc: dict) -> "Gesture":
        return Gesture(
            gesture_id=doc["gesture_id"], author=doc["author"], kind=doc["kind"],
            anchor_part=doc["anchor_part"], text=doc.get("text", ""),
            anchor_point=tuple(doc["anchor_point"]) if "anchor_point" in doc else None,
            move_target=doc.get("move_target"),
            request_kind=doc.get("request_kind"), action_kind=doc.get("action_kind"))


def move_target_doc(xf: RigidTransform) -> dict:
    return {"rotation": xf.R.tolist(), "translation": xf.t.tolist()}


@dataclass(frozen=True)
class Reply:
    author: str
    created_at: float
    text: str

    def to_doc(self) -> dict:
        return {"author": self.author, "created_at": self.created_at, "text": self.text}


@dataclass(frozen=True)
class Fulfillment:
    artifact_ref: str
    status: str  # ok | error
    diagnostics: str = ""
    fulfilled_at: float = 0.0

    def to_doc(self) -> dict:
        return {"artifact_ref": self.artifact_ref, "status": self.status,
                "diagnostics": self.diagnostics, "fulfilled_at": self.fulfilled_at}


@dataclass(frozen=True)
class TimelineElement:
    element_id: str
    issue_id: str
    seq: int
    author: str
    created_at: float
    gesture: Gesture | None = None
    message: str | None = None  # plain text element when gesture is None
    replies: tuple[Reply, ...] = ()
    fulfillment: Fulfillment | None = None

    def to_doc(self) -> dict:
        return {
            "element_id": self.element_id, "issue_id": self.issue_id, "seq": self.seq,
            "author": self.author, "created_at": self.created_at,
            "gesture": self.gesture.to_doc() if self.gesture else None,
            "message": self.message,
            "replies": [r.to_doc() for r in self.replies],
            "fulfillment": self.fulfillment.to_doc() if self.fulfillment else None,
        }


@dataclass(frozen=True)
class SplatPlacement:
    splat_ref: str
    transform: SimilarityTransform
    capture_time: float
    joint_values: dict[str, float] = field(default_factory=dict)
    rms_mm: float = 0.0

    def to_doc(self) -> dict:
        return {"splat_ref": self.splat_ref, "transform": self.transform.to_doc(),
                "capture_time": self.capture_time, "joint_values": dict(self.joint_values),
                "rms_mm": self.rms_mm}

    @staticmethod
    def from_doc(doc: dict) -> "SplatPlacement":
        return SplatPlacement(doc["splat_ref"], SimilarityTransform.from_doc(doc["transform"]),
                              doc["capture_time"], dict(doc.get("joint_values", {})),
                              doc.get("rms_mm", 0.0))


@dataclass(frozen=True)
class VideoAnnotation:
    clip_ref: str
    frame_poses: tuple  # (frame_index, pose doc or None)
    placement_pose: dict | None  # pose of the first localized frame

    def __post_init__(self):
        localized = [p for _, p in self.frame_poses if p is not None]
        if bool(localized) != (self.placement_pose is not None):
            raise ValidationError(
                "placement_pose must be present exactly when a frame localized")

    def to_doc(self) -> dict:
        return {"clip_ref": self.clip_ref,
                "frame_poses": [[i, p] for i, p in self.frame_poses],
                "placement_pose": self.placement_pose}

    @staticmethod
    def from_doc(doc: dict) -> "VideoAnnotation":
        return VideoAnnotation(doc["clip_ref"],
                               tuple((int(i), p) for i, p in doc["frame_poses"]),
                               doc.get("placement_pose"))


def pose_doc(rotation_wxyz, translation) -> dict:
    return {"rotation": [float(v) for v in rotation_wxyz],
            "translation": [float(v) for v in translation]}


@dataclass
class Scene:
    scene_id: str
    assembly_ref: str
    created_by: str
    created_at: float
    splats: list[SplatPlacement] = field(default_factory=list)
    videos: list[VideoAnnotation] = field(default_factory=list)
    pending_capture: bool = True
    version: int = 0

    def to_doc(self) -> dict:
        return {
            "scene_id": self.scene_id, "assembly_ref": self.assembly_ref,
            "created_by": self.created_by, "created_at": self.created_at,
            "splats": [s.to_doc() for s in self.splats],
            "videos": [v.to_doc() for v in self.videos],
            "pending_capture": self.pending_capture, "version": self.version,
        }

    def latest_joints(self) -> dict[str, float]:
        if not self.splats:
            return {}
        return dict(max(self.splats, key=lambda s: s.capture_time).joint_values)


@dataclass
class Issue:
    issue_id: str
    scene_id: str
    title: str
    created_by: str
    created_at: float
    status: str = "open"  # open | resolved
    resolved_at: float | None = None
    element_ids: list[str] = field(default_factory=list)
    part_index: set[str] = field(default_factory=set)
    next_seq: int = 1
    version: int = 0

    def to_doc(self) -> dict:
        return {
            "issue_id": self.issue_id, "scene_id": self.scene_id, "title": self.title,
            "created_by": self.created_by, "created_at": self.created_at,
            "status": self.status, "resolved_at": self.resolved_at,
            "elements": list(self.element_ids),
            "part_index": sorted(self.part_index), "version": self.version,
        }


@dataclass(frozen=True)
class PlacedGesture:
    """A gesture re-anchored into a target scene: world poses for rendering."""

    element_id: str
    gesture: Gesture
    part_world: dict  # pose doc of the anchor part under target joints
    world_point: tuple[float, float, float] | None = None
    world_transform: dict | None = None  # move gestures: part_world ∘ move_target

    def to_doc(self) -> dict:
        return {
            "element_id": self.element_id, "gesture": self.gesture.to_doc(),
            "part_world": self.part_world,
            "world_point": list(self.world_point) if self.world_point else None,
            "world_transform": self.world_transform,
        }


class SceneStore:
    """Event-sourced store for scenes, issues, and timeline elements.

    Mutations serialize on one lock (single-writer semantics) and append to
    `self.events`; `apply_event` is the only place state changes, so feeding a
    recorded log through `replay` rebuilds the exact store.
    """

    def __init__(self, clock=time.time, id_factory=None):
        self._lock = threading.RLock()
        self._clock = clock
        self._new_id = id_factory or (lambda: uuid.uuid4().hex)
        self._sink = None  # durable event writer installed by the service
        self.events: list[dict] = []
        self.assemblies: dict[str, Assembly] = {}
        self.assembly_blobs: dict[str, tuple[str, str]] = {}  # ref -> (glb ref, manifest ref)
        self.scenes: dict[str, Scene] = {}
        self.issues: dict[str, Issue] = {}
        self.elements: dict[str, TimelineElement] = {}

    # -- event plumbing ----------------------------------------------------

    def set_sink(self, sink) -> None:
        self._sink = sink

    def _emit(self, kind: str, data: dict) -> dict:
        event = {"seq": len(self.events) + 1, "kind": kind, "at": self._clock(),
                 "data": data}
        if self._sink is not None:
            self._sink(event)  # persist before applying: committed or nothing
        self.apply_event(event)
        self.events.append(event)
        return event

    def apply_event(self, event: dict) -> None:
        handler = getattr(self, f"_on_{event['kind']}")
        handler(event["data"], event["at"])

    @staticmethod
    def replay(events, assemblies: dict[str, Assembly]) -> "SceneStore":
        """Rebuild a store from an event log; assemblies are supplied by ref
        since their geometry lives in the blob store."""
        store = SceneStore()
        store.assemblies = dict(assemblies)
        for event in events:
            store.apply_event(event)
            store.events.append(event)
        return store

    # -- assemblies ----------------------------------------------------------

    def register_assembly(self, asm: Assembly, glb_ref: str = "",
                          manifest_ref: str = "") -> str:
        with self._lock:
            ref = asm.content_hash()
            if ref not in self.assemblies:
                self.assemblies[ref] = asm
                self._emit("assembly_registered",
                           {"assembly_ref": ref, "glb_ref": glb_ref,
                            "manifest_ref": manifest_ref})
            return ref

    def _on_assembly_registered(self, data: dict, at: float) -> None:
        self.assembly_blobs[data["assembly_ref"]] = (data.get("glb_ref", ""),
                                                     data.get("manifest_ref", ""))

    def assembly(self, assembly_ref: str) -> Assembly:
        asm = self.assemblies.get(assembly_ref)
        if asm is None:
            raise UnknownIdError(f"unknown assembly {assembly_ref!r}")
        return asm

    # -- scenes --------------------------------------------------------------

    def create_scene(self, assembly_ref: str, created_by: str,
                     scene_id: str | None = None) -> Scene:
        with self._lock:
            self.assembly(assembly_ref)
            scene_id = scene_id or self._new_id()
            if scene_id in self.scenes:
                raise ConflictError(f"scene {scene_id!r} already exists")
            self._emit("scene_created", {"scene_id": scene_id,
                                         "assembly_ref": assembly_ref,
                                         "created_by": created_by})
            return self.scenes[scene_id]

    def _on_scene_created(self, data: dict, at: float) -> None:
        self.scenes[data["scene_id"]] = Scene(
            scene_id=data["scene_id"], assembly_ref=data["assembly_ref"],
            created_by=data["created_by"], created_at=at)

    def scene(self, scene_id: str) -> Scene:
        scene = self.scenes.get(scene_id)
        if scene is None:
            raise UnknownIdError(f"unknown scene {scene_id!r}")
        return scene

    def add_splat(self, scene_id: str, placement: SplatPlacement) -> Scene:
        with self._lock:
            scene = self.scene(scene_id)
            if any(s.splat_ref == placement.splat_ref for s in scene.splats):
                return scene  # content-addressed: identical capture is a no-op
            self._emit("splat_added", {"scene_id": scene_id,
                                       "placement": placement.to_doc()})
            return self.scene(scene_id)

    def _on_splat_added(self, data: dict, at: float) -> None:
        scene = self.scenes[data["scene_id"]]
        scene.splats.append(SplatPlacement.from_doc(data["placement"]))
        scene.pending_capture = False
        scene.version += 1

    def add_video(self, scene_id: str, annotation: VideoAnnotation) -> Scene:
        with self._lock:
            self.scene(scene_id)
            self._emit("video_added", {"scene_id": scene_id,
                                       "annotation": annotation.to_doc()})
            return self.scene(scene_id)

    def _on_video_added(self, data: dict, at: float) -> None:
        scene = self.scenes[data["scene_id"]]
        scene.videos.append(VideoAnnotation.from_doc(data["annotation"]))
        scene.version += 1

    # -- issues ----------------------------------------------------------------

    def open_issue(self, scene_id: str, title: str, created_by: str,
                   issue_id: str | None = None) -> Issue:
        with self._lock:
            self.scene(scene_id)
            issue_id = issue_id or self._new_id()
            if issue_id in self.issues:
                raise ConflictError(f"issue {issue_id!r} already exists")
            self._emit("issue_opened", {"issue_id": issue_id, "scene_id": scene_id,
                                        "title": title, "created_by": created_by})
            return self.issues[issue_id]

    def _on_issue_opened(self, data: dict, at: float) -> None:
        self.issues[data["issue_id"]] = Issue(
            issue_id=data["issue_id"], scene_id=data["scene_id"],
            title=data["title"], created_by=data["created_by"], created_at=at)

    def issue(self, issue_id: str) -> Issue:
        issue = self.issues.get(issue_id)
        if issue is None:
            raise UnknownIdError(f"unknown issue {issue_id!r}")
        return issue

    def element(self, element_id: str) -> TimelineElement:
        element = self.elements.get(element_id)
        if element is None:
            raise UnknownIdError(f"unknown timeline element {element_id!r}")
        return element

    def timeline(self, issue_id: str) -> list[TimelineElement]:
        return [self.elements[eid] for eid in self.issue(issue_id).element_ids]

    # -- timeline ----------------------------------------------------------------

    def _validate_gesture(self, issue: Issue, gesture: Gesture) -> tuple[str, ...]:
        scene = self.scene(issue.scene_id)
        asm = self.assembly(scene.assembly_ref)
        if gesture.anchor_part not in asm.parts:
            raise ValidationError(
                f"gesture anchors to unknown part {gesture.anchor_part!r}")
        warnings = []
        if gesture.kind == "move":
            xf = gesture.move_transform()
            for dof in asm.dofs:
                if dof.moving_part != gesture.anchor_part:
                    continue
                if dof.kind == "prismatic":
                    implied = float(dof.axis @ xf.t)
                else:
                    implied = float(dof.axis @ mat_to_rotvec(xf.R))
                lo, hi = dof.limits
                if not lo <= implied <= hi:
                    warnings.append(
                        f"move implies {dof.dof_id} = {implied:.3f}, outside "
                        f"limits [{lo}, {hi}]")
        return tuple(warnings)

    def author_gesture(self, issue_id: str, gesture: Gesture,
                       expected_version: int | None = None
                       ) -> tuple[TimelineElement, tuple[str, ...]]:
        """Append a gesture element; returns (element, limit warnings)."""
        with self._lock:
            issue = self.issue(issue_id)
            if issue.status != "open":
                raise ConflictError(f"issue {issue_id!r} is resolved")
            if expected_version is not None and issue.version != expected_version:
                raise ConflictError(
                    f"stale version {expected_version}, issue is at {issue.version}")
            existing = self._find_gesture(issue, gesture.gesture_id)
            if existing is not None:
                if existing.gesture.to_doc() == gesture.to_doc():
                    return existing, ()
                raise ConflictError(
                    f"gesture {gesture.gesture_id!r} already posted with different content")
            warnings = self._validate_gesture(issue, gesture)
            element_id = self._new_id()
            self._emit("element_added", {"issue_id": issue_id, "element_id": element_id,
                                         "author": gesture.author,
                                         "gesture": gesture.to_doc(), "message": None})
            return self.elements[element_id], warnings

    def _find_gesture(self, issue: Issue, gesture_id: str) -> TimelineElement | None:
        for eid in issue.element_ids:
            el = self.elements[eid]
            if el.gesture is not None and el.gesture.gesture_id == gesture_id:
                return el
        return None

    def post_message(self, issue_id: str, author: str, text: str) -> TimelineElement:
        with self._lock:
            issue = self.issue(issue_id)
            if issue.status != "open":
                raise ConflictError(f"issue {issue_id!r} is resolved")
            element_id = self._new_id()
            self._emit("element_added", {"issue_id": issue_id, "element_id": element_id,
                                         "author": author, "gesture": None,
                                         "message": text})
            return self.elements[element_id]

    def _on_element_added(self, data: dict, at: float) -> None:
        issue = self.issues[data["issue_id"]]
        gesture = Gesture.from_doc(data["gesture"]) if data["gesture"] else None
        element = TimelineElement(
            element_id=data["element_id"], issue_id=issue.issue_id,
            seq=issue.next_seq, author=data["author"], created_at=at,
            gesture=gesture, message=data["message"])
        self.elements[element.element_id] = element
        issue.element_ids.append(element.element_id)
        issue.next_seq += 1
        issue.version += 1

    def add_reply(self, element_id: str, author: str, text: str) -> TimelineElement:
        with self._lock:
            self.element(element_id)
            self._emit("reply_added", {"element_id": element_id, "author": author,
                                       "text": text})
            return self.element(element_id)

    def _on_reply_added(self, data: dict, at: float) -> None:
        element = self.elements[data["element_id"]]
        reply = Reply(data["author"], at, data["text"])
        self.elements[element.element_id] = replace(
            element, replies=element.replies + (reply,))

    def fulfill_request(self, element_id: str, artifact_ref: str,
                        artifact_kind: str | None = None,
                        status: str = "ok", diagnostics: str = "",
                        placement: SplatPlacement | None = None,
                        video: VideoAnnotation | None = None) -> TimelineElement:
        """Record a request's delivered artifact; registers the splat placement
        or video annotation on the scene in the same event. A placement whose
        ref is already in the scene (direct upload followed by fulfillment
        from the same job) is not duplicated."""
        with self._lock:
            element = self.element(element_id)
            if element.gesture is None or element.gesture.kind != "request":
                raise ValidationError(f"element {element_id!r} is not a request")
            if element.fulfillment is not None:
                raise ConflictError(f"request {element_id!r} already fulfilled")
            if status == "ok":
                want = element.gesture.request_kind
                if artifact_kind is None:
                    artifact_kind = "splat" if placement is not None else (
                        "video" if video is not None else None)
                if want != artifact_kind:
                    raise ValidationError(
                        f"request expects a {want}, got {artifact_kind or 'nothing'}")
            issue = self.issue(element.issue_id)
            self._emit("request_fulfilled", {
                "element_id": element_id, "scene_id": issue.scene_id,
                "artifact_ref": artifact_ref, "status": status,
                "diagnostics": diagnostics,
                "placement": placement.to_doc() if placement else None,
                "video": video.to_doc() if video else None,
            })
            return self.element(element_id)

    def _on_request_fulfilled(self, data: dict, at: float) -> None:
        element = self.elements[data["element_id"]]
        self.elements[element.element_id] = replace(
            element, fulfillment=Fulfillment(data["artifact_ref"], data["status"],
                                             data["diagnostics"], at))
        scene = self.scenes[data["scene_id"]]
        if data["placement"]:
            placement = SplatPlacement.from_doc(data["placement"])
            if not any(s.splat_ref == placement.splat_ref for s in scene.splats):
                scene.splats.append(placement)
                scene.pending_capture = False
                scene.version += 1
        if data["video"]:
            video = VideoAnnotation.from_doc(data["video"])
            if not any(v.clip_ref == video.clip_ref and v.to_doc() == video.to_doc()
                       for v in scene.videos):
                scene.videos.append(video)
                scene.version += 1
        issue = self.issues[element.issue_id]
        issue.version += 1

    def resolve_issue(self, issue_id: str) -> Issue:
        """Close the issue and index it by every part its gestures anchor to.
        Resolving twice is a no-op."""
        with self._lock:
            issue = self.issue(issue_id)
            if issue.status == "resolved":
                return issue
            parts = sorted({
                self.elements[eid].gesture.anchor_part
                for eid in issue.element_ids
                if self.elements[eid].gesture is not None
            })
            self._emit("issue_resolved", {"issue_id": issue_id, "part_index": parts})
            return self.issue(issue_id)

    def _on_issue_resolved(self, data: dict, at: float) -> None:
        issue = self.issues[data["issue_id"]]
        issue.status = "resolved"
        issue.resolved_at = at
        issue.part_index = set(data["part_index"])
        issue.version += 1

    # -- queries ---------------------------------------------------------------

    def published_refs(self) -> set[str]:
        """Blob refs a client may fetch: assembly files and the (already
        privacy-filtered) splats and clips placed in scenes."""
        refs = set()
        for glb_ref, manifest_ref in self.assembly_blobs.values():
            refs.update(r for r in (glb_ref, manifest_ref) if r)
        for scene in self.scenes.values():
            refs.update(s.splat_ref for s in scene.splats)
            refs.update(v.clip_ref for v in scene.videos)
        return refs

    def query_by_part(self, assembly_ref: str, part_id: str) -> tuple[list, list[Issue]]:
        """Documentation and resolved issues touching a part (or its ancestors
        or descendants), issues newest first."""
        asm = self.assembly(assembly_ref)
        if part_id not in asm.parts:
            raise UnknownIdError(f"unknown part {part_id!r}")
        docs = docs_for_part(asm, part_id)
        related = asm.related_parts(part_id)
        issues = [
            issue for issue in self.issues.values()
            if issue.status == "resolved"
            and self.scenes[issue.scene_id].assembly_ref == assembly_ref
            and issue.part_index & related
        ]
        issues.sort(key=lambda i: i.resolved_at or 0.0, reverse=True)
        return docs, issues

    def recontextualize(self, issue_id: str, target_scene_id: str,
                        target_joints: dict[str, float] | None = None
                        ) -> list[PlacedGesture]:
        """Re-anchor an issue's gestures into another scene of the same hardware.

        Part-local anchors are passed through untouched; only the world poses
        change, via the target scene's kinematics."""
        issue = self.issue(issue_id)
        source_scene = self.scene(issue.scene_id)
        target_scene = self.scene(target_scene_id)
        if source_scene.assembly_ref != target_scene.assembly_ref:
            raise ValidationError(
                "incompatible assemblies: "
                f"{source_scene.assembly_ref[:12]} != {target_scene.assembly_ref[:12]}")
        asm = self.assembly(target_scene.assembly_ref)
        joints = target_scene.latest_joints() if target_joints is None else target_joints

        placed = []
        for eid in issue.element_ids:
            element = self.elements[eid]
            gesture = element.gesture
            if gesture is None:
                continue
            world = part_world_transform(asm, gesture.anchor_part, joints)
            world_doc = pose_doc(mat_to_quat(world.R), world.t)
            world_point = None
            world_transform = None
            if gesture.anchor_point is not None:
                world_point = tuple(
                    float(v) for v in world.apply(np.array(gesture.anchor_point)))
            if gesture.move_target is not None:
                target = world.compose(gesture.move_transform())
                world_transform = pose_doc(mat_to_quat(target.R), target.t)
            placed.append(PlacedGesture(element.element_id, gesture, world_doc,
                                        world_point, world_transform))
        return placed
