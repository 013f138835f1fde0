"""CAD assemblies: a part tree loaded from a glTF binary container plus a
sidecar manifest carrying fiducial-tag anchors, degree-of-freedom specs, and
documentation links.

Only node hierarchy, triangle positions, and indices are consumed from the
model file. CAD space is millimeters throughout; files authored in meters
(the glTF convention, and the default) are scaled x1000 at load. The manifest
itself is always in millimeters. Tag corners and DOF axes/origins are
expressed in the local frame of the part they attach to.
"""
from __future__ import annotations

import difflib
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BindingError, IntegrityError, ParseError, ValidationError
from .meshdist import TriangleMesh
from .transforms import RigidTransform, axis_angle_mat, quat_to_mat

GROUNDING = "grounding"
CONSTRAINT = "constraint"

_COPLANAR_TOL_MM = 1e-3
_SIDE_TOL_MM = 1e-3


@dataclass(frozen=True)
class Part:
    part_id: str
    name: str
    parent: str | None
    local_transform: RigidTransform
    mesh: TriangleMesh | None = None
    children: tuple[str, ...] = ()


@dataclass(frozen=True)
class TagAnchor:
    tag_id: int
    role: str  # grounding | constraint
    attached_part: str
    corners: np.ndarray  # (4, 3) mm, part-local, detector corner order
    side_length: float

    def __post_init__(self):
        corners = np.asarray(self.corners, dtype=np.float64).reshape(4, 3)
        object.__setattr__(self, "corners", corners)
        if self.role not in (GROUNDING, CONSTRAINT):
            raise ValidationError(f"tag {self.tag_id}: unknown role {self.role!r}")
        centered = corners - corners.mean(axis=0)
        # smallest singular value = max deviation direction from the best-fit plane
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[-1] > _COPLANAR_TOL_MM:
            raise ValidationError(
                f"tag {self.tag_id}: corners are not coplanar within {_COPLANAR_TOL_MM} mm")
        for i in range(4):
            side = np.linalg.norm(corners[(i + 1) % 4] - corners[i])
            if abs(side - self.side_length) > _SIDE_TOL_MM:
                raise ValidationError(
                    f"tag {self.tag_id}: side {i} measures {side:.6f} mm, "
                    f"expected {self.side_length} mm")

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)


@dataclass(frozen=True)
class DofSpec:
    dof_id: str
    moving_part: str
    kind: str  # prismatic | revolute
    axis: np.ndarray  # unit vector, moving part's local frame
    origin: np.ndarray  # revolute rotation center, local frame
    constraint_tag: int
    nominal_tag_center: np.ndarray  # world mm at joint value 0
    limits: tuple[float, float]

    def __post_init__(self):
        if self.kind not in ("prismatic", "revolute"):
            raise ValidationError(f"dof {self.dof_id}: unknown kind {self.kind!r}")
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        n = np.linalg.norm(axis)
        if abs(n - 1.0) > 1e-6:
            raise ValidationError(f"dof {self.dof_id}: axis must be unit length")
        object.__setattr__(self, "axis", axis / n)
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "nominal_tag_center",
                           np.asarray(self.nominal_tag_center, dtype=np.float64).reshape(3))
        lo, hi = self.limits
        if not lo <= hi:
            raise ValidationError(f"dof {self.dof_id}: limits must satisfy min <= max")
        object.__setattr__(self, "limits", (float(lo), float(hi)))


@dataclass(frozen=True)
class DocLink:
    part_ids: tuple[str, ...]
    title: str
    url: str

    def __post_init__(self):
        if not self.part_ids:
            raise ValidationError(f"doc link {self.title!r} references no parts")
        object.__setattr__(self, "part_ids", tuple(self.part_ids))


@dataclass
class Assembly:
    parts: dict[str, Part]
    root: str
    tags: list[TagAnchor] = field(default_factory=list)
    dofs: list[DofSpec] = field(default_factory=list)
    docs: list[DocLink] = field(default_factory=list)
    joint_values: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self._validate_tree()
        for tag in self.tags:
            self._require_part(tag.attached_part, f"tag {tag.tag_id}")
        tag_by_id = {t.tag_id: t for t in self.tags}
        for dof in self.dofs:
            self._require_part(dof.moving_part, f"dof {dof.dof_id}")
            ctag = tag_by_id.get(dof.constraint_tag)
            if ctag is None:
                raise BindingError(
                    f"dof {dof.dof_id}: constraint tag {dof.constraint_tag} not declared")
            if ctag.role != CONSTRAINT:
                raise ValidationError(
                    f"dof {dof.dof_id}: tag {dof.constraint_tag} has role "
                    f"{ctag.role!r}, expected {CONSTRAINT!r}")
        for doc in self.docs:
            for pid in doc.part_ids:
                self._require_part(pid, f"doc {doc.title!r}")
        if not any(t.role == GROUNDING for t in self.tags):
            raise ValidationError("assembly declares no grounding tag")
        for dof_id, value in self.joint_values.items():
            dof = self.dof(dof_id)
            lo, hi = dof.limits
            if not lo <= value <= hi:
                raise ValidationError(
                    f"joint {dof_id} value {value} outside limits [{lo}, {hi}]")

    def _require_part(self, part_id: str, context: str):
        if part_id not in self.parts:
            candidates = difflib.get_close_matches(part_id, self.parts.keys(), n=3)
            hint = f"; did you mean {candidates}?" if candidates else ""
            raise BindingError(f"{context} references unknown part {part_id!r}{hint}")

    def _validate_tree(self):
        if self.root not in self.parts:
            raise IntegrityError(f"root part {self.root!r} missing")
        seen = set()
        stack = [self.root]
        while stack:
            pid = stack.pop()
            if pid in seen:
                raise IntegrityError(f"part tree has a cycle through {pid!r}")
            seen.add(pid)
            stack.extend(self.parts[pid].children)
        if seen != set(self.parts):
            orphans = sorted(set(self.parts) - seen)
            raise IntegrityError(f"parts unreachable from root: {orphans}")
        for pid, part in self.parts.items():
            if pid != self.root and part.parent not in self.parts:
                raise IntegrityError(f"part {pid!r} has unknown parent {part.parent!r}")

    def dof(self, dof_id: str) -> DofSpec:
        for dof in self.dofs:
            if dof.dof_id == dof_id:
                return dof
        raise BindingError(f"unknown dof {dof_id!r}")

    def tag(self, tag_id: int) -> TagAnchor:
        for t in self.tags:
            if t.tag_id == tag_id:
                return t
        raise BindingError(f"unknown tag {tag_id}")

    def ancestors(self, part_id: str) -> list[str]:
        self._require_part(part_id, "query")
        out = []
        cur = self.parts[part_id].parent
        while cur is not None:
            out.append(cur)
            cur = self.parts[cur].parent
        return out

    def descendants(self, part_id: str) -> list[str]:
        self._require_part(part_id, "query")
        out = []
        stack = list(self.parts[part_id].children)
        while stack:
            pid = stack.pop()
            out.append(pid)
            stack.extend(self.parts[pid].children)
        return out

    def related_parts(self, part_id: str) -> set[str]:
        return {part_id, *self.ancestors(part_id), *self.descendants(part_id)}

    def content_hash(self) -> str:
        """Structural digest of the part tree + manifest data.

        Two assemblies with equal hashes are treated as the same hardware for
        recontextualization purposes.
        """
        h = hashlib.sha256()
        doc = {
            "root": self.root,
            "parts": [
                {
                    "id": p.part_id,
                    "name": p.name,
                    "parent": p.parent,
                    "local": p.local_transform.as_matrix().tolist(),
                    "mesh": None if p.mesh is None else [
                        hashlib.sha256(np.ascontiguousarray(p.mesh.vertices).tobytes()).hexdigest(),
                        hashlib.sha256(np.ascontiguousarray(p.mesh.triangles).tobytes()).hexdigest(),
                    ],
                }
                for p in sorted(self.parts.values(), key=lambda p: p.part_id)
            ],
            "tags": [
                {"tag_id": t.tag_id, "role": t.role, "part": t.attached_part,
                 "corners": t.corners.tolist(), "side_length": t.side_length}
                for t in self.tags
            ],
            "dofs": [
                {"dof_id": d.dof_id, "part": d.moving_part, "kind": d.kind,
                 "axis": d.axis.tolist(), "origin": d.origin.tolist(),
                 "constraint_tag": d.constraint_tag,
                 "nominal_tag_center": d.nominal_tag_center.tolist(),
                 "limits": list(d.limits)}
                for d in self.dofs
            ],
            "docs": [
                {"parts": list(d.part_ids), "title": d.title, "url": d.url}
                for d in self.docs
            ],
        }
        h.update(json.dumps(doc, sort_keys=True).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# kinematics


def part_world_transform(asm: Assembly, part_id: str,
                         joint_values: dict[str, float] | None = None) -> RigidTransform:
    """World (CAD mm) transform of a part under the given joint values.

    Each DOF's joint transform applies after its moving part's local
    transform: world(p) = world(parent) ∘ local(p) ∘ joint(p).
    """
    asm._require_part(part_id, "query")
    joint_values = dict(joint_values or {})
    for dof_id, value in joint_values.items():
        dof = asm.dof(dof_id)
        lo, hi = dof.limits
        if not lo <= value <= hi:
            raise ValidationError(
                f"joint {dof_id} value {value} outside limits [{lo}, {hi}]")

    chain = [part_id, *asm.ancestors(part_id)]
    world = RigidTransform.identity()
    for pid in reversed(chain):
        world = world.compose(asm.parts[pid].local_transform)
        for dof in asm.dofs:
            if dof.moving_part != pid:
                continue
            value = joint_values.get(dof.dof_id, 0.0)
            world = world.compose(joint_transform(dof, value))
    return world


def joint_transform(dof: DofSpec, value: float) -> RigidTransform:
    if dof.kind == "prismatic":
        return RigidTransform(np.eye(3), value * dof.axis)
    R = axis_angle_mat(dof.axis, value)
    return RigidTransform(R, dof.origin - R @ dof.origin)


def tag_corners_world(asm: Assembly, tag: TagAnchor,
                      joint_values: dict[str, float] | None = None) -> np.ndarray:
    return part_world_transform(asm, tag.attached_part, joint_values).apply(tag.corners)


def docs_for_part(asm: Assembly, part_id: str) -> list[DocLink]:
    """Doc links touching the part, its ancestors, or its descendants."""
    related = asm.related_parts(part_id)
    return [d for d in asm.docs if related.intersection(d.part_ids)]


# ---------------------------------------------------------------------------
# glTF binary container (GLB) reading — node tree, POSITION, indices only

_GLB_MAGIC = 0x46546C67
_CHUNK_JSON = 0x4E4F534A
_CHUNK_BIN = 0x004E4942
_COMPONENT_DTYPES = {5121: np.uint8, 5123: np.uint16, 5125: np.uint32, 5126: np.float32}
_TYPE_WIDTHS = {"SCALAR": 1, "VEC2": 2, "VEC3": 3, "VEC4": 4, "MAT4": 16}


def _read_glb(data: bytes) -> tuple[dict, bytes]:
    if len(data) < 12:
        raise ParseError("file too short for a GLB header", table="glb")
    magic, version, length = struct.unpack_from("<III", data, 0)
    if magic != _GLB_MAGIC:
        raise ParseError("not a GLB container (bad magic)", table="glb")
    if version != 2:
        raise ParseError(f"unsupported glTF version {version}", table="glb")
    offset = 12
    gltf = None
    binary = b""
    while offset + 8 <= min(length, len(data)):
        chunk_len, chunk_type = struct.unpack_from("<II", data, offset)
        offset += 8
        chunk = data[offset:offset + chunk_len]
        offset += chunk_len
        if chunk_type == _CHUNK_JSON:
            gltf = json.loads(chunk.decode("utf-8"))
        elif chunk_type == _CHUNK_BIN:
            binary = chunk
    if gltf is None:
        raise ParseError("GLB has no JSON chunk", table="glb")
    return gltf, binary


def _read_accessor(gltf: dict, binary: bytes, accessor_index: int) -> np.ndarray:
    acc = gltf["accessors"][accessor_index]
    if "sparse" in acc:
        raise ParseError("sparse accessors not supported", table="glb")
    dtype = _COMPONENT_DTYPES.get(acc["componentType"])
    if dtype is None:
        raise ParseError(f"unsupported accessor componentType {acc['componentType']}",
                         table="glb")
    width = _TYPE_WIDTHS[acc["type"]]
    count = acc["count"]
    view = gltf["bufferViews"][acc.get("bufferView", 0)]
    start = view.get("byteOffset", 0) + acc.get("byteOffset", 0)
    stride = view.get("byteStride")
    itemsize = np.dtype(dtype).itemsize * width
    if stride in (None, itemsize):
        out = np.frombuffer(binary, dtype=dtype, count=count * width, offset=start)
        return out.reshape(count, width) if width > 1 else out
    rows = []
    for i in range(count):
        rows.append(np.frombuffer(binary, dtype=dtype, count=width,
                                  offset=start + i * stride))
    return np.array(rows)


def _node_local_transform(node: dict, scale_to_mm: float, node_label: str) -> RigidTransform:
    if "matrix" in node:
        m = np.array(node["matrix"], dtype=np.float64).reshape(4, 4).T  # column-major
        R = m[:3, :3]
        sx, sy, sz = np.linalg.norm(R, axis=0)
        if max(abs(sx - 1), abs(sy - 1), abs(sz - 1)) > 1e-6:
            raise IntegrityError(
                f"node {node_label}: matrix has scale; only rigid node transforms are supported")
        return RigidTransform(R, m[:3, 3] * scale_to_mm)
    scale = node.get("scale", [1.0, 1.0, 1.0])
    if max(abs(s - 1.0) for s in scale) > 1e-9:
        raise IntegrityError(
            f"node {node_label}: non-unit scale {scale}; only rigid node transforms are supported")
    t = np.array(node.get("translation", [0.0, 0.0, 0.0]), dtype=np.float64) * scale_to_mm
    qx, qy, qz, qw = node.get("rotation", [0.0, 0.0, 0.0, 1.0])
    R = quat_to_mat(np.array([qw, qx, qy, qz]))
    return RigidTransform(R, t)


def _mesh_from_gltf(gltf: dict, binary: bytes, mesh_index: int,
                    scale_to_mm: float) -> TriangleMesh:
    mesh = gltf["meshes"][mesh_index]
    all_verts, all_tris = [], []
    base = 0
    for prim in mesh.get("primitives", []):
        if prim.get("mode", 4) != 4:
            continue  # only plain triangle lists
        if "POSITION" not in prim.get("attributes", {}):
            continue
        verts = _read_accessor(gltf, binary, prim["attributes"]["POSITION"])
        verts = verts.astype(np.float64) * scale_to_mm
        if "indices" in prim:
            idx = _read_accessor(gltf, binary, prim["indices"]).astype(np.int64)
            tris = idx.reshape(-1, 3)
        else:
            tris = np.arange(len(verts), dtype=np.int64).reshape(-1, 3)
        all_verts.append(verts)
        all_tris.append(tris + base)
        base += len(verts)
    if not all_verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.concatenate(all_verts), np.concatenate(all_tris))


def load_assembly(model, manifest) -> Assembly:
    """Load a GLB model plus its sidecar manifest into an Assembly.

    `model` is a path or bytes; `manifest` is a path, JSON string/bytes, or a
    parsed dict (see docs/assembly_manifest.md for the schema).
    """
    if isinstance(model, (str, Path)):
        model = Path(model).read_bytes()
    if isinstance(manifest, (str, Path)) and not str(manifest).lstrip().startswith("{"):
        manifest = Path(manifest).read_text()
    if isinstance(manifest, bytes):
        manifest = manifest.decode()
    if isinstance(manifest, str):
        manifest = json.loads(manifest)

    units = manifest.get("units", "m")
    if units not in ("m", "mm"):
        raise ValidationError(f"manifest units must be 'm' or 'mm', got {units!r}")
    scale_to_mm = 1000.0 if units == "m" else 1.0

    gltf, binary = _read_glb(model)
    nodes = gltf.get("nodes", [])
    scene = gltf.get("scenes", [{}])[gltf.get("scene", 0)]
    roots = scene.get("nodes", [])
    if not roots:
        raise IntegrityError("GLB scene has no nodes")

    names: list[str] = []
    seen_names: dict[str, int] = {}
    for i, node in enumerate(nodes):
        name = node.get("name") or f"node_{i}"
        if name in seen_names:
            raise BindingError(
                f"duplicate node name {name!r} (nodes {seen_names[name]} and {i}); "
                "part ids must be unique")
        seen_names[name] = i
        names.append(name)

    parent_of: dict[int, int | None] = {i: None for i in range(len(nodes))}
    for i, node in enumerate(nodes):
        for child in node.get("children", []):
            if parent_of.get(child) is not None:
                raise IntegrityError(f"node {names[child]!r} has multiple parents")
            parent_of[child] = i

    parts: dict[str, Part] = {}

    def build_part(index: int, parent_id: str | None):
        node = nodes[index]
        pid = names[index]
        children = tuple(names[c] for c in node.get("children", []))
        mesh = None
        if "mesh" in node:
            mesh = _mesh_from_gltf(gltf, binary, node["mesh"], scale_to_mm)
        parts[pid] = Part(
            part_id=pid, name=pid, parent=parent_id,
            local_transform=_node_local_transform(node, scale_to_mm, pid),
            mesh=mesh, children=children)
        for c in node.get("children", []):
            build_part(c, pid)

    if len(roots) == 1:
        root_id = names[roots[0]]
        build_part(roots[0], None)
    else:
        root_id = "root"
        if root_id in seen_names:
            raise BindingError(
                "scene has multiple roots and a node already named 'root'")
        for r in roots:
            build_part(r, root_id)
        parts[root_id] = Part(root_id, root_id, None, RigidTransform.identity(),
                              None, tuple(names[r] for r in roots))

    known = set(parts)

    def check_part_ref(pid: str, context: str):
        if pid not in known:
            candidates = difflib.get_close_matches(pid, known, n=3)
            hint = f"; candidates: {candidates}" if candidates else ""
            raise BindingError(f"{context} references unknown node {pid!r}{hint}")

    tags = []
    for entry in manifest.get("tags", []):
        check_part_ref(entry["part"], f"tag {entry.get('tag_id')}")
        tags.append(TagAnchor(
            tag_id=int(entry["tag_id"]), role=entry["role"], attached_part=entry["part"],
            corners=np.array(entry["corners"], dtype=np.float64),
            side_length=float(entry["side_length"])))

    dofs = []
    for entry in manifest.get("dofs", []):
        check_part_ref(entry["part"], f"dof {entry.get('dof_id')}")
        dofs.append(DofSpec(
            dof_id=entry["dof_id"], moving_part=entry["part"], kind=entry["kind"],
            axis=np.array(entry["axis"], dtype=np.float64),
            origin=np.array(entry.get("origin", [0.0, 0.0, 0.0]), dtype=np.float64),
            constraint_tag=int(entry["constraint_tag"]),
            nominal_tag_center=np.array(entry["nominal_tag_center"], dtype=np.float64),
            limits=tuple(entry.get("limits", (-np.inf, np.inf)))))

    docs = []
    for entry in manifest.get("docs", []):
        for pid in entry["parts"]:
            check_part_ref(pid, f"doc {entry.get('title')!r}")
        docs.append(DocLink(tuple(entry["parts"]), entry.get("title", ""),
                            entry.get("url", "")))

    joint_values = {k: float(v) for k, v in manifest.get("joint_values", {}).items()}
    return Assembly(parts=parts, root=root_id, tags=tags, dofs=dofs, docs=docs,
                    joint_values=joint_values)


# ---------------------------------------------------------------------------
# GLB writing — enough of glTF 2.0 to round-trip our fixtures and feed viewers


def write_glb(parts: dict[str, Part], root: str, units: str = "mm") -> bytes:
    """Serialize a part tree to a GLB byte string.

    `units` selects the file's length unit ("m" follows the glTF convention;
    translations and vertices are divided by 1000 on write).
    """
    if units not in ("m", "mm"):
        raise ValidationError(f"units must be 'm' or 'mm', got {units!r}")
    scale = 0.001 if units == "m" else 1.0

    order = [root]
    i = 0
    while i < len(order):
        order.extend(parts[order[i]].children)
        i += 1
    index_of = {pid: i for i, pid in enumerate(order)}

    binary = bytearray()
    buffer_views = []
    accessors = []
    meshes = []
    mesh_index_of: dict[str, int] = {}

    def add_view(data: bytes) -> int:
        while len(binary) % 4:
            binary.append(0)
        buffer_views.append({"buffer": 0, "byteOffset": len(binary),
                             "byteLength": len(data)})
        binary.extend(data)
        return len(buffer_views) - 1

    for pid in order:
        mesh = parts[pid].mesh
        if mesh is None or len(mesh.triangles) == 0:
            continue
        verts = (mesh.vertices * scale).astype(np.float32)
        tris = mesh.triangles.astype(np.uint32).ravel()
        pos_view = add_view(verts.tobytes())
        idx_view = add_view(tris.tobytes())
        accessors.append({
            "bufferView": pos_view, "componentType": 5126, "count": len(verts),
            "type": "VEC3", "min": verts.min(axis=0).tolist(),
            "max": verts.max(axis=0).tolist()})
        pos_acc = len(accessors) - 1
        accessors.append({"bufferView": idx_view, "componentType": 5125,
                          "count": len(tris), "type": "SCALAR"})
        idx_acc = len(accessors) - 1
        meshes.append({"name": pid,
                       "primitives": [{"attributes": {"POSITION": pos_acc},
                                       "indices": idx_acc, "mode": 4}]})
        mesh_index_of[pid] = len(meshes) - 1

    nodes = []
    for pid in order:
        part = parts[pid]
        node: dict = {"name": pid}
        if part.children:
            node["children"] = [index_of[c] for c in part.children]
        t = part.local_transform.t * scale
        if np.any(t != 0):
            node["translation"] = t.tolist()
        R = part.local_transform.R
        if not np.allclose(R, np.eye(3), atol=1e-15):
            from .transforms import mat_to_quat

            w, x, y, z = mat_to_quat(R)
            node["rotation"] = [x, y, z, w]
        if pid in mesh_index_of:
            node["mesh"] = mesh_index_of[pid]
        nodes.append(node)

    gltf = {
        "asset": {"version": "2.0", "generator": "scenelink"},
        "scene": 0,
        "scenes": [{"nodes": [index_of[root]]}],
        "nodes": nodes,
    }
    if meshes:
        gltf["meshes"] = meshes
        gltf["accessors"] = accessors
        gltf["bufferViews"] = buffer_views
        gltf["buffers"] = [{"byteLength": len(binary)}]

    json_chunk = json.dumps(gltf, separators=(",", ":")).encode()
    while len(json_chunk) % 4:
        json_chunk += b" "
    bin_chunk = bytes(binary)
    while len(bin_chunk) % 4:
        bin_chunk += b"\x00"

    out = bytearray()
    total = 12 + 8 + len(json_chunk) + (8 + len(bin_chunk) if bin_chunk else 0)
    out += struct.pack("<III", _GLB_MAGIC, 2, total)
    out += struct.pack("<II", len(json_chunk), _CHUNK_JSON)
    out += json_chunk
    if bin_chunk:
        out += struct.pack("<II", len(bin_chunk), _CHUNK_BIN)
        out += bin_chunk
    return bytes(out)
