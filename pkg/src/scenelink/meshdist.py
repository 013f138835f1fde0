"""Point-to-mesh distance queries over a bounding-volume hierarchy, and the
background-pruning policy built on them.

Meshes are not assumed watertight, so queries return unsigned distance; the
pruning predicate only needs proximity to hardware surfaces. The traversal
kernels live in `scenelink.kernels` with numba and numpy backends.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .kernels import get_kernels
from .transforms import RigidTransform

LEAF_SIZE = 8
_MIN_TRIANGLE_AREA = 1e-12  # mm^2; degenerate faces are dropped at load


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) mm
    triangles: np.ndarray  # (M, 3) vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValidationError("triangle indices out of range")
        # filter degenerate faces
        if len(t):
            a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
            area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
            t = t[area2 > 2 * _MIN_TRIANGLE_AREA]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @staticmethod
    def box(half_extents, center=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        """Axis-aligned box, 12 triangles. Handy for fixtures."""
        hx, hy, hz = half_extents
        cx, cy, cz = center
        corners = np.array([[sx * hx + cx, sy * hy + cy, sz * hz + cz]
                            for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
                 (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        tris = []
        for q in quads:
            tris.append((q[0], q[1], q[2]))
            tris.append((q[0], q[2], q[3]))
        return TriangleMesh(corners, np.array(tris))


@dataclass(frozen=True)
class SpatialIndex:
    """BVH over world-space triangles of one or more part meshes."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    first: np.ndarray
    count: np.ndarray
    tri_order: np.ndarray
    tri_verts: np.ndarray  # (M, 3, 3) world mm
    tri_part: np.ndarray  # (M,) index into part_ids
    part_ids: tuple[str, ...]

    @property
    def n_triangles(self) -> int:
        return len(self.tri_verts)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bbox_min[0], self.bbox_max[0]


def build_index(meshes, leaf_size: int = LEAF_SIZE) -> SpatialIndex:
    """Build a BVH over `meshes`: iterable of (TriangleMesh, RigidTransform, part_id).

    The transform places each mesh in world (CAD mm) space. Median split on
    the longest centroid axis; leaves hold at most `leaf_size` triangles.
    """
    tri_chunks = []
    part_chunks = []
    part_ids: list[str] = []
    for mesh, xf, part_id in meshes:
        if not isinstance(xf, RigidTransform):
            xf = RigidTransform.from_matrix(np.asarray(xf))
        if len(mesh.triangles) == 0:
            continue
        world_v = xf.apply(mesh.vertices)
        tri_chunks.append(world_v[mesh.triangles])
        part_idx = len(part_ids)
        part_ids.append(part_id)
        part_chunks.append(np.full(len(mesh.triangles), part_idx, dtype=np.int64))
    if not tri_chunks:
        raise ValidationError("cannot build an index over an empty triangle set")
    tri_verts = np.ascontiguousarray(np.concatenate(tri_chunks, axis=0))
    tri_part = np.concatenate(part_chunks)

    centroids = tri_verts.mean(axis=1)
    tri_min = tri_verts.min(axis=1)
    tri_max = tri_verts.max(axis=1)

    bbox_min, bbox_max, left, right, first, count = [], [], [], [], [], []
    order: list[int] = []

    def add_node() -> int:
        bbox_min.append(None)
        bbox_max.append(None)
        left.append(-1)
        right.append(-1)
        first.append(-1)
        count.append(0)
        return len(left) - 1

    def build(indices: np.ndarray) -> int:
        node = add_node()
        bbox_min[node] = tri_min[indices].min(axis=0)
        bbox_max[node] = tri_max[indices].max(axis=0)
        if len(indices) <= leaf_size:
            first[node] = len(order)
            count[node] = len(indices)
            order.extend(int(i) for i in indices)
            return node
        cen = centroids[indices]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        mid = len(indices) // 2
        split = np.argpartition(cen[:, axis], mid)
        l = build(indices[split[:mid]])
        r = build(indices[split[mid:]])
        left[node], right[node] = l, r
        return node

    depth_need = int(np.ceil(np.log2(max(2, len(tri_verts))))) + 8
    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 4 * depth_need + 100))
    try:
        build(np.arange(len(tri_verts)))
    finally:
        sys.setrecursionlimit(old_limit)

    return SpatialIndex(
        bbox_min=np.ascontiguousarray(np.array(bbox_min, dtype=np.float64)),
        bbox_max=np.ascontiguousarray(np.array(bbox_max, dtype=np.float64)),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        first=np.array(first, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        tri_order=np.array(order, dtype=np.int64),
        tri_verts=tri_verts,
        tri_part=tri_part,
        part_ids=tuple(part_ids),
    )


def _kernel_args(index: SpatialIndex):
    return (index.bbox_min, index.bbox_max, index.left, index.right, index.first,
            index.count, index.tri_order, index.tri_verts)


def distance_point_to_meshes(index: SpatialIndex, p, backend: str | None = None
                             ) -> tuple[float, str]:
    """Exact Euclidean distance from `p` to the nearest indexed triangle,
    plus the part id owning that triangle."""
    k = get_kernels(backend)
    d2, tri = k.query_point(*_kernel_args(index), np.asarray(p, dtype=np.float64))
    return float(np.sqrt(d2)), index.part_ids[index.tri_part[tri]]


def distances_to_meshes(index: SpatialIndex, points, backend: str | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Batch form of distance_point_to_meshes; returns (distances, part indices)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    k = get_kernels(backend)
    d2, tri = k.query_points(*_kernel_args(index), points)
    return np.sqrt(d2), index.tri_part[tri]


@dataclass(frozen=True)
class WorkspaceSlab:
    """Keeps the work surface under the hardware: a z band relative to the
    assembly's lowest point, clipped to the xy footprint grown by a margin."""

    z_min_offset: float = -20.0
    z_max_offset: float = 5.0
    xy_margin: float = 100.0


DEFAULT_TAU_MM = 30.0


def compute_background_mask(cloud, index: SpatialIndex, tau: float = DEFAULT_TAU_MM,
                            workspace_slab: WorkspaceSlab | None = None,
                            extra_indices=(), backend: str | None = None) -> np.ndarray:
    """Per-gaussian keep mask: near any indexed mesh, or inside the work-surface slab.

    `cloud` must already be in CAD mm. `extra_indices` allows testing proximity
    against additional poses of the same assembly (e.g. resolved-joint pose);
    a gaussian is kept if it is within `tau` of any of them.
    """
    if tau <= 0:
        raise ValidationError("tau must be positive")
    positions = np.asarray(cloud.positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return np.zeros(0, dtype=bool)

    dist, _ = distances_to_meshes(index, positions, backend=backend)
    keep = dist <= tau
    for extra in extra_indices:
        d, _ = distances_to_meshes(extra, positions, backend=backend)
        keep |= d <= tau

    if workspace_slab is not None:
        bmin, bmax = index.bounds
        lo_xy = bmin[:2] - workspace_slab.xy_margin
        hi_xy = bmax[:2] + workspace_slab.xy_margin
        z_lo = bmin[2] + workspace_slab.z_min_offset
        z_hi = bmin[2] + workspace_slab.z_max_offset
        in_slab = (
            np.all(positions[:, :2] >= lo_xy, axis=1)
            & np.all(positions[:, :2] <= hi_xy, axis=1)
            & (positions[:, 2] >= z_lo)
            & (positions[:, 2] <= z_hi)
        )
        keep |= in_slab
    return keep
