"""Pure-numpy kernel backend: vectorized closest-point tests, Python traversal."""
from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def point_triangle_dist2(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Squared distance from point `p` (3,) to each triangle in `tri` (M,3,3).

    Vectorized form of Ericson's closest-point-on-triangle region tests; the
    case order mirrors the scalar implementation in the numba backend.
    """
    a, b, c = tri[:, 0, :], tri[:, 1, :], tri[:, 2, :]
    ab = b - a
    ac = c - a
    ap = p[None, :] - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)

    bp = p[None, :] - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)

    cp = p[None, :] - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 != d3, d1 / (d1 - d3), 0.0)
        w_ac = np.where(d2 != d6, d2 / (d2 - d6), 0.0)
        bc_den = (d4 - d3) + (d5 - d6)
        w_bc = np.where(bc_den != 0, (d4 - d3) / bc_den, 0.0)
        face_den = va + vb + vc
        inv_den = np.where(face_den != 0, 1.0 / face_den, 0.0)

    cand_a = a
    cand_b = b
    cand_c = c
    cand_ab = a + v_ab[:, None] * ab
    cand_ac = a + w_ac[:, None] * ac
    cand_bc = b + w_bc[:, None] * (c - b)
    cand_face = a + (vb * inv_den)[:, None] * ab + (vc * inv_den)[:, None] * ac

    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    closest = cand_face.copy()
    chosen = np.zeros(len(tri), dtype=bool)
    for cond, cand in zip(conds, (cand_a, cand_b, cand_ab, cand_c, cand_ac, cand_bc)):
        pick = cond & ~chosen
        closest[pick] = cand[pick]
        chosen |= cond
    diff = closest - p[None, :]
    return np.einsum("ij,ij->i", diff, diff)


def _box_dist2(p: np.ndarray, bmin: np.ndarray, bmax: np.ndarray) -> float:
    d = np.maximum(np.maximum(bmin - p, 0.0), p - bmax)
    return float(d @ d)


def query_point(bbox_min, bbox_max, left, right, first, count, tri_order, tri_verts,
                p: np.ndarray) -> tuple[float, int]:
    """Nearest squared distance and triangle index for one query point."""
    best = np.inf
    best_tri = -1
    stack = [0]
    while stack:
        node = stack.pop()
        if _box_dist2(p, bbox_min[node], bbox_max[node]) >= best:
            continue
        if left[node] < 0:
            idx = tri_order[first[node]:first[node] + count[node]]
            d2 = point_triangle_dist2(p, tri_verts[idx])
            k = int(np.argmin(d2))
            if d2[k] < best:
                best = float(d2[k])
                best_tri = int(idx[k])
        else:
            l, r = int(left[node]), int(right[node])
            dl = _box_dist2(p, bbox_min[l], bbox_max[l])
            dr = _box_dist2(p, bbox_min[r], bbox_max[r])
            # push the farther child first so the nearer is explored first
            if dl <= dr:
                stack.append(r)
                stack.append(l)
            else:
                stack.append(l)
                stack.append(r)
    return best, best_tri


def query_points(bbox_min, bbox_max, left, right, first, count, tri_order, tri_verts,
                 points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(points)
    d2 = np.empty(n, dtype=np.float64)
    tri = np.empty(n, dtype=np.int64)
    for i in range(n):
        d2[i], tri[i] = query_point(bbox_min, bbox_max, left, right, first, count,
                                    tri_order, tri_verts, points[i])
    return d2, tri
