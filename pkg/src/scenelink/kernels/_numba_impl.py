"""Numba kernel backend: scalar loops JIT-compiled with caching."""
from __future__ import annotations

import numpy as np
from numba import njit

BACKEND = "numba"


@njit(cache=True)
def _dist2_scalar(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # Ericson's closest-point-on-triangle region tests
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = ax, ay, az
    else:
        bpx, bpy, bpz = px - bx, py - by, pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = bx, by, bz
        else:
            vc = d1 * d4 - d3 * d2
            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                v = d1 / (d1 - d3)
                qx, qy, qz = ax + v * abx, ay + v * aby, az + v * abz
            else:
                cpx, cpy, cpz = px - cx, py - cy, pz - cz
                d5 = abx * cpx + aby * cpy + abz * cpz
                d6 = acx * cpx + acy * cpy + acz * cpz
                if d6 >= 0.0 and d5 <= d6:
                    qx, qy, qz = cx, cy, cz
                else:
                    vb = d5 * d2 - d1 * d6
                    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                        w = d2 / (d2 - d6)
                        qx, qy, qz = ax + w * acx, ay + w * acy, az + w * acz
                    else:
                        va = d3 * d6 - d5 * d4
                        if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                            qx = bx + w * (cx - bx)
                            qy = by + w * (cy - by)
                            qz = bz + w * (cz - bz)
                        else:
                            den = 1.0 / (va + vb + vc)
                            v = vb * den
                            w = vc * den
                            qx = ax + v * abx + w * acx
                            qy = ay + v * aby + w * acy
                            qz = az + v * abz + w * acz
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _box_dist2(px, py, pz, bmin, bmax):
    d = 0.0
    for k in range(3):
        p = px if k == 0 else (py if k == 1 else pz)
        lo = bmin[k] - p
        hi = p - bmax[k]
        e = lo if lo > hi else hi
        if e > 0.0:
            d += e * e
    return d


@njit(cache=True)
def _query_point(bbox_min, bbox_max, left, right, first, count, tri_order, tri_verts,
                 px, py, pz, stack):
    best = np.inf
    best_tri = -1
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_dist2(px, py, pz, bbox_min[node], bbox_max[node]) >= best:
            continue
        if left[node] < 0:
            s = first[node]
            for j in range(count[node]):
                ti = tri_order[s + j]
                t = tri_verts[ti]
                d2 = _dist2_scalar(px, py, pz,
                                   t[0, 0], t[0, 1], t[0, 2],
                                   t[1, 0], t[1, 1], t[1, 2],
                                   t[2, 0], t[2, 1], t[2, 2])
                if d2 < best:
                    best = d2
                    best_tri = ti
        else:
            l = left[node]
            r = right[node]
            dl = _box_dist2(px, py, pz, bbox_min[l], bbox_max[l])
            dr = _box_dist2(px, py, pz, bbox_min[r], bbox_max[r])
            if dl <= dr:
                stack[top] = r
                top += 1
                stack[top] = l
                top += 1
            else:
                stack[top] = l
                top += 1
                stack[top] = r
                top += 1
    return best, best_tri


@njit(cache=True)
def _query_points_impl(bbox_min, bbox_max, left, right, first, count, tri_order,
                       tri_verts, points, d2_out, tri_out):
    stack = np.empty(128, dtype=np.int64)
    for i in range(points.shape[0]):
        d2, ti = _query_point(bbox_min, bbox_max, left, right, first, count,
                              tri_order, tri_verts,
                              points[i, 0], points[i, 1], points[i, 2], stack)
        d2_out[i] = d2
        tri_out[i] = ti


def query_point(bbox_min, bbox_max, left, right, first, count, tri_order, tri_verts,
                p: np.ndarray) -> tuple[float, int]:
    stack = np.empty(128, dtype=np.int64)
    d2, ti = _query_point(bbox_min, bbox_max, left, right, first, count, tri_order,
                          tri_verts, float(p[0]), float(p[1]), float(p[2]), stack)
    return float(d2), int(ti)


def query_points(bbox_min, bbox_max, left, right, first, count, tri_order, tri_verts,
                 points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    points = np.ascontiguousarray(points, dtype=np.float64)
    d2 = np.empty(len(points), dtype=np.float64)
    tri = np.empty(len(points), dtype=np.int64)
    _query_points_impl(bbox_min, bbox_max, left, right, first, count, tri_order,
                       tri_verts, points, d2, tri)
    return d2, tri
