"""Independent reference implementations used to compute expected values.

Everything here is deliberately written with different algorithms (or brute
force) than the package code it checks, so a shared bug cannot hide."""
from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# projection (quaternion sandwich, no rotation matrices)


def quat_rotate(q, v):
    """Rotate v by unit quaternion q=(w,x,y,z) via q v q*."""
    w, x, y, z = q
    qv = np.array([x, y, z])
    t = 2.0 * np.cross(qv, v)
    return np.asarray(v) + w * t + np.cross(qv, t)


def project_oracle(point, q_wxyz, translation, cam):
    """Pixel projection computed without the package's matrix path."""
    p_cam = quat_rotate(q_wxyz, point) + np.asarray(translation)
    xn = p_cam[0] / p_cam[2]
    yn = p_cam[1] / p_cam[2]
    model = cam.model.value
    if model == "simple_radial":
        k = cam.distortion[0]
        r2 = xn * xn + yn * yn
        xn, yn = xn * (1 + k * r2), yn * (1 + k * r2)
    elif model == "opencv_radial":
        k1, k2, p1, p2 = cam.distortion
        r2 = xn * xn + yn * yn
        rad = 1 + k1 * r2 + k2 * r2 * r2
        xd = xn * rad + 2 * p1 * xn * yn + p2 * (r2 + 2 * xn * xn)
        yd = yn * rad + p1 * (r2 + 2 * yn * yn) + 2 * p2 * xn * yn
        xn, yn = xd, yd
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    return np.array([fx * xn + cx, fy * yn + cy]), p_cam[2] > 0


# ---------------------------------------------------------------------------
# two-pass frame sampling by exhaustive tick scan


def sample_frames_oracle(entries, base_rate, tag_rate):
    if not entries:
        return []
    idx = [e[0] for e in entries]
    ts = [e[1] for e in entries]
    tagged = [(i, t) for i, t, h in entries if h]

    def nearest(candidates, tick):
        best = None
        best_d = None
        for i, t in candidates:
            d = abs(t - tick)
            if best_d is None or d < best_d - 1e-15:
                best, best_d = i, d
        return best

    picked = set()
    n_ticks = int(np.floor(ts[-1] * base_rate + 1e-9)) + 1
    for k in range(n_ticks):
        picked.add(nearest(list(zip(idx, ts)), k / base_rate))
    if tagged:
        n_ticks = int(np.floor(ts[-1] * tag_rate + 1e-9)) + 1
        for k in range(n_ticks):
            picked.add(nearest(tagged, k / tag_rate))
    return sorted(picked)


# ---------------------------------------------------------------------------
# point-triangle distance: plane projection + barycentric + edge fallback
# (a different formulation than the kernels' region tests)


def point_segment_dist(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def point_triangle_dist_oracle(p, a, b, c):
    n = np.cross(b - a, c - a)
    nn = float(n @ n)
    if nn > 0:
        n_hat = n / np.sqrt(nn)
        dist_plane = float((p - a) @ n_hat)
        proj = p - dist_plane * n_hat
        # barycentric coordinates of the projection
        v0, v1, v2 = b - a, c - a, proj - a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        d20, d21 = v2 @ v0, v2 @ v1
        denom = d00 * d11 - d01 * d01
        if denom > 0:
            v = (d11 * d20 - d01 * d21) / denom
            w = (d00 * d21 - d01 * d20) / denom
            if v >= 0 and w >= 0 and v + w <= 1:
                return abs(dist_plane)
    return min(point_segment_dist(p, a, b),
               point_segment_dist(p, b, c),
               point_segment_dist(p, c, a))


def mesh_distance_linear_scan(tri_verts, points):
    """Exhaustive nearest-triangle distance per probe point."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        best = np.inf
        for t in tri_verts:
            d = point_triangle_dist_oracle(p, t[0], t[1], t[2])
            if d < best:
                best = d
        out[i] = best
    return out


# ---------------------------------------------------------------------------
# kinematics by explicit 4x4 matrix chains


def rodrigues_4x4(axis, theta, origin):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(theta), np.sin(theta)
    C = 1 - c
    R = np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = np.asarray(origin) - R @ np.asarray(origin)
    return T


def translation_4x4(v):
    T = np.eye(4)
    T[:3, 3] = v
    return T


def world_matrix_oracle(asm, part_id, joint_values):
    """Brute-force 4x4 chain multiplication, root to part."""
    chain = [part_id]
    while asm.parts[chain[-1]].parent is not None:
        chain.append(asm.parts[chain[-1]].parent)
    chain.reverse()
    M = np.eye(4)
    for pid in chain:
        part = asm.parts[pid]
        L = np.eye(4)
        L[:3, :3] = part.local_transform.R
        L[:3, 3] = part.local_transform.t
        M = M @ L
        for dof in asm.dofs:
            if dof.moving_part != pid:
                continue
            value = joint_values.get(dof.dof_id, 0.0)
            if dof.kind == "prismatic":
                M = M @ translation_4x4(value * dof.axis)
            else:
                M = M @ rodrigues_4x4(dof.axis, value, dof.origin)
    return M


# ---------------------------------------------------------------------------
# joint-value recovery by exhaustive sweep


def sweep_prismatic_oracle(axis, nominal, observed, lo, hi, step=0.01):
    values = np.arange(lo, hi + step, step)
    preds = nominal[None, :] + values[:, None] * axis[None, :]
    errs = np.linalg.norm(preds - observed[None, :], axis=1)
    k = int(np.argmin(errs))
    return float(values[k]), float(errs[k])


def sweep_revolute_oracle(axis, origin, nominal, observed, lo, hi,
                          step_deg=0.01):
    step = np.radians(step_deg)
    values = np.arange(lo, hi + step, step)
    u = nominal - origin
    errs = np.empty(len(values))
    for i, theta in enumerate(values):
        T = rodrigues_4x4(axis, theta, np.zeros(3))
        pred = origin + T[:3, :3] @ u
        errs[i] = np.linalg.norm(pred - observed)
    k = int(np.argmin(errs))
    return float(values[k]), float(errs[k])


# ---------------------------------------------------------------------------
# random rotations for generator-style checks


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
