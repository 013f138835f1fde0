"""3D Gaussian splat point sets: PLY I/O, similarity transforms, pruning.

Clouds are array-backed (one numpy array per attribute) rather than lists of
objects; a `Gaussian` view exists for single-element access. The file format
is the common binary little-endian PLY vertex schema: x,y,z, optional
nx,ny,nz, f_dc_0..2, f_rest_*, opacity, scale_0..2, rot_0..3 (all float32,
rot_0 is the quaternion w component, f_rest is channel-major).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaError, ValidationError
from .transforms import SimilarityTransform, mat_to_quat, quat_mul, quat_normalize

_REQUIRED = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2",
             "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3")


@dataclass(frozen=True)
class Gaussian:
    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w,x,y,z)
    log_scale: np.ndarray
    opacity_logit: float
    color_dc: np.ndarray
    color_rest: np.ndarray  # (M, 3), possibly empty


@dataclass
class SplatCloud:
    positions: np.ndarray      # (N, 3)
    rotations: np.ndarray      # (N, 4), unit quaternions
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    color_dc: np.ndarray       # (N, 3)
    color_rest: np.ndarray     # (N, M, 3) with M = (sh_degree+1)^2 - 1
    sh_degree: int = 0
    source_id: str = ""

    def __post_init__(self):
        n = len(self.positions)
        for name in ("positions", "rotations", "log_scales", "opacity_logits",
                     "color_dc", "color_rest"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if len(arr) != n:
                raise ValidationError(f"{name} length {len(arr)} != {n}")
        m_expected = (self.sh_degree + 1) ** 2 - 1
        if self.color_rest.shape[1:] != (m_expected, 3):
            raise ValidationError(
                f"color_rest shape {self.color_rest.shape[1:]} inconsistent with "
                f"sh_degree {self.sh_degree} (expected ({m_expected}, 3))")
        for name in ("positions", "rotations", "log_scales", "opacity_logits",
                     "color_dc", "color_rest"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} contains non-finite values")

    def __len__(self) -> int:
        return len(self.positions)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.rotations[i], self.log_scales[i],
                        float(self.opacity_logits[i]), self.color_dc[i], self.color_rest[i])

    @property
    def gaussians(self):
        return [self.gaussian(i) for i in range(len(self))]

    @staticmethod
    def empty(sh_degree: int = 0, source_id: str = "") -> "SplatCloud":
        m = (sh_degree + 1) ** 2 - 1
        return SplatCloud(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, 3)), np.zeros((0, m, 3)), sh_degree, source_id)


def _sh_degree_from_rest_count(n_rest: int) -> int:
    # n_rest = 3 * ((d+1)^2 - 1); enumerate the supported degrees
    for d in range(4):
        if n_rest == 3 * ((d + 1) ** 2 - 1):
            return d
    raise SchemaError(f"f_rest property count {n_rest} does not match any SH degree 0..3")


def parse_splat_ply(data: bytes, source_id: str = "") -> SplatCloud:
    """Parse a binary little-endian 3DGS PLY byte stream."""
    end = data.find(b"end_header\n")
    if end < 0:
        raise SchemaError("not a PLY file: missing end_header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    if not header or header[0].strip() != "ply":
        raise SchemaError("not a PLY file: missing 'ply' magic")
    fmt = next((l.split()[1] for l in header if l.startswith("format")), None)
    if fmt != "binary_little_endian":
        raise SchemaError(f"unsupported PLY encoding {fmt!r}: "
                          "only binary_little_endian is supported")

    n_vertices = 0
    properties: list[str] = []
    in_vertex = False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertices = int(parts[2])
            elif int(parts[2]) > 0:
                raise SchemaError(f"unsupported PLY element {parts[1]!r}")
        elif parts[0] == "property" and in_vertex:
            if parts[1] != "float":
                raise SchemaError(f"property {parts[2]!r} must be float32, got {parts[1]}")
            properties.append(parts[2])

    for name in _REQUIRED:
        if name not in properties:
            raise SchemaError(f"missing required vertex property {name!r}")

    rest_names = sorted((p for p in properties if p.startswith("f_rest_")),
                        key=lambda p: int(p.split("_")[-1]))
    expected_rest = [f"f_rest_{i}" for i in range(len(rest_names))]
    if rest_names != expected_rest:
        raise SchemaError("f_rest properties are not contiguous from f_rest_0")
    sh_degree = _sh_degree_from_rest_count(len(rest_names))

    dtype = np.dtype([(p, "<f4") for p in properties])
    need = n_vertices * dtype.itemsize
    if len(body) < need:
        raise SchemaError(f"vertex data truncated: wanted {need} bytes, got {len(body)}")
    raw = np.frombuffer(body[:need], dtype=dtype)

    if n_vertices == 0:
        return SplatCloud.empty(sh_degree, source_id)

    def cols(names):
        return np.stack([raw[n].astype(np.float64) for n in names], axis=1)

    positions = cols(("x", "y", "z"))
    rotations = quat_normalize(cols(("rot_0", "rot_1", "rot_2", "rot_3")))
    log_scales = cols(("scale_0", "scale_1", "scale_2"))
    opacity = raw["opacity"].astype(np.float64)
    color_dc = cols(("f_dc_0", "f_dc_1", "f_dc_2"))
    m = (sh_degree + 1) ** 2 - 1
    if m:
        rest = cols(rest_names).reshape(n_vertices, 3, m).transpose(0, 2, 1)
    else:
        rest = np.zeros((n_vertices, 0, 3))
    return SplatCloud(positions, rotations, log_scales, opacity, color_dc, rest,
                      sh_degree, source_id)


def write_splat_ply(cloud: SplatCloud) -> bytes:
    """Serialize to binary little-endian PLY; sh_degree 0 clouds omit f_rest."""
    m = (cloud.sh_degree + 1) ** 2 - 1
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * m)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")

    n = len(cloud)
    out = np.zeros(n, dtype=np.dtype([(p, "<f4") for p in names]))
    if n:
        for i, axis in enumerate("xyz"):
            out[axis] = cloud.positions[:, i]
        for i in range(3):
            out[f"f_dc_{i}"] = cloud.color_dc[:, i]
        if m:
            rest = cloud.color_rest.transpose(0, 2, 1).reshape(n, 3 * m)
            for i in range(3 * m):
                out[f"f_rest_{i}"] = rest[:, i]
        out["opacity"] = cloud.opacity_logits
        for i in range(3):
            out[f"scale_{i}"] = cloud.log_scales[:, i]
        for i in range(4):
            out[f"rot_{i}"] = cloud.rotations[:, i]
    return ("\n".join(header) + "\n").encode("ascii") + out.tobytes()


def transform_splat(cloud: SplatCloud, xf: SimilarityTransform,
                    keep_higher_order_color: bool = False) -> SplatCloud:
    """Apply a similarity transform to every gaussian.

    Positions are mapped through the transform, orientations are left-composed
    with its rotation, log scales shift by log(scale). Higher-band color
    coefficients are view-direction dependent and are dropped under a
    non-identity rotation unless `keep_higher_order_color` accepts them
    unrotated.
    """
    if not np.isfinite(xf.scale) or xf.scale <= 0:
        raise ValidationError("transform scale must be positive")
    positions = xf.apply(cloud.positions)
    rot_is_identity = np.allclose(xf.R, np.eye(3), atol=1e-12)
    if rot_is_identity:
        rotations = cloud.rotations.copy()
    else:
        q_xf = mat_to_quat(xf.R)
        rotations = quat_normalize(quat_mul(q_xf[None, :], cloud.rotations))
    log_scales = cloud.log_scales + np.log(xf.scale)

    sh_degree = cloud.sh_degree
    color_rest = cloud.color_rest.copy()
    if not rot_is_identity and not keep_higher_order_color and sh_degree > 0:
        sh_degree = 0
        color_rest = np.zeros((len(cloud), 0, 3))

    return SplatCloud(positions, rotations, log_scales, cloud.opacity_logits.copy(),
                      cloud.color_dc.copy(), color_rest, sh_degree, cloud.source_id)


def prune_by_mask(cloud: SplatCloud, keep) -> SplatCloud:
    """Retain gaussians where keep[i] is true, preserving order and metadata."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (len(cloud),):
        raise ValidationError(f"mask length {keep.shape} != cloud size {len(cloud)}")
    return SplatCloud(
        cloud.positions[keep], cloud.rotations[keep], cloud.log_scales[keep],
        cloud.opacity_logits[keep], cloud.color_dc[keep], cloud.color_rest[keep],
        cloud.sh_degree, cloud.source_id)
