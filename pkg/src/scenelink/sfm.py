"""Sparse structure-from-motion models: parsing, writing, projection, frame sampling.

The on-disk layout follows the COLMAP sparse-model convention: three tables
(cameras, images, points3D) in either whitespace-delimited text with '#'
comments or little-endian binary. Binary is the canonical interchange form;
text exists mainly to ease fixtures.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from io import BytesIO
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .errors import DegenerateGeometryError, IntegrityError, ParseError, ValidationError


class CameraModel(str, Enum):
    PINHOLE = "pinhole"
    SIMPLE_PINHOLE = "simple_pinhole"
    SIMPLE_RADIAL = "simple_radial"
    OPENCV_RADIAL = "opencv_radial"


# (table name, model id, param count, distortion coefficient count)
_MODEL_TABLE = {
    CameraModel.SIMPLE_PINHOLE: ("SIMPLE_PINHOLE", 0, 3, 0),
    CameraModel.PINHOLE: ("PINHOLE", 1, 4, 0),
    CameraModel.SIMPLE_RADIAL: ("SIMPLE_RADIAL", 2, 4, 1),
    CameraModel.OPENCV_RADIAL: ("OPENCV", 4, 8, 4),
}
_MODEL_BY_NAME = {v[0]: k for k, v in _MODEL_TABLE.items()}
_MODEL_BY_ID = {v[1]: k for k, v in _MODEL_TABLE.items()}


@dataclass(frozen=True)
class CameraIntrinsics:
    camera_id: int
    model: CameraModel
    width: int
    height: int
    focal: tuple[float, float]
    principal_point: tuple[float, float]
    distortion: tuple[float, ...] = ()

    def __post_init__(self):
        fx, fy = self.focal
        cx, cy = self.principal_point
        if fx <= 0 or fy <= 0:
            raise ValidationError(f"camera {self.camera_id}: focal lengths must be positive")
        if not (0 <= cx <= self.width) or not (0 <= cy <= self.height):
            raise ValidationError(f"camera {self.camera_id}: principal point outside image")
        expected = _MODEL_TABLE[CameraModel(self.model)][3]
        if len(self.distortion) != expected:
            raise ValidationError(
                f"camera {self.camera_id}: model {self.model.value} takes "
                f"{expected} distortion coefficients, got {len(self.distortion)}"
            )

    def params(self) -> list[float]:
        """Flat parameter vector in file order."""
        fx, fy = self.focal
        cx, cy = self.principal_point
        if self.model == CameraModel.SIMPLE_PINHOLE:
            return [fx, cx, cy]
        if self.model == CameraModel.PINHOLE:
            return [fx, fy, cx, cy]
        if self.model == CameraModel.SIMPLE_RADIAL:
            return [fx, cx, cy, self.distortion[0]]
        return [fx, fy, cx, cy, *self.distortion]

    @staticmethod
    def from_params(camera_id: int, model: CameraModel, width: int, height: int,
                    params: list[float]) -> "CameraIntrinsics":
        expected = _MODEL_TABLE[model][2]
        if len(params) != expected:
            raise ParseError(
                f"camera {camera_id}: model {model.value} takes {expected} params, "
                f"got {len(params)}", table="cameras")
        if model == CameraModel.SIMPLE_PINHOLE:
            f, cx, cy = params
            return CameraIntrinsics(camera_id, model, width, height, (f, f), (cx, cy))
        if model == CameraModel.PINHOLE:
            fx, fy, cx, cy = params
            return CameraIntrinsics(camera_id, model, width, height, (fx, fy), (cx, cy))
        if model == CameraModel.SIMPLE_RADIAL:
            f, cx, cy, k = params
            return CameraIntrinsics(camera_id, model, width, height, (f, f), (cx, cy), (k,))
        fx, fy, cx, cy, k1, k2, p1, p2 = params
        return CameraIntrinsics(camera_id, model, width, height, (fx, fy), (cx, cy),
                                (k1, k2, p1, p2))


@dataclass(frozen=True)
class ImagePose:
    """World-to-camera pose of one registered frame."""

    image_id: int
    camera_id: int
    rotation: np.ndarray  # unit quaternion (w,x,y,z), world -> camera
    translation: np.ndarray  # world -> camera, SfM units
    name: str
    observations: tuple = ()  # ((x, y), point3d_id or None) per 2D feature

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValidationError(f"image {self.image_id}: quaternion is not unit norm")

    def rotation_matrix(self) -> np.ndarray:
        from .transforms import quat_to_mat

        return quat_to_mat(self.rotation)


@dataclass(frozen=True)
class TrackPoint:
    point3d_id: int
    position: np.ndarray
    color: tuple[int, int, int]
    reprojection_error: float
    track: tuple = ()  # (image_id, observation index)

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class SfmModel:
    cameras: dict[int, CameraIntrinsics] = field(default_factory=dict)
    images: dict[int, ImagePose] = field(default_factory=dict)
    points: dict[int, TrackPoint] = field(default_factory=dict)

    def validate(self) -> "SfmModel":
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise IntegrityError(
                    f"image {img.image_id} references unknown camera {img.camera_id}")
        for pt in self.points.values():
            for image_id, obs_idx in pt.track:
                img = self.images.get(image_id)
                if img is None:
                    raise IntegrityError(
                        f"point {pt.point3d_id} track references unknown image {image_id}")
                if not (0 <= obs_idx < len(img.observations)):
                    raise IntegrityError(
                        f"point {pt.point3d_id} track references observation {obs_idx} "
                        f"out of range for image {image_id}")
                if img.observations[obs_idx][1] != pt.point3d_id:
                    raise IntegrityError(
                        f"point {pt.point3d_id} track does not match observation "
                        f"{obs_idx} of image {image_id}")
        return self


@dataclass(frozen=True)
class FrameManifest:
    """Per-frame record of a capture video: index, timestamp, tag visibility."""

    entries: tuple  # (frame_index, timestamp_s, has_tag)

    def __post_init__(self):
        prev_idx, prev_t = None, None
        for idx, t, _ in self.entries:
            if prev_idx is not None and idx <= prev_idx:
                raise ValidationError("frame_index must be strictly increasing")
            if prev_t is not None and t < prev_t:
                raise ValidationError("timestamps must be non-decreasing")
            prev_idx, prev_t = idx, t

    @staticmethod
    def from_text(text: str) -> "FrameManifest":
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 'frame_index timestamp has_tag', got {line!r}",
                                 table="frame_manifest", offset=lineno)
            entries.append((int(parts[0]), float(parts[1]), parts[2] in ("1", "true", "True")))
        return FrameManifest(tuple(entries))

    def to_text(self) -> str:
        lines = [f"{i} {_fmt_float(t)} {1 if h else 0}" for i, t, h in self.entries]
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# text format


def _fmt_float(x: float) -> str:
    # repr round-trips doubles exactly, keeping text fixtures lossless
    return repr(float(x))


def _write_cameras_text(cameras: Mapping[int, CameraIntrinsics]) -> bytes:
    lines = ["# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]"]
    for cam in sorted(cameras.values(), key=lambda c: c.camera_id):
        name = _MODEL_TABLE[cam.model][0]
        params = " ".join(_fmt_float(p) for p in cam.params())
        lines.append(f"{cam.camera_id} {name} {cam.width} {cam.height} {params}")
    return ("\n".join(lines) + "\n").encode()


def _write_images_text(images: Mapping[int, ImagePose]) -> bytes:
    lines = ["# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
             "#   then: POINTS2D[] as (X, Y, POINT3D_ID)"]
    for img in sorted(images.values(), key=lambda i: i.image_id):
        q = " ".join(_fmt_float(v) for v in img.rotation)
        t = " ".join(_fmt_float(v) for v in img.translation)
        lines.append(f"{img.image_id} {q} {t} {img.camera_id} {img.name}")
        obs = []
        for (x, y), pid in img.observations:
            obs.extend([_fmt_float(x), _fmt_float(y), str(-1 if pid is None else pid)])
        lines.append(" ".join(obs))
    return ("\n".join(lines) + "\n").encode()


def _write_points_text(points: Mapping[int, TrackPoint]) -> bytes:
    lines = ["# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for pt in sorted(points.values(), key=lambda p: p.point3d_id):
        pos = " ".join(_fmt_float(v) for v in pt.position)
        rgb = " ".join(str(c) for c in pt.color)
        track = " ".join(f"{iid} {oidx}" for iid, oidx in pt.track)
        lines.append(f"{pt.point3d_id} {pos} {rgb} {_fmt_float(pt.reprojection_error)} {track}".rstrip())
    return ("\n".join(lines) + "\n").encode()


def _text_records(data: bytes, table: str):
    for lineno, raw in enumerate(data.decode().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line


def _parse_cameras_text(data: bytes) -> dict[int, CameraIntrinsics]:
    cameras = {}
    for lineno, line in _text_records(data, "cameras"):
        parts = line.split()
        try:
            camera_id = int(parts[0])
            model_name = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed camera record: {exc}", table="cameras",
                             offset=lineno) from exc
        if model_name not in _MODEL_BY_NAME:
            raise ParseError(f"unsupported camera model {model_name!r}", table="cameras",
                             offset=lineno)
        cameras[camera_id] = CameraIntrinsics.from_params(
            camera_id, _MODEL_BY_NAME[model_name], width, height, params)
    return cameras


def _parse_images_text(data: bytes) -> dict[int, ImagePose]:
    # two physical lines per image; the observation line may be empty, so blank
    # lines are only skippable while looking for the next header
    images = {}
    lines = data.decode().splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line or line.startswith("#"):
            i += 1
            continue
        parts = line.split()
        try:
            image_id = int(parts[0])
            q = np.array([float(v) for v in parts[1:5]])
            t = np.array([float(v) for v in parts[5:8]])
            camera_id = int(parts[8])
            name = " ".join(parts[9:])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed image record: {exc}", table="images",
                             offset=i + 1) from exc
        obs_parts = lines[i + 1].split() if i + 1 < len(lines) else []
        if len(obs_parts) % 3 != 0:
            raise ParseError("observation list length not a multiple of 3",
                             table="images", offset=i + 2)
        observations = []
        for k in range(0, len(obs_parts), 3):
            try:
                x, y = float(obs_parts[k]), float(obs_parts[k + 1])
                pid = int(obs_parts[k + 2])
            except ValueError as exc:
                raise ParseError(f"malformed observation: {exc}", table="images",
                                 offset=i + 2) from exc
            observations.append(((x, y), None if pid == -1 else pid))
        images[image_id] = ImagePose(image_id, camera_id, q, t, name, tuple(observations))
        i += 2
    return images


def _parse_points_text(data: bytes) -> dict[int, TrackPoint]:
    points = {}
    for lineno, line in _text_records(data, "points3D"):
        parts = line.split()
        try:
            pid = int(parts[0])
            pos = np.array([float(v) for v in parts[1:4]])
            rgb = (int(parts[4]), int(parts[5]), int(parts[6]))
            err = float(parts[7])
            rest = parts[8:]
            if len(rest) % 2 != 0:
                raise ValueError("track list length not a multiple of 2")
            track = tuple((int(rest[i]), int(rest[i + 1])) for i in range(0, len(rest), 2))
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed point record: {exc}", table="points3D",
                             offset=lineno) from exc
        points[pid] = TrackPoint(pid, pos, rgb, err, track)
    return points


# ---------------------------------------------------------------------------
# binary format (little-endian)


def _read_exact(f: BinaryIO, n: int, table: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ParseError(f"unexpected end of file, wanted {n} bytes got {len(data)}",
                         table=table, offset=f.tell())
    return data


def _write_cameras_binary(cameras: Mapping[int, CameraIntrinsics]) -> bytes:
    out = BytesIO()
    out.write(struct.pack("<Q", len(cameras)))
    for cam in sorted(cameras.values(), key=lambda c: c.camera_id):
        model_id = _MODEL_TABLE[cam.model][1]
        out.write(struct.pack("<iiQQ", cam.camera_id, model_id, cam.width, cam.height))
        params = cam.params()
        out.write(struct.pack(f"<{len(params)}d", *params))
    return out.getvalue()


def _parse_cameras_binary(data: bytes) -> dict[int, CameraIntrinsics]:
    f = BytesIO(data)
    (n,) = struct.unpack("<Q", _read_exact(f, 8, "cameras"))
    cameras = {}
    for _ in range(n):
        camera_id, model_id, width, height = struct.unpack(
            "<iiQQ", _read_exact(f, 24, "cameras"))
        model = _MODEL_BY_ID.get(model_id)
        if model is None:
            raise ParseError(f"unsupported camera model id {model_id}", table="cameras",
                             offset=f.tell())
        n_params = _MODEL_TABLE[model][2]
        params = list(struct.unpack(f"<{n_params}d", _read_exact(f, 8 * n_params, "cameras")))
        cameras[camera_id] = CameraIntrinsics.from_params(
            camera_id, model, int(width), int(height), params)
    return cameras


def _write_images_binary(images: Mapping[int, ImagePose]) -> bytes:
    out = BytesIO()
    out.write(struct.pack("<Q", len(images)))
    for img in sorted(images.values(), key=lambda i: i.image_id):
        out.write(struct.pack("<i", img.image_id))
        out.write(struct.pack("<4d", *img.rotation))
        out.write(struct.pack("<3d", *img.translation))
        out.write(struct.pack("<i", img.camera_id))
        out.write(img.name.encode() + b"\x00")
        out.write(struct.pack("<Q", len(img.observations)))
        for (x, y), pid in img.observations:
            out.write(struct.pack("<ddq", x, y, -1 if pid is None else pid))
    return out.getvalue()


def _parse_images_binary(data: bytes) -> dict[int, ImagePose]:
    f = BytesIO(data)
    (n,) = struct.unpack("<Q", _read_exact(f, 8, "images"))
    images = {}
    for _ in range(n):
        (image_id,) = struct.unpack("<i", _read_exact(f, 4, "images"))
        q = np.array(struct.unpack("<4d", _read_exact(f, 32, "images")))
        t = np.array(struct.unpack("<3d", _read_exact(f, 24, "images")))
        (camera_id,) = struct.unpack("<i", _read_exact(f, 4, "images"))
        name_bytes = bytearray()
        while True:
            c = _read_exact(f, 1, "images")
            if c == b"\x00":
                break
            name_bytes += c
        (n_obs,) = struct.unpack("<Q", _read_exact(f, 8, "images"))
        observations = []
        for _ in range(n_obs):
            x, y, pid = struct.unpack("<ddq", _read_exact(f, 24, "images"))
            observations.append(((x, y), None if pid == -1 else int(pid)))
        images[image_id] = ImagePose(image_id, camera_id, q, t, name_bytes.decode(),
                                     tuple(observations))
    return images


def _write_points_binary(points: Mapping[int, TrackPoint]) -> bytes:
    out = BytesIO()
    out.write(struct.pack("<Q", len(points)))
    for pt in sorted(points.values(), key=lambda p: p.point3d_id):
        out.write(struct.pack("<q", pt.point3d_id))
        out.write(struct.pack("<3d", *pt.position))
        out.write(struct.pack("<3B", *pt.color))
        out.write(struct.pack("<d", pt.reprojection_error))
        out.write(struct.pack("<Q", len(pt.track)))
        for image_id, obs_idx in pt.track:
            out.write(struct.pack("<ii", image_id, obs_idx))
    return out.getvalue()


def _parse_points_binary(data: bytes) -> dict[int, TrackPoint]:
    f = BytesIO(data)
    (n,) = struct.unpack("<Q", _read_exact(f, 8, "points3D"))
    points = {}
    for _ in range(n):
        (pid,) = struct.unpack("<q", _read_exact(f, 8, "points3D"))
        pos = np.array(struct.unpack("<3d", _read_exact(f, 24, "points3D")))
        rgb = struct.unpack("<3B", _read_exact(f, 3, "points3D"))
        (err,) = struct.unpack("<d", _read_exact(f, 8, "points3D"))
        (track_len,) = struct.unpack("<Q", _read_exact(f, 8, "points3D"))
        track = []
        for _ in range(track_len):
            image_id, obs_idx = struct.unpack("<ii", _read_exact(f, 8, "points3D"))
            track.append((image_id, obs_idx))
        points[pid] = TrackPoint(pid, pos, tuple(int(c) for c in rgb), err, tuple(track))
    return points


# ---------------------------------------------------------------------------
# public API

_TABLES = ("cameras", "images", "points3D")


def parse_sfm_model(source, format: str = "binary") -> SfmModel:
    """Parse a sparse model from a directory or a mapping of table name -> bytes.

    A directory must contain cameras/images/points3D with .bin or .txt
    extensions matching `format`.
    """
    ext = {"binary": ".bin", "text": ".txt"}.get(format)
    if ext is None:
        raise ValueError(f"format must be 'text' or 'binary', got {format!r}")
    if isinstance(source, (str, Path)):
        root = Path(source)
        tables = {}
        for name in _TABLES:
            path = root / f"{name}{ext}"
            if not path.exists():
                raise ParseError(f"missing table file {path.name}", table=name)
            tables[name] = path.read_bytes()
    else:
        tables = dict(source)
        for name in _TABLES:
            if name not in tables:
                raise ParseError(f"missing table {name!r}", table=name)
    if format == "binary":
        cameras = _parse_cameras_binary(tables["cameras"])
        images = _parse_images_binary(tables["images"])
        points = _parse_points_binary(tables["points3D"])
    else:
        cameras = _parse_cameras_text(tables["cameras"])
        images = _parse_images_text(tables["images"])
        points = _parse_points_text(tables["points3D"])
    return SfmModel(cameras, images, points).validate()


def write_sfm_model(model: SfmModel, format: str = "binary",
                    directory: str | Path | None = None) -> dict[str, bytes]:
    """Serialize to table-name -> bytes; optionally also write files to `directory`."""
    if format == "binary":
        tables = {
            "cameras": _write_cameras_binary(model.cameras),
            "images": _write_images_binary(model.images),
            "points3D": _write_points_binary(model.points),
        }
        ext = ".bin"
    elif format == "text":
        tables = {
            "cameras": _write_cameras_text(model.cameras),
            "images": _write_images_text(model.images),
            "points3D": _write_points_text(model.points),
        }
        ext = ".txt"
    else:
        raise ValueError(f"format must be 'text' or 'binary', got {format!r}")
    if directory is not None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, data in tables.items():
            (directory / f"{name}{ext}").write_bytes(data)
    return tables


# ---------------------------------------------------------------------------
# projection


def _distort(model: CameraModel, distortion, xn: float, yn: float) -> tuple[float, float]:
    if model in (CameraModel.PINHOLE, CameraModel.SIMPLE_PINHOLE):
        return xn, yn
    r2 = xn * xn + yn * yn
    if model == CameraModel.SIMPLE_RADIAL:
        k = distortion[0]
        f = 1.0 + k * r2
        return xn * f, yn * f
    k1, k2, p1, p2 = distortion
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = xn * radial + 2 * p1 * xn * yn + p2 * (r2 + 2 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2 * yn * yn) + 2 * p2 * xn * yn
    return xd, yd


def undistort_pixel(cam: CameraIntrinsics, pixel) -> tuple[float, float]:
    """Pixel -> normalized image coordinates with distortion removed (Newton)."""
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    xd = (pixel[0] - cx) / fx
    yd = (pixel[1] - cy) / fy
    if cam.model in (CameraModel.PINHOLE, CameraModel.SIMPLE_PINHOLE):
        return xd, yd
    xn, yn = xd, yd
    for _ in range(50):
        px, py = _distort(cam.model, cam.distortion, xn, yn)
        dx, dy = xd - px, yd - py
        if dx * dx + dy * dy < 1e-24:
            break
        # Jacobian by central differences; distortion is mild so this converges fast
        eps = 1e-8
        pxx, pyx = _distort(cam.model, cam.distortion, xn + eps, yn)
        pxy, pyy = _distort(cam.model, cam.distortion, xn, yn + eps)
        j00, j10 = (pxx - px) / eps, (pyx - py) / eps
        j01, j11 = (pxy - px) / eps, (pyy - py) / eps
        det = j00 * j11 - j01 * j10
        if abs(det) < 1e-15:
            break
        xn += (j11 * dx - j01 * dy) / det
        yn += (-j10 * dx + j00 * dy) / det
    return xn, yn


def project(point, pose: ImagePose, cam: CameraIntrinsics) -> tuple[np.ndarray, bool]:
    """Project a world point: returns (pixel, in_front).

    Raises on a point coincident with the camera center (no defined ray).
    """
    point = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(point)):
        raise ValidationError("cannot project non-finite point")
    p_cam = pose.rotation_matrix() @ point + pose.translation
    if np.linalg.norm(p_cam) < 1e-12:
        raise DegenerateGeometryError("degenerate projection: point at camera center")
    in_front = p_cam[2] > 0
    z = p_cam[2] if p_cam[2] != 0 else 1e-300
    xn, yn = p_cam[0] / z, p_cam[1] / z
    xd, yd = _distort(cam.model, cam.distortion, xn, yn)
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    return np.array([fx * xd + cx, fy * yd + cy]), bool(in_front)


def apply_similarity_to_model(model: SfmModel, xf) -> SfmModel:
    """Re-express a model in a new frame: points p' = xf(p), poses adjusted so
    every projection is unchanged (rays are invariant to uniform scaling)."""
    from .transforms import mat_to_quat

    inv = xf.inverse()
    images = {}
    for img in model.images.values():
        # x_cam ∝ R_old @ inv(p') + t_old = inv.s·(R_old inv.R) p' + R_old inv.t + t_old
        R_old = img.rotation_matrix()
        R_new = R_old @ inv.R
        t_new = (R_old @ inv.t + img.translation) / inv.scale
        images[img.image_id] = ImagePose(
            img.image_id, img.camera_id, mat_to_quat(R_new),
            t_new, img.name, img.observations)
    points = {
        pid: TrackPoint(pt.point3d_id, xf.apply(pt.position), pt.color,
                        pt.reprojection_error, pt.track)
        for pid, pt in model.points.items()
    }
    return SfmModel(dict(model.cameras), images, points).validate()


# ---------------------------------------------------------------------------
# two-pass frame sampling


def sample_frames(manifest: FrameManifest, base_rate: float,
                  tag_rate: float | None = None) -> list[int]:
    """Two-pass frame selection over a capture manifest.

    Pass one picks the frame nearest each 1/base_rate tick. Pass two picks,
    among tag-bearing frames only, the one nearest each 1/tag_rate tick.
    Returns the sorted, deduplicated union.
    """
    if base_rate <= 0:
        raise ValidationError("base_rate must be positive")
    if tag_rate is None:
        tag_rate = default_tag_rate(manifest)
    if tag_rate < base_rate:
        raise ValidationError("tag_rate must be >= base_rate")
    if not manifest.entries:
        return []

    idx = np.array([e[0] for e in manifest.entries], dtype=np.int64)
    ts = np.array([e[1] for e in manifest.entries], dtype=np.float64)
    has_tag = np.array([e[2] for e in manifest.entries], dtype=bool)

    duration = float(ts[-1])
    picked = set(_pick_nearest(idx, ts, base_rate, duration))
    if np.any(has_tag):
        picked.update(_pick_nearest(idx[has_tag], ts[has_tag], tag_rate, duration))
    return sorted(picked)


def _pick_nearest(idx: np.ndarray, ts: np.ndarray, rate: float,
                  duration: float) -> Iterable[int]:
    """Frame index nearest each tick k/rate for k = 0 .. floor(duration * rate).

    Ticks span the whole video; the candidate set may be a subset of frames."""
    n_ticks = int(np.floor(duration * rate + 1e-9)) + 1
    ticks = np.arange(n_ticks, dtype=np.float64) / rate
    pos = np.searchsorted(ts, ticks)
    out = []
    for tick, p in zip(ticks, pos):
        lo = max(0, p - 1)
        hi = min(len(ts) - 1, p)
        out.append(int(idx[lo]) if tick - ts[lo] <= ts[hi] - tick else int(idx[hi]))
    return out


def default_tag_rate(manifest: FrameManifest, cap_hz: float = 10.0) -> float:
    """Source frame rate estimated from median frame spacing, capped at `cap_hz`."""
    if len(manifest.entries) < 2:
        return cap_hz
    ts = np.array([e[1] for e in manifest.entries])
    dt = np.median(np.diff(ts))
    if dt <= 0:
        return cap_hz
    return float(min(1.0 / dt, cap_hz))
