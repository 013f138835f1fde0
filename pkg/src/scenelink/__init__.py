"""scenelink: register Gaussian-splat scans of hardware onto CAD models and
run part-anchored asynchronous troubleshooting on top of the shared scene."""

from .transforms import RigidTransform, SimilarityTransform
from .sfm import (CameraIntrinsics, CameraModel, FrameManifest, ImagePose, SfmModel,
                  TrackPoint, parse_sfm_model, project, sample_frames, write_sfm_model)
from .splats import (Gaussian, SplatCloud, parse_splat_ply, prune_by_mask,
                     transform_splat, write_splat_ply)
from .assembly import (Assembly, DocLink, DofSpec, Part, TagAnchor, docs_for_part,
                       load_assembly, part_world_transform, tag_corners_world, write_glb)
from .registration import (AlignmentResult, FrameLocalization, JointEstimate,
                           TagObservation, TriangulatedTag, align_splat_to_cad,
                           estimate_scale, fit_rigid_arun, localize_frame,
                           localize_video, resolve_constraints, triangulate_tag_corners)
from .meshdist import (SpatialIndex, TriangleMesh, WorkspaceSlab, build_index,
                       compute_background_mask, distance_point_to_meshes,
                       distances_to_meshes)

__version__ = "0.1.0"

__all__ = [
    "RigidTransform", "SimilarityTransform",
    "CameraIntrinsics", "CameraModel", "FrameManifest", "ImagePose", "SfmModel",
    "TrackPoint", "parse_sfm_model", "project", "sample_frames", "write_sfm_model",
    "Gaussian", "SplatCloud", "parse_splat_ply", "prune_by_mask", "transform_splat",
    "write_splat_ply",
    "Assembly", "DocLink", "DofSpec", "Part", "TagAnchor", "docs_for_part",
    "load_assembly", "part_world_transform", "tag_corners_world", "write_glb",
    "AlignmentResult", "FrameLocalization", "JointEstimate", "TagObservation",
    "TriangulatedTag", "align_splat_to_cad", "estimate_scale", "fit_rigid_arun",
    "localize_frame", "localize_video", "resolve_constraints", "triangulate_tag_corners",
    "SpatialIndex", "TriangleMesh", "WorkspaceSlab", "build_index",
    "compute_background_mask", "distance_point_to_meshes", "distances_to_meshes",
]
