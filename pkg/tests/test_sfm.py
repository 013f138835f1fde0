import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenelink import sfm
from scenelink.errors import (DegenerateGeometryError, IntegrityError, ParseError,
                              ValidationError)
from scenelink.transforms import SimilarityTransform, quat_normalize, rotvec_to_mat

from .oracles import project_oracle, sample_frames_oracle


def make_camera(camera_id=1, model=sfm.CameraModel.PINHOLE, distortion=()):
    return sfm.CameraIntrinsics(camera_id, model, 1920, 1080, (1000.0, 1000.0),
                                (960.0, 540.0), distortion)


def random_model(rng, n_cameras=3, n_images=6, n_points=20) -> sfm.SfmModel:
    cameras = {}
    models = [
        (sfm.CameraModel.PINHOLE, ()),
        (sfm.CameraModel.SIMPLE_RADIAL, (0.05,)),
        (sfm.CameraModel.OPENCV_RADIAL, (0.05, -0.01, 0.001, -0.002)),
        (sfm.CameraModel.SIMPLE_PINHOLE, ()),
    ]
    for cid in range(1, n_cameras + 1):
        model, dist = models[cid % len(models)]
        cameras[cid] = sfm.CameraIntrinsics(
            cid, model, int(rng.integers(640, 4000)), int(rng.integers(480, 3000)),
            (float(rng.uniform(500, 2000)), float(rng.uniform(500, 2000))),
            (float(rng.uniform(300, 600)), float(rng.uniform(200, 460))), dist)

    images = {}
    for iid in range(1, n_images + 1):
        q = quat_normalize(rng.normal(size=4))
        obs = tuple(
            ((float(rng.uniform(0, 640)), float(rng.uniform(0, 480))), None)
            for _ in range(int(rng.integers(0, 5)))
        )
        images[iid] = sfm.ImagePose(iid, int(rng.integers(1, n_cameras + 1)), q,
                                    rng.normal(size=3), f"img_{iid:04d}.jpg", obs)

    points = {}
    for pid in range(1, n_points + 1):
        points[pid] = sfm.TrackPoint(
            pid, rng.normal(size=3),
            tuple(int(c) for c in rng.integers(0, 256, size=3)),
            float(rng.uniform(0, 2)), ())
    return sfm.SfmModel(cameras, images, points).validate()


class TestParseWrite:
    def test_empty_model_round_trips_both_formats(self):
        empty = sfm.SfmModel()
        for fmt in ("binary", "text"):
            back = sfm.parse_sfm_model(sfm.write_sfm_model(empty, fmt), fmt)
            assert back.cameras == {} and back.images == {} and back.points == {}

    @pytest.mark.parametrize("fmt", ["binary", "text"])
    def test_random_model_round_trips(self, rng, fmt):
        model = random_model(rng, n_cameras=10)
        back = sfm.parse_sfm_model(sfm.write_sfm_model(model, fmt), fmt)
        assert_models_equal(model, back)

    def test_text_and_binary_parse_identically(self, rng):
        model = random_model(rng)
        a = sfm.parse_sfm_model(sfm.write_sfm_model(model, "text"), "text")
        b = sfm.parse_sfm_model(sfm.write_sfm_model(model, "binary"), "binary")
        assert_models_equal(a, b)

    def test_radial_distortion_coefficients_preserved(self):
        cam = sfm.CameraIntrinsics(5, sfm.CameraModel.OPENCV_RADIAL, 800, 600,
                                   (700.0, 710.0), (400.0, 300.0),
                                   (0.1, -0.05, 0.001, 0.002))
        model = sfm.SfmModel(cameras={5: cam})
        back = sfm.parse_sfm_model(sfm.write_sfm_model(model, "binary"), "binary")
        assert back.cameras[5].distortion == cam.distortion

    def test_directory_round_trip(self, rng, tmp_path):
        model = random_model(rng)
        sfm.write_sfm_model(model, "binary", tmp_path / "sparse")
        back = sfm.parse_sfm_model(tmp_path / "sparse", "binary")
        assert_models_equal(model, back)

    def test_dangling_camera_reference_rejected(self):
        pose = sfm.ImagePose(1, 99, (1.0, 0, 0, 0), np.zeros(3), "a.jpg")
        with pytest.raises(IntegrityError, match="unknown camera"):
            sfm.SfmModel(images={1: pose}).validate()

    def test_track_must_match_observation(self):
        cam = make_camera()
        pose = sfm.ImagePose(1, 1, (1.0, 0, 0, 0), np.zeros(3), "a.jpg",
                             (((5.0, 6.0), 2),))
        pt = sfm.TrackPoint(1, np.zeros(3), (0, 0, 0), 0.0, ((1, 0),))
        with pytest.raises(IntegrityError, match="does not match"):
            sfm.SfmModel({1: cam}, {1: pose}, {1: pt}).validate()

    def test_malformed_text_record_names_table_and_offset(self):
        bad = {"cameras": b"1 PINHOLE not_a_number 5 1 1 0 0\n",
               "images": b"", "points3D": b""}
        with pytest.raises(ParseError, match="cameras"):
            sfm.parse_sfm_model(bad, "text")

    def test_unknown_camera_model_rejected(self):
        bad = {"cameras": b"1 FISHEYE_WILD 640 480 1 1 0 0\n",
               "images": b"", "points3D": b""}
        with pytest.raises(ParseError, match="FISHEYE_WILD"):
            sfm.parse_sfm_model(bad, "text")

    def test_truncated_binary_fails_with_offset(self, rng):
        model = random_model(rng)
        tables = sfm.write_sfm_model(model, "binary")
        tables["images"] = tables["images"][:-7]
        with pytest.raises(ParseError, match="images"):
            sfm.parse_sfm_model(tables, "binary")

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31))
    def test_round_trip_property(self, seed):
        model = random_model(np.random.default_rng(seed), n_cameras=2, n_images=3,
                             n_points=5)
        for fmt in ("binary", "text"):
            assert_models_equal(model, sfm.parse_sfm_model(
                sfm.write_sfm_model(model, fmt), fmt))


def assert_models_equal(a: sfm.SfmModel, b: sfm.SfmModel, tol=1e-9):
    assert set(a.cameras) == set(b.cameras)
    for cid, cam in a.cameras.items():
        other = b.cameras[cid]
        assert (cam.model, cam.width, cam.height) == (other.model, other.width, other.height)
        np.testing.assert_allclose(cam.params(), other.params(), atol=tol, rtol=0)
    assert set(a.images) == set(b.images)
    for iid, img in a.images.items():
        other = b.images[iid]
        assert (img.camera_id, img.name) == (other.camera_id, other.name)
        np.testing.assert_allclose(img.rotation, other.rotation, atol=tol, rtol=0)
        np.testing.assert_allclose(img.translation, other.translation, atol=tol, rtol=0)
        assert len(img.observations) == len(other.observations)
        for (xy1, p1), (xy2, p2) in zip(img.observations, other.observations):
            assert p1 == p2
            np.testing.assert_allclose(xy1, xy2, atol=tol, rtol=0)
    assert set(a.points) == set(b.points)
    for pid, pt in a.points.items():
        other = b.points[pid]
        np.testing.assert_allclose(pt.position, other.position, atol=tol, rtol=0)
        assert pt.color == other.color
        assert abs(pt.reprojection_error - other.reprojection_error) <= tol
        assert pt.track == other.track


class TestProject:
    def test_principal_ray(self):
        cam = sfm.CameraIntrinsics(1, sfm.CameraModel.PINHOLE, 1000, 1000,
                                   (1000.0, 1000.0), (500.0, 500.0))
        pose = sfm.ImagePose(1, 1, (1.0, 0, 0, 0), np.zeros(3), "id.jpg")
        pixel, in_front = sfm.project((0.0, 0.0, 1.0), pose, cam)
        np.testing.assert_allclose(pixel, [500.0, 500.0], atol=1e-12)
        assert in_front

    def test_point_behind_camera(self):
        cam = make_camera()
        pose = sfm.ImagePose(1, 1, (1.0, 0, 0, 0), np.zeros(3), "id.jpg")
        _, in_front = sfm.project((0.0, 0.0, -1.0), pose, cam)
        assert not in_front

    def test_point_at_camera_center_is_degenerate(self):
        cam = make_camera()
        pose = sfm.ImagePose(1, 1, (1.0, 0, 0, 0), np.zeros(3), "id.jpg")
        with pytest.raises(DegenerateGeometryError, match="degenerate projection"):
            sfm.project((0.0, 0.0, 0.0), pose, cam)

    @pytest.mark.parametrize("model,dist", [
        (sfm.CameraModel.PINHOLE, ()),
        (sfm.CameraModel.SIMPLE_RADIAL, (0.07,)),
        (sfm.CameraModel.OPENCV_RADIAL, (0.05, -0.01, 0.002, -0.001)),
    ])
    def test_agrees_with_independent_oracle(self, rng, model, dist):
        cam = make_camera(model=model, distortion=dist)
        for _ in range(200):
            q = quat_normalize(rng.normal(size=4))
            t = rng.normal(size=3)
            pose = sfm.ImagePose(1, 1, q, t, "x.jpg")
            point = rng.normal(size=3) * 3
            from .oracles import quat_rotate

            if abs(quat_rotate(q, point)[2] + t[2]) < 1e-3:
                continue  # skip near-degenerate depths
            pixel, in_front = sfm.project(point, pose, cam)
            exp_pixel, exp_front = project_oracle(point, q, t, cam)
            np.testing.assert_allclose(pixel, exp_pixel, atol=1e-9, rtol=0)
            assert in_front == exp_front

    def test_undistort_inverts_distortion(self, rng):
        cam = make_camera(model=sfm.CameraModel.OPENCV_RADIAL,
                          distortion=(0.08, -0.02, 0.001, -0.003))
        for _ in range(50):
            xn, yn = rng.uniform(-0.4, 0.4, size=2)
            xd, yd = sfm._distort(cam.model, cam.distortion, xn, yn)
            fx, fy = cam.focal
            cx, cy = cam.principal_point
            back = sfm.undistort_pixel(cam, (fx * xd + cx, fy * yd + cy))
            np.testing.assert_allclose(back, (xn, yn), atol=1e-10)

    def test_reprojection_matches_stored_observations(self, exact_scene):
        model = exact_scene.model
        for pt in model.points.values():
            for image_id, obs_idx in pt.track:
                img = model.images[image_id]
                cam = model.cameras[img.camera_id]
                pixel, in_front = sfm.project(pt.position, img, cam)
                assert in_front
                stored = np.array(img.observations[obs_idx][0])
                np.testing.assert_allclose(pixel, stored,
                                           atol=pt.reprojection_error + 1e-6)

    def test_model_reframing_preserves_projections(self, rng, exact_scene):
        model = exact_scene.model
        G = SimilarityTransform(3.7, rotvec_to_mat(rng.normal(size=3)),
                                rng.normal(size=3) * 10)
        moved = sfm.apply_similarity_to_model(model, G)
        pt = next(iter(model.points.values()))
        img_id = pt.track[0][0]
        cam = model.cameras[model.images[img_id].camera_id]
        before, _ = sfm.project(pt.position, model.images[img_id], cam)
        after, _ = sfm.project(moved.points[pt.point3d_id].position,
                               moved.images[img_id], cam)
        np.testing.assert_allclose(before, after, atol=1e-6)


class TestSampleFrames:
    @staticmethod
    def manifest(n_frames, fps, tag_pred):
        return sfm.FrameManifest(tuple(
            (i, i / fps, bool(tag_pred(i))) for i in range(n_frames)))

    def test_paper_constants_give_240_frames(self):
        # 60 s of 30 fps video with a 4 Hz first pass
        manifest = self.manifest(1800, 30.0, lambda i: False)
        picked = sfm.sample_frames(manifest, base_rate=4.0, tag_rate=10.0)
        assert len(picked) == 240

    def test_all_tagged_at_source_rate_selects_everything(self):
        manifest = self.manifest(90, 30.0, lambda i: True)
        picked = sfm.sample_frames(manifest, base_rate=30.0, tag_rate=30.0)
        assert picked == list(range(90))

    def test_tag_window_densification_matches_oracle(self):
        manifest = self.manifest(900, 30.0, lambda i: 100 <= i <= 200)
        picked = sfm.sample_frames(manifest, base_rate=4.0, tag_rate=10.0)
        assert picked == sample_frames_oracle(manifest.entries, 4.0, 10.0)
        densified = set(picked) - set(sfm.sample_frames(
            self.manifest(900, 30.0, lambda i: False), 4.0, 10.0))
        assert densified and all(100 <= i <= 200 for i in densified)

    def test_empty_manifest(self):
        assert sfm.sample_frames(sfm.FrameManifest(()), 4.0, 10.0) == []

    def test_output_sorted_unique_superset_of_base_pass(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed)
            manifest = self.manifest(300, 24.0, lambda i: r.uniform() < 0.3)
            picked = sfm.sample_frames(manifest, 3.0, 8.0)
            assert picked == sorted(set(picked))
            base_only = sfm.sample_frames(
                sfm.FrameManifest(tuple((i, t, False) for i, t, _ in manifest.entries)),
                3.0, 8.0)
            assert set(base_only) <= set(picked)
            assert picked == sample_frames_oracle(manifest.entries, 3.0, 8.0)

    def test_rate_validation(self):
        manifest = self.manifest(10, 30.0, lambda i: False)
        with pytest.raises(ValidationError):
            sfm.sample_frames(manifest, 0.0, 10.0)
        with pytest.raises(ValidationError):
            sfm.sample_frames(manifest, 8.0, 4.0)

    def test_manifest_text_round_trip(self):
        manifest = self.manifest(25, 30.0, lambda i: i % 3 == 0)
        back = sfm.FrameManifest.from_text(manifest.to_text())
        assert back.entries == manifest.entries

    def test_manifest_ordering_enforced(self):
        with pytest.raises(ValidationError):
            sfm.FrameManifest(((2, 0.0, False), (1, 0.1, False)))
        with pytest.raises(ValidationError):
            sfm.FrameManifest(((0, 1.0, False), (1, 0.5, False)))
