import numpy as np
import pytest

from deformcap import scene_io, synthgen
from deformcap.scene_io import CameraParams, MaskImage, TriMesh


def identity_camera(view=0):
    K = np.diag([1000.0, 1000.0, 1.0])
    K[0, 2] = 512.0
    K[1, 2] = 384.0
    return CameraParams(id=view, K=K, R=np.eye(3), T=np.zeros(3),
                        width=1024, height=768)


class TestCameras:
    def test_identity_loads(self, tmp_path):
        cam = identity_camera()
        cam.validate()
        assert np.linalg.det(cam.R) == pytest.approx(1.0)

    def test_reflection_rejected(self):
        cam = identity_camera()
        cam.R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="rotation not proper"):
            cam.validate()

    def test_non_orthonormal_rejected(self):
        cam = identity_camera()
        cam.R = np.eye(3) + 1e-3
        with pytest.raises(ValueError, match="camera 0"):
            cam.validate()

    def test_rig_round_trip(self, tmp_path):
        cams = synthgen.make_rig(10, 800.0)
        path = str(tmp_path / "cameras.json")
        scene_io.save_cameras(path, cams)
        loaded = scene_io.load_cameras(path)
        assert len(loaded) == 10
        for a, b in zip(cams, loaded):
            assert a.id == b.id and a.width == b.width and a.height == b.height
            assert np.array_equal(a.K, b.K)
            assert np.array_equal(a.R, b.R)
            assert np.array_equal(a.T, b.T)

    def test_projection_units(self):
        cam = identity_camera()
        uv = cam.project(np.array([[0.0, 0.0, 500.0]]))
        assert np.allclose(uv, [[512.0, 384.0]])


class TestMesh:
    def test_tetrahedron_counts(self, tmp_path):
        obj = tmp_path / "tet.obj"
        obj.write_text(
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n"
            "f 1 3 2\nf 1 2 4\nf 2 3 4\nf 1 4 3\n")
        mesh = scene_io.load_mesh(str(obj))
        assert len(mesh.vertices) == 4
        assert len(mesh.faces) == 4
        assert len(mesh.edge_counts()) == 6
        assert mesh.euler_characteristic() == 2
        assert mesh.is_watertight()

    def test_icosphere_watertight(self):
        mesh = synthgen.icosphere(100.0, 3)
        assert len(mesh.vertices) == 642
        mesh.validate_template()

    def test_quad_face_rejected(self, tmp_path):
        obj = tmp_path / "quad.obj"
        obj.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(ValueError, match="non-triangular face at line 5"):
            scene_io.load_mesh(str(obj))

    def test_out_of_range_index(self, tmp_path):
        obj = tmp_path / "bad.obj"
        obj.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
        with pytest.raises(ValueError, match="out of range"):
            scene_io.load_mesh(str(obj))

    def test_round_trip_bit_exact(self, tmp_path):
        mesh = synthgen.icosphere(97.3, 2)
        path = str(tmp_path / "m.obj")
        scene_io.save_mesh(path, mesh)
        loaded = scene_io.load_mesh(path)
        assert np.array_equal(loaded.vertices, mesh.vertices)
        assert np.array_equal(loaded.faces, mesh.faces)

    def test_normals_unit(self):
        mesh = synthgen.icosphere(50.0, 2)
        lens = np.linalg.norm(mesh.normals, axis=1)
        assert np.all(np.abs(lens - 1.0) < 1e-6)

    def test_vn_records_ignored(self, tmp_path):
        obj = tmp_path / "n.obj"
        obj.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1 2 3\n")
        mesh = scene_io.load_mesh(str(obj))
        assert len(mesh.faces) == 1


class TestMask:
    def test_all_zero(self, tmp_path):
        mask = MaskImage(0, np.zeros((10, 20), dtype=np.uint8))
        path = str(tmp_path / "mask_0000_00.pgm")
        scene_io.save_mask(path, mask)
        loaded = scene_io.load_mask(path)
        assert loaded.foreground_count() == 0
        assert loaded.view == 0
        assert loaded.width == 20 and loaded.height == 10

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        pixels = np.where(rng.random((33, 17)) > 0.5, 255, 0).astype(np.uint8)
        mask = MaskImage(3, pixels)
        path = str(tmp_path / "mask_0001_03.pgm")
        scene_io.save_mask(path, mask)
        loaded = scene_io.load_mask(path)
        assert loaded.view == 3
        assert np.array_equal(loaded.pixels, pixels)

    def test_threshold_at_128(self, tmp_path):
        path = str(tmp_path / "gray.pgm")
        with open(path, "wb") as f:
            f.write(b"P5\n2 1\n255\n")
            f.write(bytes([127, 128]))
        loaded = scene_io.load_mask(path, view=0)
        assert loaded.pixels.tolist() == [[0, 255]]

    def test_p2_rejected(self, tmp_path):
        path = tmp_path / "ascii.pgm"
        path.write_text("P2\n2 2\n255\n0 0 0 0\n")
        with pytest.raises(ValueError, match="unsupported PGM variant"):
            scene_io.load_mask(str(path))

    def test_dimension_mismatch(self, tmp_path):
        mask = MaskImage(0, np.zeros((10, 20), dtype=np.uint8))
        path = str(tmp_path / "m.pgm")
        scene_io.save_mask(path, mask)
        with pytest.raises(ValueError, match="does not match camera"):
            scene_io.load_mask(path, expect_size=(21, 10))

    def test_synthetic_mask_matches_render_count(self, rig4):
        # The generator's masks are produced by the rasterizer; spot-check the
        # round trip preserves the exact foreground count.
        from deformcap import rasterizer
        ico = synthgen.icosphere(100.0, 2)
        buf = rasterizer.rasterize([(ico, "object")], rig4[0])
        mask = rasterizer.object_visible_mask(buf)
        expected = int(np.count_nonzero(buf.label == rasterizer.LABEL_OBJECT))
        assert mask.foreground_count() == expected

    def test_downsample_shape(self):
        mask = MaskImage(0, np.full((480, 640), 255, dtype=np.uint8))
        small = mask.downsampled(4)
        assert small.width == 160 and small.height == 120
        assert small.foreground_count() == 160 * 120


class TestHandModelIO:
    def test_round_trip(self, tmp_path):
        model = synthgen.make_synthetic_hand()
        path = str(tmp_path / "handmodel.json")
        scene_io.save_hand_model(path, model)
        loaded = scene_io.load_hand_model(path)
        assert np.array_equal(loaded.parents, model.parents)
        assert np.array_equal(loaded.rest_joints, model.rest_joints)
        assert np.array_equal(loaded.weights, model.weights)
        assert np.array_equal(loaded.rest_mesh.vertices, model.rest_mesh.vertices)


class TestResultFiles:
    def test_pose_round_trip(self, tmp_path):
        path = str(tmp_path / "pose_0000.json")
        theta = np.linspace(-1.0, 1.0, 66) * np.pi / 3.5
        alpha = np.array([0.1, -0.2, 0.3, 12.345678901234567, -7.0, 3.25])
        scene_io.save_pose_file(path, 0, theta, alpha, hand_theta_raw=theta * 1.1,
                                object_alpha_raw=alpha * 0.9)
        data = scene_io.load_pose_file(path)
        assert np.array_equal(data["hand_theta"], theta)
        assert np.array_equal(data["object_alpha"], alpha)
        assert np.array_equal(data["object_alpha_raw"], alpha * 0.9)

    def test_contact_map_round_trip(self, tmp_path):
        path = str(tmp_path / "contactmap_0000.csv")
        disp = np.array([0.0, 1.5, 2.25, 0.3333333333333333])
        scene_io.save_contact_map(path, disp)
        assert np.array_equal(scene_io.load_contact_map(path), disp)


class TestManifest:
    def test_write_load_validate(self, tmp_path):
        scene = synthgen.make_press_sequence(2, seed=3, n_views=2)
        manifest_path = synthgen.write_scene(scene, str(tmp_path / "scene"))
        manifest = scene_io.load_manifest(manifest_path)
        assert manifest.n_frames == 2
        assert len(manifest.mask_files[0]) == 2

    def test_missing_file_rejected(self, tmp_path):
        scene = synthgen.make_press_sequence(1, seed=3, n_views=2)
        manifest_path = synthgen.write_scene(scene, str(tmp_path / "scene"))
        (tmp_path / "scene" / "mask_0000_01.pgm").unlink()
        with pytest.raises(ValueError, match="missing"):
            scene_io.load_manifest(manifest_path)
