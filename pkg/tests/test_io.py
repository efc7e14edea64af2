import numpy as np
import pytest

from splatstyle import sceneio
from splatstyle.scene import Camera, GaussianScene, look_at_camera
from conftest import random_scene


def float32_scene(rng, n, with_rest=False):
    """Random scene whose parameters are exactly float32-representable, so
    the PLY round trip is bit-exact."""
    scene = random_scene(rng, n, with_rest=with_rest)
    for arr in (scene.positions, scene.rotations, scene.log_scales,
                scene.opacity_logits, scene.colors_dc):
        arr[...] = arr.astype(np.float32)
    if scene.colors_rest is not None:
        scene.colors_rest[...] = scene.colors_rest.astype(np.float32)
    return scene


class TestScenePly:
    def test_empty_scene(self, tmp_path):
        path = tmp_path / "empty.ply"
        sceneio.scene_save(GaussianScene.empty(), path)
        assert len(sceneio.scene_load(path)) == 0

    def test_single_gaussian_bit_exact(self, rng, tmp_path):
        scene = float32_scene(rng, 1)
        path = tmp_path / "one.ply"
        sceneio.scene_save(scene, path)
        loaded = sceneio.scene_load(path)
        np.testing.assert_array_equal(loaded.positions, scene.positions)
        np.testing.assert_array_equal(loaded.opacity_logits, scene.opacity_logits)

    @pytest.mark.parametrize("with_rest", [False, True])
    def test_thousand_gaussians_bit_exact(self, rng, tmp_path, with_rest):
        scene = float32_scene(rng, 1000, with_rest=with_rest)
        path = tmp_path / "big.ply"
        sceneio.scene_save(scene, path)
        loaded = sceneio.scene_load(path)
        for a, b in [(loaded.positions, scene.positions),
                     (loaded.rotations, scene.rotations),
                     (loaded.log_scales, scene.log_scales),
                     (loaded.opacity_logits, scene.opacity_logits),
                     (loaded.colors_dc, scene.colors_dc)]:
            np.testing.assert_array_equal(a, b)
        if with_rest:
            np.testing.assert_array_equal(loaded.colors_rest, scene.colors_rest)
        else:
            assert loaded.colors_rest is None

    def test_missing_end_header(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"ply\nformat binary_little_endian 1.0\n")
        with pytest.raises(sceneio.PlyHeaderError):
            sceneio.scene_load(path)

    def test_not_a_ply(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"obj\nformat binary_little_endian 1.0\nend_header\n")
        with pytest.raises(sceneio.PlyHeaderError):
            sceneio.scene_load(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"ply\nformat binary_little_endian 2.0\nend_header\n")
        with pytest.raises(sceneio.PlyVersionError):
            sceneio.scene_load(path)

    def test_ascii_format_rejected(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
        with pytest.raises(sceneio.PlyVersionError):
            sceneio.scene_load(path)

    def test_truncated_payload(self, rng, tmp_path):
        scene = float32_scene(rng, 10)
        path = tmp_path / "trunc.ply"
        sceneio.scene_save(scene, path)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(sceneio.PlyPayloadError):
            sceneio.scene_load(path)

    def test_error_types_are_distinct_decode_errors(self):
        assert issubclass(sceneio.PlyHeaderError, sceneio.SceneDecodeError)
        assert issubclass(sceneio.PlyVersionError, sceneio.SceneDecodeError)
        assert issubclass(sceneio.PlyPayloadError, sceneio.SceneDecodeError)
        assert sceneio.PlyHeaderError is not sceneio.PlyVersionError


class TestCameraJson:
    def test_round_trip(self, tmp_path):
        cams = [look_at_camera([0, 0, -2], [0, 0, 0], width=32, height=24,
                               focal=40, cam_id=k) for k in range(3)]
        path = tmp_path / "cameras.json"
        sceneio.save_cameras(cams, path)
        loaded = sceneio.load_cameras(path)
        assert len(loaded) == 3
        for a, b in zip(cams, loaded):
            assert (a.width, a.height, a.fx, a.fy, a.cx, a.cy) == \
                (b.width, b.height, b.fx, b.fy, b.cx, b.cy)
            np.testing.assert_allclose(a.world_to_camera, b.world_to_camera)
            assert a.id == b.id


class TestImages:
    def test_png_round_trip_quantized(self, rng, tmp_path):
        img = rng.uniform(0, 1, (12, 17, 3))
        path = tmp_path / "img.png"
        sceneio.write_image(path, img)
        loaded = sceneio.read_image(path)
        assert loaded.shape == img.shape
        assert np.abs(loaded - img).max() <= 0.5 / 255 + 1e-9

    def test_depth_round_trip(self, rng, tmp_path):
        depth = rng.uniform(0, 7.3, (9, 11))
        path = tmp_path / "depth.png"
        sceneio.write_depth(path, depth)
        loaded = sceneio.read_depth(path)
        assert np.abs(loaded - depth).max() <= 7.3 / 65535 + 1e-9

    def test_zero_depth(self, tmp_path):
        path = tmp_path / "d.png"
        sceneio.write_depth(path, np.zeros((4, 4)))
        np.testing.assert_array_equal(sceneio.read_depth(path), 0.0)


class TestFmap:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        data = rng.normal(size=(12, 5, 7)).astype(np.float32)
        path = tmp_path / "f.fmap"
        sceneio.write_fmap(path, data)
        np.testing.assert_array_equal(sceneio.read_fmap(path), data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.fmap"
        path.write_bytes(b"XMAP" + b"\0" * 24)
        with pytest.raises(sceneio.FmapError):
            sceneio.read_fmap(path)

    def test_bad_version(self, tmp_path):
        import struct
        path = tmp_path / "f.fmap"
        path.write_bytes(b"FMAP" + struct.pack("<IIII", 9, 1, 1, 1) + b"\0" * 4)
        with pytest.raises(sceneio.FmapError):
            sceneio.read_fmap(path)

    def test_truncated(self, rng, tmp_path):
        data = rng.normal(size=(2, 3, 4)).astype(np.float32)
        path = tmp_path / "f.fmap"
        sceneio.write_fmap(path, data)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(sceneio.FmapError):
            sceneio.read_fmap(path)
