import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umseg import io_formats as iof
from umseg.graphs import PointCloud, WeightedGraph
from umseg.hierarchy import build_bpt
from umseg.mask_forest import MaskSet
from umseg.metrics import CameraModel

TESTDATA = Path(__file__).parent / "testdata"


class TestTensor:
    @pytest.mark.parametrize("dtype,shape", [
        (np.float32, (4, 5, 3)), (np.float64, (2, 7)), (np.uint16, (6, 6)),
    ])
    def test_roundtrip_bitwise(self, tmp_path, rng, dtype, shape):
        if dtype is np.uint16:
            arr = rng.integers(0, 65535, shape).astype(dtype)
        else:
            arr = rng.normal(size=shape).astype(dtype)
        path = tmp_path / "t.uft"
        iof.write_tensor(path, arr)
        back = iof.read_tensor(path)
        assert back.dtype == arr.dtype and np.array_equal(back, arr)
        iof.write_tensor(tmp_path / "t2.uft", back)
        assert (tmp_path / "t2.uft").read_bytes() == path.read_bytes()

    def test_truncated_payload_names_counts(self, tmp_path, rng):
        path = tmp_path / "t.uft"
        iof.write_tensor(path, rng.normal(size=(3, 3)).astype(np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(iof.FormatError, match="expected 36 bytes, got 32"):
            iof.read_tensor(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.uft"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(iof.FormatError, match="bad magic"):
            iof.read_tensor(path)

    def test_role_validation(self, tmp_path, rng):
        path = tmp_path / "t.uft"
        iof.write_tensor(path, rng.normal(size=(3, 3)).astype(np.float64))
        with pytest.raises(iof.FormatError):
            iof.read_tensor(path, role="features")
        assert iof.read_tensor(path, role="depth").shape == (3, 3)

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(iof.FormatError):
            iof.write_tensor(tmp_path / "t.uft", np.zeros((2, 2), dtype=np.int32))

    def test_header_is_little_endian(self, tmp_path):
        arr = np.zeros((258, 2), dtype=np.float32)
        path = tmp_path / "t.uft"
        iof.write_tensor(path, arr)
        raw = path.read_bytes()
        assert raw[:4] == b"UFT1"
        assert struct.unpack_from("<Q", raw, 6)[0] == 258
        assert raw[6] == 2 and raw[7] == 1  # 258 = 0x0102 little-endian


class TestRle:
    def test_documented_example(self):
        mask = iof.decode_rle([3, 2, 11], 4, 4)
        expected = np.zeros(16, bool)
        expected[3:5] = True
        assert np.array_equal(mask.ravel(), expected)
        assert iof.encode_rle(mask) == [3, 2, 11]

    def test_leading_one_gets_zero_count(self):
        mask = np.array([[True, False]])
        assert iof.encode_rle(mask) == [0, 1, 1]
        assert np.array_equal(iof.decode_rle([0, 1, 1], 1, 2), mask)

    def test_sum_mismatch_rejected(self):
        with pytest.raises(iof.FormatError, match="sum"):
            iof.decode_rle([3, 2], 4, 4)

    def test_negative_count_rejected(self):
        with pytest.raises(iof.FormatError):
            iof.decode_rle([-1, 17], 4, 4)

    @given(st.lists(st.booleans(), min_size=1, max_size=64))
    def test_encode_decode_inverse(self, bits):
        mask = np.array(bits).reshape(1, -1)
        counts = iof.encode_rle(mask)
        assert np.array_equal(iof.decode_rle(counts, 1, len(bits)), mask)


class TestMasksFile:
    def test_roundtrip(self, tmp_path, rng):
        masks = []
        for _ in range(3):
            m = rng.random((5, 7)) > 0.4
            m[0, 0] = True
            masks.append(m)
        ms = MaskSet("view7", 5, 7, masks)
        path = tmp_path / "m.json"
        iof.write_masks(path, ms)
        back = iof.read_masks(path)
        assert back.view_id == "view7" and len(back.masks) == 3
        for a, b in zip(ms.masks, back.masks):
            assert np.array_equal(a, b)

    def test_bad_mask_reported_rest_loaded(self, tmp_path):
        payload = {"view_id": "v", "height": 2, "width": 2,
                   "masks": [{"rle": [0, 4]}, {"rle": [1, 1]}, {"rle": [2, 2]}]}
        path = tmp_path / "m.json"
        path.write_text(json.dumps(payload))
        ms = iof.read_masks(path)
        assert len(ms.masks) == 2
        assert len(ms.decode_errors) == 1 and ms.decode_errors[0][0] == 1

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"height": 2, "width": 2, "masks": []}))
        with pytest.raises(iof.FormatError, match="view_id"):
            iof.read_masks(path)


class TestPly:
    def make_cloud(self, rng, n=5, dim=3, labels=True):
        return PointCloud(
            rng.normal(size=(n, 3)).astype(np.float32).astype(np.float64),
            rng.normal(size=(n, dim)).astype(np.float32).astype(np.float64),
            rng.integers(0, 100, n) if labels else None,
        )

    def test_binary_roundtrip_exact(self, tmp_path, rng):
        cloud = self.make_cloud(rng)
        path = tmp_path / "c.ply"
        iof.write_ply(path, cloud, binary=True)
        back = iof.read_ply(path)
        assert np.array_equal(back.positions, cloud.positions)
        assert np.array_equal(back.features, cloud.features)
        assert np.array_equal(back.labels, cloud.labels)
        iof.write_ply(tmp_path / "c2.ply", back, binary=True)
        assert (tmp_path / "c2.ply").read_bytes() == path.read_bytes()

    def test_ascii_preserves_labels(self, tmp_path, rng):
        cloud = self.make_cloud(rng, labels=True)
        path = tmp_path / "c.ply"
        iof.write_ply(path, cloud, binary=False)
        back = iof.read_ply(path)
        assert np.array_equal(back.labels, cloud.labels)
        assert np.array_equal(back.positions, cloud.positions)

    def test_dim_zero_rejected(self, tmp_path):
        cloud = PointCloud(np.zeros((2, 3)), np.zeros((2, 0)))
        with pytest.raises(iof.FormatError, match="dim-0"):
            iof.write_ply(tmp_path / "c.ply", cloud)

    def test_missing_xyz_rejected(self, tmp_path):
        path = tmp_path / "c.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\n"
                         b"property float x\nproperty float f0\nend_header\n0 0\n")
        with pytest.raises(iof.FormatError, match="missing property 'y'"):
            iof.read_ply(path)

    def test_no_feature_properties_rejected(self, tmp_path):
        path = tmp_path / "c.ply"
        path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\n"
                         b"property float x\nproperty float y\nproperty float z\n"
                         b"end_header\n0 0 0\n")
        with pytest.raises(iof.FormatError, match="f0"):
            iof.read_ply(path)

    def test_truncated_binary_rejected(self, tmp_path, rng):
        cloud = self.make_cloud(rng)
        path = tmp_path / "c.ply"
        iof.write_ply(path, cloud, binary=True)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(iof.FormatError, match="truncated"):
            iof.read_ply(path)


class TestCameraFile:
    def test_roundtrip(self, tmp_path):
        pose = np.eye(4)
        pose[:3, 3] = [1, 2, 3]
        cam = CameraModel(10.0, 11.0, 4.5, 5.5, 10, 12, pose)
        path = tmp_path / "cam.json"
        iof.write_camera(path, cam)
        back = iof.read_camera(path)
        assert back.fl_x == 10.0 and back.width == 10
        assert np.array_equal(back.cam_to_world, pose)

    def test_non_orthonormal_rotation_rejected(self, tmp_path):
        pose = np.eye(4)
        pose[0, 0] = 2.0
        payload = {"fl_x": 1, "fl_y": 1, "cx": 0, "cy": 0, "w": 2, "h": 2,
                   "transform": [float(x) for x in pose.ravel()]}
        path = tmp_path / "cam.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(iof.FormatError, match="orthonormal"):
            iof.read_camera(path)


class TestLabelmapPng:
    def test_roundtrip(self, tmp_path, rng):
        labels = rng.integers(0, 1000, (9, 13))
        path = tmp_path / "l.png"
        iof.write_labelmap_png(path, labels)
        assert np.array_equal(iof.read_labelmap_png(path), labels)

    def test_overflow_rejected(self, tmp_path):
        labels = np.zeros((2, 2), dtype=np.int64)
        labels[0, 0] = 70000
        with pytest.raises(iof.FormatError, match="exceeds 16-bit"):
            iof.write_labelmap_png(tmp_path / "l.png", labels)


class TestDendrogramJson:
    def test_roundtrip(self, tmp_path):
        g = WeightedGraph(3, [0, 1], [1, 2], [0.5, 1.5])
        bpt = build_bpt(g)
        path = tmp_path / "d.json"
        iof.write_dendrogram_json(path, bpt)
        nodes = iof.read_dendrogram_json(path)
        assert len(nodes) == 5
        assert sum(n["leaf"] for n in nodes) == 3

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "d.json"
        path.write_text(json.dumps([{"id": 0, "parent": 0, "leaf": True}]))
        with pytest.raises(iof.FormatError, match="altitude"):
            iof.read_dendrogram_json(path)


class TestGoldenFixtures:
    """Byte layouts pinned against files checked into the repository."""

    def test_tensor_f32_bytes(self):
        arr = (np.arange(12, dtype=np.float32) * 0.5).reshape(2, 3, 2)
        expected = (b"UFT1" + bytes([0, 3]) + struct.pack("<3Q", 2, 3, 2)
                    + arr.astype("<f4").tobytes())
        assert (TESTDATA / "golden_tensor_f32.uft").read_bytes() == expected
        assert np.array_equal(iof.read_tensor(TESTDATA / "golden_tensor_f32.uft"), arr)

    def test_tensor_u16_bytes(self):
        lab = (np.arange(12, dtype=np.uint16) * 1000).reshape(3, 4)
        expected = (b"UFT1" + bytes([2, 2]) + struct.pack("<2Q", 3, 4)
                    + lab.astype("<u2").tobytes())
        assert (TESTDATA / "golden_tensor_u16.uft").read_bytes() == expected
        assert np.array_equal(iof.read_tensor(TESTDATA / "golden_tensor_u16.uft"), lab)

    def test_masks_bytes(self, tmp_path):
        a = np.zeros(16, bool)
        a[3:5] = True
        b = np.zeros(16, bool)
        b[12:] = True
        ms = MaskSet("golden", 4, 4, [a.reshape(4, 4), b.reshape(4, 4)])
        iof.write_masks(tmp_path / "m.json", ms)
        assert (tmp_path / "m.json").read_bytes() == (TESTDATA / "golden_masks.json").read_bytes()
        back = iof.read_masks(TESTDATA / "golden_masks.json")
        assert np.array_equal(back.masks[0].ravel(), a)

    def test_camera_bytes(self, tmp_path):
        pose = np.eye(4)
        pose[:3, 3] = [0.25, -0.5, 1.0]
        cam = CameraModel(48.0, 48.0, 23.5, 23.5, 48, 48, pose)
        iof.write_camera(tmp_path / "cam.json", cam)
        assert (tmp_path / "cam.json").read_bytes() == \
            (TESTDATA / "golden_camera.json").read_bytes()

    def golden_cloud(self):
        return PointCloud(
            np.array([[0.0, 0.5, 1.0], [1.5, 2.0, 2.5], [3.0, 3.5, 4.0]]),
            np.array([[0.125, 0.25], [0.375, 0.5], [0.625, 0.75]]),
            np.array([1, 2, 3]),
        )

    def test_ply_binary_bytes(self, tmp_path):
        iof.write_ply(tmp_path / "c.ply", self.golden_cloud(), binary=True)
        assert (tmp_path / "c.ply").read_bytes() == \
            (TESTDATA / "golden_binary.ply").read_bytes()
        back = iof.read_ply(TESTDATA / "golden_binary.ply")
        assert np.array_equal(back.positions, self.golden_cloud().positions)

    def test_ply_ascii_bytes(self, tmp_path):
        iof.write_ply(tmp_path / "c.ply", self.golden_cloud(), binary=False)
        assert (tmp_path / "c.ply").read_bytes() == \
            (TESTDATA / "golden_ascii.ply").read_bytes()

    def test_dendrogram_bytes(self, tmp_path):
        tri = WeightedGraph(3, [0, 1, 0], [1, 2, 2], [1.0, 2.0, 3.0])
        iof.write_dendrogram_json(tmp_path / "d.json", build_bpt(tri))
        assert (tmp_path / "d.json").read_bytes() == \
            (TESTDATA / "golden_dendrogram.json").read_bytes()
