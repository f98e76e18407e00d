import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from heatmark import data as D
from heatmark.errors import ContractError, FormatError
from heatmark.heatmaps import LandmarkSet


class TestTensorFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        t = np.random.rand(3, 4, 5).astype(np.float32)
        D.write_tensor(tmp_path / "t.llt", t)
        assert np.array_equal(D.read_tensor(tmp_path / "t.llt"), t)

    def test_rank0_file_is_nine_bytes(self, tmp_path):
        D.write_tensor(tmp_path / "s.llt", np.float32(2.5))
        blob = (tmp_path / "s.llt").read_bytes()
        assert len(blob) == 9
        assert blob[:4] == b"LLT1" and blob[4] == 0
        assert D.read_tensor(tmp_path / "s.llt") == pytest.approx(2.5)

    def test_bad_magic_reports_offset_zero(self, tmp_path):
        D.write_tensor(tmp_path / "t.llt", np.zeros(3, np.float32))
        blob = bytearray((tmp_path / "t.llt").read_bytes())
        blob[0] ^= 0x40
        (tmp_path / "bad.llt").write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            D.read_tensor(tmp_path / "bad.llt")
        assert err.value.offset == 0

    def test_truncated_payload_rejected(self, tmp_path):
        D.write_tensor(tmp_path / "t.llt", np.zeros((2, 2), np.float32))
        blob = (tmp_path / "t.llt").read_bytes()
        (tmp_path / "cut.llt").write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            D.read_tensor(tmp_path / "cut.llt")

    def test_trailing_bytes_rejected(self, tmp_path):
        D.write_tensor(tmp_path / "t.llt", np.zeros(2, np.float32))
        blob = (tmp_path / "t.llt").read_bytes() + b"\x00"
        (tmp_path / "fat.llt").write_bytes(blob)
        with pytest.raises(FormatError):
            D.read_tensor(tmp_path / "fat.llt")

    def test_extent_overflow_rejected(self, tmp_path):
        import struct

        blob = b"LLT1" + struct.pack("<B", 2) + struct.pack("<II", 0xFFFFFFFF, 0xFFFFFFFF)
        (tmp_path / "huge.llt").write_bytes(blob)
        with pytest.raises(FormatError):
            D.read_tensor(tmp_path / "huge.llt")

    @given(
        shape=st.lists(st.integers(0, 5), min_size=0, max_size=4).map(tuple),
    )
    @settings(
        max_examples=25,
        deadline=None,
        suppress_health_check=[HealthCheck.function_scoped_fixture],
    )
    def test_roundtrip_any_rank(self, tmp_path, shape):
        # overwriting one scratch file per example is intentional
        t = np.asarray(np.random.rand(*shape), dtype=np.float32)
        path = tmp_path / "x.llt"
        D.write_tensor(path, t)
        back = D.read_tensor(path)
        assert back.shape == t.shape and np.array_equal(back, t)


class TestContainer:
    def test_roundtrip(self, tmp_path):
        entries = {
            "gen/w": np.random.rand(2, 3).astype(np.float32),
            "meta/step": np.float32(7),
            "empty": np.zeros(0, np.float32),
        }
        D.write_container(tmp_path / "c.ckpt", entries)
        back = D.read_container(tmp_path / "c.ckpt")
        assert set(back) == set(entries)
        for k in entries:
            assert np.array_equal(back[k], entries[k])

    def test_truncation_rejected_without_partial_state(self, tmp_path):
        D.write_container(tmp_path / "c.ckpt", {"a": np.ones(4, np.float32)})
        blob = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[:-2])
        with pytest.raises(FormatError):
            D.read_container(tmp_path / "cut.ckpt")


class TestManifest:
    def test_empty_file_gives_empty_manifest(self, tmp_path):
        (tmp_path / "m.tsv").write_text("")
        man = D.read_manifest(tmp_path / "m.tsv")
        assert len(man) == 0

    def test_roundtrip(self, tmp_path):
        man = D.DatasetManifest(root=tmp_path)
        man.paths = ["a.llt", "b.llt"]
        man.coords = [np.array([[1.5, 2.25], [3.0, 4.0]], np.float32)] * 2
        D.write_manifest(tmp_path / "m.tsv", man)
        back = D.read_manifest(tmp_path / "m.tsv")
        assert back.paths == man.paths
        assert all(np.array_equal(a, b) for a, b in zip(back.coords, man.coords))

    def test_wrong_coordinate_count_names_line(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a.llt\t2\t1.0\t2.0\t3.0\n")
        with pytest.raises(FormatError, match="line 1"):
            D.read_manifest(tmp_path / "m.tsv")

    def test_inconsistent_k_names_line(self, tmp_path):
        (tmp_path / "m.tsv").write_text(
            "a.llt\t1\t1.0\t2.0\nb.llt\t2\t1.0\t2.0\t3.0\t4.0\n"
        )
        with pytest.raises(FormatError, match="line 2"):
            D.read_manifest(tmp_path / "m.tsv")

    def test_six_decimal_serialization(self, tmp_path):
        man = D.DatasetManifest(root=tmp_path)
        man.paths = ["a.llt"]
        man.coords = [np.array([[1.123456789, 2.0]], np.float32)]
        D.write_manifest(tmp_path / "m.tsv", man)
        text = (tmp_path / "m.tsv").read_text()
        assert "\t1.123457\t" in text


class TestSyntheticData:
    def test_zero_count_gives_empty_manifest(self, tmp_path):
        man = D.generate_synthetic_dataset(tmp_path, 0, (80, 80), 5, seed=1)
        assert len(man) == 0

    def test_byte_identical_per_seed(self, tmp_path):
        m1 = D.generate_synthetic_dataset(tmp_path / "a", 4, (64, 64), 4, seed=9)
        m2 = D.generate_synthetic_dataset(tmp_path / "b", 4, (64, 64), 4, seed=9)
        for p1, p2 in zip(m1.paths, m2.paths):
            b1 = (tmp_path / "a" / p1).read_bytes()
            b2 = (tmp_path / "b" / p2).read_bytes()
            assert b1 == b2
        assert all(np.array_equal(a, b) for a, b in zip(m1.coords, m2.coords))
        m3 = D.generate_synthetic_dataset(tmp_path / "c", 4, (64, 64), 4, seed=10)
        assert (tmp_path / "a" / m1.paths[0]).read_bytes() != (
            tmp_path / "c" / m3.paths[0]
        ).read_bytes()

    def test_marker_centroids_match_manifest(self, tmp_path):
        man = D.generate_synthetic_dataset(tmp_path, 12, (80, 80), 5, seed=2)
        for i in range(len(man)):
            sample = man.load_sample(i)
            detected = D.detect_marker_centroids(sample.image, 5)
            assert np.all(np.isfinite(detected))
            assert np.abs(detected - sample.landmarks.as_array()).max() <= 0.5

    def test_small_sizes_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            D.generate_synthetic_dataset(tmp_path, 1, (16, 16), 5, seed=0)
        with pytest.raises(ContractError):
            D.generate_synthetic_dataset(tmp_path, 1, (64, 64), 1, seed=0)

    def test_images_in_unit_range(self, tmp_path):
        man = D.generate_synthetic_dataset(tmp_path, 3, (64, 64), 3, seed=5)
        imgs = man.load_images()
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0


class TestCropProtocol:
    def test_reference_square_expansion(self):
        image = np.random.rand(3, 40, 40).astype(np.float32)
        pts = LandmarkSet(
            np.array([[10.0, 10.0], [20.0, 20.0], [10.0, 20.0], [20.0, 10.0], [15.0, 15.0]])
        )
        crop, new_pts, transform = D.square_crop_from_points(image, pts, target_size=None)
        assert crop.shape == (3, 20, 20)
        assert transform == (5.0, 5.0, 1.0)
        assert np.allclose(new_pts.as_array(), pts.as_array() - 5.0)

    def test_centered_points_keep_center(self):
        image = np.random.rand(3, 41, 41).astype(np.float32)
        c = 20.0
        pts = LandmarkSet(
            np.array([[c - 5, c], [c + 5, c], [c, c - 5], [c, c + 5], [c, c]])
        )
        _, new_pts, transform = D.square_crop_from_points(image, pts, target_size=None)
        side = 20
        assert transform[0] == c - side / 2 and transform[1] == c - side / 2
        assert np.allclose(new_pts.as_array().mean(axis=0), [side / 2, side / 2], atol=1e-6)

    def test_roundtrip_through_resize(self):
        image = np.random.rand(3, 64, 64).astype(np.float32)
        pts = LandmarkSet(
            np.array([[10.0, 12.0], [30.0, 15.0], [22.0, 30.0], [12.0, 28.0], [21.0, 20.0]])
        )
        _, new_pts, transform = D.square_crop_from_points(image, pts, target_size=(80, 80))
        back = D.invert_transform(new_pts.as_array(), transform)
        assert np.abs(back - pts.as_array()).max() < 1e-5

    def test_out_of_image_region_zero_padded(self):
        image = np.ones((3, 30, 30), np.float32)
        pts = LandmarkSet(
            np.array([[2.0, 2.0], [12.0, 12.0], [2.0, 12.0], [12.0, 2.0], [7.0, 7.0]])
        )
        crop, _, transform = D.square_crop_from_points(image, pts, target_size=None)
        # window [-3, 17) pokes out of the image: the fringe must be zero
        assert transform[0] == -3.0
        assert np.all(crop[:, :, 0] == 0.0) and np.all(crop[:, 0, :] == 0.0)

    def test_degenerate_points_rejected(self):
        image = np.zeros((3, 20, 20), np.float32)
        pts = LandmarkSet(np.full((5, 2), 7.0))
        with pytest.raises(ContractError):
            D.square_crop_from_points(image, pts)

    def test_wrong_point_count_rejected(self):
        image = np.zeros((3, 20, 20), np.float32)
        with pytest.raises(ContractError):
            D.square_crop_from_points(image, LandmarkSet(np.zeros((4, 2))))

    def test_odd_side_extends_right_and_bottom(self):
        image = np.random.rand(3, 40, 40).astype(np.float32)
        # bbox 10x10.5 -> side ceil(21) = 21, center (15, 15.25)
        pts = LandmarkSet(
            np.array([[10.0, 10.0], [20.0, 20.5], [10.0, 20.5], [20.0, 10.0], [15.0, 15.0]])
        )
        crop, _, transform = D.square_crop_from_points(image, pts, target_size=None)
        assert crop.shape[1] == 21
        x0, y0, _ = transform
        assert x0 == 5.0 and y0 == 5.0  # floor(center - side/2 + 0.5)


class TestResize:
    def test_identity_when_size_unchanged(self):
        img = np.random.rand(3, 8, 8).astype(np.float32)
        assert np.allclose(D.resize_bilinear(img, (8, 8)), img, atol=1e-6)

    def test_preserves_constant_images(self):
        img = np.full((3, 10, 10), 0.37, np.float32)
        out = D.resize_bilinear(img, (80, 80))
        assert np.allclose(out, 0.37, atol=1e-6)
