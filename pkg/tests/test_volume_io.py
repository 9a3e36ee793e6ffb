import gzip
import hashlib

import numpy as np
import pytest

from lesionfill.volume_io import (
    NormalizationRecord,
    SliceVolumeBatch,
    VolumeGrid,
    conform,
    denormalize,
    extract_wm_slices,
    load_volume,
    normalize,
    reassemble,
    save_volume,
)


def random_volume(seed=0, shape=(12, 14, 10), affine=None):
    rng = np.random.default_rng(seed)
    data = rng.random(shape).astype(np.float32)
    if affine is None:
        affine = np.eye(4)
    return VolumeGrid(data=data, affine=affine)


class TestVolumeGrid:
    def test_spacing_and_orientation(self):
        aff = np.diag([1.0, 2.0, 3.0, 1.0])
        v = VolumeGrid(np.zeros((4, 4, 4)), aff)
        assert v.spacing == (1.0, 2.0, 3.0)
        assert v.orientation == "RAS"

    def test_lpi_orientation(self):
        aff = np.diag([-1.0, -1.0, -1.0, 1.0])
        assert VolumeGrid(np.zeros((4, 4, 4)), aff).orientation == "LPI"

    def test_rejects_non_3d(self):
        with pytest.raises(ValueError):
            VolumeGrid(np.zeros((4, 4)), np.eye(4))

    def test_rejects_bad_affine(self):
        with pytest.raises(ValueError):
            VolumeGrid(np.zeros((4, 4, 4)), np.eye(3))
        with pytest.raises(ValueError):
            VolumeGrid(np.zeros((4, 4, 4)), np.full((4, 4), np.nan))


class TestNiftiRoundTrip:
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    def test_float_round_trip(self, tmp_path, suffix):
        v = random_volume(affine=np.diag([1.0, 1.25, 0.8, 1.0]))
        path = tmp_path / ("vol" + suffix)
        save_volume(v, path)
        back = load_volume(path)
        assert np.array_equal(back.data, v.data)
        assert np.allclose(back.affine, v.affine, atol=1e-6)

    def test_int_dtype_preserved(self, tmp_path):
        v = VolumeGrid(
            np.arange(27, dtype=np.int16).reshape(3, 3, 3), np.eye(4)
        )
        path = tmp_path / "seg.nii"
        save_volume(v, path)
        back = load_volume(path)
        assert back.data.dtype == np.int16
        assert np.array_equal(back.data, v.data)

    def test_translation_preserved(self, tmp_path):
        aff = np.eye(4)
        aff[:3, 3] = (-12.5, 4.0, 9.25)
        v = random_volume(affine=aff)
        path = tmp_path / "vol.nii.gz"
        save_volume(v, path)
        assert np.allclose(load_volume(path).affine, aff, atol=1e-5)

    def test_gzip_bytes_deterministic(self, tmp_path):
        v = random_volume()
        a, b = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        save_volume(v, a)
        save_volume(v, b)
        assert hashlib.sha256(a.read_bytes()).hexdigest() == hashlib.sha256(
            b.read_bytes()
        ).hexdigest()

    def test_no_partial_file_on_error(self, tmp_path):
        target = tmp_path / "missing_dir" / "vol.nii"
        with pytest.raises(OSError):
            save_volume(random_volume(), target)
        assert not target.exists()

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.nii"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(ValueError, match="truncated"):
            load_volume(path)

    def test_foreign_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.nii"
        path.write_bytes(b"\x5c\x01\x00\x00" + b"\x00" * 400)
        with pytest.raises(ValueError):
            load_volume(path)


class TestConform:
    def test_noop_when_already_canonical(self):
        shape = (16, 16, 16)
        aff = np.eye(4)  # centers already aligned: translation zero
        v = VolumeGrid(np.random.default_rng(0).random(shape).astype(np.float32), aff)
        out = conform(v, out_shape=shape, spacing=1.0)
        assert np.array_equal(out.data, v.data)

    def test_idempotent(self):
        aff = np.diag([2.0, 2.0, 2.0, 1.0])
        v = VolumeGrid(np.random.default_rng(1).random((10, 10, 10)), aff)
        once = conform(v, out_shape=(24, 24, 24), spacing=1.0)
        twice = conform(once, out_shape=(24, 24, 24), spacing=1.0)
        assert np.array_equal(once.data, twice.data)
        assert np.allclose(once.affine, twice.affine)

    def test_output_grid_properties(self):
        v = random_volume(affine=np.diag([0.9, 1.1, 1.3, 1.0]))
        out = conform(v, out_shape=(32, 32, 32), spacing=1.0)
        assert out.data.shape == (32, 32, 32)
        assert out.spacing == (1.0, 1.0, 1.0)
        assert out.orientation == "RAS"

    def test_physical_center_preserved(self):
        aff = np.eye(4)
        aff[:3, 3] = (5.0, -3.0, 2.0)
        v = VolumeGrid(np.zeros((11, 11, 11)), aff)
        out = conform(v, out_shape=(21, 21, 21), spacing=1.0)
        in_center = v.affine @ np.array([5.0, 5.0, 5.0, 1.0])
        out_center = out.affine @ np.array([10.0, 10.0, 10.0, 1.0])
        assert np.allclose(in_center, out_center)

    def test_upsampling_2x_exact_at_grid_points(self):
        # 2 mm input resampled at 1 mm: even output voxels coincide with
        # input voxels, so trilinear interpolation reproduces them exactly
        aff = np.diag([2.0, 2.0, 2.0, 1.0])
        data = np.random.default_rng(2).random((8, 8, 8))
        v = VolumeGrid(data, aff)
        out = conform(v, out_shape=(15, 15, 15), spacing=1.0)
        assert np.allclose(out.data[::2, ::2, ::2], data, atol=1e-6)

    def test_nearest_keeps_labels(self):
        labels = np.random.default_rng(3).integers(0, 4, size=(9, 9, 9)).astype(np.int16)
        v = VolumeGrid(labels, np.diag([2.0, 2.0, 2.0, 1.0]))
        out = conform(v, out_shape=(20, 20, 20), spacing=1.0, interpolation="nearest")
        assert set(np.unique(out.data)) <= set(np.unique(labels)) | {0}

    def test_unknown_interpolation(self):
        with pytest.raises(ValueError):
            conform(random_volume(), interpolation="cubic")


class TestNormalize:
    def test_range_and_round_trip(self):
        rng = np.random.default_rng(0)
        data = rng.random((8, 8, 8)) * 300.0
        v = VolumeGrid(data, np.eye(4))
        norm, rec = normalize(v)
        assert norm.data.min() >= -1.0 and norm.data.max() <= 1.0
        assert norm.data.max() == pytest.approx(1.0)
        back = denormalize(norm, rec)
        floored = np.where(data < rec.noise_floor, 0.0, data)
        assert np.allclose(back.data, floored, atol=1e-3)

    def test_noise_floor_zeroed(self):
        data = np.full((4, 4, 4), 0.005)
        data[0, 0, 0] = 10.0
        norm, rec = normalize(VolumeGrid(data, np.eye(4)))
        # sub-floor voxels map to exactly -1 (i.e. zero intensity)
        assert norm.data[1, 1, 1] == pytest.approx(-1.0)
        assert rec.input_max == pytest.approx(10.0)

    def test_hand_values(self):
        data = np.zeros((4, 4, 4))
        data[0, 0, 0] = 100.0
        data[0, 0, 1] = 25.0
        norm, _ = normalize(VolumeGrid(data, np.eye(4)))
        assert norm.data[0, 0, 0] == pytest.approx(1.0)
        assert norm.data[0, 0, 1] == pytest.approx(-0.5)

    def test_no_signal_rejected(self):
        with pytest.raises(ValueError, match="signal"):
            normalize(VolumeGrid(np.zeros((4, 4, 4)), np.eye(4)))

    def test_nan_rejected(self):
        data = np.ones((4, 4, 4))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            normalize(VolumeGrid(data, np.eye(4)))

    def test_record_json_round_trip(self, tmp_path):
        rec = NormalizationRecord(noise_floor=0.01, input_max=412.5)
        path = tmp_path / "norm.json"
        rec.save(path)
        assert NormalizationRecord.load(path) == rec


class TestSliceExtraction:
    def test_extract_expected_indices(self):
        v = random_volume(shape=(6, 6, 8))
        wm = np.zeros(v.data.shape, np.uint8)
        wm[2, 3, 2] = 1
        wm[1, 1, 5] = 1
        batch = extract_wm_slices(v, wm)
        assert batch.indices == (2, 5)
        assert np.array_equal(batch.slices[0], v.data[:, :, 2])
        assert np.array_equal(batch.slices[1], v.data[:, :, 5])

    def test_no_wm_rejected(self):
        v = random_volume()
        with pytest.raises(ValueError, match="WM"):
            extract_wm_slices(v, np.zeros(v.data.shape, np.uint8))

    def test_reassemble_inverse_of_extract(self):
        v = random_volume(shape=(6, 6, 8))
        wm = np.zeros(v.data.shape, np.uint8)
        wm[:, :, 1::2] = 1
        batch = extract_wm_slices(v, wm)
        out = reassemble(batch, v)
        assert np.array_equal(out.data, v.data)

    def test_reassemble_untouched_slices_bitwise(self):
        v = random_volume(shape=(6, 6, 8))
        new = np.zeros((2, 6, 6), dtype=v.data.dtype)
        batch = SliceVolumeBatch(slices=new, indices=(3, 6))
        out = reassemble(batch, v)
        for k in range(8):
            if k in (3, 6):
                assert np.all(out.data[:, :, k] == 0)
            else:
                assert np.array_equal(out.data[:, :, k], v.data[:, :, k])

    def test_batch_validation(self):
        with pytest.raises(ValueError, match="increasing"):
            SliceVolumeBatch(slices=np.zeros((2, 4, 4)), indices=(3, 3))
        with pytest.raises(ValueError):
            SliceVolumeBatch(slices=np.zeros((2, 4, 4)), indices=(1,))

    def test_reassemble_index_out_of_range(self):
        v = random_volume(shape=(4, 4, 4))
        batch = SliceVolumeBatch(slices=np.zeros((1, 4, 4)), indices=(9,))
        with pytest.raises(ValueError, match="range"):
            reassemble(batch, v)
