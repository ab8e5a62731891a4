import gzip

import numpy as np
import pytest

from inq.data import IdxFormatError, gen_synthetic, load_idx, regression_datasets, write_idx
from inq.engine import Dataset


def tiny_dataset(n=5):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (n, 1, 3, 4)) / 255.0
    return Dataset(pixels, rng.integers(0, 10, n), 10)


class TestIdx:
    def test_round_trip(self, tmp_path):
        data = tiny_dataset()
        write_idx(tmp_path / "img", tmp_path / "lab", data)
        back = load_idx(tmp_path / "img", tmp_path / "lab", 10)
        assert back.inputs.shape == (5, 1, 3, 4)
        assert np.array_equal(back.inputs, data.inputs)
        assert np.array_equal(back.labels, data.labels)

    def test_header_layout(self, tmp_path):
        write_idx(tmp_path / "img", tmp_path / "lab", tiny_dataset(2))
        raw = (tmp_path / "img").read_bytes()
        assert raw[:16] == bytes.fromhex("00000803" "00000002" "00000003" "00000004")
        assert len(raw) == 16 + 2 * 12
        assert (tmp_path / "lab").read_bytes()[:8] == bytes.fromhex("00000801" "00000002")

    def test_gzip(self, tmp_path):
        write_idx(tmp_path / "img", tmp_path / "lab", tiny_dataset())
        for name in ("img", "lab"):
            (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
        back = load_idx(tmp_path / "img.gz", tmp_path / "lab.gz", 10)
        assert len(back.labels) == 5

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "img", tmp_path / "lab", tiny_dataset(5))
        write_idx(tmp_path / "img4", tmp_path / "lab4", tiny_dataset(4))
        with pytest.raises(IdxFormatError, match="5 images but 4 labels"):
            load_idx(tmp_path / "img", tmp_path / "lab4")

    def test_bad_magic(self, tmp_path):
        write_idx(tmp_path / "img", tmp_path / "lab", tiny_dataset())
        raw = (tmp_path / "img").read_bytes()
        (tmp_path / "img").write_bytes(b"\x00\x00\x08\x01" + raw[4:])
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_truncated_payload(self, tmp_path):
        write_idx(tmp_path / "img", tmp_path / "lab", tiny_dataset())
        raw = (tmp_path / "img").read_bytes()
        (tmp_path / "img").write_bytes(raw[:-1])
        with pytest.raises(IdxFormatError):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_empty_accepted(self, tmp_path):
        write_idx(tmp_path / "img", tmp_path / "lab", tiny_dataset(0))
        back = load_idx(tmp_path / "img", tmp_path / "lab", 10)
        assert len(back.labels) == 0


class TestSynthetic:
    @pytest.mark.parametrize("kind", ["blobs", "spirals"])
    def test_deterministic(self, kind):
        a = gen_synthetic(kind, 4, 50, seed=3)
        b = gen_synthetic(kind, 4, 50, seed=3)
        c = gen_synthetic(kind, 4, 50, seed=4)
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert a.inputs.tobytes() != c.inputs.tobytes()

    def test_balanced(self):
        counts = np.bincount(gen_synthetic("spirals", 7, 100, seed=0).labels)
        assert counts.max() - counts.min() <= 1 and counts.sum() == 100

    def test_images(self):
        data = gen_synthetic("spirals", 3, 30, seed=0, image_size=8)
        assert data.inputs.shape == (30, 1, 8, 8)
        assert data.inputs.min() >= 0 and data.inputs.max() <= 1
        # pixel values survive an 8-bit IDX round trip
        assert np.array_equal(np.round(data.inputs * 255) / 255, data.inputs)

    def test_regression_sets(self):
        train, test = regression_datasets(seed=0, n_train=100, n_test=50)
        assert train.inputs.shape == (100, 1, 16, 16) and test.num_classes == 10
        assert train.inputs[:50].tobytes() != test.inputs.tobytes()

    @pytest.mark.parametrize("kwargs", [{"classes": 1}, {"kind": "moons"}, {"n": 2}])
    def test_invalid(self, kwargs):
        args = {"kind": "blobs", "classes": 3, "n": 30} | kwargs
        with pytest.raises(ValueError):
            gen_synthetic(**args)
