import struct

import numpy as np
import pytest

from sparsewin.data import (Dataset, DatasetSpec, IdxFormatError, generate_dataset,
                            load_idx, split)


class TestGenerate:
    def test_zero_noise_background_exactly_zero(self):
        spec = DatasetSpec(num_train=8, num_val=2, num_test=2, noise_amplitude=0.0, seed=0)
        splits = generate_dataset(spec)
        for i in range(8):
            img = splits.train.images[i, :, :, 0]
            y0, x0, y1, x1 = splits.train.boxes[i]
            mask = np.ones_like(img, dtype=bool)
            mask[y0:y1, x0:x1] = False
            assert np.all(img[mask] == 0.0)
            assert np.all(img[y0:y1, x0:x1] == spec.object_intensity)

    def test_seed_determinism(self):
        spec = DatasetSpec(num_train=16, num_val=4, num_test=4, seed=3)
        a, b = generate_dataset(spec), generate_dataset(spec)
        assert np.array_equal(a.train.images, b.train.images)
        assert np.array_equal(a.train.labels, b.train.labels)
        assert np.array_equal(a.test.boxes, b.test.boxes)
        c = generate_dataset(DatasetSpec(num_train=16, num_val=4, num_test=4, seed=4))
        assert not np.array_equal(a.train.images, c.train.images)

    def test_label_consistent_with_box_quadrant(self):
        spec = DatasetSpec(num_train=64, num_val=4, num_test=4, seed=5)
        ds = generate_dataset(spec).train
        half = spec.image_size // 2
        for i in range(len(ds)):
            y0, x0, y1, x1 = ds.boxes[i]
            label = ds.labels[i]
            expected = (0 if y0 < half else 2) + (0 if x0 < half else 1)
            assert label == expected
            # object fully inside its quadrant
            qy = 0 if label < 2 else half
            qx = 0 if label % 2 == 0 else half
            assert qy <= y0 and y1 <= qy + half and qx <= x0 and x1 <= qx + half

    def test_class_balance_binomial(self):
        spec = DatasetSpec(num_train=10_000, num_val=4, num_test=4, seed=6)
        labels = generate_dataset(spec).train.labels
        n, p = 10_000, 0.25
        sigma = np.sqrt(n * p * (1 - p))
        for cls in range(4):
            assert abs((labels == cls).sum() - n * p) <= 3 * sigma

    def test_foreground_brighter_than_background(self):
        spec = DatasetSpec(num_train=32, num_val=4, num_test=4, seed=7)
        ds = generate_dataset(spec).train
        for i in range(len(ds)):
            img = ds.images[i, :, :, 0]
            y0, x0, y1, x1 = ds.boxes[i]
            mask = np.zeros_like(img, dtype=bool)
            mask[y0:y1, x0:x1] = True
            assert img[mask].mean() > img[~mask].mean()

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            DatasetSpec(object_min=12, object_max=20)   # does not fit a 16x16 quadrant


def write_idx_pair(tmp_path, images: np.ndarray, labels: np.ndarray,
                   image_magic=0x803, label_magic=0x801, label_count=None):
    n, rows, cols = images.shape
    ipath = tmp_path / "images.idx"
    with open(ipath, "wb") as f:
        f.write(struct.pack(">IIII", image_magic, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    lpath = tmp_path / "labels.idx"
    with open(lpath, "wb") as f:
        f.write(struct.pack(">II", label_magic, label_count if label_count is not None else n))
        f.write(labels.astype(np.uint8).tobytes())
    return str(ipath), str(lpath)


class TestIdx:
    def test_hand_encoded_single_image(self, tmp_path):
        images = np.array([[[0, 51], [102, 255]]], dtype=np.uint8)
        labels = np.array([3], dtype=np.uint8)
        ipath, lpath = write_idx_pair(tmp_path, images, labels)
        ds = load_idx(ipath, lpath)
        assert ds.images.shape == (1, 2, 2, 1)
        np.testing.assert_allclose(ds.images[0, :, :, 0],
                                   [[0.0, 0.2], [0.4, 1.0]], atol=1e-6)
        assert ds.labels.tolist() == [3]

    def test_wrong_magic(self, tmp_path):
        ipath, lpath = write_idx_pair(tmp_path, np.zeros((1, 2, 2)), np.zeros(1),
                                      image_magic=0x804)
        with pytest.raises(IdxFormatError, match="magic"):
            load_idx(ipath, lpath)

    def test_count_mismatch(self, tmp_path):
        ipath, lpath = write_idx_pair(tmp_path, np.zeros((2, 2, 2)), np.zeros(2))
        # rewrite labels claiming 3 entries with 3 bytes present
        with open(lpath, "wb") as f:
            f.write(struct.pack(">II", 0x801, 3))
            f.write(bytes(3))
        with pytest.raises(IdxFormatError, match="mismatch"):
            load_idx(ipath, lpath)

    def test_truncated_payload(self, tmp_path):
        ipath, lpath = write_idx_pair(tmp_path, np.zeros((2, 2, 2)), np.zeros(2))
        blob = open(ipath, "rb").read()
        with open(ipath, "wb") as f:
            f.write(blob[:-3])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(ipath, lpath)


class TestSplit:
    def make(self, n=20):
        rng = np.random.default_rng(8)
        return Dataset(images=rng.random((n, 4, 4, 1)).astype(np.float32),
                       labels=rng.integers(0, 4, size=n),
                       boxes=rng.integers(0, 4, size=(n, 4)))

    def test_all_in_first(self):
        parts = split(self.make(), (1.0, 0.0, 0.0), seed=0)
        assert [len(p) for p in parts] == [20, 0, 0]

    def test_disjoint_and_exhaustive(self):
        ds = self.make(50)
        parts = split(ds, (0.6, 0.2, 0.2), seed=1)
        assert sum(len(p) for p in parts) == 50
        seen = np.concatenate([p.images.reshape(len(p), -1).sum(axis=1) for p in parts])
        original = np.sort(ds.images.reshape(50, -1).sum(axis=1))
        np.testing.assert_allclose(np.sort(seen), original)

    def test_same_seed_same_split(self):
        ds = self.make(30)
        a = split(ds, (0.5, 0.25, 0.25), seed=2)
        b = split(ds, (0.5, 0.25, 0.25), seed=2)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.images, pb.images)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split(self.make(), (0.5, 0.2), seed=0)
