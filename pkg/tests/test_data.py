import gzip

import numpy as np
import pytest

from agop_collapse.data import (
    DataError,
    Dataset,
    center_global,
    class_means_of,
    encode_labels,
    gen_gaussian_classes,
    global_mean,
    load_idx,
    write_idx,
)


class TestGenGaussianClasses:
    def test_shape(self):
        ds = gen_gaussian_classes(3, 5, 10)
        assert ds.X.shape == (10, 15)
        np.testing.assert_array_equal(ds.class_counts(), [5, 5, 5])

    def test_deterministic(self):
        a = gen_gaussian_classes(3, 5, 10, seed=7)
        b = gen_gaussian_classes(3, 5, 10, seed=7)
        assert a.X.tobytes() == b.X.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_sample_means(self):
        noise, n = 0.1, 400
        ds = gen_gaussian_classes(4, n, 12, separation=2.0, noise=noise, seed=1)
        # reconstruct the constructed means from the same stream
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((12, 4)))
        means = q * (2.0 / np.sqrt(2.0))
        assert np.all(np.abs(class_means_of(ds) - means) <= 3 * noise / np.sqrt(n) * 1.5)

    def test_pairwise_separation(self):
        ds = gen_gaussian_classes(5, 3, 20, separation=1.5, noise=0.0)
        M = class_means_of(ds)
        d = np.linalg.norm(M[:, :, None] - M[:, None, :], axis=0)
        np.testing.assert_allclose(d[~np.eye(5, dtype=bool)], 1.5)

    def test_needs_room_for_orthogonal_means(self):
        with pytest.raises(DataError, match="d >= K"):
            gen_gaussian_classes(5, 2, 3)

    def test_read_only(self):
        ds = gen_gaussian_classes(2, 2, 4)
        with pytest.raises(ValueError):
            ds.X[0, 0] = 1.0


class TestDataset:
    def test_label_range(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((2, 3)), [0, 1, 2], K=2)

    def test_sorted_is_stable(self):
        ds = Dataset(np.arange(8.0).reshape(2, 4), [1, 0, 1, 0], 2).sorted()
        np.testing.assert_array_equal(ds.labels, [0, 0, 1, 1])
        np.testing.assert_array_equal(ds.X[0], [1, 3, 0, 2])

    def test_empty_class_mean_errors(self):
        with pytest.raises(DataError, match="class 1"):
            class_means_of(np.ones((2, 3)), np.array([0, 0, 2]), 3)


class TestLoadIdx:
    @pytest.fixture
    def idx_pair(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.integers(0, 256, size=(120, 28, 28), dtype=np.uint8)
        imgs[0, 0, 0] = 255
        labels = np.arange(120) % 10
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        write_idx(imgs, labels, ip, lp)
        return ip, lp, imgs, labels

    def test_limit(self, idx_pair):
        ip, lp, _, _ = idx_pair
        ds = load_idx(ip, lp, limit=100)
        assert (ds.d, ds.N, ds.K) == (784, 100, 10)

    def test_scaling_and_flatten(self, idx_pair):
        ip, lp, imgs, _ = idx_pair
        ds = load_idx(ip, lp)
        assert ds.X[0, 0] == 1.0
        np.testing.assert_array_equal(ds.X[:, 5], imgs[5].ravel() / 255.0)

    def test_gzip(self, idx_pair, tmp_path):
        ip, lp, _, _ = idx_pair
        gz = tmp_path / "img.idx.gz"
        gz.write_bytes(gzip.compress(ip.read_bytes()))
        assert load_idx(gz, lp).X.tobytes() == load_idx(ip, lp).X.tobytes()

    def test_bad_magic_names_file(self, idx_pair, tmp_path):
        ip, lp, _, _ = idx_pair
        raw = bytearray(ip.read_bytes())
        raw[3] = 0x99
        bad = tmp_path / "broken.idx"
        bad.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="broken.idx"):
            load_idx(bad, lp)

    def test_truncated(self, idx_pair, tmp_path):
        ip, lp, _, _ = idx_pair
        bad = tmp_path / "short.idx"
        bad.write_bytes(ip.read_bytes()[:-10])
        with pytest.raises(DataError, match="truncated"):
            load_idx(bad, lp)

    def test_count_mismatch(self, idx_pair, tmp_path):
        ip, _, _, labels = idx_pair
        lp2, ip2 = tmp_path / "l2", tmp_path / "i2"
        write_idx(np.zeros((3, 2, 2)), labels[:3], ip2, lp2)
        with pytest.raises(DataError, match="labels"):
            load_idx(ip, lp2)


class TestEncodeLabels:
    ds = Dataset(np.zeros((1, 2)), [0, 1], 2)

    def test_zero_one(self):
        np.testing.assert_array_equal(encode_labels(self.ds, "zero-one").Y[:, 0], [1, 0])

    def test_pm_one(self):
        np.testing.assert_array_equal(encode_labels(self.ds, "pm-one").Y[:, 0], [1, -1])

    def test_kronecker_structure(self):
        K, n = 3, 4
        ds = gen_gaussian_classes(K, n, 5)
        Y = encode_labels(ds, "zero-one").Y
        np.testing.assert_array_equal(Y.T @ Y, np.kron(np.eye(K), np.ones((n, n))))

    def test_unknown(self):
        with pytest.raises(DataError):
            encode_labels(self.ds, "one-hot")


class TestCenterGlobal:
    def test_symmetric_pair(self):
        X = np.array([[1.0, 3.0], [2.0, -2.0]])
        Xc, mu = center_global(X, [0, 1])
        np.testing.assert_allclose(Xc[:, 0], -(X[:, 1] - X[:, 0]) / 2)
        np.testing.assert_allclose(Xc[:, 1], (X[:, 1] - X[:, 0]) / 2)

    def test_idempotent(self):
        ds = gen_gaussian_classes(3, 4, 6, seed=2)
        Xc, _ = center_global(ds.X, ds.labels)
        _, mu2 = center_global(Xc, ds.labels)
        assert np.abs(mu2).max() <= 1e-12

    def test_balanced_matches_sample_mean(self):
        ds = gen_gaussian_classes(3, 4, 6, seed=2)
        np.testing.assert_allclose(global_mean(ds.X, ds.labels), ds.X.mean(axis=1), atol=1e-12)

    def test_class_mode_weights_classes_equally(self):
        X = np.array([[0.0, 0.0, 0.0, 4.0]])
        labels = np.array([0, 0, 0, 1])
        assert global_mean(X, labels, mode="class")[0] == 2.0
        assert global_mean(X, labels, mode="sample")[0] == 1.0
