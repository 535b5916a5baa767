import numpy as np
import pytest

from texturestat.data import (SegSample, generate_dataset, generate_sample,
                              load_dataset, load_label_png, load_png,
                              save_dataset, save_label_png, save_png)
from texturestat.ptfem import glcm_oracle
from texturestat.tensor import Tensor


class TestGenerateDataset:
    def test_empty(self):
        assert generate_dataset(0, 64, 3, seed=0) == []

    def test_invalid_class_count(self):
        with pytest.raises(ValueError):
            generate_dataset(1, 64, 5, seed=0)

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_dataset(1, 16, 3, seed=0)

    def test_shapes_and_ranges(self):
        samples = generate_dataset(5, 64, 4, seed=2)
        for s in samples:
            assert s.image.shape == (3, 64, 64)
            assert s.labels.shape == (64, 64)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert set(np.unique(s.labels)) <= {0, 1, 2, 3}

    def test_determinism_bitwise(self):
        a = generate_dataset(8, 64, 3, seed=5)
        b = generate_dataset(8, 64, 3, seed=5)
        for s, t in zip(a, b):
            assert np.array_equal(s.image, t.image)
            assert np.array_equal(s.labels, t.labels)

    def test_per_sample_seed_derivation(self):
        d = generate_dataset(3, 64, 3, seed=10)
        lone = generate_sample(64, 3, seed=12)
        assert np.array_equal(d[2].image, lone.image)

    def test_grayscale_replicated(self):
        for s in generate_dataset(3, 64, 3, seed=1):
            assert np.array_equal(s.image[0], s.image[1])
            assert np.array_equal(s.image[0], s.image[2])

    def test_class_means_match(self):
        samples = generate_dataset(100, 64, 3, seed=0)
        sums = np.zeros(3)
        counts = np.zeros(3)
        for s in samples:
            gray = s.image[0]
            for c in range(3):
                mask = s.labels == c
                sums[c] += gray[mask].sum()
                counts[c] += mask.sum()
        means = sums / counts
        assert (means > 0.49).all() and (means < 0.51).all()

    def test_textures_distinguishable_by_cooccurrence(self):
        # frozen threshold: noise vs checkerboard total-variation distance of
        # 8-level horizontal co-occurrence distributions exceeds 0.3
        rng = np.random.default_rng(0)
        sample = generate_sample(64, 3, seed=99)
        from texturestat.data import _texture_canvas
        noise = _texture_canvas("uniform_noise", 48, 48, np.random.default_rng(1))
        checker = _texture_canvas("checkerboard", 48, 48, np.random.default_rng(2))
        q = lambda x: np.minimum((x * 8).astype(np.int64), 7)
        tv = 0.5 * np.abs(glcm_oracle(q(noise), 8) - glcm_oracle(q(checker), 8)).sum()
        assert tv > 0.3

    def test_stripes_versus_checker_cooccurrence(self):
        from texturestat.data import _texture_canvas
        checker = _texture_canvas("checkerboard", 32, 32, np.random.default_rng(3))
        stripes = _texture_canvas("h_stripes", 32, 32, np.random.default_rng(4))
        q = lambda x: np.minimum((x * 8).astype(np.int64), 7)
        g_c = glcm_oracle(q(checker), 8)
        g_s = glcm_oracle(q(stripes), 8)
        # horizontal neighbors alternate on the checkerboard but agree within
        # a stripe row: mass off-diagonal vs on-diagonal
        assert np.diag(g_c).sum() < 0.01
        assert np.diag(g_s).sum() > 0.99


class TestPngIO:
    def test_roundtrip_error_bound(self, tmp_path, rng):
        img = rng.uniform(0, 1, size=(3, 8, 8))
        path = tmp_path / "x.png"
        save_png(img, path)
        back = load_png(path)
        assert np.abs(back - img).max() <= 1.0 / 255.0

    def test_round_half_up(self, tmp_path):
        # 128/255 quantizes from exactly 127.5/255 under round-half-up
        img = np.full((3, 1, 1), 127.5 / 255.0)
        path = tmp_path / "h.png"
        save_png(img, path)
        assert load_png(path)[0, 0, 0] == 128 / 255.0

    def test_bad_file_parse_error(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"not a png at all")
        with pytest.raises(ValueError) as exc:
            load_png(path)
        assert "bad.png" in str(exc.value)

    def test_accepts_tensor(self, tmp_path):
        save_png(Tensor(np.zeros((3, 2, 2))), tmp_path / "t.png")
        assert np.array_equal(load_png(tmp_path / "t.png"), np.zeros((3, 2, 2)))

    def test_label_roundtrip(self, tmp_path, rng):
        labels = rng.integers(0, 4, size=(16, 16)).astype(np.int64)
        labels[0, :4] = 255
        path = tmp_path / "lab.png"
        save_label_png(labels, path)
        assert np.array_equal(load_label_png(path), labels)


class TestDatasetLayout:
    def test_save_load_roundtrip(self, tmp_path):
        samples = generate_dataset(10, 64, 3, seed=4)
        meta = save_dataset(samples, str(tmp_path), seed=4)
        assert len(meta["split"]["train"]) == 8
        assert len(meta["split"]["val"]) == 2
        train, val, meta2 = load_dataset(str(tmp_path))
        assert meta2["num_classes"] == 3
        assert len(train) == 8 and len(val) == 2
        idx = meta["split"]["train"][0]
        quantized = np.floor(np.clip(samples[idx].image, 0, 1) * 255 + 0.5) / 255.0
        assert np.array_equal(train[0].image, quantized)
        assert np.array_equal(train[0].labels, samples[idx].labels)

    def test_layout_files(self, tmp_path):
        samples = generate_dataset(3, 64, 2, seed=0)
        save_dataset(samples, str(tmp_path), seed=0)
        assert (tmp_path / "images" / "0000.png").exists()
        assert (tmp_path / "labels" / "0002.png").exists()
        assert (tmp_path / "meta.json").exists()

    def test_split_deterministic(self, tmp_path):
        samples = generate_dataset(10, 64, 3, seed=4)
        m1 = save_dataset(samples, str(tmp_path / "a"), seed=9)
        m2 = save_dataset(samples, str(tmp_path / "b"), seed=9)
        assert m1["split"] == m2["split"]
