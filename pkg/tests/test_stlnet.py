import json
import os

import numpy as np
import pytest

from texturestat.data import SegSample, generate_dataset
from texturestat.stlnet import (Flags, TrainConfig, backbone_forward,
                                cross_entropy_mean, evaluate_miou,
                                init_stlnet_params, load_checkpoint,
                                named_parameters, ohem_loss, poly_lr,
                                save_checkpoint, stlnet_forward, total_loss,
                                train)
from texturestat.tensor import ShapeError, Tensor


def tiny_cfg(**kw):
    kw.setdefault("iters", 4)
    kw.setdefault("batch", 2)
    kw.setdefault("n_levels_1d", 4)
    kw.setdefault("n_levels_2d", 4)
    kw.setdefault("scales", (1,))
    kw.setdefault("ohem_min_keep", 16)
    return TrainConfig(**kw)


def tiny_dataset(n=6, size=32, num_classes=3, seed=3):
    return generate_dataset(n, size, num_classes, seed)


def logits_for_p_true(p_values, label=0):
    """Two-class logits whose softmax gives exactly (p, 1-p) per pixel."""
    p = np.asarray(p_values, dtype=np.float64)
    z = np.stack([np.log(p), np.log1p(-p)], axis=0)  # [2, n]
    return Tensor(z.reshape(2, 1, p.size)), np.full((1, p.size), label, dtype=np.int64)


class TestBackbone:
    def test_output_strides(self, rng):
        cfg = tiny_cfg()
        params = init_stlnet_params(rng, 3, cfg)
        img = Tensor(rng.normal(size=(3, 32, 24)))
        slf, stage3, ctx = backbone_forward(img, params)
        assert slf.shape == (8 + 16, 4, 3)
        assert stage3.shape == (32, 4, 3)
        assert ctx.shape == (32, 4, 3)

    def test_not_divisible_errors(self, rng):
        params = init_stlnet_params(rng, 3, tiny_cfg())
        with pytest.raises(ShapeError):
            backbone_forward(Tensor(rng.normal(size=(3, 30, 32))), params)

    def test_zero_image_zero_params_zero_output(self, rng):
        params = init_stlnet_params(rng, 3, tiny_cfg())
        for _, p in named_parameters(params):
            p.data = np.zeros_like(p.data)
        slf, stage3, ctx = backbone_forward(Tensor(np.zeros((3, 32, 32))), params)
        assert np.array_equal(slf.data, np.zeros_like(slf.data))
        assert np.array_equal(stage3.data, np.zeros_like(stage3.data))
        assert np.array_equal(ctx.data, np.zeros_like(ctx.data))

    def test_fixed_seed_bitwise_reproducible(self):
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            params = init_stlnet_params(rng, 3, tiny_cfg())
            img = Tensor(np.random.default_rng(5).normal(size=(3, 32, 32)))
            outs.append(backbone_forward(img, params)[2].data)
        assert np.array_equal(outs[0], outs[1])


class TestStlnetForward:
    @pytest.mark.parametrize("flags", [
        Flags(False, False, False, True),
        Flags(True, False, False, True),
        Flags(True, True, False, True),
        Flags(True, False, True, True),
        Flags(True, True, True, True),
        Flags(True, True, True, False),
    ])
    def test_flag_lattice_runs(self, rng, flags):
        cfg = tiny_cfg(flags=flags)
        params = init_stlnet_params(rng, 3, cfg)
        img = Tensor(rng.normal(size=(3, 32, 32)) * 0.2 + 0.5)
        logits, aux = stlnet_forward(img, params, flags)
        assert logits.shape == (3, 32, 32)
        assert aux.shape == (3, 32, 32)
        assert np.isfinite(logits.data).all()

    def test_fuse_head_channel_arithmetic(self, rng):
        flags = Flags(True, True, True, True)
        cfg = tiny_cfg(flags=flags, scales=(1, 2))
        params = init_stlnet_params(rng, 4, cfg)
        # context 32 + tem 16 + ptfem 2*16 + slf 24
        assert params.fuse_head.weight.shape == (4, 32 + 16 + 32 + 24, 1, 1)

    def test_graph_flag_changes_logits(self, rng):
        flags_on = Flags(True, True, True, True)
        flags_off = Flags(True, True, True, False)
        cfg = tiny_cfg(flags=flags_on)
        img = Tensor(np.random.default_rng(2).normal(size=(3, 32, 32)) * 0.3 + 0.5)
        params = init_stlnet_params(np.random.default_rng(0), 3, cfg)
        on, _ = stlnet_forward(img, params, flags_on)
        off, _ = stlnet_forward(img, params, flags_off)
        assert not np.array_equal(on.data, off.data)


class TestOhemLoss:
    def test_hand_selection(self):
        logits, labels = logits_for_p_true([0.9, 0.6, 0.5])
        loss = ohem_loss(logits, labels, theta=0.7, min_keep=1)
        expected = (-np.log(0.6) - np.log(0.5)) / 2
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_min_keep_pads_with_lowest(self):
        logits, labels = logits_for_p_true([0.95, 0.8, 0.9, 0.85])
        loss = ohem_loss(logits, labels, theta=0.7, min_keep=2)
        expected = (-np.log(0.8) - np.log(0.85)) / 2
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_confident_limit(self):
        logits, labels = logits_for_p_true([1.0 - 1e-9])
        loss = ohem_loss(logits, labels, theta=0.7, min_keep=1)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_ignore_excluded_before_selection(self):
        logits, labels = logits_for_p_true([0.2, 0.3, 0.4])
        labels = labels.copy()
        labels[0, 0] = 255
        loss = ohem_loss(logits, labels, theta=0.7, min_keep=1)
        expected = (-np.log(0.3) - np.log(0.4)) / 2
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_no_valid_pixels(self):
        logits, labels = logits_for_p_true([0.5])
        with pytest.raises(ValueError):
            ohem_loss(logits, np.full_like(labels, 255), 0.7, 1)

    def test_bad_labels(self):
        logits, labels = logits_for_p_true([0.5])
        with pytest.raises(ValueError):
            ohem_loss(logits, np.full_like(labels, 7), 0.7, 1)

    def test_selection_invariant(self, rng):
        # every kept pixel is hard or no easier than any discarded one
        for _ in range(25):
            k = int(rng.integers(2, 5))
            z = rng.normal(size=(k, 4, 4)) * 2
            labels = rng.integers(0, k, size=(4, 4))
            min_keep = int(rng.integers(1, 8))
            theta = 0.7
            flat = z.reshape(k, -1).T
            e = np.exp(flat - flat.max(axis=1, keepdims=True))
            probs = e / e.sum(axis=1, keepdims=True)
            p_true = probs[np.arange(16), labels.reshape(-1)]
            loss = ohem_loss(Tensor(z), labels, theta, min_keep)
            # recompute the kept set from the definition
            hard = p_true < theta
            if hard.sum() >= min(min_keep, 16):
                kept = hard
            else:
                kept = np.zeros(16, bool)
                kept[np.argsort(p_true, kind="stable")[:min(min_keep, 16)]] = True
            assert kept.sum() >= min(min_keep, 16) or hard.sum() >= kept.sum()
            expected = -np.log(p_true[kept]).mean()
            assert loss.item() == pytest.approx(expected, rel=1e-9)


class TestTotalLoss:
    def test_weighted_sum(self):
        cfg = TrainConfig(alpha=0.4, ohem_theta=0.7, ohem_min_keep=1)
        final, labels = logits_for_p_true([np.exp(-1.0)])   # ohem ce = 1.0
        aux, _ = logits_for_p_true([np.exp(-0.5)])          # plain ce = 0.5
        loss = total_loss(final, aux, labels, cfg)
        assert loss.item() == pytest.approx(1.2, abs=1e-9)

    def test_alpha_zero(self):
        cfg = TrainConfig(alpha=0.0, ohem_min_keep=1)
        final, labels = logits_for_p_true([np.exp(-1.0)])
        aux, _ = logits_for_p_true([0.123])
        assert total_loss(final, aux, labels, cfg).item() == pytest.approx(1.0, abs=1e-9)

    def test_gradient_reaches_aux_head(self, rng):
        cfg = tiny_cfg(flags=Flags(False, False, False, True))
        params = init_stlnet_params(rng, 3, cfg)
        img = Tensor(rng.normal(size=(3, 32, 32)) * 0.3 + 0.5)
        labels = np.zeros((32, 32), dtype=np.int64)
        logits, aux = stlnet_forward(img, params, cfg.flags)
        total_loss(logits, aux, labels, cfg).backward()
        assert np.abs(params.aux_head.weight.grad).max() > 0


class TestPolyLr:
    def test_at_zero(self):
        assert poly_lr(0.01, 0, 100, 0.9) == 0.01

    def test_at_max(self):
        assert poly_lr(0.01, 100, 100, 0.9) == 0.0

    def test_halfway(self):
        assert poly_lr(0.01, 50, 100, 0.9) == pytest.approx(0.005359, abs=1e-6)
        assert poly_lr(0.01, 50, 100, 0.9) == pytest.approx(0.01 * 0.5 ** 0.9, rel=1e-12)


class TestEvaluateMiou:
    def _sample(self, image, labels):
        return SegSample(image=image, labels=labels, seed=0, recipe=("x",))

    def test_perfect_prediction(self, rng):
        cfg = tiny_cfg()
        params = init_stlnet_params(rng, 2, cfg)
        img = rng.normal(size=(3, 32, 32)) * 0.1 + 0.5
        logits, _ = stlnet_forward(Tensor(img), params, cfg.flags)
        pred = np.argmax(logits.data, axis=0)
        iou, miou = evaluate_miou(params, [self._sample(img, pred)], cfg.flags)
        assert miou == pytest.approx(1.0)

    def test_half_half_hand_count(self, rng, monkeypatch):
        import texturestat.stlnet as mod
        labels = np.zeros((4, 4), dtype=np.int64)
        labels[2:] = 1
        monkeypatch.setattr(mod, "predict", lambda *a, **k: np.zeros((4, 4), dtype=np.int64))
        params = init_stlnet_params(rng, 2, tiny_cfg())
        iou, miou = mod.evaluate_miou(params, [self._sample(np.zeros((3, 4, 4)), labels)],
                                      tiny_cfg().flags)
        np.testing.assert_allclose(iou, [0.5, 0.0])
        assert miou == pytest.approx(0.25)

    def test_relabeling_permutation_invariance(self, rng, monkeypatch):
        import texturestat.stlnet as mod
        rng2 = np.random.default_rng(0)
        labels = rng2.integers(0, 3, size=(8, 8))
        pred = rng2.integers(0, 3, size=(8, 8))
        params = init_stlnet_params(rng, 3, tiny_cfg())
        perm = np.array([2, 0, 1])
        monkeypatch.setattr(mod, "predict", lambda *a, **k: pred)
        _, m1 = mod.evaluate_miou(params, [self._sample(np.zeros((3, 8, 8)), labels)],
                                  tiny_cfg().flags)
        monkeypatch.setattr(mod, "predict", lambda *a, **k: perm[pred])
        _, m2 = mod.evaluate_miou(params, [self._sample(np.zeros((3, 8, 8)), perm[labels])],
                                  tiny_cfg().flags)
        assert m1 == pytest.approx(m2, rel=1e-12)

    def test_empty_dataset(self, rng):
        with pytest.raises(ValueError):
            evaluate_miou(init_stlnet_params(rng, 2, tiny_cfg()), [], tiny_cfg().flags)

    def test_ignore_label_excluded(self, rng, monkeypatch):
        import texturestat.stlnet as mod
        labels = np.zeros((4, 4), dtype=np.int64)
        labels[:, 2:] = 255
        monkeypatch.setattr(mod, "predict", lambda *a, **k: np.ones((4, 4), dtype=np.int64))
        params = init_stlnet_params(rng, 2, tiny_cfg())
        iou, miou = mod.evaluate_miou(params, [self._sample(np.zeros((3, 4, 4)), labels)],
                                      tiny_cfg().flags)
        assert miou == pytest.approx(0.0)   # class 0 present, fully mispredicted


class TestTraining:
    def test_zero_iters_leaves_params_at_init(self):
        data = tiny_dataset()
        cfg = tiny_cfg(iters=0)
        params, rows = train(data, cfg, 3)
        fresh = init_stlnet_params(np.random.default_rng(cfg.seed), 3, cfg)
        for (_, p), (_, q) in zip(named_parameters(params), named_parameters(fresh)):
            assert np.array_equal(p.data, q.data)
        assert rows == []

    def test_same_seed_bitwise_identical_metrics(self):
        data = tiny_dataset()
        rows1 = train(data, tiny_cfg(), 3, val_set=data[:2])[1]
        rows2 = train(data, tiny_cfg(), 3, val_set=data[:2])[1]
        assert rows1 == rows2

    def test_different_seed_differs(self):
        data = tiny_dataset()
        rows1 = train(data, tiny_cfg(seed=0), 3)[1]
        rows2 = train(data, tiny_cfg(seed=1), 3)[1]
        assert rows1 != rows2

    def test_metrics_csv_written(self, tmp_path):
        data = tiny_dataset()
        out = tmp_path / "run"
        train(data, tiny_cfg(), 3, val_set=data[:2], out_dir=str(out))
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "iter,lr,loss,val_miou"
        assert len(lines) == 1 + 4
        assert lines[1].startswith("0,0.02")

    def test_momentum_and_weight_decay_paths(self):
        data = tiny_dataset(n=4)
        params, rows = train(data, tiny_cfg(momentum=0.9, weight_decay=1e-4), 3)
        assert len(rows) == 4

    def test_nan_aborts_with_diagnostics(self, tmp_path):
        data = tiny_dataset(n=4)
        cfg = tiny_cfg(lr=1e14, iters=30)
        with pytest.raises(FloatingPointError):
            train(data, cfg, 3, out_dir=str(tmp_path))
        assert (tmp_path / "nan_diagnostics.json").exists()

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], tiny_cfg(), 3)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        data = tiny_dataset(n=4)
        cfg = tiny_cfg(iters=2)
        params, _ = train(data, cfg, 3)
        ckpt = tmp_path / "ckpt"
        save_checkpoint(params, cfg, str(ckpt))
        loaded, loaded_cfg = load_checkpoint(str(ckpt))
        assert loaded_cfg.to_dict() == cfg.to_dict()
        for (na, a), (nb, b) in zip(named_parameters(params), named_parameters(loaded)):
            assert na == nb
            assert np.array_equal(a.data, b.data)
        with open(os.path.join(str(ckpt), "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["num_classes"] == 3
        assert all("file" in v and "shape" in v for v in manifest["params"].values())


class TestTrainConfig:
    def test_json_roundtrip(self):
        cfg = TrainConfig(lr=0.05, scales=(1, 2), flags=Flags(True, False, True, False))
        back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.to_dict() == cfg.to_dict()

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 0.1})

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(ohem_theta=1.5)
        with pytest.raises(ValueError):
            TrainConfig(ohem_min_keep=0)
