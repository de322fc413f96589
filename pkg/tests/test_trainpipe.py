import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abldeg.degnet import DegradationModel, NetConfig, load_model
from abldeg.gausskernel import covariance, discretize
from abldeg.imageio import GrayImage, ImagePair, save_image
from abldeg.trainpipe import (SyntheticSpec, TrainConfig, assemble_patches,
                              bicubic_l1, blur_subsample, evaluate_l1,
                              random_flips, split_by_source, synth_pairs, train)


def tiny_model(scale=2, seed=0):
    return DegradationModel.init(NetConfig(channels=4, num_resblocks=1, scale=scale), seed=seed)


class TestConfig:
    def test_file_roundtrip(self, tmp_path):
        cfg = TrainConfig(lr=3e-4, epochs=7, seed=9)
        cfg.to_file(tmp_path / "c.yaml")
        assert TrainConfig.from_file(tmp_path / "c.yaml") == cfg

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text("lr: 0.001\nmomentum: 0.9\n")
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig.from_file(tmp_path / "c.yaml")

    def test_nonpositive(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_flip_mode(self):
        with pytest.raises(ValueError):
            TrainConfig(flips="diagonal")


class TestBlurSubsample:
    def test_direct_sum(self, rng):
        # kernel centre (S-1)/2 lands on block centre scale*m + (scale-1)/2:
        # lr[m] = sum_n k[n] hr[scale*m + (scale-1)/2 + (S-1)/2 - n], reflect-extended
        hr = rng.random((12, 12))
        k = rng.random((5, 5))
        s, size = 3, 5
        off = (s - 1) // 2 + (size - 1) // 2

        def at(p):
            return -p if p < 0 else (22 - p if p > 11 else p)

        ref = np.zeros((4, 4))
        for mi in range(4):
            for mj in range(4):
                for a in range(size):
                    for b in range(size):
                        ref[mi, mj] += hr[at(s * mi + off - a), at(s * mj + off - b)] * k[a, b]
        np.testing.assert_allclose(blur_subsample(hr, k, s), ref, atol=1e-13)

    def test_incompatible_size(self):
        with pytest.raises(ValueError):
            blur_subsample(np.zeros((16, 16)), np.ones((9, 9)) / 81, 4)

    def test_near_delta_is_block_centre_mean(self):
        # a tiny kernel on a 16-cell grid splits its mass over the four central
        # cells, which land on the four central pixels of each 4x4 block
        spec = SyntheticSpec(covariance(0.01, 0.0), scale=4)
        for p in synth_pairs(spec, 2, seed=0):
            h = p.hr.data
            mean = 0.25 * (h[1::4, 1::4] + h[2::4, 1::4] + h[1::4, 2::4] + h[2::4, 2::4])
            assert np.abs(p.lr.data - mean).max() < 1e-3

    def test_flip_consistent(self, rng):
        # flipping HR flips LR exactly for any centrally symmetric kernel
        k = discretize(covariance(1.0, 0.5), 4.0, 16)
        hr = rng.random((32, 32))
        lr = blur_subsample(hr, k, 4)
        np.testing.assert_allclose(blur_subsample(hr[::-1, ::-1].copy(), k, 4), lr[::-1, ::-1], atol=1e-14)

    def test_constant(self):
        k = discretize(covariance(1.0, 0.5), 4.0, 16)
        np.testing.assert_allclose(blur_subsample(np.full((32, 32), 0.5), k, 4), 0.5, atol=1e-14)

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            blur_subsample(np.zeros((10, 12)), np.ones((3, 3)) / 9, 4)


class TestSynth:
    def test_deterministic(self):
        spec = SyntheticSpec(covariance(1.0, math.radians(30)), scale=4)
        a, b = synth_pairs(spec, 3, 5), synth_pairs(spec, 3, 5)
        for x, y in zip(a, b):
            assert x.hr.data.tobytes() == y.hr.data.tobytes()
            assert x.lr.data.tobytes() == y.lr.data.tobytes()

    def test_shapes_and_range(self):
        for p in synth_pairs(SyntheticSpec(covariance(1.0, 0.0), scale=4), 3, 0):
            assert p.hr.data.shape == (64, 64) and p.lr.data.shape == (16, 16)
            assert 0 <= p.lr.data.min() and p.lr.data.max() <= 1

    def test_noise_clamped(self):
        spec = SyntheticSpec(covariance(1.0, 0.0), scale=4, noise_sigma=0.5)
        for p in synth_pairs(spec, 2, 0):
            assert 0 <= p.lr.data.min() and p.lr.data.max() <= 1

    def test_directory_source(self, tmp_path, rng):
        for i in range(2):
            save_image(GrayImage(rng.random((40, 40))), tmp_path / f"s{i}.pgm")
        spec = SyntheticSpec(covariance(1.0, 0.0), scale=4, image_source=tmp_path, hr_size=32)
        pairs = synth_pairs(spec, 3, 0)
        assert len(pairs) == 3 and pairs[0].hr.data.shape == (32, 32)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            synth_pairs(SyntheticSpec(covariance(1.0, 0.0), image_source=tmp_path), 1, 0)


class TestDataset:
    def test_split_disjoint(self):
        names = [f"img{i}" for i in range(10)]
        tr, te = split_by_source(names, 3, 0)
        assert len(te) == 3 and not set(tr) & set(te) and set(tr) | set(te) == set(names)

    def test_patches_come_from_one_source(self, rng):
        pairs = [ImagePair(GrayImage(np.full((32, 32), v)), GrayImage(np.full((8, 8), v)), 4)
                 for v in (0.1, 0.9)]
        patches = assemble_patches(pairs, TrainConfig(hr_patch=16, patches_per_image=3))
        assert len(patches) == 6
        assert {float(p.hr.data[0, 0]) for p in patches[:3]} == {0.1}

    @given(st.integers(0, 10**6), st.sampled_from(["independent", "joint", "none"]))
    @settings(max_examples=30, deadline=None)
    def test_flips_paired(self, seed, mode):
        # LR is the 2x2 block sum of HR, a relation every flip preserves up to
        # the order of the four additions
        r = np.random.default_rng(seed)
        hr = r.random((4, 1, 8, 8))

        def blocks(x):
            return x[:, :, ::2, ::2] + x[:, :, 1::2, ::2] + x[:, :, ::2, 1::2] + x[:, :, 1::2, 1::2]

        fh, fl = random_flips(hr, blocks(hr), r, mode)
        np.testing.assert_allclose(blocks(fh), fl, rtol=0, atol=1e-15)
        if mode == "none":
            np.testing.assert_array_equal(fh, hr)

    def test_joint_flips_are_half_turns(self):
        hr = np.arange(8 * 16, dtype=float).reshape(8, 1, 4, 4)
        fh, _ = random_flips(hr, hr[:, :, ::2, ::2], np.random.default_rng(0), "joint")
        for a, b in zip(fh, hr):
            assert np.array_equal(a, b) or np.array_equal(a, b[:, ::-1, ::-1])


class TestTrain:
    def test_zero_epochs(self, rng):
        m = tiny_model()
        before = [t.data.copy() for t in m.parameters()]
        pairs = [ImagePair(GrayImage(rng.random((16, 16))), GrayImage(rng.random((8, 8))), 2)]
        log = train(m, pairs, TrainConfig(epochs=0))
        assert log.rows == [] and log.epoch_losses == []
        for a, t in zip(before, m.parameters()):
            np.testing.assert_array_equal(a, t.data)

    def test_scale_mismatch(self, rng):
        pairs = [ImagePair(GrayImage(rng.random((16, 16))), GrayImage(rng.random((4, 4))), 4)]
        with pytest.raises(ValueError, match="scale"):
            train(tiny_model(scale=2), pairs, TrainConfig(epochs=1))

    def test_step_count_and_checkpoints(self, tmp_path, rng):
        pairs = [ImagePair(GrayImage(rng.random((16, 16))), GrayImage(rng.random((8, 8))), 2)
                 for _ in range(5)]
        cfg = TrainConfig(batch_size=2, epochs=3, lr=1e-3, checkpoint_every=4)
        log = train(tiny_model(), pairs, cfg, checkpoint_dir=tmp_path)
        assert len(log.rows) == 3 * math.ceil(5 / 2)
        assert len(log.epoch_losses) == 3
        assert (tmp_path / "last.ckpt").exists() and (tmp_path / "best.ckpt").exists()
        load_model(tmp_path / "best.ckpt")
        log.to_csv(tmp_path / "log.csv")
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,epoch,loss,wall_time"

    def test_max_steps(self, rng):
        pairs = [ImagePair(GrayImage(rng.random((16, 16))), GrayImage(rng.random((8, 8))), 2)
                 for _ in range(4)]
        log = train(tiny_model(), pairs, TrainConfig(batch_size=1, epochs=10, max_steps=6))
        assert len(log.rows) == 6

    def test_deterministic(self, rng):
        pairs = [ImagePair(GrayImage(rng.random((16, 16))), GrayImage(rng.random((8, 8))), 2)
                 for _ in range(4)]
        cfg = TrainConfig(batch_size=2, epochs=2, lr=1e-3)
        m1, m2 = tiny_model(), tiny_model()
        l1, l2 = train(m1, pairs, cfg), train(m2, pairs, cfg)
        assert [r[2] for r in l1.rows] == [r[2] for r in l2.rows]
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert a.data.tobytes() == b.data.tobytes()


class TestEvaluate:
    def test_perfect_model(self, rng):
        m = tiny_model()
        hr = rng.random((16, 16))
        out = np.clip(m.forward(hr[None, None]).data[0, 0], 0, 1)
        assert evaluate_l1(m, [ImagePair(GrayImage(hr), GrayImage(out), 2)]) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_l1(tiny_model(), [])

    def test_bicubic_self(self):
        from abldeg.imageio import bicubic_downsample
        hr = GrayImage(np.random.default_rng(0).random((16, 16)))
        assert bicubic_l1([ImagePair(hr, bicubic_downsample(hr, 4), 4)]) == 0.0
