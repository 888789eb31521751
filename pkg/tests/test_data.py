"""Data pipeline: file formats, synthetic generation, splits, preprocessing,
samplers."""

import numpy as np
import pytest
from scipy import ndimage, stats

from auxcnn import streams
from auxcnn.data import (
    AugmentConfig,
    Dataset,
    LabeledImage,
    MinibatchSampler,
    SplitSpec,
    augment_image,
    generate_synthetic_dataset,
    load_dataset,
    prepare_training_image,
    read_pgm,
    resize_bilinear,
    ros_minibatch,
    rotate_bilinear,
    save_dataset,
    scaled_counts,
    split_dataset,
    stratified_fraction,
    synthetic_image_seeds,
    write_pgm,
)
from auxcnn.errors import DataError


class TestPgm:
    def test_round_trip_quantized(self, tmp_path):
        img = np.random.default_rng(0).random((9, 14))
        write_pgm(tmp_path / "x.pgm", img)
        back = read_pgm(tmp_path / "x.pgm")
        assert back.shape == (9, 14)
        assert np.abs(back * 255 - np.rint(img * 255)).max() < 1e-6

    def test_pixel_255_maps_to_one(self, tmp_path):
        write_pgm(tmp_path / "w.pgm", np.ones((2, 2)))
        assert read_pgm(tmp_path / "w.pgm").max() == 1.0

    def test_comment_header_supported(self, tmp_path):
        payload = b"P5\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 64])
        (tmp_path / "c.pgm").write_bytes(payload)
        img = read_pgm(tmp_path / "c.pgm")
        assert img[0, 1] == pytest.approx(128 / 255)

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.pgm").write_bytes(b"P2\n2 2\n255\n")
        with pytest.raises(DataError):
            read_pgm(tmp_path / "bad.pgm")

    def test_truncated_rejected(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(DataError):
            read_pgm(tmp_path / "t.pgm")


class TestLoadDataset:
    def _write(self, tmp_path, labels_rows, images=("a", "b", "c")):
        for name in images:
            write_pgm(tmp_path / f"{name}.pgm", np.full((4, 4), 0.5))
        (tmp_path / "labels.csv").write_text(
            "filename,class\n" + "\n".join(labels_rows) + "\n")

    def test_sorted_class_index_mapping(self, tmp_path):
        self._write(tmp_path, ["a.pgm,covid", "b.pgm,normal", "c.pgm,pneumonia"])
        ds = load_dataset(tmp_path)
        assert ds.class_names == ["covid", "normal", "pneumonia"]
        assert [it.class_label for it in ds.items] == [0, 1, 2]

    def test_missing_image_error_names_file(self, tmp_path):
        self._write(tmp_path, ["a.pgm,x", "ghost.pgm,y"])
        with pytest.raises(DataError, match="ghost.pgm"):
            load_dataset(tmp_path)

    def test_empty_class_name_rejected(self, tmp_path):
        self._write(tmp_path, ["a.pgm,x", "b.pgm,"])
        with pytest.raises(DataError):
            load_dataset(tmp_path)

    def test_save_load_round_trip_with_manifest(self, tmp_path):
        ds = generate_synthetic_dataset(2, (3, 4), 16, seed=5)
        seeds = synthetic_image_seeds(ds, 5)
        save_dataset(ds, tmp_path, seeds)
        assert (tmp_path / "manifest.csv").read_text().startswith("source_id,class,seed")
        back = load_dataset(tmp_path)
        assert len(back) == 7
        assert back.per_class_counts == [3, 4]


class TestSynthetic:
    def test_same_seed_bitwise_identical(self):
        a = generate_synthetic_dataset(3, (5, 5, 5), 32, seed=9)
        b = generate_synthetic_dataset(3, (5, 5, 5), 32, seed=9)
        assert all(x.pixels.tobytes() == y.pixels.tobytes()
                   for x, y in zip(a.items, b.items))

    def test_blob_count_oracle(self):
        # connected components above threshold count the k+1 blobs per class
        ds = generate_synthetic_dataset(3, (500, 500, 500), 32, seed=3)
        for k in range(3):
            counts = [ndimage.label(it.pixels > 0.6)[1]
                      for it in ds.items if it.class_label == k]
            assert abs(np.mean(counts) - (k + 1)) <= 0.1

    def test_pixels_in_range(self):
        ds = generate_synthetic_dataset(2, (10, 10), 24, seed=1)
        for it in ds.items:
            assert it.pixels.min() >= 0.0 and it.pixels.max() <= 1.0

    def test_scaled_counts_round_half_up(self):
        assert scaled_counts((417, 7866, 5375), 0.1) == [42, 787, 538]
        assert scaled_counts((905, 2150), 0.1) == [91, 215]


class TestSplit:
    def test_sizes_and_partition(self):
        ds = generate_synthetic_dataset(3, (120, 130, 140), 16, seed=2)
        tr, va, te = split_dataset(ds, SplitSpec(100, 0.2, seed=4))
        assert te.per_class_counts == [100, 100, 100]
        assert len(te) == 300
        rest = len(ds) - 300
        assert len(va) == round(0.2 * rest)
        assert len(tr) == rest - len(va)
        ids = lambda d: {it.source_id for it in d.items}
        assert not ids(tr) & ids(va)
        assert not ids(tr) & ids(te)
        assert not ids(va) & ids(te)
        assert ids(tr) | ids(va) | ids(te) == ids(ds)

    def test_eighty_twenty_exact(self):
        ds = generate_synthetic_dataset(2, (550, 550), 8, seed=0)
        tr, va, te = split_dataset(ds, SplitSpec(50, 0.2, seed=1))
        assert len(tr) == 800 and len(va) == 200

    def test_deterministic_partition(self):
        ds = generate_synthetic_dataset(2, (30, 40), 8, seed=6)
        s = SplitSpec(5, 0.25, seed=11)
        a = split_dataset(ds, s)
        b = split_dataset(ds, s)
        for da, db in zip(a, b):
            assert [x.source_id for x in da.items] == [x.source_id for x in db.items]

    def test_insufficient_class_rejected(self):
        ds = generate_synthetic_dataset(2, (4, 40), 8, seed=6)
        with pytest.raises(DataError):
            split_dataset(ds, SplitSpec(5, 0.2, seed=0))

    def test_stratified_fraction(self):
        ds = generate_synthetic_dataset(2, (40, 80), 8, seed=7)
        sub = stratified_fraction(ds, 0.25, seed=1)
        assert sub.per_class_counts == [10, 20]


class TestResize:
    def test_identity_same_size(self):
        img = np.random.default_rng(0).random((7, 7)).astype(np.float32)
        assert np.array_equal(resize_bilinear(img, 7), img)

    def test_constant_stays_constant(self):
        for target in (3, 5, 16):
            out = resize_bilinear(np.full((6, 6), 0.42), target)
            assert np.allclose(out, 0.42)

    def test_half_pixel_center_ramp_oracle(self):
        # (i+0.5)*src/dst - 0.5 with edge clamp gives [0, .25, .75, 1]
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = resize_bilinear(img, 4)
        assert np.allclose(out, np.tile([0.0, 0.25, 0.75, 1.0], (4, 1)))

    def test_values_stay_in_range(self):
        img = np.random.default_rng(1).random((11, 11))
        out = resize_bilinear(img, 37)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestAugment:
    def test_zero_rotation_no_flip_is_identity(self):
        img = np.random.default_rng(2).random((16, 16)).astype(np.float32)
        cfg = AugmentConfig(rotation_range=0.0, flip_probability=0.0, target_size=16)
        out = augment_image(img, cfg, streams.stream(0, streams.AUGMENT, 0, 0))
        assert np.array_equal(out, img)

    def test_zero_image_stays_zero(self):
        cfg = AugmentConfig(target_size=16)
        out = augment_image(np.zeros((16, 16)), cfg,
                            streams.stream(1, streams.AUGMENT, 0, 0))
        assert np.array_equal(out, np.zeros((16, 16)))

    def test_rotation_disabled_keeps_corners(self):
        # corners of a constant-one image stay 1 without rotation fill
        img = np.ones((16, 16))
        cfg = AugmentConfig(rotation_enabled=False, flip_probability=0.0, target_size=16)
        for draw in range(20):
            out = augment_image(img, cfg, streams.stream(2, streams.AUGMENT, 0, draw))
            assert out[0, 0] == 1.0 and out[-1, -1] == 1.0

    def test_rotation_zero_fills_corners(self):
        img = np.ones((32, 32))
        out = rotate_bilinear(img, 10.0)
        assert out[0, 0] < 1.0  # corner left the support

    def test_prepared_images_in_range_and_sized(self):
        rng_img = np.random.default_rng(3).random((20, 20))
        cfg = AugmentConfig(target_size=32)
        for draw in range(25):
            out = prepare_training_image(rng_img, cfg,
                                         streams.stream(3, streams.AUGMENT, 1, draw))
            assert out.shape == (32, 32)
            assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-6

    def test_counter_keyed_streams_order_independent(self):
        img = np.random.default_rng(4).random((16, 16))
        cfg = AugmentConfig(target_size=16)
        a = augment_image(img, cfg, streams.stream(7, streams.AUGMENT, 3, 5))
        b = augment_image(img, cfg, streams.stream(7, streams.AUGMENT, 3, 5))
        assert np.array_equal(a, b)


class TestSampling:
    def test_ros_frequencies_uniform(self):
        per = [np.arange(5), np.arange(5, 1800), np.arange(1800, 1900)]
        rng = streams.stream(0, streams.SAMPLER, 0)
        draws = np.concatenate([ros_minibatch(per, 8, rng) for _ in range(3750)])
        for members in per:
            f = float(np.isin(draws, members).mean())
            assert abs(f - 1 / 3) < 0.01

    def test_ros_chi_square_below_reference(self):
        per = [np.arange(4), np.arange(4, 1000), np.arange(1000, 1050)]
        rng = streams.stream(1, streams.SAMPLER, 0)
        draws = np.concatenate([ros_minibatch(per, 8, rng) for _ in range(1250)])
        observed = np.array([np.isin(draws, m).sum() for m in per])
        expected = draws.size / 3
        chi2 = float(((observed - expected) ** 2 / expected).sum())
        assert chi2 < stats.chi2.ppf(0.999, df=2)

    def test_ros_empty_class_rejected(self):
        with pytest.raises(DataError):
            ros_minibatch([np.arange(3), np.array([], dtype=int)], 4,
                          streams.stream(0, streams.SAMPLER, 0))

    def test_plain_epoch_covers_each_item_once(self):
        labels = np.array([0] * 10 + [1] * 13)
        sampler = MinibatchSampler(labels, 2, m=8, mode="plain")
        batches = list(sampler.epoch_batches(streams.stream(5, streams.SHUFFLE, 0)))
        assert all(len(b) == 8 for b in batches[:-1])
        got = sorted(np.concatenate(batches).tolist())
        assert got == list(range(23))

    def test_batch_size_eight(self):
        labels = np.array([0, 1] * 20)
        sampler = MinibatchSampler(labels, 2, m=8, mode="ros")
        batch = next(iter(sampler.epoch_batches(streams.stream(6, streams.SAMPLER, 0))))
        assert len(batch) == 8

    def test_extra_pool_extends_epoch(self):
        labels = np.array([0, 1] * 8)
        sampler = MinibatchSampler(labels, 2, m=4, mode="plain")
        batches = list(sampler.epoch_batches(streams.stream(7, streams.SHUFFLE, 0),
                                             extra_pool=[0, 1, 2, 3]))
        assert sum(len(b) for b in batches) == 20
