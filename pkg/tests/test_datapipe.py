import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from twincount import synthgen as sg
from twincount.datapipe import (AugmentConfig, Dataset, DatasetError, EmptyDatasetError,
                                RatioSampler, augment, format_ratio, load_dataset, make_batches,
                                parse_ratio, stratified_split)


def toy(n, origin, labels=None, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 5 + 1 if labels is None else labels
    return Dataset(rng.random((n, 128, 128), dtype=np.float32), labels, origin)


def test_load_generated_dataset(tmp_path):
    sg.generate_dataset(sg.GeneratorConfig(seed=2), 4, tmp_path)
    ds = load_dataset(tmp_path)
    assert len(ds) == 4 and ds.origin == "synthetic"
    direct = sg.generate_sample(sg.GeneratorConfig(seed=2), 1)
    assert ds.labels[1] == direct.label
    np.testing.assert_allclose(ds.images[1], sg.to_uint8(direct.image) / 255.0, atol=1e-7)
    assert load_dataset(tmp_path, origin="natural").origin == "natural"


def _write_folder(path, rows, size=128):
    path.mkdir()
    with open(path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "count"])
        for name, count in rows:
            Image.fromarray(np.zeros((size, size), np.uint8)).save(path / name)
            w.writerow([name, count])


def test_load_rejects_bad_folders(tmp_path):
    _write_folder(tmp_path / "a", [("x.png", 3)])
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(tmp_path / "a")
    assert len(load_dataset(tmp_path / "a", origin="natural")) == 1

    _write_folder(tmp_path / "b", [("x.png", 31)])
    with pytest.raises(DatasetError, match="x.png"):
        load_dataset(tmp_path / "b", origin="natural")

    _write_folder(tmp_path / "c", [("x.png", 2)], size=64)
    with pytest.raises(DatasetError, match="128"):
        load_dataset(tmp_path / "c", origin="natural")

    _write_folder(tmp_path / "d", [("x.png", "")])
    assert load_dataset(tmp_path / "d", origin="natural").labels[0] == -1


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 64, 64)), [1, 2], "natural")
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 128, 128)), [1], "natural")
    with pytest.raises(DatasetError):
        Dataset(np.zeros((1, 128, 128)), [1], "real")


def test_stratified_split_per_count():
    labels = np.repeat(np.arange(1, 5), 20)
    labels = np.concatenate([labels, -np.ones(10, int)])
    ds = toy(len(labels), "natural", labels)
    train, val = stratified_split(ds, 0.15, seed=3)
    assert len(train) + len(val) == len(ds)
    assert (val.labels >= 1).all()
    assert np.bincount(val.labels, minlength=5)[1:].tolist() == [3, 3, 3, 3]
    assert not set(train.filenames) & set(val.filenames)
    again = stratified_split(ds, 0.15, seed=3)[1]
    assert again.filenames == val.filenames


@pytest.mark.parametrize("text,value", [("2:1", 2.0), ("1:2", 0.5), ("1:0", math.inf),
                                        ("0:1", 0.0), (3, 3.0), ("0.25", 0.25)])
def test_parse_ratio(text, value):
    assert parse_ratio(text) == value


def test_ratio_format_round_trip():
    for r in (0.25, 0.5, 1.0, 2.0, 10.0, math.inf, 0.0):
        assert parse_ratio(format_ratio(r)) == r
    with pytest.raises(ValueError):
        parse_ratio("0:0")
    with pytest.raises(ValueError):
        parse_ratio(-1)


@given(st.floats(0.01, 100), st.integers(2, 256))
def test_shares_keep_both_origins(ratio, batch):
    shares = RatioSampler(ratio, batch).shares()
    assert shares["synthetic"] + shares["natural"] == batch
    assert shares["synthetic"] >= 1 and shares["natural"] >= 1


def test_ten_to_one_keeps_a_natural_item():
    nat, syn = toy(100, "natural"), toy(30, "synthetic")
    sampler = RatioSampler(10, 8, seed=0)
    for batch in make_batches(nat, syn, sampler, 0):
        assert len(batch.images["natural"]) >= 1


def test_epoch_covers_larger_pool():
    nat, syn = toy(30, "natural"), toy(7, "synthetic")
    sampler = RatioSampler(1, 10, seed=0)
    batches = list(make_batches(nat, syn, sampler, 0))
    assert len(batches) == sampler.batches_per_epoch({"natural": 30, "synthetic": 7}) == 6
    seen = np.concatenate([b.indices["natural"] for b in batches])
    assert sorted(seen.tolist()) == list(range(30))


def test_batches_deterministic_and_epoch_dependent():
    nat, syn = toy(12, "natural"), toy(12, "synthetic", seed=1)
    sampler = RatioSampler(2, 6, seed=4)
    aug = AugmentConfig()
    a = list(make_batches(nat, syn, sampler, 3, aug))
    b = list(make_batches(nat, syn, sampler, 3, aug))
    c = list(make_batches(nat, syn, sampler, 4, aug))
    for x, y in zip(a, b):
        assert np.array_equal(x.images["synthetic"], y.images["synthetic"])
    assert not all(np.array_equal(x.indices["synthetic"], y.indices["synthetic"])
                   for x, y in zip(a, c))


def test_single_origin_batches():
    syn = toy(10, "synthetic")
    batches = list(make_batches(None, syn, RatioSampler("1:0", 4), 0))
    assert all("natural" not in b.images for b in batches)
    with pytest.raises(EmptyDatasetError):
        list(make_batches(None, syn, RatioSampler(1, 4), 0))


def test_identity_augmentation_is_exact():
    img = np.random.default_rng(0).random((128, 128), dtype=np.float32)
    out = augment(img, AugmentConfig.identity(), np.random.default_rng(1))
    assert np.array_equal(out, img)


def test_flip_only_augmentation():
    img = np.random.default_rng(0).random((128, 128), dtype=np.float32)
    cfg = AugmentConfig(hflip_prob=1, vflip_prob=0, crop_scale=1, small_rotation_max_deg=0,
                        quarter_rotation=False, noise_amplitude=0)
    assert np.array_equal(augment(img, cfg, np.random.default_rng(0)), img[:, ::-1])


@given(st.integers(0, 2 ** 32 - 1))
def test_augment_stays_in_range(seed):
    img = np.random.default_rng(seed).random((128, 128), dtype=np.float32)
    out = augment(img, AugmentConfig(), np.random.default_rng(seed))
    assert out.shape == (128, 128) and out.dtype == np.float32
    assert out.min() >= 0 and out.max() <= 1


def test_constant_image_survives_geometry():
    img = np.full((128, 128), 0.3, np.float32)
    cfg = AugmentConfig(noise_amplitude=0)
    out = augment(img, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(out, 0.3, atol=1e-6)


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=0.4)
    with pytest.raises(ValueError):
        AugmentConfig(hflip_prob=2)
