import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from twincount import synthgen as sg


def sparse_config(**kw):
    base = dict(count_weights=sg.uniform_weights(1, 6), overlap_probability=0.0,
                noise_amplitude=0.0)
    base.update(kw)
    return sg.GeneratorConfig(**base)


def test_same_seed_same_image():
    cfg = sg.GeneratorConfig(seed=5)
    a, b = sg.generate_sample(cfg, 3), sg.generate_sample(cfg, 3)
    assert np.array_equal(a.image, b.image) and a.label == b.label


def test_images_independent_of_generation_order():
    cfg = sg.GeneratorConfig(seed=5)
    batch = sg.generate_samples(cfg, 4)
    assert np.array_equal(batch[2].image, sg.generate_sample(cfg, 2).image)


def test_sample_fields():
    s = sg.generate_sample(sg.GeneratorConfig(seed=1), 0)
    assert s.image.shape == (128, 128) and s.image.dtype == np.float32
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert 1 <= s.label <= 30 and s.filename == "img_000000.png"


@pytest.mark.parametrize("style", ["bf_like", "pc_like"])
def test_label_equals_visible_blob_count(style):
    # with no overlap and no noise, thresholding against the background separates every cell
    cfg = sparse_config(style=sg.get_style(style), seed=21)
    bg = cfg.style.background_level
    for i in range(20):
        rng = sg.image_rng(cfg.seed, i)
        count = sg.sample_count(cfg, rng)
        cells = sg.place_cells(count, cfg, rng)
        assert len(cells) == count
        sample = sg.generate_sample(cfg, i)
        assert sample.label == count
        core = np.zeros((128, 128), bool)
        for cell in cells:
            y0, x0, patch = sg.support_mask(cell)
            # shrink each support by a pixel so touching neighbours stay separate
            inner = ndimage.binary_erosion(np.pad(patch, 1))[1:-1, 1:-1]
            core[y0:y0 + patch.shape[0], x0:x0 + patch.shape[1]] |= inner
        visible = core & (np.abs(sample.image - bg) > 0.05)
        assert visible.sum() > 0.7 * core.sum()
        _, n_core = ndimage.label(visible)
        assert n_core == count


def test_no_overlap_means_disjoint_supports():
    cfg = sparse_config(count_weights=sg.point_mass(12), seed=3)
    cells = sg.place_cells(12, cfg, sg.image_rng(3, 0))
    cover = np.zeros((128, 128), int)
    for cell in cells:
        y0, x0, patch = sg.support_mask(cell)
        cover[y0:y0 + patch.shape[0], x0:x0 + patch.shape[1]] += patch
    assert cover.max() == 1


def test_overlap_fraction_bounded():
    cfg = sg.GeneratorConfig(count_weights=sg.point_mass(20), overlap_probability=1.0,
                             overlap_max_fraction=0.2, seed=4)
    cells = sg.place_cells(20, cfg, sg.image_rng(4, 0))
    masks = [sg.support_mask(c) for c in cells]
    for i in range(len(masks)):
        for j in range(i):
            inter = sg._intersection(masks[i], masks[j])
            small = min(masks[i][2].sum(), masks[j][2].sum())
            assert inter <= 0.2 * small + 1e-9


def test_overdense_configuration_fails_loudly():
    cfg = sg.GeneratorConfig(count_weights=sg.point_mass(30), size_range=(30, 40),
                             overlap_probability=0.0, retry_budget=5, seed=0)
    with pytest.raises(sg.PlacementError):
        sg.generate_sample(cfg, 0)


@given(st.lists(st.floats(0, 5), min_size=30, max_size=30).filter(lambda w: sum(w) > 0.1))
def test_sample_count_only_hits_positive_weights(weights):
    cfg = sg.GeneratorConfig(count_weights=tuple(weights))
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = sg.sample_count(cfg, rng)
        assert weights[k - 1] > 0


def test_point_mass_distribution():
    cfg = sg.GeneratorConfig(count_weights=sg.point_mass(7))
    rng = np.random.default_rng(0)
    assert {sg.sample_count(cfg, rng) for _ in range(100)} == {7}


def test_geometric_weights_shape():
    w = np.array(sg.geometric_weights(0.9))
    assert len(w) == 30 and np.allclose(w[1:] / w[:-1], 0.9)


@pytest.mark.parametrize("bad", [
    dict(count_weights=(1.0,) * 29),
    dict(count_weights=(0.0,) * 30),
    dict(overlap_probability=1.5),
    dict(noise_amplitude=0.7),
    dict(size_range=(10, 5)),
    dict(max_aspect=0.5),
    dict(seed=-1),
])
def test_config_validation(bad):
    with pytest.raises(sg.ConfigError):
        sg.GeneratorConfig(**bad)


def test_unknown_style_lists_valid_ones():
    with pytest.raises(sg.ConfigError, match="bf_like"):
        sg.get_style("dic_like")


def test_config_dict_round_trip():
    cfg = sg.GeneratorConfig(style=sg.get_style("pc_like"), seed=9)
    again = sg.GeneratorConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(sg.ConfigError):
        sg.GeneratorConfig.from_dict({"colour": 1})


def test_styles_differ_in_polarity():
    bf = sg.generate_sample(sparse_config(style=sg.get_style("bf_like"), seed=2), 0)
    pc = sg.generate_sample(sparse_config(style=sg.get_style("pc_like"), seed=2), 0)
    assert bf.image.min() < sg.STYLES["bf_like"].background_level - 0.05
    assert pc.image.max() > sg.STYLES["pc_like"].background_level + 0.05


def test_background_image(tmp_path):
    bg = np.full((128, 128), 100, np.uint8)
    path = tmp_path / "bg.png"
    Image.fromarray(bg).save(path)
    cfg = sparse_config(count_weights=sg.point_mass(1), background_path=str(path))
    img = sg.generate_sample(cfg, 0).image
    assert np.median(img) == pytest.approx(100 / 255, abs=1e-6)


def test_dataset_files(tmp_path):
    cfg = sg.GeneratorConfig(seed=8)
    manifest = sg.generate_dataset(cfg, 5, tmp_path / "d")
    with open(tmp_path / "d" / "labels.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["filename"] for r in rows] == [sg.image_filename(i) for i in range(5)]
    for i, r in enumerate(rows):
        assert int(r["count"]) == sg.generate_sample(cfg, i).label
        with Image.open(tmp_path / "d" / r["filename"]) as im:
            assert im.size == (128, 128) and im.mode == "L"
    assert manifest["n_images"] == 5 and manifest["labeled"] is True
    with pytest.raises(ValueError):
        sg.generate_dataset(cfg, 0, tmp_path / "e")


def test_unlabeled_dataset_hides_counts(tmp_path):
    manifest = sg.generate_dataset(sg.GeneratorConfig(seed=8), 3, tmp_path, labeled=False)
    with open(tmp_path / "labels.csv") as fh:
        assert all(r["count"] == "" for r in csv.DictReader(fh))
    assert len(manifest["hidden_counts"]) == 3
    assert os.path.exists(tmp_path / "manifest.json")
