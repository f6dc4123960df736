import filecmp
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protoparts.data import (CLASS_NAMES, HUE_ONLY_PAIR, TEXTURE_ONLY_PAIR, DatasetManifest, ImagePatch,
                             NormalizationStats, apply_homography, augment, augment_set, augment_variants,
                             build_dataset, extract_patches, generate_patches, grain_statistic, load_dataset,
                             mean_hue, pipeline_counts, solve_homography, split_stratified, synth_dataset,
                             whiten, whiten_batch)


def _patch(rng, size=16, label=0, pid="p"):
    return ImagePatch(rng.integers(0, 256, (size, size, 3), dtype=np.uint8), label, pid)


# -------------------------------------------------------------- extraction


def test_exact_size_image_single_offset(rng):
    img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    crops = extract_patches(img, 8, 5, seed=0)
    assert all(c.offset == (0, 0) and np.array_equal(c.pixels, img) for c in crops)


def test_zero_count():
    assert extract_patches(np.zeros((10, 10, 3), np.uint8), 4, 0, seed=0) == []


def test_too_small():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((5, 9, 3), np.uint8), 6, 1, seed=0)


def test_crops_inside_bounds(rng):
    img = rng.integers(0, 256, (40, 30, 3), dtype=np.uint8)
    for c in extract_patches(img, 12, 1000, seed=9):
        y, x = c.offset
        assert 0 <= y <= 28 and 0 <= x <= 18
        assert np.array_equal(c.pixels, img[y:y + 12, x:x + 12])


# ------------------------------------------------------------ augmentation


def test_hflip_involution(rng):
    p = _patch(rng)
    twice = augment(augment(p, "hflip"), "hflip")
    assert np.array_equal(twice.pixels, p.pixels)


@pytest.mark.parametrize("mode", ["hflip", "vflip"])
def test_flips_preserve_histograms(rng, mode):
    p = _patch(rng)
    q = augment(p, mode)
    for c in range(3):
        assert np.array_equal(np.bincount(p.pixels[..., c].ravel(), minlength=256),
                              np.bincount(q.pixels[..., c].ravel(), minlength=256))


def test_perspective_rho_zero_is_identity(rng):
    p = _patch(rng)
    assert np.array_equal(augment(p, "perspective", seed=3, rho=0.0).pixels, p.pixels)


def test_perspective_rho_bounds(rng):
    with pytest.raises(ValueError):
        augment(_patch(rng), "perspective", rho=0.3)
    with pytest.raises(ValueError):
        augment(_patch(rng), "rotate")


@given(st.integers(0, 2**31), st.floats(0.01, 0.25))
def test_homography_maps_corners(seed, rho):
    r = np.random.default_rng(seed)
    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    quad = square + r.uniform(-rho, rho, (4, 2))
    h = solve_homography(square, quad)
    np.testing.assert_allclose(apply_homography(h, square), quad, atol=1e-4)
    # independent check: substitute into the projective equations directly
    for (x, y), (u, v) in zip(square, quad):
        den = h[2, 0] * x + h[2, 1] * y + 1
        assert abs((h[0, 0] * x + h[0, 1] * y + h[0, 2]) / den - u) < 1e-4
        assert abs((h[1, 0] * x + h[1, 1] * y + h[1, 2]) / den - v) < 1e-4


def test_singular_homography():
    pts = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], float)
    with pytest.raises(np.linalg.LinAlgError):
        solve_homography(pts, pts)


def test_augment_variants_factor(rng):
    p = _patch(rng)
    vs = augment_variants(p, 30, seed=0)
    assert len(vs) == 30 and len({v.patch_id for v in vs}) == 30
    assert np.array_equal(vs[0].pixels, p.pixels)
    assert np.array_equal(vs[1].pixels, p.pixels[:, ::-1])


def test_augment_set_multiplies_exactly(tiny_dataset):
    aug = augment_set(tiny_dataset.train, 4, seed=0)
    assert len(aug) == 4 * len(tiny_dataset.train)


# --------------------------------------------------------------- whitening


def test_whiten_constant_patches():
    stats = NormalizationStats([0.2, 0.4, 0.6], [0.1, 0.2, 0.3])
    m = np.broadcast_to(stats.mean, (4, 4, 3)).astype(np.float32)
    assert np.abs(whiten(m, stats)).max() < 1e-6
    np.testing.assert_allclose(whiten(m + stats.std, stats), 1.0, atol=1e-6)


def test_std_floor():
    assert NormalizationStats([0, 0, 0], [0, 1, 2]).std[0] == np.float32(1e-6)


def test_whitened_train_split_is_standard(tiny_dataset):
    x = whiten_batch(tiny_dataset.train.images, tiny_dataset.stats).astype(np.float64)
    assert np.abs(x.mean(axis=(0, 2, 3))).max() < 1e-3
    assert np.abs(x.std(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_stats_never_read_test_split(tiny_dataset):
    assert np.array_equal(NormalizationStats.from_images(tiny_dataset.train.images).mean, tiny_dataset.stats.mean)


def test_stats_json_round_trip():
    s = NormalizationStats([0.123456789, 0.5, 0.9], [0.2, 0.3, 0.4])
    t = NormalizationStats.from_json(json.loads(json.dumps(s.to_json())))
    assert s.mean.tobytes() == t.mean.tobytes() and s.std.tobytes() == t.std.tobytes()


# --------------------------------------------------------------- splitting


def test_split_counts_and_disjoint():
    m = DatasetManifest(patches_per_class=15, seed=2)
    train, test = split_stratified(generate_patches(m), 0.8, seed=2)
    assert len(train) == 72 and len(test) == 18
    assert not {p.patch_id for p in train} & {p.patch_id for p in test}


@given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_stratified_property(n, frac, seed):
    patches = [ImagePatch(np.zeros((1, 1, 3), np.uint8), k, f"{k}-{i}") for k in range(3) for i in range(n)]
    train, test = split_stratified(patches, frac, seed)
    for k in range(3):
        ntr = sum(p.label == k for p in train)
        assert abs(ntr - n * frac) <= 1 and 1 <= ntr <= n - 1
    assert not {p.patch_id for p in train} & {p.patch_id for p in test}


@pytest.mark.parametrize("frac", [0.0, 1.0, 1.5])
def test_split_fraction_bounds(frac):
    with pytest.raises(ValueError):
        split_stratified([ImagePatch(np.zeros((1, 1, 3), np.uint8), 0, str(i)) for i in range(4)], frac)
    with pytest.raises(ValueError):
        DatasetManifest(split=frac)


def test_split_class_too_small():
    with pytest.raises(ValueError):
        split_stratified([ImagePatch(np.zeros((1, 1, 3), np.uint8), 0, "a")], 0.5)


def test_paper_counts():
    c = pipeline_counts(DatasetManifest(patches_per_class=2000, augmentation_factor=30,
                                        views=["surface", "section", "mixed"]))
    assert (c["train"], c["test"], c["augmented_train"]) == (38400, 9600, 1152000)
    single = pipeline_counts(DatasetManifest(patches_per_class=2000, augmentation_factor=30))
    assert (single["train"], single["test"]) == (9600, 2400)


# --------------------------------------------------------------- synthesis


def test_same_seed_identical_tree(tmp_path):
    m = DatasetManifest(patches_per_class=4, seed=5)
    synth_dataset(m, 5, tmp_path / "a")
    synth_dataset(m, 5, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

    def same(c):
        return not (c.left_only or c.right_only or c.diff_files) and all(same(s) for s in c.subdirs.values())

    assert same(cmp)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    assert len(files) == 24


def test_load_round_trip(tmp_path, tiny_dataset):
    from protoparts.data import save_dataset

    save_dataset(tiny_dataset, tmp_path)
    back = load_dataset(tmp_path)
    assert back.train.ids == tiny_dataset.train.ids
    assert np.array_equal(back.test.images, tiny_dataset.test.images)
    assert back.stats.mean.tobytes() == tiny_dataset.stats.mean.tobytes()


@pytest.fixture(scope="module")
def class_patches():
    ds = build_dataset(DatasetManifest(patches_per_class=60, seed=11))
    return ds


def _hue_gap(a, b):
    d = abs(a - b) % 360
    return min(d, 360 - d)


def test_hue_only_pair_separation(class_patches):
    ps = class_patches.train
    hues = {}
    for name in HUE_ONLY_PAIR:
        k = CLASS_NAMES.index(name)
        hues[name] = np.mean([mean_hue(im) for im in ps.images[ps.labels == k]])
    assert _hue_gap(*hues.values()) > 30


def test_texture_only_pair_shares_hue_differs_in_grain(class_patches):
    ps = class_patches.train
    a, b = (CLASS_NAMES.index(n) for n in TEXTURE_ONLY_PAIR)
    ha = np.mean([mean_hue(im) for im in ps.images[ps.labels == a]])
    hb = np.mean([mean_hue(im) for im in ps.images[ps.labels == b]])
    assert _hue_gap(ha, hb) < 10
    ga = np.median([grain_statistic(im) for im in ps.images[ps.labels == a]])
    gb = np.median([grain_statistic(im) for im in ps.images[ps.labels == b]])
    assert ga > 2 * gb


def test_three_nn_oracle_separates_classes(class_patches):
    def feats(ps):
        return np.array([np.r_[im.reshape(-1, 3).mean(0) / 255.0, grain_statistic(im) / 10.0] for im in ps.images])

    tr, te = class_patches.train, class_patches.test
    ftr, fte = feats(tr), feats(te)
    d = ((fte[:, None] - ftr[None]) ** 2).sum(-1)
    nn = np.argsort(d, axis=1, kind="stable")[:, :3]
    votes = tr.labels[nn]
    pred = np.array([np.bincount(v, minlength=6).argmax() for v in votes])
    assert (pred == te.labels).mean() >= 0.9
