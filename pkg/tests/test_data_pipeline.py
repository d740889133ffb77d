import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from hybridkd.data_pipeline import (
    RICE_SEED_TABLE, TOY_NOISE, AugmentationSpec, DataError, DatasetManifest,
    Normalization, OneVsRestSpec, Sample, apply_augmentation, assign_splits, augment_and_batch,
    build_one_vs_rest, dataset_normalization, largest_remainder, load_manifest, make_toy_dataset,
    sample_augmentation, save_manifest, scan_image_folder, toy_patch_side,
)
from hybridkd.nn_core import ConfigurationError


def write_tree(root, classes=3, per_class=10, size=12):
    rng = np.random.default_rng(0)
    for c in range(classes):
        d = root / f"class_{c}"
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"img_{i:02d}.png")
    return root


def fake_manifest(counts):
    samples = [Sample(f"c{c}/{i}", c) for c, n in enumerate(counts) for i in range(n)]
    return DatasetManifest([f"c{c}" for c in range(len(counts))], samples)


# --- folder scan ------------------------------------------------------------------

def test_scan_counts_and_determinism(tmp_path):
    write_tree(tmp_path)
    a, b = scan_image_folder(tmp_path), scan_image_folder(tmp_path)
    assert a.class_names == ["class_0", "class_1", "class_2"]
    assert len(a.samples) == 30 and a.class_counts() == [10, 10, 10]
    assert a == b
    assert [s.path for s in a.samples] == sorted(s.path for s in a.samples)


def test_scan_skips_unreadable_and_empty(tmp_path):
    write_tree(tmp_path, classes=2, per_class=3)
    (tmp_path / "class_0" / "broken.jpg").write_bytes(b"not an image")
    (tmp_path / "empty").mkdir()
    with pytest.warns(UserWarning, match="empty"):
        m = scan_image_folder(tmp_path)
    assert m.class_names == ["class_0", "class_1"]
    assert len(m.samples) == 6
    assert any("broken.jpg" in d for d in m.diagnostics)


def test_scan_without_classes(tmp_path):
    with pytest.raises(DataError):
        scan_image_folder(tmp_path)


def test_grayscale_promoted_and_batch_decode_error(tmp_path):
    d = tmp_path / "a"
    d.mkdir()
    Image.fromarray(np.full((8, 8), 200, dtype=np.uint8), mode="L").save(d / "g.png")
    (tmp_path / "b").mkdir()
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "b" / "z.png")
    m = scan_image_folder(tmp_path)
    for s in m.samples:
        s.split = "train"
    x = next(augment_and_batch(m, "train", AugmentationSpec(resize=8), 4, 0, 0, normalization=None))
    gray = x.images[x.labels == 0][0]
    assert gray.shape == (3, 8, 8)
    assert torch.allclose(gray, torch.full_like(gray, 200 / 255))
    (tmp_path / "a" / "g.png").write_bytes(b"garbage")
    with pytest.raises(DataError, match="g.png"):
        list(augment_and_batch(m, "train", AugmentationSpec(resize=8), 4, 0, 0))


# --- splits -----------------------------------------------------------------------

def test_split_80_10_10():
    m = assign_splits(fake_manifest([100, 100, 100]), (0.8, 0.1, 0.1), seed=0)
    for split, n in (("train", 80), ("val", 10), ("test", 10)):
        assert m.class_counts(split) == [n, n, n]
    assert all(s.split in ("train", "val", "test") for s in m.samples)


def test_split_seed_behaviour():
    base = fake_manifest([50, 37])
    a = assign_splits(base, (0.64, 0.16, 0.2), 1)
    b = assign_splits(base, (0.64, 0.16, 0.2), 1)
    c = assign_splits(base, (0.64, 0.16, 0.2), 2)
    assert [s.split for s in a.samples] == [s.split for s in b.samples]
    assert [s.split for s in a.samples] != [s.split for s in c.samples]
    for split in ("train", "val", "test"):
        assert a.class_counts(split) == c.class_counts(split)


@pytest.mark.parametrize("ratios", [(1.0, 0.0, 0.0), (0.5, 0.3, 0.1), (0.9, 0.2, -0.1)])
def test_split_rejects_bad_ratios(ratios):
    with pytest.raises(ConfigurationError):
        assign_splits(fake_manifest([10]), ratios, 0)


def test_split_class_too_small():
    with pytest.raises(DataError):
        assign_splits(fake_manifest([10, 2]), (0.8, 0.1, 0.1), 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(3, 5000), st.lists(st.floats(0.01, 1.0), min_size=2, max_size=3))
def test_largest_remainder_properties(n, raw):
    ratios = [r / sum(raw) for r in raw]
    counts = largest_remainder(n, ratios)
    assert sum(counts) == n
    assert all(abs(c - n * r) < 1 for c, r in zip(counts, ratios))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(3, 60), min_size=1, max_size=4), st.integers(0, 2**31))
def test_stratified_split_properties(counts, seed):
    ratios = (0.81, 0.09, 0.10)
    m = assign_splits(fake_manifest(counts), ratios, seed)
    for c, n in enumerate(counts):
        per = [m.class_counts(s)[c] for s in ("train", "val", "test")]
        assert per == largest_remainder(n, ratios)
    assert len({s.path for s in m.samples}) == len(m.samples)


# --- one-vs-rest --------------------------------------------------------------------

@pytest.mark.parametrize("target", sorted(RICE_SEED_TABLE))
def test_one_vs_rest_reproduces_seed_table(target):
    names = sorted(RICE_SEED_TABLE)
    counts = [RICE_SEED_TABLE[n][0] for n in names]
    m = fake_manifest(counts)
    m.class_names = names
    pos, neg = RICE_SEED_TABLE[target]
    out = build_one_vs_rest(m, OneVsRestSpec(target, seed=3, num_negatives=neg))
    assert out.class_names == ["rest", target]
    assert out.class_counts() == [neg, pos]
    target_paths = {s.path for s in m.samples if s.label == names.index(target)}
    negatives = [s.path for s in out.samples if s.label == 0]
    assert len(set(negatives)) == len(negatives)
    assert not target_paths & set(negatives)
    assert {s.path for s in out.samples if s.label == 1} == target_paths


def test_one_vs_rest_balanced_and_errors():
    m = fake_manifest([20, 10, 10])
    out = build_one_vs_rest(m, OneVsRestSpec("c0", max_imbalance=0))
    assert out.class_counts() == [20, 20]
    with pytest.raises(ConfigurationError):
        build_one_vs_rest(m, OneVsRestSpec("c0", num_negatives=15, max_imbalance=0))
    with pytest.raises(DataError):
        build_one_vs_rest(fake_manifest([20, 5]), OneVsRestSpec("c0", max_imbalance=0))
    with pytest.raises(DataError):
        build_one_vs_rest(m, OneVsRestSpec("nope"))
    a = build_one_vs_rest(m, OneVsRestSpec("c0", seed=1))
    b = build_one_vs_rest(m, OneVsRestSpec("c0", seed=1))
    assert a.samples == b.samples


# --- toy dataset --------------------------------------------------------------------

def channel_means(m):
    paths = [s.path for s in m.samples]
    return np.stack([m.arrays[p].mean(axis=(1, 2)) for p in paths]), np.array([s.label for s in m.samples])


def test_toy_shape_and_determinism():
    a, b = make_toy_dataset(2, 200, 64, 5), make_toy_dataset(2, 200, 64, 5)
    assert len(a.samples) == 400 and a.num_classes == 2
    assert all(np.array_equal(a.arrays[p], b.arrays[p]) for p in a.arrays)
    c = make_toy_dataset(2, 200, 64, 6)
    assert not np.array_equal(a.arrays["toy://class0/00000"], c.arrays["toy://class0/00000"])
    with pytest.raises(ConfigurationError):
        make_toy_dataset(1, 10, 64, 0)


@pytest.mark.parametrize("num_classes", [2, 5, 8])
def test_toy_separability(num_classes):
    size = 32
    m = make_toy_dataset(num_classes, 40, size, 0)
    feats, labels = channel_means(m)
    # analytic class centroids: background 0.5, patch area fraction f, palette colour
    f = toy_patch_side(size) ** 2 / size ** 2
    centroids = np.stack([feats[labels == c].mean(axis=0) for c in range(num_classes)])
    for i in range(num_classes):
        for j in range(i + 1, num_classes):
            gap = np.abs(centroids[i] - centroids[j]).max()
            # palette colours differ by 1 in some channel, diluted by the patch area
            assert gap >= 5 * TOY_NOISE
            assert gap == pytest.approx(f, abs=0.02)
    # nearest-centroid is a linear rule; it should separate every sample
    dist = ((feats[:, None, :] - centroids[None]) ** 2).sum(-1)
    assert (dist.argmin(1) == labels).all()


def test_toy_two_class_closed_form_threshold():
    size = 64
    m = make_toy_dataset(2, 200, size, 1)
    feats, labels = channel_means(m)
    f = toy_patch_side(size) ** 2 / size ** 2
    # class 0 has a red patch, class 1 a green one: red-minus-green mean is +f or -f
    score = feats[:, 0] - feats[:, 1]
    assert ((score < 0).astype(int) == labels).all()
    assert score[labels == 0].mean() == pytest.approx(f, abs=0.01)
    assert score[labels == 1].mean() == pytest.approx(-f, abs=0.01)


def test_dataset_normalization_centres_toy_data():
    m = assign_splits(make_toy_dataset(2, 100, 32, 0), (0.8, 0.1, 0.1), 0)
    norm = dataset_normalization(m, "train", 32)
    x = torch.cat([b.images for b in augment_and_batch(m, "train", AugmentationSpec(resize=32), 64, 0, 0, norm)])
    assert (x.mean(dim=(0, 2, 3)).abs() <= 0.05).all()
    assert torch.allclose(x.std(dim=(0, 2, 3)), torch.ones(3), atol=0.05)


def test_manifest_json_roundtrip(tmp_path):
    m = assign_splits(make_toy_dataset(3, 10, 16, 2), (0.8, 0.1, 0.1), 4)
    save_manifest(m, tmp_path / "m.json")
    back = load_manifest(tmp_path / "m.json")
    assert back == m
    assert all(np.array_equal(back.arrays[p], m.arrays[p]) for p in m.arrays)


# --- augmentation -------------------------------------------------------------------

def toy_split(n=24, size=16):
    return assign_splits(make_toy_dataset(2, n, size, 0), (0.5, 0.25, 0.25), 0)


def stream(m, split, spec, seed, epoch, bs=5):
    return [(b.images, b.labels, b.paths) for b in augment_and_batch(m, split, spec, bs, seed, epoch)]


def test_no_augmentation_is_reproducible():
    m = toy_split()
    spec = AugmentationSpec(resize=16)
    a, b = stream(m, "train", spec, 3, 1), stream(m, "train", spec, 3, 1)
    for (xa, ya, pa), (xb, yb, pb) in zip(a, b):
        assert torch.equal(xa, xb) and torch.equal(ya, yb) and pa == pb


def test_augmented_stream_deterministic_and_reshuffled():
    m = toy_split()
    spec = AugmentationSpec(resize=16, hflip=True, vflip=True, rotation=20, color_jitter=True, affine=True)
    a, b = stream(m, "train", spec, 3, 1), stream(m, "train", spec, 3, 1)
    assert all(torch.equal(x[0], y[0]) for x, y in zip(a, b))
    other = stream(m, "train", spec, 3, 2)
    assert [p for _, _, ps in a for p in ps] != [p for _, _, ps in other for p in ps]
    # eval splits: manifest order, no augmentation, epoch-independent
    v1, v2 = stream(m, "val", spec, 3, 1), stream(m, "val", spec, 9, 7)
    assert [p for *_, ps in v1 for p in ps] == [s.path for s in m.split("val")]
    assert all(torch.equal(x[0], y[0]) for x, y in zip(v1, v2))


def test_flip_involution():
    img = torch.rand(3, 9, 7)
    for key in ("hflip", "vflip"):
        twice = apply_augmentation(apply_augmentation(img, {key: True}), {key: True})
        assert torch.equal(twice, img)
    assert torch.equal(apply_augmentation(img, {"hflip": True}), img.flip(-1))


@pytest.mark.parametrize("bound", [10.0, 20.0, 30.0])
def test_rotation_angles_within_bound(bound):
    rng = np.random.default_rng(0)
    spec = AugmentationSpec(rotation=bound)
    angles = np.array([sample_augmentation(rng, spec)["angle"] for _ in range(10_000)])
    assert angles.min() >= -bound and angles.max() <= bound
    # uniform on [-b, b]: mean 0, std b/sqrt(3)
    assert abs(angles.mean()) < 0.05 * bound
    assert angles.std() == pytest.approx(bound / math.sqrt(3), rel=0.03)


def test_flip_probability_half():
    rng = np.random.default_rng(1)
    spec = AugmentationSpec(hflip=True, vflip=True)
    draws = [sample_augmentation(rng, spec) for _ in range(10_000)]
    for key in ("hflip", "vflip"):
        assert abs(np.mean([d[key] for d in draws]) - 0.5) < 0.02


def test_resize_and_normalization():
    m = toy_split(size=16)
    b = next(augment_and_batch(m, "val", AugmentationSpec(resize=32), 4, 0, 0,
                               normalization=Normalization((0.5, 0.5, 0.5), (2.0, 2.0, 2.0))))
    raw = next(augment_and_batch(m, "val", AugmentationSpec(resize=32), 4, 0, 0, normalization=None))
    assert b.images.shape == (4, 3, 32, 32)
    assert torch.allclose(b.images, (raw.images - 0.5) / 2.0)
    with pytest.raises(ConfigurationError):
        next(augment_and_batch(m, "val", AugmentationSpec(), 0, 0, 0))
