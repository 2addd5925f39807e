import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddsl import data
from ddsl.data import (VOCAB, AugmentSpec, NormStats, Sample, affine_coords, augment,
                       derive_seed, load_dataset, save_dataset, split_stratified,
                       synth_dataset)


@pytest.fixture(scope="module")
def synth200():
    return synth_dataset(200, 32, seed=11)


def test_synth_is_deterministic():
    a, b = synth_dataset(3, 32, 5), synth_dataset(3, 32, 5)
    for s, t in zip(a, b):
        assert np.array_equal(s.image, t.image) and np.array_equal(s.mask, t.mask)
        assert s.meta == t.meta and s.id == t.id
    assert not np.array_equal(a[0].image, synth_dataset(1, 32, 6)[0].image)


def test_synth_contract(synth200):
    for s in synth200:
        area = s.mask.mean()
        assert 0.01 <= area <= 0.40
        assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32
        assert 0 <= s.image.min() and s.image.max() <= 1
        for k, vocab in VOCAB.items():
            assert s.meta[k] in vocab


def test_lesions_are_darker(synth200):
    inside = np.mean([s.image[:, s.mask[0] > 0].mean(axis=1) for s in synth200[:100]], axis=0)
    outside = np.mean([s.image[:, s.mask[0] == 0].mean(axis=1) for s in synth200[:100]], axis=0)
    assert np.all(inside < outside)


def test_synth_rejects_bad_side():
    with pytest.raises(ValueError):
        synth_dataset(2, 30, 0)
    with pytest.raises(ValueError):
        synth_dataset(0, 32, 0)


def test_sample_validation():
    img = np.zeros((3, 4, 4), np.float32)
    with pytest.raises(ValueError, match="binary"):
        Sample(img, np.full((1, 4, 4), 0.5, np.float32), {}, "x")
    with pytest.raises(ValueError):
        Sample(img, np.zeros((1, 4, 5), np.float32), {}, "x")
    with pytest.raises(ValueError):
        Sample(img, np.zeros((1, 4, 4), np.float32), {"skin_tone": "olive"}, "x")


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert derive_seed(1, "a") != derive_seed(2, "a")


# --- split ------------------------------------------------------------------------

def _cell_samples(n, meta):
    return [Sample(np.zeros((3, 4, 4), np.float32), np.zeros((1, 4, 4), np.float32),
                   dict(meta), f"c{i:03d}") for i in range(n)]


def test_split_ten_in_one_cell():
    meta = {"region": "trunk", "skin_tone": "dark", "gender": "male", "age_group": "51+"}
    train, test = split_stratified(_cell_samples(10, meta), seed=0)
    assert (len(train), len(test)) == (7, 3)


def test_split_rounds_half_up():
    meta = {"region": "trunk", "skin_tone": "dark", "gender": "male", "age_group": "51+"}
    assert len(split_stratified(_cell_samples(5, meta))[0]) == 4  # 3.5 -> 4


def test_split_is_partition_and_stratified(synth200):
    train, test = split_stratified(synth200, 0.7, seed=3)
    ids_tr, ids_te = {s.id for s in train}, {s.id for s in test}
    assert not ids_tr & ids_te
    assert ids_tr | ids_te == {s.id for s in synth200}
    cells = {}
    for s in synth200:
        key = tuple(s.meta[k] for k in data.STRATA)
        cells.setdefault(key, [0, 0])[0] += 1
    for s in train:
        cells[tuple(s.meta[k] for k in data.STRATA)][1] += 1
    for n, n_train in cells.values():
        assert abs(n_train - 0.7 * n) <= 1


def test_split_deterministic(synth200):
    a = [s.id for s in split_stratified(synth200, seed=1)[0]]
    assert a == [s.id for s in split_stratified(synth200, seed=1)[0]]
    assert a != [s.id for s in split_stratified(synth200, seed=2)[0]]


def test_split_empty_rejected():
    with pytest.raises(ValueError):
        split_stratified([])


# --- augmentation ------------------------------------------------------------------

def test_identity_spec_is_bit_exact(synth200):
    s = synth200[0]
    out = augment(s, AugmentSpec.identity(), np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)
    assert out.image.dtype == s.image.dtype


def test_hflip_twice_is_exact(synth200):
    s = synth200[1]
    spec = AugmentSpec(hflip_p=1.0, vflip_p=0, rotation_deg=0, scale_frac=0, brightness=0,
                       contrast=0, elastic_alpha=0)
    once = augment(s, spec, np.random.default_rng(0))
    assert not np.array_equal(once.image, s.image)
    twice = augment(once, spec, np.random.default_rng(0))
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


def rotated_oracle(y, x, h, w, deg):
    # y-up frame, counter-clockwise rotation about the image centre
    cy, cx = (h - 1) / 2, (w - 1) / 2
    X, Y = x - cx, cy - y
    t = math.radians(deg)
    X2, Y2 = X * math.cos(t) - Y * math.sin(t), X * math.sin(t) + Y * math.cos(t)
    return cy - Y2, cx + X2


@pytest.mark.parametrize("yx", [(5, 20), (10, 10), (25, 8), (16, 28)])
def test_rotation_moves_pixel_to_rotated_coordinate(yx):
    h = w = 33
    m = np.zeros((1, h, w))
    m[0, yx[0], yx[1]] = 1
    warped = data._warp(m, affine_coords(h, w, 30.0, 1.0))[0]
    got = np.unravel_index(np.argmax(warped), warped.shape)
    want = rotated_oracle(*yx, h, w, 30.0)
    assert abs(got[0] - want[0]) <= 1 and abs(got[1] - want[1]) <= 1
    assert np.allclose(data.rotate_point(*yx, h, w, 30.0), want)


def _iou(a, b):
    return (a & b).sum() / max((a | b).sum(), 1)


@pytest.mark.parametrize("seed", range(8))
def test_joint_geometric_consistency(seed, synth200):
    s = synth200[seed]
    indicator = Sample(np.repeat(s.mask, 3, axis=0), s.mask, s.meta, s.id)
    spec = AugmentSpec()
    a = augment(s, spec, np.random.default_rng(seed))
    b = augment(indicator, spec, np.random.default_rng(seed))
    assert _iou(a.mask[0] > 0.5, b.image[0] >= 0.5) >= 0.95


@given(st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_augmented_masks_stay_binary_and_in_range(seed):
    s = synth_dataset(1, 32, seed % 1000)[0]
    out = augment(s, AugmentSpec(), np.random.default_rng(seed))
    assert set(np.unique(out.mask)) <= {0.0, 1.0}
    assert out.image.shape == s.image.shape and 0 <= out.image.min() <= out.image.max() <= 1


def test_augment_same_seed_same_result(synth200):
    a = augment(synth200[2], AugmentSpec(), np.random.default_rng(9))
    b = augment(synth200[2], AugmentSpec(), np.random.default_rng(9))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


# --- normalization ----------------------------------------------------------------

def test_normalized_train_split_moments(synth200):
    train, _ = split_stratified(synth200, seed=0)
    stats = NormStats.fit([s.image for s in train])
    z = np.stack([stats.normalize(s.image) for s in train])
    assert np.all(np.abs(z.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(z.std(axis=(0, 2, 3)) - 1) < 1e-6)


def test_constant_image_normalizes_to_zero():
    im = np.full((3, 4, 4), 0.3)
    stats = NormStats.fit([im, im])
    assert stats.std == [pytest.approx(1e-3)] * 3
    assert np.allclose(stats.normalize(im), 0, atol=1e-9)


def test_denormalize_round_trip(synth200):
    stats = NormStats.fit([s.image for s in synth200[:20]])
    x = synth200[30].image
    assert np.max(np.abs(stats.denormalize(stats.normalize(x)) - x)) < 1e-6


def test_norm_stats_persist(tmp_path):
    stats = NormStats([0.1, 0.2, 0.3], [0.4, 0.5, 0.6])
    stats.save(tmp_path / "norm.json")
    assert NormStats.load(tmp_path / "norm.json") == stats


def test_stack_batch_shapes(synth200):
    x, y = data.stack_batch(synth200[:4], NormStats())
    assert x.shape == (4, 3, 32, 32) and y.shape == (4, 1, 32, 32) and x.dtype == np.float32


# --- disk format ------------------------------------------------------------------

def test_save_load_round_trip(tmp_path, synth200):
    samples = synth200[:5]
    save_dataset(samples, tmp_path)
    assert (tmp_path / "metadata.csv").read_text().splitlines()[0] == \
        "id,region,skin_tone,gender,age_group"
    back = load_dataset(tmp_path)
    for s, t in zip(samples, back):
        assert t.id == s.id and t.meta == s.meta
        assert np.array_equal(t.mask, s.mask)
        assert np.max(np.abs(t.image - s.image)) <= 0.5 / 255 + 1e-6


def test_load_with_resize(tmp_path, synth200):
    save_dataset(synth200[:2], tmp_path)
    back = load_dataset(tmp_path, side=16)
    assert back[0].image.shape == (3, 16, 16) and back[0].mask.shape == (1, 16, 16)
