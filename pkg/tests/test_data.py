import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mindvis.data import (DatasetFormatError, DatasetTruncatedError, DatasetVersionError, FmriSample,
                          NormStats, PairedDataset, SynthSpec, apply_norm, constant_pad, crop_box, export_csv,
                          fit_norm_stats, floor_count, generate_synthetic_dataset, load_dataset,
                          max_renderable_classes, pad_to_patch_boundary, preprocess_dataset, random_crop_image,
                          random_sparsify, render_class_image, save_dataset, wrap_pad)

SPEC = SynthSpec(class_count=10, samples_per_class=20, voxel_count=256, image_size=32, snr=4.0, seed=1)


@pytest.fixture(scope="module")
def raw():
    return generate_synthetic_dataset(SPEC)


# --- generation -------------------------------------------------------------

def test_generation_is_deterministic(raw):
    assert generate_synthetic_dataset(SPEC) == raw


def test_generation_sizes_and_stratified_split(raw):
    assert len(raw.train) + len(raw.test) == 200
    assert np.bincount(raw.labels("test"), minlength=10).tolist() == [4] * 10
    assert raw.voxels("train").shape == (160, 256)
    assert raw.images("train").shape == (160, 32, 32, 3)


def test_infinite_snr_limit_gives_identical_class_samples():
    ds = generate_synthetic_dataset(SynthSpec(class_count=3, samples_per_class=4, snr=1e12, seed=2))
    by_class = {}
    for rec in ds.train + ds.test:
        by_class.setdefault(rec.class_id, []).append(rec.sample.voxels)
    for vs in by_class.values():
        for v in vs[1:]:
            np.testing.assert_allclose(v, vs[0], atol=1e-6)


def test_class_means_track_templates(raw):
    # frozen: the Monte Carlo estimate of the class-mean / template correlation sits well above 0.9 at snr 4
    vox, labels = np.concatenate([raw.voxels("train"), raw.voxels("test")]), np.concatenate(
        [raw.labels("train"), raw.labels("test")])
    for c in range(10):
        r = np.corrcoef(vox[labels == c].mean(0), raw.templates[c])[0, 1]
        assert r > 0.9


def test_class_separability(raw):
    t = raw.templates
    inter = np.corrcoef(t)[np.triu_indices(len(t), 1)].mean()
    vox, labels = raw.voxels("train"), raw.labels("train")
    intra = []
    for c in range(10):
        cc = np.corrcoef(vox[labels == c])
        intra.append(cc[np.triu_indices(len(cc), 1)])
    intra = np.concatenate(intra)
    assert inter < intra.mean() - 3 * intra.std() / math.sqrt(len(intra))


def test_too_many_classes_rejected():
    with pytest.raises(ValueError, match="distinguishable"):
        generate_synthetic_dataset(SynthSpec(class_count=max_renderable_classes() + 1))


@pytest.mark.parametrize("bad", [dict(class_count=0), dict(snr=0.0), dict(samples_per_class=0),
                                 dict(unpaired_per_class=-1)])
def test_synth_spec_validation(bad):
    with pytest.raises(ValueError):
        SynthSpec(**bad)


def test_renders_are_distinct_per_class():
    imgs = np.stack([render_class_image(c, 16) for c in range(max_renderable_classes())]).reshape(48, -1)
    d = ((imgs[:, None] - imgs[None]) ** 2).sum(-1)
    assert (d[~np.eye(48, dtype=bool)] > 0).all()
    assert imgs.min() >= 0 and imgs.max() <= 1


def test_unpaired_samples_do_not_perturb_paired_records():
    a = generate_synthetic_dataset(SynthSpec(class_count=3, samples_per_class=5, seed=4))
    b = generate_synthetic_dataset(SynthSpec(class_count=3, samples_per_class=5, seed=4, unpaired_per_class=7))
    assert len(b.unpaired) == 21 and all(u.image_id is None for u in b.unpaired)
    for split in ("train", "test"):
        np.testing.assert_array_equal(a.voxels(split), b.voxels(split))
        np.testing.assert_array_equal(a.labels(split), b.labels(split))
    assert b.voxels("pretrain").shape == (len(b.train) + 21, 256)


# --- padding ----------------------------------------------------------------

def test_wrap_pad_examples():
    assert wrap_pad([1, 2, 3], 5).tolist() == [1, 2, 3, 1, 2]
    assert wrap_pad([7], 3).tolist() == [7, 7, 7]
    x = np.arange(6.0)
    np.testing.assert_array_equal(wrap_pad(x, 6), x)
    with pytest.raises(ValueError):
        wrap_pad([1, 2, 3], 2)


def test_pad_to_patch_boundary_examples():
    assert len(pad_to_patch_boundary(np.zeros(10), 4)) == 12
    assert len(pad_to_patch_boundary(np.zeros(12), 4)) == 12
    # frozen from ceil(4500 / 16) * 16
    assert len(pad_to_patch_boundary(np.zeros(4500), 16)) == 4512
    with pytest.raises(ValueError):
        pad_to_patch_boundary(np.zeros(3), 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.integers(0, 60))
def test_wrap_pad_properties(values, extra):
    v = np.array(values)
    out = wrap_pad(v, len(v) + extra)
    np.testing.assert_array_equal(out[:len(v)], v)
    for i in range(len(out)):
        assert out[i] == v[i % len(v)]


@given(st.integers(1, 200), st.integers(1, 40))
def test_patch_boundary_properties(n, p):
    out = pad_to_patch_boundary(np.arange(n, dtype=float), p)
    assert len(out) % p == 0 and len(out) - p < n <= len(out)
    np.testing.assert_array_equal(out, wrap_pad(np.arange(n, dtype=float), len(out)))


def test_constant_pad():
    assert constant_pad(np.array([1.0, 2.0]), 4).tolist() == [1.0, 2.0, 0.0, 0.0]


# --- normalization ----------------------------------------------------------

def test_norm_hand_example():
    stats = fit_norm_stats([np.array([0.0, 2.0]), np.array([2.0, 0.0])])
    assert (stats.mean, stats.std) == (1.0, 1.0)
    assert apply_norm(np.array([0.0, 2.0]), stats).tolist() == [-1.0, 1.0]
    assert apply_norm(np.array([2.0, 0.0]), stats).tolist() == [1.0, -1.0]


def test_norm_recomputed_statistics(rng):
    train = [rng.normal(3.0, 7.0, size=50) for _ in range(20)]
    stats = fit_norm_stats(train)
    z = np.concatenate([apply_norm(x, stats).astype(np.float64) for x in train])
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6


def test_norm_idempotent(rng):
    train = [rng.normal(size=30) for _ in range(10)]
    once = [apply_norm(x, fit_norm_stats(train)) for x in train]
    twice = [apply_norm(x, fit_norm_stats(once)) for x in once]
    assert max(np.abs(a - b).max() for a, b in zip(once, twice)) < 1e-6


def test_norm_errors():
    with pytest.raises(ValueError):
        fit_norm_stats([np.ones(4), np.ones(4)])
    with pytest.raises(ValueError):
        fit_norm_stats([np.arange(4.0)])
    with pytest.raises(ValueError):
        NormStats(0.0, 0.0)


def test_apply_norm_on_sample_keeps_ids():
    s = FmriSample(np.array([1.0, 3.0]), subject_id=2, image_id=5, class_id=1)
    out = apply_norm(s, NormStats(2.0, 1.0))
    assert out.voxels.tolist() == [-1.0, 1.0] and (out.subject_id, out.image_id, out.class_id) == (2, 5, 1)


# --- sparsify / crop -------------------------------------------------------

def test_sparsify_examples(rng):
    x = np.arange(1.0, 11.0)
    assert (random_sparsify(x, 0.2, rng) == 0).sum() == 2
    np.testing.assert_array_equal(random_sparsify(x, 0.0, rng), x)
    with pytest.raises(ValueError):
        random_sparsify(x, 1.0, rng)


def test_sparsify_uniform_positions():
    rng = np.random.default_rng(0)
    hits = np.zeros(100)
    x = np.ones(100)
    for _ in range(10_000):
        hits += random_sparsify(x, 0.2, rng) == 0
    freq = hits / 10_000
    assert np.all(np.abs(freq - 0.2) <= 0.02)


@given(st.integers(1, 300), st.floats(0, 0.99), st.integers(0, 2**31))
def test_sparsify_count_exact(n, fraction, seed):
    x = np.arange(1.0, n + 1)
    out = random_sparsify(x, fraction, np.random.default_rng(seed))
    zeroed = out == 0
    assert zeroed.sum() == math.floor(fraction * n + 1e-9) == floor_count(fraction, n)
    np.testing.assert_array_equal(out[~zeroed], x[~zeroed])


def test_crop_identity_and_determinism():
    img = render_class_image(3, 32)
    np.testing.assert_array_equal(random_crop_image(img, 0.0, np.random.default_rng(0)), img)
    a = random_crop_image(img, 0.2, np.random.default_rng(5))
    b = random_crop_image(img, 0.2, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert a.shape == img.shape


def test_crop_side_range():
    rng = np.random.default_rng(0)
    sides = {crop_box(32, 0.2, rng)[0] for _ in range(2000)}
    assert sides == set(range(26, 33))


@given(st.integers(2, 64), st.floats(0, 0.95), st.integers(0, 2**31))
def test_crop_box_within_image(size, ratio, seed):
    side, offset = crop_box(size, ratio, np.random.default_rng(seed))
    assert side >= math.ceil((1 - ratio) * size - 1e-9) and side <= size
    assert 0 <= offset and offset + side <= size


# --- preprocessing and storage ---------------------------------------------

def test_preprocess_uses_train_stats_and_pads():
    raw = generate_synthetic_dataset(SynthSpec(class_count=3, samples_per_class=6, voxel_count=50,
                                               subject_count=2, length_jitter=3, unpaired_per_class=2))
    ds = preprocess_dataset(raw, 16)
    assert ds.norm_stats == fit_norm_stats([r.sample for r in raw.train])
    assert {len(r.sample.voxels) for r in ds.train + ds.test} == {64}
    assert {len(u.voxels) for u in ds.unpaired} == {64}
    cut = preprocess_dataset(raw, 16, "cut")
    assert {len(r.sample.voxels) for r in cut.train} == {48}
    with pytest.raises(ValueError):
        preprocess_dataset(raw, 16, "mirror")


def test_dataset_round_trip(tmp_path):
    ds = preprocess_dataset(generate_synthetic_dataset(SynthSpec(class_count=3, samples_per_class=4,
                                                                 unpaired_per_class=2, image_size=8)), 16)
    path = tmp_path / "d.mvds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back == ds and back.norm_stats == ds.norm_stats
    save_dataset(back, tmp_path / "e.mvds")
    assert (tmp_path / "e.mvds").read_bytes() == path.read_bytes()


def test_dataset_errors(tmp_path):
    ds = generate_synthetic_dataset(SynthSpec(class_count=2, samples_per_class=3, image_size=4))
    path = tmp_path / "d.mvds"
    save_dataset(ds, path)
    data = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "magic")
    (tmp_path / "version").write_bytes(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(DatasetVersionError):
        load_dataset(tmp_path / "version")
    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(DatasetTruncatedError):
        load_dataset(tmp_path / "empty")
    (tmp_path / "short").write_bytes(data[:-10])
    with pytest.raises(DatasetTruncatedError):
        load_dataset(tmp_path / "short")


def test_export_csv(tmp_path):
    ds = generate_synthetic_dataset(SynthSpec(class_count=2, samples_per_class=3, voxel_count=8,
                                              unpaired_per_class=1, image_size=4))
    export_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 6 + 2
    assert any(line.startswith("unpaired") for line in lines)


def test_samples_are_immutable():
    s = FmriSample(np.arange(3.0))
    with pytest.raises(ValueError):
        s.voxels[0] = 1.0
    with pytest.raises(ValueError):
        FmriSample(np.array([np.nan]))
    assert isinstance(PairedDataset([], [], None, 0).unpaired, list)
