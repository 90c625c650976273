import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from selfcollab.datapipe import (CLEAN_DIR, DEGRADED_DIR, DegradationSpec, load_paired, load_unpaired,
                                 load_unpaired_root, make_paired_set, make_toy_corpus, sample_batch,
                                 synth_clean_images, synth_degrade, write_sources)
from selfcollab.imagecore import read_image, write_image


def _write(d, n, size=16, seed=0):
    imgs = synth_clean_images(n, size, 3, seed)
    write_sources(imgs, d)
    return imgs


def test_load_unpaired_sizes_and_order(tmp_path):
    _write(tmp_path / "a", 3)
    _write(tmp_path / "b", 2, seed=1)
    ds = load_unpaired(tmp_path / "a", tmp_path / "b")
    assert ds.sizes == (3, 2)
    assert [p.name for p in ds.clean_paths] == sorted(p.name for p in ds.clean_paths)


def test_load_unpaired_minimal(tmp_path):
    _write(tmp_path / "a", 1)
    _write(tmp_path / "b", 1)
    assert load_unpaired(tmp_path / "a", tmp_path / "b").sizes == (1, 1)


def test_load_unpaired_empty_rejected(tmp_path):
    (tmp_path / "a").mkdir()
    _write(tmp_path / "b", 1)
    with pytest.raises(ValueError, match="no images"):
        load_unpaired(tmp_path / "a", tmp_path / "b")


def test_load_unpaired_skips_undecodable(tmp_path, caplog):
    _write(tmp_path / "a", 2)
    (tmp_path / "a" / "zz_bad.png").write_bytes(b"junk")
    _write(tmp_path / "b", 1)
    ds = load_unpaired(tmp_path / "a", tmp_path / "b")
    assert ds.sizes == (2, 1)
    assert "skipping" in caplog.text
    for p in (tmp_path / "b").iterdir():
        p.write_bytes(b"junk")
    with pytest.raises(ValueError, match="decodable"):
        load_unpaired(tmp_path / "a", tmp_path / "b")


def test_dataset_images_read_only(tmp_path):
    _write(tmp_path / "a", 1)
    _write(tmp_path / "b", 1)
    ds = load_unpaired(tmp_path / "a", tmp_path / "b")
    with pytest.raises(ValueError):
        ds.clean_images[0][0, 0, 0] = 1.0


@pytest.fixture(scope="module")
def big_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("big")
    rng = np.random.default_rng(0)
    for d in ("a", "b"):
        for i in range(2):
            write_image(root / d / f"{i}.png", rng.random((260, 270, 3)), bits=8)
    return load_unpaired(root / "a", root / "b")


@pytest.mark.parametrize("batch,patch", [(6, 112), (1, 256)])
def test_sample_batch_shapes(big_ds, batch, patch):
    b = sample_batch(big_ds, batch, patch, seed=5)
    assert b.clean.shape == (batch, 3, patch, patch)
    assert b.degraded.shape == (batch, 3, patch, patch)
    assert len(b) == batch


def test_sample_batch_deterministic(big_ds):
    a, b = sample_batch(big_ds, 4, 32, 7), sample_batch(big_ds, 4, 32, 7)
    assert torch.equal(a.clean, b.clean) and torch.equal(a.degraded, b.degraded)
    c = sample_batch(big_ds, 4, 32, 8)
    assert not torch.equal(a.clean, c.clean)


def test_sample_batch_domains_independent(tmp_path):
    # identical images in both domains: aligned crops would make the halves equal
    rng = np.random.default_rng(0)
    img = rng.random((64, 64, 3))
    for d in ("a", "b"):
        write_image(tmp_path / d / "0.png", img, bits=16)
    ds = load_unpaired(tmp_path / "a", tmp_path / "b")
    b = sample_batch(ds, 8, 16, 3)
    assert not torch.equal(b.clean, b.degraded)


def test_sample_batch_patch_too_large(big_ds):
    with pytest.raises(ValueError, match="patch"):
        sample_batch(big_ds, 1, 261, 0)


# -- degradations --------------------------------------------------------------

def test_noise_zero_is_identity():
    img = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    assert np.array_equal(synth_degrade(img, DegradationSpec(stddev=0.0)), img)


def test_noise_variance_matches_stddev():
    img = np.full((256, 256, 1), 0.5)
    out = synth_degrade(img, DegradationSpec(stddev=25 / 255, seed=11))
    var = np.var(out - img)
    assert abs(var / (25 / 255) ** 2 - 1) < 0.10


def test_rain_zero_count_identity():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert np.array_equal(synth_degrade(img, DegradationSpec(kind="rain_streaks", streak_count=0)), img)


def test_rain_and_snow_brighten():
    img = np.full((32, 32, 3), 0.3)
    rain = synth_degrade(img, DegradationSpec(kind="rain_streaks", seed=1))
    snow = synth_degrade(img, DegradationSpec(kind="snow_speckles", density=0.01, opacity=1.0, seed=1))
    assert (rain >= img - 1e-12).all() and rain.max() > 0.4
    assert (snow >= img - 1e-12).all() and snow.max() > 0.9


@pytest.mark.parametrize("bad", [dict(stddev=-0.1), dict(density=-1.0), dict(kind="fog"),
                                 dict(opacity=1.5), dict(streak_count=-1)])
def test_spec_rejects_invalid(bad):
    with pytest.raises(ValueError):
        DegradationSpec(**bad)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["gaussian_noise", "rain_streaks", "snow_speckles"]), st.integers(0, 2**31 - 1))
def test_degrade_deterministic_and_clamped(kind, seed):
    img = np.random.default_rng(0).random((12, 12, 3))
    spec = DegradationSpec(kind=kind, seed=seed, stddev=0.5, density=0.05)
    a, b = synth_degrade(img, spec), synth_degrade(img, spec)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


# -- corpus ------------------------------------------------------------------

def test_toy_corpus_split(tmp_path):
    _write(tmp_path / "src", 320, size=8)
    cdir, ddir = make_toy_corpus(tmp_path / "src", DegradationSpec(), 0, tmp_path / "out")
    clean = {p.name for p in cdir.iterdir()}
    deg = {p.name for p in ddir.iterdir()}
    assert (len(clean), len(deg)) == (160, 160)
    assert not clean & deg
    assert load_unpaired_root(tmp_path / "out").sizes == (160, 160)


def test_toy_corpus_minimal_and_zero_noise(tmp_path):
    _write(tmp_path / "src", 2)
    cdir, ddir = make_toy_corpus(tmp_path / "src", DegradationSpec(stddev=0.0), 0, tmp_path / "out")
    assert (cdir.name, ddir.name) == (CLEAN_DIR, DEGRADED_DIR)
    (d,) = list(ddir.iterdir())
    assert np.array_equal(read_image(d), read_image(tmp_path / "src" / d.name))


def test_toy_corpus_needs_two(tmp_path):
    _write(tmp_path / "src", 1)
    with pytest.raises(ValueError):
        make_toy_corpus(tmp_path / "src", DegradationSpec(), 0, tmp_path / "out")


def test_paired_set_alignment(tmp_path):
    imgs = _write(tmp_path / "src", 3)
    make_paired_set(tmp_path / "src", DegradationSpec(), tmp_path / "val")
    pairs = load_paired(tmp_path / "val")
    assert len(pairs) == 3
    for (c, d), img in zip(pairs, imgs):
        assert np.abs(c - img).max() < 1e-4
        assert 0.05 < np.std(d - c) < 0.15
