import gzip

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from idvae.data import (IdxFormatError, gen_gmvae_synthetic, gen_pinwheel, gen_sequences, idx_bytes, load_idx,
                        parse_idx, read_csv, write_csv)


def test_pinwheel_label_counts_and_determinism():
    a = gen_pinwheel(2500, arms=5, seed=3)
    b = gen_pinwheel(2500, arms=5, seed=3)
    np.testing.assert_array_equal(a.x, b.x)
    assert np.bincount(a.labels).tolist() == [500] * 5
    assert a.provenance["generator"] == "pinwheel" and a.provenance["seed"] == 3


def test_pinwheel_without_warp_is_radial():
    ds = gen_pinwheel(1000, arms=4, tangential_std=0.0, rate=0.0, seed=0, scale=1.0)
    theta = ds.labels * 2 * np.pi / 4
    # every point lies on the line through the origin along its arm
    cross = ds.x[:, 0] * np.sin(theta) - ds.x[:, 1] * np.cos(theta)
    np.testing.assert_allclose(cross, 0.0, atol=1e-12)


def test_pinwheel_needs_two_arms():
    with pytest.raises(ValueError):
        gen_pinwheel(10, arms=1)


def test_gmvae_synthetic_shapes():
    ds = gen_gmvae_synthetic(separation=10, seed=0)
    assert ds.x.shape == (5000, 2)
    means = [ds.latents[ds.labels == k].mean(0) for k in (0, 1)]
    np.testing.assert_allclose(means[0], [-5, -5], atol=0.1)
    np.testing.assert_allclose(means[1], [5, 5], atol=0.1)
    with pytest.raises(ValueError):
        gen_gmvae_synthetic(separation=-1)


def test_sequences():
    ds = gen_sequences(50, length=7, vocab=6, seed=2)
    assert ds.x.shape == (50, 7) and ds.latents.shape == (50, 5)
    assert ds.x.min() >= 0 and ds.x.max() < 6
    np.testing.assert_array_equal(ds.x, gen_sequences(50, length=7, vocab=6, seed=2).x)
    assert gen_sequences(10, length=1, seed=0).x.shape == (10, 1)


def test_idx_fixture_four_images(tmp_path):
    imgs = np.arange(4 * 28 * 28, dtype=np.uint32).reshape(4, 28, 28) % 256
    raw = bytes([0, 0, 8, 3]) + (4).to_bytes(4, "big") + (28).to_bytes(4, "big") + (28).to_bytes(4, "big")
    raw += imgs.astype(np.uint8).tobytes()
    assert raw == idx_bytes(imgs)
    path = tmp_path / "imgs.idx"
    path.write_bytes(raw)
    ds = load_idx(path)
    assert ds.x.shape == (4, 784)
    np.testing.assert_allclose(ds.x, imgs.reshape(4, -1) / 255.0)
    gz = tmp_path / "imgs.idx.gz"
    gz.write_bytes(gzip.compress(raw))
    np.testing.assert_array_equal(load_idx(gz).x, ds.x)


def test_idx_errors():
    with pytest.raises(IdxFormatError) as e:
        parse_idx(b"\x00\x00\x09\x03" + bytes(12))
    assert e.value.offset == 0
    with pytest.raises(IdxFormatError, match="truncated"):
        parse_idx(b"")
    good = idx_bytes(np.zeros((2, 3, 3)))
    with pytest.raises(IdxFormatError, match="truncated data"):
        parse_idx(good[:-1])
    with pytest.raises(IdxFormatError, match="trailing"):
        parse_idx(good + b"\x00")


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4))))
def test_idx_round_trip(imgs):
    magic, data = parse_idx(idx_bytes(imgs))
    assert magic == 0x803
    np.testing.assert_array_equal(data, imgs)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_csv_round_trip(tmp_path_factory, x):
    from idvae.data import Dataset
    ds = Dataset(x, np.arange(len(x)), None, {"generator": "test"})
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    write_csv(ds, path)
    back = read_csv(path)
    np.testing.assert_array_equal(back.x, x)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.provenance == ds.provenance
    assert path.read_text().startswith("# ")


def test_standardized_and_split():
    ds = gen_pinwheel(100, seed=0)
    tr, te = ds.split(80)
    assert len(tr) == 80 and len(te) == 20
    st_ds, mean, std = tr.standardized()
    np.testing.assert_allclose(st_ds.x.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(st_ds.x.std(0), 1)
    assert st_ds.provenance["standardized"] is True
