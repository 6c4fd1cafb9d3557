import math

import numpy as np
import pytest

from latentstyle.colorspace import rgb_to_lab
from latentstyle.slide_io import Tile, load_manifest, write_slide
from latentstyle.stain_stats import (
    ChannelAccumulator,
    EmptySlideError,
    accumulate_lab,
    accumulate_tile,
    compute_slide_style,
    empty_accumulators,
    finalize_style,
    merge,
)


def two_pass(values):
    """Brute-force oracle: load everything, mean first, then population std."""
    v = np.asarray(values, dtype=np.float64).ravel()
    mean = math.fsum(v) / v.size
    return mean, math.sqrt(math.fsum((x - mean) ** 2 for x in v) / v.size)


def acc_of(values):
    return ChannelAccumulator().update(values)


def random_slide(tmp_path, rng, name, n_tiles=None, size=16):
    n = n_tiles or int(rng.integers(1, 9))
    tiles = [Tile(i % 3, i // 3, rng.integers(0, 256, (size, size, 3), dtype=np.uint8)) for i in range(n)]
    write_slide(name, tiles, tmp_path / name, size)
    return load_manifest(tmp_path / name / "manifest.json"), tiles


def test_small_examples():
    acc = acc_of([10, 20, 30, 40])
    assert acc.count == 4 and acc.mean == 25.0
    assert empty_accumulators()[0].count == 0
    single = acc_of([7.5])
    assert single.mean == 7.5 and single.m2 == 0.0


def test_finalize_examples():
    accs = (acc_of([1, 2, 3, 4]), acc_of([5, 5, 5, 5]), acc_of([0, 1, 0, 1]))
    s = finalize_style(accs)
    assert s.a_l == 2.5 and s.d_l == pytest.approx(math.sqrt(1.25), abs=1e-15)
    assert s.d_a == 0.0
    with pytest.raises(EmptySlideError):
        finalize_style(empty_accumulators())


def test_merge_identity():
    x = acc_of([1.0, 4.0, 9.0])
    assert merge(x, ChannelAccumulator()) == x
    assert merge(ChannelAccumulator(), x) == x


def test_split_merge_matches_oracle_on_1e5_pixels(rng):
    v = rng.normal(50, 20, 100_000)
    merged = merge(acc_of(v[:37_123]), acc_of(v[37_123:]))
    mean, std = two_pass(v)
    assert merged.mean == pytest.approx(mean, rel=1e-9)
    assert math.sqrt(merged.variance) == pytest.approx(std, rel=1e-9)


def test_merge_commutes(rng):
    for _ in range(50):
        a = acc_of(rng.normal(rng.uniform(-50, 50), 10, rng.integers(1, 500)))
        b = acc_of(rng.normal(rng.uniform(-50, 50), 10, rng.integers(1, 500)))
        ab, ba = merge(a, b), merge(b, a)
        assert ab.count == ba.count
        assert ab.mean == pytest.approx(ba.mean, rel=1e-12, abs=1e-12)
        assert ab.m2 == pytest.approx(ba.m2, rel=1e-12)


def test_uniform_gray_tile(tmp_path):
    px = np.full((8, 8, 3), 128, dtype=np.uint8)
    write_slide("g", [Tile(0, 0, px)], tmp_path / "g", 8)
    s = compute_slide_style(load_manifest(tmp_path / "g" / "manifest.json"))
    np.testing.assert_allclose(s.means, rgb_to_lab(px[0, 0]), atol=1e-12)
    np.testing.assert_allclose(s.stds, 0.0, atol=1e-9)


def test_empty_slide(tmp_path):
    write_slide("e", [], tmp_path / "e", 8)
    with pytest.raises(EmptySlideError):
        compute_slide_style(load_manifest(tmp_path / "e" / "manifest.json"))


@pytest.mark.parametrize("parts", [1, 2, 4, 8])
def test_slide_style_matches_brute_force(tmp_path, rng, parts):
    m, tiles = random_slide(tmp_path, rng, "s", n_tiles=9)
    lab = np.concatenate([rgb_to_lab(t.pixels).reshape(-1, 3) for t in tiles])
    got = compute_slide_style(m, threads=min(parts, 4), partitions=parts)
    for c in range(3):
        mean, std = two_pass(lab[:, c])
        assert got.means[c] == pytest.approx(mean, rel=1e-9)
        assert got.stds[c] == pytest.approx(std, rel=1e-9)


def test_tile_order_independent(tmp_path, rng):
    _, tiles = random_slide(tmp_path, rng, "a", n_tiles=6)
    fwd, rev = empty_accumulators(), empty_accumulators()
    for t in tiles:
        fwd = accumulate_tile(fwd, t)
    for t in tiles[::-1]:
        rev = accumulate_tile(rev, t)
    np.testing.assert_allclose(finalize_style(fwd).to_array(), finalize_style(rev).to_array(), rtol=1e-9)


def test_accumulate_lab_channelwise(rng):
    lab = rng.normal(size=(4, 5, 3))
    accs = accumulate_lab(empty_accumulators(), lab)
    for c in range(3):
        assert accs[c].mean == pytest.approx(lab[..., c].mean(), rel=1e-12)
