"""Synthetic tiled slides with known content and controllable stain style.

Slides are rendered in a canonical LAB space (pale background, purple
nuclei) and then restained to a slide-level target style with the same
LAB affine transform WSAug uses. Positive slides contain a few abnormal
tiles with larger, darker, denser nuclei; the label never depends on the
style. The out-of-distribution split draws its target styles from a
shifted prior, standing in for unseen scanners.

The frozen encoder maps each tile's LAB histograms and gradient
statistics through a fixed random two-layer network, so its features are
deliberately style-sensitive.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .bags import FeatureBag
from .colorspace import lab_to_rgb, rgb_to_lab, transform_lab
from .slide_io import SlideManifest, Tile, stream_tiles, write_slide
from .stain_stats import accumulate_lab, compute_slide_style, empty_accumulators, finalize_style
from .stain_transformer import SlideGroup
from .style import StyleDescriptor
from .wsaug import StylePrior, augment_tiles, copy_seed, sample_style, transform_tile

SPLITS = ("train", "id_test", "ood_test")


@dataclass
class SynthConfig:
    n_train: int = 200
    n_id_test: int = 50
    n_ood_test: int = 100
    tiles_per_slide: int = 16
    tile_size: int = 64
    feature_dim: int = 32
    content_strength: float = 0.6
    # training-scanner styles [a_l, a_a, a_b, d_l, d_a, d_b]: a mean, one shared
    # "stain intensity" factor with these loadings, and small independent residuals
    id_style_mu: tuple = (68.0, 22.0, -12.0, 13.0, 7.0, 6.0)
    id_style_loading: tuple = (-4.0, 3.0, -3.0, 1.5, 1.0, 1.0)
    id_style_sigma: tuple = (0.6, 0.45, 0.45, 0.25, 0.15, 0.15)
    # unseen scanners: additive shift on the channel means, multiplicative
    # factor on the channel stds
    ood_mean_shift: tuple = (8.0, 0.0, 0.0)
    ood_std_scale: tuple = (1.0, 1.5, 1.5)
    # the encoder stands in for a fixed pretrained model, so it does not follow ``seed``
    encoder_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_id_test", "n_ood_test", "tiles_per_slide", "tile_size", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.content_strength < 0:
            raise ValueError("content_strength must be >= 0")
        for name, n in (("id_style_mu", 6), ("id_style_loading", 6), ("id_style_sigma", 6),
                        ("ood_mean_shift", 3), ("ood_std_scale", 3)):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != n:
                raise ValueError(f"{name} needs {n} values, got {len(v)}")
            setattr(self, name, v)
        if min(self.id_style_sigma) < 0 or min(self.ood_std_scale) <= 0:
            raise ValueError("style spreads and std scales must be positive")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def _slide_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(SPLITS.index(split), int(index))))


# --- rendering ----------------------------------------------------------------

_BACKGROUND = np.array([82.0, 12.0, -4.0])
_NUCLEUS = np.array([46.0, 26.0, -22.0])
_ABNORMAL = np.array([30.0, 30.0, -28.0])


def _smooth_noise(rng, size: int, scale: float) -> np.ndarray:
    coarse = rng.standard_normal((5, 5))
    idx = np.linspace(0, 4, size)
    i0 = np.clip(np.floor(idx).astype(int), 0, 3)
    t = idx - i0
    rows = coarse[i0] * (1 - t)[:, None] + coarse[i0 + 1] * t[:, None]
    return scale * (rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :])


def render_tile_lab(rng: np.random.Generator, size: int, abnormal: bool, strength: float = 1.0) -> np.ndarray:
    """One canonical LAB tile. Abnormal tiles get more, larger, darker nuclei."""
    lab = np.empty((size, size, 3))
    lab[...] = _BACKGROUND
    lab[..., 0] += _smooth_noise(rng, size, 3.0)
    lab[..., 1] += _smooth_noise(rng, size, 1.5)
    scale = size / 64.0
    n_normal = rng.poisson(6.0 * scale * scale)
    n_abn = rng.poisson(5.0 * strength * scale * scale) + 2 if abnormal else 0
    for is_abn in [False] * n_normal + [True] * n_abn:
        cx, cy = rng.uniform(0, size, 2)
        base = (4.0 + 2.5 * strength) if is_abn else 3.0
        rx, ry = base * scale * rng.uniform(0.75, 1.25, 2)
        theta = rng.uniform(0, math.pi)
        jitter = rng.normal(0, [3.0, 2.0, 2.0])
        r = int(math.ceil(max(rx, ry))) + 1
        x0, x1 = max(int(cx) - r, 0), min(int(cx) + r + 1, size)
        y0, y1 = max(int(cy) - r, 0), min(int(cy) + r + 1, size)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        c, s = math.cos(theta), math.sin(theta)
        u = ((xx - cx) * c + (yy - cy) * s) / rx
        v = (-(xx - cx) * s + (yy - cy) * c) / ry
        alpha = np.clip((1.0 - np.sqrt(u * u + v * v)) * min(rx, ry), 0.0, 1.0)[..., None]
        color = _NUCLEUS + strength * (_ABNORMAL - _NUCLEUS) if is_abn else _NUCLEUS
        patch = lab[y0:y1, x0:x1]
        lab[y0:y1, x0:x1] = patch * (1 - alpha) + (color + jitter) * alpha
    lab += rng.normal(0.0, [1.5, 0.8, 0.8], size=lab.shape)
    return lab


def sample_slide_style(rng: np.random.Generator, cfg: SynthConfig, ood: bool) -> StyleDescriptor:
    z = rng.standard_normal()
    v = np.asarray(cfg.id_style_mu) + np.asarray(cfg.id_style_loading) * z
    v = v + np.asarray(cfg.id_style_sigma) * rng.standard_normal(6)
    if ood:
        v[:3] += cfg.ood_mean_shift
        v[3:] *= cfg.ood_std_scale
    v[3:] = np.maximum(v[3:], 0.5)
    return StyleDescriptor.from_array(v)


def grid_shape(n_tiles: int):
    cols = int(math.ceil(math.sqrt(n_tiles)))
    return [(i % cols, i // cols) for i in range(n_tiles)]


def render_slide(cfg: SynthConfig, split: str, index: int):
    """Render one slide; returns (tiles, label, target style)."""
    rng = _slide_rng(cfg.seed, split, index)
    label = index % 2
    n = cfg.tiles_per_slide
    abnormal = np.zeros(n, dtype=bool)
    if label:
        k = int(rng.integers(max(1, n // 8), max(2, n // 3) + 1))
        abnormal[rng.choice(n, size=min(k, n), replace=False)] = True
    labs = [render_tile_lab(rng, cfg.tile_size, bool(a), cfg.content_strength) for a in abnormal]
    accs = empty_accumulators()
    for lab in labs:
        accs = accumulate_lab(accs, lab)
    canonical = finalize_style(accs)
    target = sample_slide_style(rng, cfg, ood=(split == "ood_test"))
    tiles = []
    for (gx, gy), lab in zip(grid_shape(n), labs):
        rgb = lab_to_rgb(transform_lab(lab, canonical.to_array(), target.to_array()))
        tiles.append(Tile(gx, gy, rgb))
    return tiles, label, target


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def split_sizes(cfg: SynthConfig) -> Dict[str, int]:
    return {"train": cfg.n_train, "id_test": cfg.n_id_test, "ood_test": cfg.n_ood_test}


def gen_dataset(cfg: SynthConfig, out_dir, threads: int = 1) -> Dict[str, List[SlideManifest]]:
    """Write train / ID-test / OOD-test slides under ``out_dir/<split>/``.

    Labels alternate within each split, so classes are balanced to within
    one slide. Every slide has its own RNG stream, so the output does not
    depend on ``threads``.
    """
    out_dir = Path(out_dir)
    result = {}
    for split, n in split_sizes(cfg).items():
        def one(i, split=split):
            tiles, label, _ = render_slide(cfg, split, i)
            sid = f"{split}-{i:04d}"
            return write_slide(sid, tiles, out_dir / split / sid, cfg.tile_size, label)

        result[split] = _map(one, range(n), threads)
    return result


# --- frozen encoder -----------------------------------------------------------

_L_RANGE, _A_RANGE, _B_RANGE = (0.0, 100.0), (-30.0, 70.0), (-70.0, 30.0)
_L_BINS, _AB_BINS = 16, 12
HANDCRAFTED_DIM = _L_BINS + 2 * _AB_BINS + 8


def _soft_hist(v: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Linear-interpolation histogram (continuous in the data), normalised to sum 1."""
    pos = np.clip((v - lo) / (hi - lo) * (bins - 1), 0.0, bins - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), bins - 2)
    w1 = pos - i0
    h = np.bincount(i0, 1.0 - w1, minlength=bins) + np.bincount(i0 + 1, w1, minlength=bins)
    return h / v.size


def tile_descriptor(rgb: np.ndarray) -> np.ndarray:
    """48-d summary: L/a/b histograms plus gradient and spread statistics."""
    return lab_descriptor(rgb_to_lab(rgb))


def lab_descriptor(lab: np.ndarray) -> np.ndarray:
    l, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    hists = [
        _soft_hist(l.ravel(), *_L_RANGE, _L_BINS),
        _soft_hist(a.ravel(), *_A_RANGE, _AB_BINS),
        _soft_hist(b.ravel(), *_B_RANGE, _AB_BINS),
    ]
    # Hellinger-style sqrt keeps rare dark bins visible
    hist = np.sqrt(np.concatenate(hists) * np.repeat([_L_BINS, _AB_BINS, _AB_BINS], [_L_BINS, _AB_BINS, _AB_BINS]))
    tex = np.array([
        np.abs(np.diff(l, axis=1)).mean(),
        np.abs(np.diff(l, axis=0)).mean(),
        l.std(),
        np.abs(l[1:-1, 1:-1] * 4 - l[:-2, 1:-1] - l[2:, 1:-1] - l[1:-1, :-2] - l[1:-1, 2:]).mean() / 4,
        np.abs(np.diff(a, axis=1)).mean(),
        np.abs(np.diff(a, axis=0)).mean(),
        np.abs(np.diff(b, axis=1)).mean(),
        np.abs(np.diff(b, axis=0)).mean(),
    ]) / 10.0
    return np.concatenate([hist, tex])


@dataclass
class FrozenEncoder:
    """Seeded two-layer map from 48-d tile descriptors to ``dim`` features."""

    dim: int = 32
    hidden: int = 64
    seed: int = 0
    W1: np.ndarray = field(init=False, repr=False)
    b1: np.ndarray = field(init=False, repr=False)
    W2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(0xE7C,)))
        self.W1 = rng.standard_normal((HANDCRAFTED_DIM, self.hidden)) * (1.5 / math.sqrt(HANDCRAFTED_DIM))
        self.b1 = rng.standard_normal(self.hidden) * 0.5
        self.W2 = rng.standard_normal((self.hidden, self.dim)) * (1.0 / math.sqrt(self.hidden))

    def encode_descriptors(self, x: np.ndarray) -> np.ndarray:
        centred = x - 0.5
        return np.tanh(centred @ self.W1 + self.b1) @ self.W2

    def encode_tiles(self, tiles: Sequence[Tile]) -> np.ndarray:
        return self.encode_descriptors(np.stack([tile_descriptor(t.pixels) for t in tiles]))


def encode_tiles_with_style(enc: FrozenEncoder, tiles: Sequence[Tile]):
    """Features in tile order plus the slide style, from a single decode pass."""
    accs = empty_accumulators()
    descs = []
    for t in tiles:
        lab = rgb_to_lab(t.pixels)
        descs.append(lab_descriptor(lab))
        accs = accumulate_lab(accs, lab)
    return enc.encode_descriptors(np.stack(descs)), finalize_style(accs)


def encode_slide(enc: FrozenEncoder, m: SlideManifest) -> FeatureBag:
    """One feature row per tile, in (grid_y, grid_x) order; style from all pixels."""
    feats, style = encode_tiles_with_style(enc, list(stream_tiles(m)))
    source = m.provenance.source_slide_id if m.provenance else None
    return FeatureBag(feats, style, m.label, m.slide_id, source)


def make_encoder(cfg: SynthConfig) -> FrozenEncoder:
    return FrozenEncoder(dim=cfg.feature_dim, seed=cfg.encoder_seed)


# --- augmented feature sets ---------------------------------------------------


def derive_seed(seed: int, *tags: int) -> int:
    """A 32-bit master seed for a named sub-stream of ``seed``."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


def encode_augmented(
    manifests: Sequence[SlideManifest],
    prior: StylePrior,
    copies: int,
    enc: FrozenEncoder,
    seed: int,
    threads: int = 1,
) -> List[List[FeatureBag]]:
    """Per slide: the encoded original followed by ``copies`` WSAug versions.

    Target styles come from ``copy_seed(seed, slide, copy)``; every copy is
    restained from the slide's own style and re-encoded from its 8-bit
    pixels, exactly as an offline pipeline would see it.
    """
    if copies < 1:
        raise ValueError("copies must be >= 1")

    def one(i):
        m = manifests[i]
        tiles = list(stream_tiles(m))
        feats, style = encode_tiles_with_style(enc, tiles)
        out = [FeatureBag(feats, style, m.label, m.slide_id)]
        for k in range(copies):
            target = sample_style(prior, copy_seed(seed, i, k))
            aug, _ = augment_tiles(tiles, style, target)
            f, s = encode_tiles_with_style(enc, aug)
            out.append(FeatureBag(f, s, m.label, f"{m.slide_id}__wsaug{k}", m.slide_id))
        return out

    return _map(one, range(len(manifests)), threads)


def build_st_training_groups(
    manifests: Sequence[SlideManifest],
    prior: StylePrior,
    M: int,
    enc: FrozenEncoder,
    seed: int,
    threads: int = 1,
) -> List[SlideGroup]:
    """Original plus ``M`` restained versions of every slide, rows aligned by tile."""
    return [SlideGroup.from_bags(bags) for bags in encode_augmented(manifests, prior, M, enc, seed, threads)]


def patch_inconsistent_bags(
    manifests: Sequence[SlideManifest],
    prior: StylePrior,
    copies: int,
    enc: FrozenEncoder,
    seed: int,
    threads: int = 1,
) -> List[FeatureBag]:
    """Negative control: like WSAug but every tile gets its own target style.

    Source statistics are the slide's, so the only difference from
    :func:`encode_augmented` is that stain style is no longer consistent
    across the tiles of a slide.
    """

    def one(i):
        m = manifests[i]
        tiles = list(stream_tiles(m))
        source = compute_slide_style(m)
        out = []
        for k in range(copies):
            aug = []
            for t, tile in enumerate(tiles):
                target = sample_style(prior, np.random.SeedSequence(int(seed), spawn_key=(i, k, t)))
                aug.append(transform_tile(tile, source, target)[0])
            f, s = encode_tiles_with_style(enc, aug)
            out.append(FeatureBag(f, s, m.label, f"{m.slide_id}__patch{k}", m.slide_id))
        return out

    return [b for bags in _map(one, range(len(manifests)), threads) for b in bags]


def encode_manifests(enc: FrozenEncoder, manifests: Sequence[SlideManifest], threads: int = 1) -> List[FeatureBag]:
    return _map(lambda m: encode_slide(enc, m), manifests, threads)
