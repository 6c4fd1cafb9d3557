"""Slide-level stain augmentation.

One target style is drawn per augmented copy and the same
(source style, target style) pair drives the LAB affine transform of every
tile, so the whole slide is restained consistently.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .colorspace import EPS_STD, lab_to_rgb, rgb_to_lab, transform_lab
from .slide_io import SlideManifest, Tile, stream_tiles, write_augmented_slide
from .stain_stats import compute_slide_style
from .style import STYLE_KEYS, StyleDescriptor

PRIOR_SCHEMA_VERSION = 1

Seed = Union[int, np.random.Generator, np.random.SeedSequence, None]


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class StylePrior:
    """Independent Gaussian per style component."""

    mu: tuple
    sigma: tuple

    def __post_init__(self):
        if len(self.mu) != 6 or len(self.sigma) != 6:
            raise ValueError("a style prior has exactly 6 components")
        if any(s < 0 for s in self.sigma):
            raise ValueError("prior sigmas must be non-negative")

    @property
    def mu_array(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=np.float64)

    @property
    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=np.float64)

    def normalize(self, style) -> np.ndarray:
        """z-score a style (or ``[..., 6]`` array) against this prior."""
        v = style.to_array() if isinstance(style, StyleDescriptor) else np.asarray(style, dtype=np.float64)
        sd = self.sigma_array
        return (v - self.mu_array) / np.where(sd > 0, sd, 1.0)

    def to_dict(self) -> dict:
        return {
            "schema_version": PRIOR_SCHEMA_VERSION,
            "components": {k: {"mu": m, "sigma": s} for k, m, s in zip(STYLE_KEYS, self.mu, self.sigma)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StylePrior":
        if d.get("schema_version") != PRIOR_SCHEMA_VERSION:
            raise ValueError(f"unsupported prior schema_version {d.get('schema_version')!r}")
        comps = d["components"]
        return cls(
            tuple(float(comps[k]["mu"]) for k in STYLE_KEYS),
            tuple(float(comps[k]["sigma"]) for k in STYLE_KEYS),
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "StylePrior":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_style_prior(styles: Sequence[StyleDescriptor]) -> StylePrior:
    """Per-component mean and population std over a corpus of slide styles."""
    if len(styles) < 2:
        raise InsufficientDataError(f"need at least 2 slide styles to fit a prior, got {len(styles)}")
    arr = np.stack([s.to_array() for s in styles])
    return StylePrior(tuple(arr.mean(axis=0).tolist()), tuple(arr.std(axis=0).tolist()))


def sample_style(prior: StylePrior, seed: Seed = None) -> StyleDescriptor:
    """Draw one target style; std components are floored at ``EPS_STD``."""
    rng = np.random.default_rng(seed)
    v = prior.mu_array + prior.sigma_array * rng.standard_normal(6)
    v[3:] = np.maximum(v[3:], EPS_STD)
    return StyleDescriptor.from_array(v)


def copy_seed(master: int, slide_index: int, copy_index: int) -> np.random.SeedSequence:
    """Independent RNG stream for one (slide, copy) pair."""
    return np.random.SeedSequence(int(master), spawn_key=(int(slide_index), int(copy_index)))


def transform_tile(tile: Tile, source: StyleDescriptor, target: StyleDescriptor):
    lab = transform_lab(rgb_to_lab(tile.pixels), source.to_array(), target.to_array())
    rgb, clamped = lab_to_rgb(lab, return_clamped=True)
    return Tile(tile.grid_x, tile.grid_y, rgb), int(clamped.sum())


def augment_tiles(tiles, source: StyleDescriptor, target: StyleDescriptor):
    """Transform an iterable of tiles with one fixed style pair.

    Returns ``(tiles, clamp_fraction)``.
    """
    out, clamped, total = [], 0, 0
    for t in tiles:
        nt, c = transform_tile(t, source, target)
        out.append(nt)
        clamped += c
        total += t.pixels.shape[0] * t.pixels.shape[1]
    return out, (clamped / total if total else 0.0)


def augment_slide(
    m: SlideManifest,
    s_i: StyleDescriptor,
    s_v: StyleDescriptor,
    out_dir,
    suffix: Optional[str] = None,
    validate: bool = False,
) -> SlideManifest:
    """Restain every tile of ``m`` from style ``s_i`` to ``s_v``.

    The returned manifest's provenance records the style pair and the
    fraction of pixels that had to be clamped into the sRGB gamut.
    """
    if validate:
        actual = compute_slide_style(m)
        if not np.allclose(actual.to_array(), s_i.to_array(), rtol=1e-9, atol=1e-9):
            raise ValueError(f"{m.slide_id}: supplied source style does not match the slide")
    tiles, frac = augment_tiles(stream_tiles(m), s_i, s_v)
    return write_augmented_slide(m, tiles, (s_i, s_v), out_dir, suffix=suffix, clamp_fraction=frac)


def augment_dataset(
    manifests: Sequence[SlideManifest],
    prior: StylePrior,
    copies: int,
    seed: int,
    out_root,
    source_styles: Optional[Sequence[StyleDescriptor]] = None,
    threads: int = 1,
) -> List[SlideManifest]:
    """``copies`` independently restained versions of every slide.

    Output order is slide-major, copy-minor. Target styles come from
    :func:`copy_seed` streams, so results do not depend on ``threads``.
    """
    if copies < 1:
        raise ValueError("copies must be >= 1")
    out_root = Path(out_root)

    def one(i: int) -> List[SlideManifest]:
        m = manifests[i]
        s_i = source_styles[i] if source_styles is not None else compute_slide_style(m)
        res = []
        for k in range(copies):
            s_v = sample_style(prior, copy_seed(seed, i, k))
            suffix = f"wsaug{k}"
            res.append(augment_slide(m, s_i, s_v, out_root / f"{m.slide_id}__{suffix}", suffix=suffix))
        return res

    idx = range(len(manifests))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            groups = list(pool.map(one, idx))
    else:
        groups = [one(i) for i in idx]
    return [m for g in groups for m in g]
