"""Slide-global LAB statistics in one streaming, mergeable pass.

Each channel is tracked by a :class:`ChannelAccumulator` holding
``(count, mean, m2)``. Tiles are folded in with a batched Welford update
(per-tile two-pass moments combined with Chan's pairwise formula), so
memory stays constant in the number of pixels and any partition of the
tiles can be reduced independently and merged afterwards.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .colorspace import rgb_to_lab
from .slide_io import SlideManifest, Tile, read_tile
from .style import StyleDescriptor


class EmptySlideError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelAccumulator:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, values: np.ndarray) -> "ChannelAccumulator":
        values = np.asarray(values, dtype=np.float64).ravel()
        n = values.size
        if n == 0:
            return self
        mu = float(values.mean())
        m2 = float(np.square(values - mu).sum())
        return merge(self, ChannelAccumulator(n, mu, m2))

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else float("nan")


def merge(a: ChannelAccumulator, b: ChannelAccumulator) -> ChannelAccumulator:
    """Chan et al. pairwise combination of two accumulators."""
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    n = a.count + b.count
    delta = b.mean - a.mean
    # weight by the larger side first so merge(a, b) and merge(b, a) agree
    if a.count >= b.count:
        mean = a.mean + delta * (b.count / n)
    else:
        mean = b.mean - delta * (a.count / n)
    m2 = a.m2 + b.m2 + delta * delta * (a.count * b.count / n)
    return ChannelAccumulator(n, mean, m2)


Accumulators = Tuple[ChannelAccumulator, ChannelAccumulator, ChannelAccumulator]


def empty_accumulators() -> Accumulators:
    return (ChannelAccumulator(), ChannelAccumulator(), ChannelAccumulator())


def accumulate_lab(accs: Accumulators, lab: np.ndarray) -> Accumulators:
    lab = lab.reshape(-1, 3)
    return tuple(acc.update(lab[:, c]) for c, acc in enumerate(accs))


def accumulate_tile(accs: Accumulators, tile: Tile) -> Accumulators:
    """Fold every pixel of ``tile`` (converted to LAB) into ``accs``."""
    return accumulate_lab(accs, rgb_to_lab(tile.pixels))


def merge_accumulators(a: Accumulators, b: Accumulators) -> Accumulators:
    return tuple(merge(x, y) for x, y in zip(a, b))


def finalize_style(accs: Accumulators) -> StyleDescriptor:
    """Means and population (1/N) standard deviations per LAB channel."""
    if any(a.count == 0 for a in accs):
        raise EmptySlideError("cannot compute a style from zero pixels")
    means = [a.mean for a in accs]
    stds = [float(np.sqrt(max(a.m2, 0.0) / a.count)) for a in accs]
    return StyleDescriptor(*means, *stds)


def _reduce_refs(m: SlideManifest, refs: Sequence) -> Accumulators:
    accs = empty_accumulators()
    for ref in refs:
        accs = accumulate_tile(accs, read_tile(m, ref))
    return accs


def compute_slide_accumulators(m: SlideManifest, threads: int = 1, partitions: int = 1) -> Accumulators:
    refs = m.ordered_tiles()
    partitions = max(1, min(max(partitions, threads), len(refs) or 1))
    if partitions == 1:
        return _reduce_refs(m, refs)
    chunks = [refs[i::partitions] for i in range(partitions)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _reduce_refs(m, c), chunks))
    else:
        parts = [_reduce_refs(m, c) for c in chunks]
    return reduce(merge_accumulators, parts, empty_accumulators())


def compute_slide_style(m: SlideManifest, threads: int = 1, partitions: int = 1) -> StyleDescriptor:
    """Source style of a slide: LAB mean/std over every pixel of every tile."""
    if not m.tiles:
        raise EmptySlideError(f"{m.slide_id}: manifest lists no tiles")
    return finalize_style(compute_slide_accumulators(m, threads, partitions))


def style_of_tiles(tiles: Iterable[Tile]) -> StyleDescriptor:
    accs = empty_accumulators()
    for t in tiles:
        accs = accumulate_tile(accs, t)
    return finalize_style(accs)


def style_of_lab(lab_tiles: Iterable[np.ndarray]) -> StyleDescriptor:
    accs = empty_accumulators()
    for lab in lab_tiles:
        accs = accumulate_lab(accs, lab)
    return finalize_style(accs)


def style_list(styles: Iterable[StyleDescriptor]) -> List[list]:
    return [s.to_list() for s in styles]
