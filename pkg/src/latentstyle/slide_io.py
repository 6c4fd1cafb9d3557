"""On-disk tiled slides: manifest parsing, validation and tile streaming.

A slide is a directory of PNG tiles plus a JSON manifest::

    {
      "schema_version": 1,
      "slide_id": "slide-0001",
      "label": 1,                       # 0, 1 or null
      "tile_size": 256,
      "tiles": [{"path": "tiles/0_0.png", "grid_x": 0, "grid_y": 0}, ...],
      "provenance": null | {
          "source_slide_id": "...",
          "source_style": {"a_l": ..., ..., "d_b": ...},
          "target_style": {...},
          "clamp_fraction": 0.0
      }
    }

Tile paths are relative to the manifest file.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image

from .style import StyleDescriptor

SCHEMA_VERSION = 1
DEFAULT_TILE_SIZE = 256


class ManifestError(ValueError):
    """Manifest file is malformed or inconsistent."""


class DuplicateTileError(ManifestError):
    pass


class MissingTileError(ManifestError):
    pass


class TileDecodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class TileRef:
    path: str
    grid_x: int
    grid_y: int


@dataclass(frozen=True)
class Provenance:
    source_slide_id: str
    source_style: StyleDescriptor
    target_style: StyleDescriptor
    clamp_fraction: Optional[float] = None

    def to_dict(self) -> dict:
        d = {
            "source_slide_id": self.source_slide_id,
            "source_style": self.source_style.to_dict(),
            "target_style": self.target_style.to_dict(),
        }
        if self.clamp_fraction is not None:
            d["clamp_fraction"] = self.clamp_fraction
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        try:
            return cls(
                source_slide_id=str(d["source_slide_id"]),
                source_style=StyleDescriptor.from_dict(d["source_style"]),
                target_style=StyleDescriptor.from_dict(d["target_style"]),
                clamp_fraction=d.get("clamp_fraction"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"invalid provenance block: {exc}") from exc


@dataclass(frozen=True)
class SlideManifest:
    slide_id: str
    tile_size: int
    tiles: tuple
    label: Optional[int] = None
    provenance: Optional[Provenance] = None
    # directory the tile paths are relative to; not serialised
    root: Path = field(default=Path("."), compare=False)

    def __len__(self) -> int:
        return len(self.tiles)

    def ordered_tiles(self) -> List[TileRef]:
        return sorted(self.tiles, key=lambda t: (t.grid_y, t.grid_x))

    def tile_path(self, ref: TileRef) -> Path:
        return self.root / ref.path

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "slide_id": self.slide_id,
            "label": self.label,
            "tile_size": self.tile_size,
            "tiles": [{"path": t.path, "grid_x": t.grid_x, "grid_y": t.grid_y} for t in self.tiles],
            "provenance": self.provenance.to_dict() if self.provenance else None,
        }


@dataclass
class Tile:
    grid_x: int
    grid_y: int
    pixels: np.ndarray  # uint8 [tile_size, tile_size, 3]


def _validate(m: SlideManifest, check_files: bool) -> None:
    if m.tile_size <= 0:
        raise ManifestError(f"{m.slide_id}: tile_size must be positive, got {m.tile_size}")
    if m.label not in (None, 0, 1):
        raise ManifestError(f"{m.slide_id}: label must be 0, 1 or null, got {m.label!r}")
    seen_paths, seen_xy = set(), set()
    for t in m.tiles:
        if t.path in seen_paths:
            raise DuplicateTileError(f"{m.slide_id}: duplicate tile path {t.path!r}")
        xy = (t.grid_x, t.grid_y)
        if xy in seen_xy:
            raise DuplicateTileError(f"{m.slide_id}: duplicate grid coordinate {xy} ({t.path!r})")
        seen_paths.add(t.path)
        seen_xy.add(xy)
        if check_files and not m.tile_path(t).is_file():
            raise MissingTileError(f"{m.slide_id}: missing tile file {str(m.tile_path(t))!r}")


def manifest_from_dict(d: dict, root: Path = Path("."), check_files: bool = True) -> SlideManifest:
    if not isinstance(d, dict):
        raise ManifestError("manifest must be a JSON object")
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema_version {version!r}")
    try:
        tiles = tuple(
            TileRef(path=str(t["path"]), grid_x=int(t["grid_x"]), grid_y=int(t["grid_y"])) for t in d["tiles"]
        )
        m = SlideManifest(
            slide_id=str(d["slide_id"]),
            tile_size=int(d.get("tile_size", DEFAULT_TILE_SIZE)),
            tiles=tiles,
            label=d.get("label"),
            provenance=Provenance.from_dict(d["provenance"]) if d.get("provenance") else None,
            root=Path(root),
        )
    except ManifestError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest entry: {exc!r}") from exc
    _validate(m, check_files)
    return m


def load_manifest(path, check_files: bool = True) -> SlideManifest:
    """Parse and validate a manifest file.

    Raises :class:`ManifestError` (or a subclass) naming the offending
    entry for malformed JSON, duplicate tiles and missing tile files.
    """
    path = Path(path)
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    return manifest_from_dict(d, root=path.parent, check_files=check_files)


def save_manifest(m: SlideManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(m.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def read_tile(m: SlideManifest, ref: TileRef) -> Tile:
    p = m.tile_path(ref)
    try:
        with Image.open(p) as im:
            px = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of types on corrupt data
        raise TileDecodeError(f"cannot decode tile {str(p)!r}: {exc}") from exc
    if px.shape[:2] != (m.tile_size, m.tile_size):
        raise TileDecodeError(f"tile {str(p)!r} has shape {px.shape[:2]}, expected {m.tile_size}x{m.tile_size}")
    return Tile(ref.grid_x, ref.grid_y, px)


def stream_tiles(m: SlideManifest, window: int = 8, threads: int = 1, ordered: bool = True) -> Iterator[Tile]:
    """Yield every tile of ``m`` once, in ``(grid_y, grid_x)`` order.

    At most ``window`` decoded tiles are resident at a time. With
    ``threads > 1`` decoding overlaps; ``ordered=False`` yields tiles as soon
    as they finish instead of preserving row-major order.
    """
    refs = m.ordered_tiles()
    if threads <= 1:
        for ref in refs:
            yield read_tile(m, ref)
        return
    window = max(window, 1)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending: deque = deque()
        it = iter(refs)
        for ref in it:
            pending.append(pool.submit(read_tile, m, ref))
            if len(pending) >= window:
                break
        while pending:
            if ordered:
                fut = pending.popleft()
            else:
                fut = next((f for f in pending if f.done()), pending[0])
                pending.remove(fut)
            tile = fut.result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(read_tile, m, nxt))
            yield tile


def write_tile(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed compression settings keep outputs byte-identical across runs
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG", compress_level=1)


def write_slide(
    slide_id: str,
    tiles: Sequence[Tile],
    out_dir,
    tile_size: int,
    label: Optional[int] = None,
    provenance: Optional[Provenance] = None,
) -> SlideManifest:
    """Write tiles under ``out_dir/tiles`` and a ``manifest.json`` beside them."""
    out_dir = Path(out_dir)
    refs = []
    for t in tiles:
        rel = f"tiles/{t.grid_y:04d}_{t.grid_x:04d}.png"
        write_tile(out_dir / rel, t.pixels)
        refs.append(TileRef(rel, t.grid_x, t.grid_y))
    m = SlideManifest(slide_id, tile_size, tuple(refs), label, provenance, root=out_dir)
    _validate(m, check_files=False)
    save_manifest(m, out_dir / "manifest.json")
    return m


def style_suffix(source: StyleDescriptor, target: StyleDescriptor) -> str:
    blob = json.dumps([source.to_list(), target.to_list()]).encode()
    return hashlib.sha1(blob).hexdigest()[:10]


def write_augmented_slide(
    m: SlideManifest,
    tiles: Sequence[Tile],
    styles: tuple,
    out_dir,
    suffix: Optional[str] = None,
    clamp_fraction: Optional[float] = None,
) -> SlideManifest:
    """Write an augmented copy of ``m`` whose provenance records ``styles``.

    ``tiles`` must correspond one-to-one (by grid position) with ``m.tiles``.
    The new slide id is ``<source id>__<suffix>``; the default suffix is a
    hash of the style pair, so identical inputs always land on the same id.
    """
    source, target = styles
    tiles = list(tiles)
    if len(tiles) != len(m.tiles):
        raise ValueError(f"{m.slide_id}: got {len(tiles)} tiles for a manifest listing {len(m.tiles)}")
    if {(t.grid_x, t.grid_y) for t in tiles} != {(r.grid_x, r.grid_y) for r in m.tiles}:
        raise ValueError(f"{m.slide_id}: tile grid positions do not match the manifest")
    suffix = suffix or "aug-" + style_suffix(source, target)
    prov = Provenance(m.slide_id, source, target, clamp_fraction)
    return write_slide(f"{m.slide_id}__{suffix}", tiles, out_dir, m.tile_size, m.label, prov)


def find_manifests(root) -> List[Path]:
    """All ``manifest.json`` files below ``root``, in sorted path order."""
    out = []
    for dirpath, _, files in os.walk(root):
        if "manifest.json" in files:
            out.append(Path(dirpath) / "manifest.json")
    return sorted(out)


def load_manifests(paths: Iterable) -> List[SlideManifest]:
    return [load_manifest(p) for p in paths]
