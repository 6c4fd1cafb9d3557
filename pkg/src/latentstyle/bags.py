"""Feature bags: one ``[N, C]`` patch-feature matrix per slide.

On disk a bag is two files sharing a stem:

``<stem>.bag``
    magic ``b"LSTBAG\\0\\0"`` (8 bytes), version u32, N u64, C u64, then
    N*C little-endian f64 values in row-major order.
``<stem>.json``
    sidecar ``{"schema_version", "slide_id", "label", "style",
    "source_slide_id"}``. ``source_slide_id`` is set for augmented slides
    and names the slide whose tiles they were derived from.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .style import StyleDescriptor

MAGIC = b"LSTBAG\0\0"
VERSION = 1


@dataclass
class FeatureBag:
    features: np.ndarray
    style: StyleDescriptor
    label: Optional[int] = None
    slide_id: str = ""
    source_slide_id: Optional[str] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.slide_id!r}: features must be [N>=1, C], got {self.features.shape}")

    @property
    def shape(self):
        return self.features.shape

    @property
    def group_id(self) -> str:
        return self.source_slide_id or self.slide_id


def save_bag(bag: FeatureBag, stem) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    n, c = bag.features.shape
    data = np.ascontiguousarray(bag.features, dtype="<f8").tobytes()
    stem.with_suffix(".bag").write_bytes(MAGIC + struct.pack("<IQQ", VERSION, n, c) + data)
    side = {
        "schema_version": VERSION,
        "slide_id": bag.slide_id,
        "label": bag.label,
        "style": bag.style.to_dict(),
        "source_slide_id": bag.source_slide_id,
    }
    stem.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return stem.with_suffix(".bag")


def load_bag(path) -> FeatureBag:
    path = Path(path).with_suffix(".bag")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a feature bag (bad magic)")
    version, n, c = struct.unpack_from("<IQQ", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported bag version {version}")
    if len(buf) != 28 + 8 * n * c:
        raise ValueError(f"{path}: size does not match header N={n}, C={c}")
    feats = np.frombuffer(buf, dtype="<f8", offset=28).reshape(n, c).astype(np.float64)
    side = json.loads(path.with_suffix(".json").read_text())
    return FeatureBag(
        features=feats,
        style=StyleDescriptor.from_dict(side["style"]),
        label=side.get("label"),
        slide_id=side["slide_id"],
        source_slide_id=side.get("source_slide_id"),
    )


def load_bag_dir(root) -> List[FeatureBag]:
    return [load_bag(p) for p in sorted(Path(root).rglob("*.bag"))]


def group_bags(bags: List[FeatureBag]) -> Dict[str, List[FeatureBag]]:
    """Group bags by source slide; the original (un-augmented) bag comes first."""
    groups: Dict[str, List[FeatureBag]] = {}
    for b in bags:
        groups.setdefault(b.group_id, []).append(b)
    for g in groups.values():
        g.sort(key=lambda b: (b.source_slide_id is not None, b.slide_id))
    return dict(sorted(groups.items()))
