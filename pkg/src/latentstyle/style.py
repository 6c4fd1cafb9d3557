from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import Iterable

import numpy as np

STYLE_KEYS = ("a_l", "a_a", "a_b", "d_l", "d_a", "d_b")


@dataclass(frozen=True)
class StyleDescriptor:
    """Per-channel LAB mean (``a_*``) and population std (``d_*``) of a slide."""

    a_l: float
    a_a: float
    a_b: float
    d_l: float
    d_a: float
    d_b: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"style component {f.name} is not finite: {v}")
        if min(self.d_l, self.d_a, self.d_b) < 0:
            raise ValueError("style standard deviations must be non-negative")

    @classmethod
    def from_array(cls, v: Iterable[float]) -> "StyleDescriptor":
        v = [float(x) for x in v]
        if len(v) != 6:
            raise ValueError(f"style vector needs 6 components, got {len(v)}")
        return cls(*v)

    @classmethod
    def from_dict(cls, d: dict) -> "StyleDescriptor":
        return cls(*(float(d[k]) for k in STYLE_KEYS))

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def to_list(self) -> list:
        return [float(x) for x in astuple(self)]

    def to_dict(self) -> dict:
        return dict(zip(STYLE_KEYS, self.to_list()))

    @property
    def means(self) -> np.ndarray:
        return self.to_array()[:3]

    @property
    def stds(self) -> np.ndarray:
        return self.to_array()[3:]
