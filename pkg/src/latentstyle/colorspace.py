"""sRGB <-> CIE L*a*b* conversion and the per-channel stain transform.

All functions are vectorised over a trailing channel axis of length 3 and
work in float64. The reference white defaults to D65; D50 is available for
pipelines that expect the ICC profile connection space.
"""

from __future__ import annotations

from typing import Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, Tuple[float, float, float], list]

# Minimum source std before the transform degrades to a pure mean shift.
EPS_STD = 1e-6

_PRIMARIES_XY = np.array([[0.64, 0.33], [0.30, 0.60], [0.15, 0.06]])
WHITE_POINTS = {
    "D65": (0.3127, 0.3290),
    "D50": (0.3457, 0.3585),
}

_DELTA = 6.0 / 29.0


def _xy_to_xyz(x: float, y: float) -> np.ndarray:
    return np.array([x / y, 1.0, (1.0 - x - y) / y])


def _build_matrix(white: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        wx, wy = WHITE_POINTS[white]
    except KeyError:
        raise ValueError(f"unknown white point {white!r}; choose from {sorted(WHITE_POINTS)}") from None
    prim = np.stack([_xy_to_xyz(x, y) for x, y in _PRIMARIES_XY], axis=1)
    wxyz = _xy_to_xyz(wx, wy)
    scale = np.linalg.solve(prim, wxyz)
    m = prim * scale[None, :]
    return m, np.linalg.inv(m), m.sum(axis=1)


_MATRICES = {name: _build_matrix(name) for name in WHITE_POINTS}


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    # linear toe extends below 0, power segment extends above 1
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.maximum(c, 0.0031308) ** (1.0 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3.0 * _DELTA**2) + 4.0 / 29.0)


def _finv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t**3, 3.0 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_lab(rgb: ArrayLike, white: str = "D65") -> np.ndarray:
    """Convert 8-bit sRGB values (``[..., 3]``) to CIE L*a*b*.

    Integer and float inputs are both accepted; values are interpreted on
    the 0-255 scale. Returns float64 with the same leading shape.
    """
    m, _, wxyz = _MATRICES[white]
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = _srgb_to_linear(c)
    xyz = lin @ m.T
    f = _f(xyz / wxyz)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb_float(lab: ArrayLike, white: str = "D65") -> np.ndarray:
    """Inverse conversion without clamping or quantisation (0-255 scale).

    Out-of-gamut colours come back outside [0, 255].
    """
    _, minv, wxyz = _MATRICES[white]
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_finv(fx), _finv(fy), _finv(fz)], axis=-1) * wxyz
    lin = xyz @ minv.T
    return 255.0 * _linear_to_srgb(lin)


def lab_to_rgb(lab: ArrayLike, white: str = "D65", return_clamped: bool = False):
    """Convert L*a*b* back to 8-bit sRGB.

    Values are clamped per channel to [0, 255] before rounding half away
    from zero. With ``return_clamped=True`` a boolean mask ``[...]`` is also
    returned, marking pixels where any channel left the representable range
    by more than half a count.
    """
    raw = lab_to_rgb_float(lab, white)
    clipped = np.clip(raw, 0.0, 255.0)
    rgb = np.floor(clipped + 0.5).astype(np.uint8)
    if return_clamped:
        mask = np.any((raw < -0.5) | (raw > 255.5), axis=-1)
        return rgb, mask
    return rgb


def apply_channel_transform(x, a_i, d_i, a_v, d_v):
    """Map channel values from a source (mean, std) onto a target (mean, std).

    Computes ``(d_v / d_i) * (x - a_i) + a_v``; when the source std is below
    ``EPS_STD`` only the mean shift is applied. Broadcasts like numpy.
    """
    x = np.asarray(x, dtype=np.float64)
    d_i = np.asarray(d_i, dtype=np.float64)
    if np.any(d_i < 0) or np.any(np.asarray(d_v) < 0):
        raise ValueError("standard deviations must be non-negative")
    degenerate = d_i < EPS_STD
    scale = np.where(degenerate, 1.0, np.asarray(d_v, dtype=np.float64) / np.where(degenerate, 1.0, d_i))
    out = scale * (x - a_i) + a_v
    return out if out.ndim else float(out)


def transform_lab(lab: np.ndarray, source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Apply :func:`apply_channel_transform` to all three LAB channels.

    ``source`` and ``target`` are 6-vectors ``[mean_l, mean_a, mean_b,
    std_l, std_a, std_b]``.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return apply_channel_transform(lab, source[:3], source[3:], target[:3], target[3:])
