"""Regenerate the frozen sRGB -> LAB reference values used in test_colorspace.

Independent of the package: 50-digit arithmetic, the sRGB matrix solved
from the primary chromaticities and the D65 white point, and the CIE LAB
definition written out directly.

    python tests/oracles/colorspace_oracle.py
"""

import mpmath as mp

mp.mp.dps = 50

PRIMARIES = [(mp.mpf("0.64"), mp.mpf("0.33")), (mp.mpf("0.30"), mp.mpf("0.60")), (mp.mpf("0.15"), mp.mpf("0.06"))]
WHITE = (mp.mpf("0.3127"), mp.mpf("0.3290"))


def xyz(x, y):
    return mp.matrix([x / y, 1, (1 - x - y) / y])


def rgb_to_xyz_matrix():
    P = mp.matrix(3, 3)
    for j, (x, y) in enumerate(PRIMARIES):
        col = xyz(x, y)
        for i in range(3):
            P[i, j] = col[i]
    S = mp.lu_solve(P, xyz(*WHITE))
    M = mp.matrix(3, 3)
    for i in range(3):
        for j in range(3):
            M[i, j] = P[i, j] * S[j]
    return M


def linear(c8):
    c = mp.mpf(c8) / 255
    return c / mp.mpf("12.92") if c <= mp.mpf("0.04045") else ((c + mp.mpf("0.055")) / mp.mpf("1.055")) ** mp.mpf("2.4")


def f(t):
    d = mp.mpf(6) / 29
    return mp.cbrt(t) if t > d**3 else t / (3 * d * d) + mp.mpf(4) / 29


def lab(rgb):
    v = rgb_to_xyz_matrix() * mp.matrix([linear(c) for c in rgb])
    w = xyz(*WHITE)
    fx, fy, fz = (f(v[i] / w[i]) for i in range(3))
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


if __name__ == "__main__":
    for rgb in [(255, 0, 0), (0, 255, 0), (0, 0, 255), (128, 64, 200)]:
        print(rgb, tuple(mp.nstr(x, 15) for x in lab(rgb)))
