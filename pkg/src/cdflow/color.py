"""sRGB/CIELAB conversion and the CIELAB family of colour-difference formulae.

Fixed conventions: sRGB (IEC 61966-2-1) transfer curve, D65 white point and
the 2° standard observer. All functions are vectorised over leading axes;
Lab triples live in the last axis.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, DomainError

# linear sRGB -> XYZ, D65
_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0

FORMULAE = ("E76", "E94", "E2000")


def _srgb_decode(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_encode(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _EPS, np.cbrt(t), (_KAPPA * t + 16.0) / 116.0)


def _f_inv(t: np.ndarray) -> np.ndarray:
    return np.where(t**3 > _EPS, t**3, (116.0 * t - 16.0) / _KAPPA)


def srgb_to_lab(img) -> np.ndarray:
    """Convert sRGB values in [0, 1] (last axis RGB) to CIELAB."""
    rgb = np.asarray(img, dtype=np.float64)
    if rgb.shape[-1:] != (3,):
        raise DimensionError(f"last axis must hold 3 channels, got shape {rgb.shape}")
    if not np.all((rgb >= 0.0) & (rgb <= 1.0)):
        raise DomainError("sRGB values must lie in [0, 1]")
    xyz = _srgb_decode(rgb) @ _RGB_TO_XYZ.T
    fx, fy, fz = np.moveaxis(_f(xyz / D65_WHITE), -1, 0)
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
    return lab


def lab_to_srgb(lab, clip: bool = True) -> np.ndarray:
    """Inverse of :func:`srgb_to_lab`. Out-of-gamut results are clipped unless ``clip=False``."""
    lab = np.asarray(lab, dtype=np.float64)
    if lab.shape[-1:] != (3,):
        raise DimensionError(f"last axis must hold 3 channels, got shape {lab.shape}")
    L, a, b = np.moveaxis(lab, -1, 0)
    fy = (L + 16.0) / 116.0
    f = np.stack([fy + a / 500.0, fy, fy - b / 200.0], axis=-1)
    xyz = _f_inv(f) * D65_WHITE
    rgb = _srgb_encode(xyz @ _XYZ_TO_RGB.T)
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


def _split(c1, c2):
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if c1.shape[-1:] != (3,) or c2.shape[-1:] != (3,):
        raise DimensionError("Lab inputs need 3 components in the last axis")
    return np.moveaxis(c1, -1, 0), np.moveaxis(c2, -1, 0)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def delta_e76(c1, c2):
    """Euclidean distance in CIELAB."""
    (L1, a1, b1), (L2, a2, b2) = _split(c1, c2)
    return _scalar(np.sqrt((L1 - L2) ** 2 + (a1 - a2) ** 2 + (b1 - b2) ** 2))


def delta_e94(c1, c2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0, textiles: bool = False):
    """CIE94 difference with ``c1`` as the reference colour.

    Graphic-arts weights (K1=0.045, K2=0.015) by default; ``textiles=True``
    switches to K1=0.048, K2=0.014 (and kL should then be 2).
    """
    if min(kL, kC, kH) <= 0:
        raise DomainError("parametric factors must be positive")
    k1, k2 = (0.048, 0.014) if textiles else (0.045, 0.015)
    (L1, a1, b1), (L2, a2, b2) = _split(c1, c2)
    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    dL = L1 - L2
    dC = C1 - C2
    dH2 = (a1 - a2) ** 2 + (b1 - b2) ** 2 - dC**2
    dH2 = np.maximum(dH2, 0.0)
    sC = 1.0 + k1 * C1
    sH = 1.0 + k2 * C1
    return _scalar(np.sqrt((dL / kL) ** 2 + (dC / (kC * sC)) ** 2 + dH2 / (kH * sH) ** 2))


def delta_e2000(c1, c2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0):
    """CIEDE2000 colour difference (Luo, Cui & Rigg 2001; Sharma et al. 2005 notes)."""
    (L1, a1, b1), (L2, a2, b2) = _split(c1, c2)
    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    Cbar = 0.5 * (C1 + C2)
    Cbar7 = Cbar**7
    G = 0.5 * (1.0 - np.sqrt(Cbar7 / (Cbar7 + 25.0**7)))
    a1p = (1.0 + G) * a1
    a2p = (1.0 + G) * a2
    C1p = np.hypot(a1p, b1)
    C2p = np.hypot(a2p, b2)
    # hue is 0 for achromatic colours by convention
    h1p = np.where(C1p == 0, 0.0, np.degrees(np.arctan2(b1, a1p)) % 360.0)
    h2p = np.where(C2p == 0, 0.0, np.degrees(np.arctan2(b2, a2p)) % 360.0)

    dLp = L2 - L1
    dCp = C2p - C1p
    chroma_zero = (C1p * C2p) == 0
    dh = h2p - h1p
    dhp = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dhp = np.where(chroma_zero, 0.0, dhp)
    dHp = 2.0 * np.sqrt(C1p * C2p) * np.sin(np.radians(dhp) / 2.0)

    Lbarp = 0.5 * (L1 + L2)
    Cbarp = 0.5 * (C1p + C2p)
    hsum = h1p + h2p
    habs = np.abs(h1p - h2p)
    hbarp = np.where(
        chroma_zero,
        hsum,
        np.where(habs <= 180.0, 0.5 * hsum, np.where(hsum < 360.0, 0.5 * (hsum + 360.0), 0.5 * (hsum - 360.0))),
    )
    T = (
        1.0
        - 0.17 * np.cos(np.radians(hbarp - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hbarp))
        + 0.32 * np.cos(np.radians(3.0 * hbarp + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hbarp - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hbarp - 275.0) / 25.0) ** 2))
    Cbarp7 = Cbarp**7
    RC = 2.0 * np.sqrt(Cbarp7 / (Cbarp7 + 25.0**7))
    Lm50 = (Lbarp - 50.0) ** 2
    SL = 1.0 + 0.015 * Lm50 / np.sqrt(20.0 + Lm50)
    SC = 1.0 + 0.045 * Cbarp
    SH = 1.0 + 0.015 * Cbarp * T
    RT = -np.sin(np.radians(2.0 * dtheta)) * RC

    tL = dLp / (kL * SL)
    tC = dCp / (kC * SC)
    tH = dHp / (kH * SH)
    return _scalar(np.sqrt(np.maximum(tL**2 + tC**2 + tH**2 + RT * tC * tH, 0.0)))


_DISPATCH = {"E76": delta_e76, "E94": delta_e94, "E2000": delta_e2000}


def pixel_cd(a, b, formula: str = "E2000") -> np.ndarray:
    """Per-pixel colour difference map between two sRGB images."""
    if formula not in _DISPATCH:
        raise DomainError(f"unknown formula {formula!r}; choose from {FORMULAE}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return np.asarray(_DISPATCH[formula](srgb_to_lab(a), srgb_to_lab(b)))


def image_cd_mean(a, b, formula: str = "E2000") -> float:
    """Mean colour difference between co-located pixels of two sRGB images.

    For CIE94 the first image is the reference.
    """
    return float(np.mean(pixel_cd(a, b, formula)))
