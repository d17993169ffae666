"""Image files, pair manifests and CD-map export."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DimensionError, InputError
from .metric import CDResult
from .training import LabeledPair


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit RGB PNG or PPM as an H×W×3 float array in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise InputError(f"{path}: unsupported format {im.format}; expected PNG or PPM")
            if im.mode != "RGB":
                raise InputError(f"{path}: expected 8-bit RGB without alpha, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except InputError:
        raise
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: cannot decode image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img, path: str | os.PathLike) -> None:
    """Write an H×W×3 (or H×W grayscale) image in [0, 1]. ``.ppm``/``.pgm`` are written as raw binary netpbm."""
    data = to_uint8(img)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        if data.ndim == 3 and suffix == ".ppm":
            magic = b"P6"
        elif data.ndim == 2 and suffix == ".pgm":
            magic = b"P5"
        else:
            raise DimensionError(f"{path}: array of shape {data.shape} does not fit {suffix}")
        h, w = data.shape[:2]
        with open(path, "wb") as fh:
            fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
        return
    Image.fromarray(data).save(path)


def center_crop(img: np.ndarray, multiple: int) -> np.ndarray:
    """Largest centred crop whose sides are multiples of ``multiple``."""
    h, w = img.shape[:2]
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise DimensionError(f"image {h}×{w} is smaller than {multiple}")
    y0, x0 = (h - nh) // 2, (w - nw) // 2
    return img[y0 : y0 + nh, x0 : x0 + nw]


@dataclass
class ManifestRow:
    path_a: Path
    path_b: Path
    delta_v: float
    line: int

    def load(self) -> LabeledPair:
        return LabeledPair(load_image(self.path_a), load_image(self.path_b), self.delta_v)


def parse_manifest(path: str | os.PathLike) -> list[ManifestRow]:
    """Parse ``path_a,path_b,delta_v`` lines; '#' lines and blanks are skipped.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read manifest ({exc})") from exc
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 3:
            raise InputError(f"{path}:{lineno}: expected 3 comma-separated fields, got {len(fields)}")
        try:
            dv = float(fields[2])
        except ValueError:
            raise InputError(f"{path}:{lineno}: delta_v {fields[2]!r} is not a number") from None
        if not np.isfinite(dv) or dv < 0:
            raise InputError(f"{path}:{lineno}: delta_v must be a non-negative finite number, got {fields[2]}")
        pa, pb = (Path(f) if Path(f).is_absolute() else path.parent / f for f in fields[:2])
        for p in (pa, pb):
            if not p.is_file():
                raise InputError(f"{path}:{lineno}: missing file {p}")
        rows.append(ManifestRow(pa, pb, dv, lineno))
    return rows


def write_manifest(rows, path: str | os.PathLike) -> None:
    """Write ``(path_a, path_b, delta_v)`` rows; labels use 6 decimals."""
    with open(path, "w") as fh:
        fh.write("# path_a,path_b,delta_v\n")
        for a, b, dv in rows:
            fh.write(f"{a},{b},{dv:.6f}\n")


def save_grid(grid: np.ndarray, path: str | os.PathLike) -> None:
    np.savetxt(path, np.asarray(grid, dtype=np.float64), fmt="%.9f")


def load_grid(path: str | os.PathLike) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, dtype=np.float64))


def _warm(v: np.ndarray) -> np.ndarray:
    # black -> red -> yellow -> white
    r = np.clip(3 * v, 0, 1)
    g = np.clip(3 * v - 1, 0, 1)
    b = np.clip(3 * v - 2, 0, 1)
    return np.stack([r, g, b], axis=-1)


def export_cd_maps(result: CDResult, out_dir: str | os.PathLike, warm: bool = False) -> list[Path]:
    """Write ``map_scale_k.txt`` (raw values) and ``map_scale_k.pgm`` (max-normalised) per scale.

    With ``warm=True`` an extra ``map_scale_k_warm.ppm`` false-colour image is written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"{out}: cannot create output directory ({exc})") from exc
    written = []
    try:
        for k, (raw, disp) in enumerate(zip(result.maps, result.display_maps()), start=1):
            txt = out / f"map_scale_{k}.txt"
            save_grid(raw, txt)
            img = out / f"map_scale_{k}.pgm"
            save_image(disp, img)
            written += [txt, img]
            if warm:
                col = out / f"map_scale_{k}_warm.ppm"
                save_image(_warm(disp), col)
                written.append(col)
    except OSError as exc:
        raise InputError(f"{out}: cannot write maps ({exc})") from exc
    return written
