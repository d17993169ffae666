"""Input validation helpers for images, image pairs and labels."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, DomainError


def check_image(img, allow_batch: bool = True) -> np.ndarray:
    """Return ``img`` as float64, checking the H×W×3 (or N×H×W×3) layout and the [0, 1] range."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in ((3, 4) if allow_batch else (3,)) or arr.shape[-1] != 3:
        raise DimensionError(f"expected an H×W×3 image{' or N×H×W×3 batch' if allow_batch else ''}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DomainError("image values must lie in [0, 1]")
    return arr


def check_pairs(X) -> tuple[np.ndarray, np.ndarray]:
    """Split pair input into two N×H×W×3 stacks.

    Accepts an array of shape (N, 2, H, W, 3) or a sequence of ``(a, b)``
    tuples / objects with ``image_a``/``image_b`` attributes.
    """
    if isinstance(X, np.ndarray) and X.ndim == 5:
        if X.shape[1] != 2:
            raise DimensionError(f"pair array must have shape (N, 2, H, W, 3), got {X.shape}")
        a, b = X[:, 0], X[:, 1]
    else:
        items = list(X)
        if not items:
            raise DimensionError("no pairs given")
        if hasattr(items[0], "image_a"):
            a = np.stack([np.asarray(it.image_a) for it in items])
            b = np.stack([np.asarray(it.image_b) for it in items])
        else:
            a = np.stack([np.asarray(it[0]) for it in items])
            b = np.stack([np.asarray(it[1]) for it in items])
    a, b = check_image(a), check_image(b)
    if a.ndim != 4 or a.shape != b.shape:
        raise DimensionError(f"pair stacks differ in shape: {a.shape} vs {b.shape}")
    return a, b


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise DimensionError(f"{y.size} labels for {n} pairs")
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise DomainError("labels must be finite and non-negative")
    return y
