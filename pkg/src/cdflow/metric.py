"""Colour difference as RMS distance between flow latents, per scale and locally."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, DomainError
from .flow import FlowModel, LatentStack, flow_forward


@dataclass
class CDResult:
    """Overall ΔE, the K nested-scale distances ΔE_k and K local maps.

    ``per_scale[0]`` equals ``delta_e``. ``maps[k]`` has the spatial extent of
    the (k+1)-th latent.
    """

    delta_e: float
    per_scale: list[float]
    maps: list[np.ndarray]

    def display_maps(self) -> list[np.ndarray]:
        """Maps scaled to [0, 1] by their own maximum (all-zero maps stay zero)."""
        return [m / m.max() if m.max() > 0 else np.zeros_like(m) for m in self.maps]


def _pair_stacks(x, y, model: FlowModel) -> tuple[LatentStack, LatentStack]:
    xa = np.asarray(x.data if isinstance(x, Tensor) else x)
    ya = np.asarray(y.data if isinstance(y, Tensor) else y)
    if xa.shape != ya.shape:
        raise DimensionError(f"image shapes differ: {xa.shape} vs {ya.shape}")
    with ad.no_grad():
        return flow_forward(xa, model), flow_forward(ya, model)


def part_sq_distances(sx: LatentStack, sy: LatentStack) -> list[Tensor]:
    """Per-scale sums of squared latent differences, each of shape (N,)."""
    out = []
    for a, b in zip(sx.parts, sy.parts):
        d = ad.sub(a, b)
        out.append(ad.tsum(ad.square(d), axis=tuple(range(1, d.ndim))))
    return out


def scale_distances(sx: LatentStack, sy: LatentStack) -> list[Tensor]:
    """Differentiable ΔE_1 ... ΔE_K, each of shape (N,).

    ΔE_k uses the concatenation of latents k..K normalised by its dimension.
    """
    sq = part_sq_distances(sx, sy)
    dims = [int(np.prod(p.shape[1:])) for p in sx.parts]
    out: list[Tensor] = []
    acc = None
    n_dim = 0
    for j in range(len(sq) - 1, -1, -1):
        acc = sq[j] if acc is None else ad.add(acc, sq[j])
        n_dim += dims[j]
        out.append(ad.sqrt(ad.mul(1.0 / n_dim, acc)))
    return out[::-1]


def _finish(values: np.ndarray, batched: bool):
    return values if batched else float(values[0])


def delta_e(x, y, model: FlowModel):
    """RMS distance between the full latent representations of ``x`` and ``y``."""
    sx, sy = _pair_stacks(x, y, model)
    with ad.no_grad():
        d = scale_distances(sx, sy)[0].data
    return _finish(d, sx.batched)


def delta_e_scale(x, y, model: FlowModel, k: int):
    """ΔE_k for 1 ≤ k ≤ K: RMS distance over latents of scales k..K."""
    K = model.config.n_scales
    if not 1 <= k <= K:
        raise DomainError(f"scale index {k} outside 1..{K}")
    sx, sy = _pair_stacks(x, y, model)
    with ad.no_grad():
        d = scale_distances(sx, sy)[k - 1].data
    return _finish(d, sx.batched)


def maps_from_stacks(sx: LatentStack, sy: LatentStack) -> list[np.ndarray]:
    maps = []
    for a, b in zip(sx.arrays(), sy.arrays()):
        diff = a - b
        maps.append(np.sqrt(np.mean(diff * diff, axis=-1)))
    return maps


def local_cd_maps(x, y, model: FlowModel) -> list[np.ndarray]:
    """Per-location channel-RMS of the latent difference at every scale."""
    sx, sy = _pair_stacks(x, y, model)
    maps = maps_from_stacks(sx, sy)
    return maps if sx.batched else [m[0] for m in maps]


def compare(x, y, model: FlowModel) -> CDResult:
    """ΔE, all ΔE_k and the local maps for a single image pair."""
    sx, sy = _pair_stacks(x, y, model)
    if sx.batched and sx.parts[0].shape[0] != 1:
        raise DimensionError("compare works on a single image pair")
    with ad.no_grad():
        per_scale = [float(d.data[0]) for d in scale_distances(sx, sy)]
    maps = [m[0] for m in maps_from_stacks(sx, sy)]
    return CDResult(delta_e=per_scale[0], per_scale=per_scale, maps=maps)
