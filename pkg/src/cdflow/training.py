"""Losses, optimiser and training loop, plus a synthetic labelled-pair generator."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .color import image_cd_mean, lab_to_srgb, srgb_to_lab
from .exceptions import ContractError, DomainError, NumericError
from .flow import FlowModel, LatentStack, flow_forward, latent_log_density
from .metric import scale_distances

logger = logging.getLogger(__name__)

DEQUANT_WIDTH = 1.0 / 256.0
# pairs used for the data-dependent actnorm initialisation
ACTNORM_INIT_PAIRS = 64


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings. Defaults follow the full-scale recipe
    (batch 4, Adam at 1e-5 halved every 5 epochs, 50 epochs)."""

    batch_size: int = 4
    lr_init: float = 1e-5
    lr_decay_factor: float = 2.0
    decay_every_epochs: int = 5
    epochs: int = 50
    lam: float = 1e-4
    p: int = 2
    seed: int = 0
    dequantize: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not self.lr_init > 0:
            raise DomainError("lr_init must be positive")
        if self.lam < 0:
            raise DomainError("lam must be non-negative")
        if self.p not in (1, 2):
            raise DomainError("p must be 1 or 2")
        if self.decay_every_epochs < 1 or self.lr_decay_factor <= 0:
            raise DomainError("invalid learning-rate schedule")
        if self.epochs < 0:
            raise DomainError("epochs must be non-negative")


# Settings used for the 32×32 synthetic experiments.
DESK_CONFIG = TrainConfig(batch_size=4, lr_init=5e-4, lr_decay_factor=2.0, decay_every_epochs=10, epochs=30)


@dataclass
class LabeledPair:
    image_a: np.ndarray
    image_b: np.ndarray
    delta_v: float

    def __post_init__(self):
        self.delta_v = float(self.delta_v)
        if not math.isfinite(self.delta_v) or self.delta_v < 0:
            raise DomainError(f"delta_v must be finite and non-negative, got {self.delta_v}")


# ---------------------------------------------------------------------------
# losses


def penalty(pred, target, p: int) -> Tensor:
    """|pred - target|^p, elementwise."""
    d = ad.sub(pred, target)
    if p == 2:
        return ad.square(d)
    if p == 1:
        return ad.sqrt(ad.square(d))
    raise DomainError("p must be 1 or 2")


def _stack_slice(stack: LatentStack, lo: int, hi: int) -> LatentStack:
    return LatentStack(
        parts=[p[lo:hi] for p in stack.parts],
        log_det=stack.log_det[lo:hi],
        priors=[
            (m[lo:hi], s[lo:hi]) if m.ndim == p.ndim else (m, s)
            for (m, s), p in zip(stack.priors, stack.parts)
        ],
    )


def _batched(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    return a[None] if a.ndim == 3 else a


def _scalar(t: Tensor, batched: bool) -> Tensor:
    return t if batched else t.reshape(())


def loss_pair(x, y, delta_v, model: FlowModel, p: int = 2) -> Tensor:
    """|ΔE(x, y) - ΔV|^p using the full-latent distance."""
    xs, ys = _batched(x), _batched(y)
    n = xs.shape[0]
    stack = flow_forward(np.concatenate([xs, ys]), model)
    de = scale_distances(_stack_slice(stack, 0, n), _stack_slice(stack, n, 2 * n))[0]
    return _scalar(penalty(de, np.asarray(delta_v, dtype=np.float64), p), np.ndim(x) == 4)


def _ms_from_stack(stack: LatentStack, n: int, delta_v, p: int) -> Tensor:
    dists = scale_distances(_stack_slice(stack, 0, n), _stack_slice(stack, n, 2 * n))
    dv = np.asarray(delta_v, dtype=np.float64).reshape(-1)
    total = None
    for d in dists:
        term = penalty(d, dv, p)
        total = term if total is None else ad.add(total, term)
    return total


def loss_ms(x, y, delta_v, model: FlowModel, p: int = 2) -> Tensor:
    """Σ_k |ΔE_k(x, y) - ΔV|^p over all K scales."""
    xs, ys = _batched(x), _batched(y)
    n = xs.shape[0]
    stack = flow_forward(np.concatenate([xs, ys]), model)
    return _scalar(_ms_from_stack(stack, n, delta_v, p), np.ndim(x) == 4)


def _nl_from_stack(stack: LatentStack) -> Tensor:
    return ad.neg(ad.add(latent_log_density(stack), stack.log_det))


def loss_nl(x, model: FlowModel, noise: np.ndarray | None = None) -> Tensor:
    """Negative log-likelihood of ``x`` (optionally plus dequantisation ``noise``)."""
    xs = _batched(x)
    if noise is not None:
        xs = xs + _batched(noise)
    nl = _nl_from_stack(flow_forward(xs, model))
    if not np.all(np.isfinite(nl.data)):
        raise NumericError("negative log-likelihood is not finite")
    return _scalar(nl, np.ndim(x) == 4)


def _collate(batch: Sequence[LabeledPair]):
    xs = np.stack([np.asarray(b.image_a, dtype=np.float64) for b in batch])
    ys = np.stack([np.asarray(b.image_b, dtype=np.float64) for b in batch])
    dv = np.array([b.delta_v for b in batch])
    return xs, ys, dv


def batch_terms(
    batch: Sequence[LabeledPair],
    model: FlowModel,
    p: int = 2,
    noise_rng: np.random.Generator | None = None,
    init_actnorm: bool = False,
) -> tuple[Tensor, Tensor]:
    """Per-pair multi-scale loss and per-pair NLL sum (nl(x) + nl(y)) / D, each shape (B,).

    The NLL is taken per input dimension (D = H·W·3) so that λ does not have
    to shrink with the image size. With ``noise_rng`` the NLL is evaluated on copies of the images with
    uniform dequantisation noise in [0, 1/256); ΔE always uses clean images.
    """
    if not batch:
        raise ContractError("batch must not be empty")
    xs, ys, dv = _collate(batch)
    n = len(batch)
    clean = np.concatenate([xs, ys])
    if noise_rng is not None:
        noisy = clean + noise_rng.uniform(0.0, DEQUANT_WIDTH, size=clean.shape)
        stack = flow_forward(np.concatenate([clean, noisy]), model, init_actnorm=init_actnorm)
        nl_stack = _stack_slice(stack, 2 * n, 4 * n)
    else:
        stack = flow_forward(clean, model, init_actnorm=init_actnorm)
        nl_stack = stack
    ms = _ms_from_stack(stack, n, dv, p)
    nl = _nl_from_stack(nl_stack)
    nl_pair = ad.mul(1.0 / xs[0].size, ad.add(nl[:n], nl[n : 2 * n]))
    return ms, nl_pair


def batch_loss(
    batch: Sequence[LabeledPair],
    model: FlowModel,
    lam: float = 1e-4,
    p: int = 2,
    noise_rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean over the batch of loss_ms(x, y) + λ (nl(x) + nl(y)) / D, with D = H·W·3."""
    ms, nl = batch_terms(batch, model, p, noise_rng)
    return ad.mul(1.0 / len(batch), ad.tsum(ad.add(ms, ad.mul(lam, nl))))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``.

    ``params`` maps names to Tensors (or arrays); ``grads`` maps the same
    names to gradient arrays.
    """
    missing = [k for k in params if grads.get(k) is None]
    if missing:
        raise ContractError(f"missing gradients for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if isinstance(p, Tensor):
            p.data = p.data - update.astype(p.data.dtype)
        else:
            p -= update
    return state


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise DomainError("epoch must be non-negative")
    return config.lr_init / config.lr_decay_factor ** (epoch // config.decay_every_epochs)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class LogRow:
    epoch: int
    batch: int
    loss_ms: float
    loss_nl: float
    total: float

    def csv(self) -> str:
        return f"{self.epoch},{self.batch},{self.loss_ms:.10g},{self.loss_nl:.10g},{self.total:.10g}"


@dataclass
class TrainResult:
    model: FlowModel
    log: list[LogRow]

    def epoch_means(self, column: str = "loss_ms") -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.log:
            by_epoch.setdefault(row.epoch, []).append(getattr(row, column))
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _find_bad_pair(batch, model, p, indices) -> int | None:
    for pair, idx in zip(batch, indices):
        try:
            with ad.no_grad():
                ms, nl = batch_terms([pair], model, p)
            if not (np.isfinite(ms.data).all() and np.isfinite(nl.data).all()):
                return idx
        except (NumericError, ArithmeticError):
            return idx
    return None


def train(
    dataset: Sequence[LabeledPair],
    config: TrainConfig,
    model: FlowModel,
    checkpoint_path: str | os.PathLike | None = None,
    log_path: str | os.PathLike | None = None,
    on_epoch_end: Callable[[int, FlowModel], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on the combined multi-scale and likelihood loss.

    The model is updated in place. Batches are drawn from a seeded shuffle
    per epoch. When given, ``log_path`` receives one CSV line per batch,
    ``checkpoint_path`` is rewritten after every epoch and ``on_epoch_end``
    is called with the epoch index and the model.
    """
    from .checkpoint import save_checkpoint

    if not dataset:
        raise ContractError("dataset must not be empty")
    for i, pair in enumerate(dataset):
        if not (np.all(np.isfinite(pair.image_a)) and np.all(np.isfinite(pair.image_b))):
            raise NumericError(f"pair {i} has non-finite pixel values")
    rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng([config.seed, 1]) if config.dequantize else None
    state = AdamState()
    if not model.actnorm_initialized and config.epochs > 0:
        # statistics from a single small batch give near-constant channels huge scales
        sample = rng.permutation(len(dataset))[:ACTNORM_INIT_PAIRS]
        xs, ys, _ = _collate([dataset[i] for i in sample])
        with ad.no_grad():
            flow_forward(np.concatenate([xs, ys]), model, init_actnorm=True)
    log: list[LogRow] = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        if log_file:
            log_file.write("epoch,batch,loss_ms,loss_nl,total\n")
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config, epoch)
            order = rng.permutation(len(dataset))
            for b, lo in enumerate(range(0, len(order), config.batch_size)):
                idx = order[lo : lo + config.batch_size]
                batch = [dataset[i] for i in idx]
                try:
                    ms, nl = batch_terms(batch, model, config.p, noise_rng)
                    total = ad.mul(1.0 / len(batch), ad.tsum(ad.add(ms, ad.mul(config.lam, nl))))
                except (NumericError, ArithmeticError) as exc:
                    bad = _find_bad_pair(batch, model, config.p, idx)
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}, pair {bad}: {exc}") from exc
                model.zero_grad()
                ad.backward(total)
                grads = {k: v.grad for k, v in model.params.items()}
                bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
                if bad:
                    raise NumericError(f"non-finite gradient at epoch {epoch}, batch {b} (pairs {idx.tolist()}) in {bad[0]}")
                adam_step(model.params, grads, state, lr)
                row = LogRow(
                    epoch,
                    b,
                    float(ms.data.mean()),
                    float(nl.data.mean()),
                    float(total.data),
                )
                log.append(row)
                if log_file:
                    log_file.write(row.csv() + "\n")
            if log:
                logger.info("epoch %d lr %.3g loss_ms %.4f", epoch, lr, np.mean([r.loss_ms for r in log if r.epoch == epoch]))
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
            if on_epoch_end is not None:
                on_epoch_end(epoch, model)
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(model=model, log=log)


# ---------------------------------------------------------------------------
# synthetic data


def _base_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = np.empty((h, w, 3))
    img[:] = rng.uniform(0.1, 0.9, size=3)
    for _ in range(rng.integers(3, 7)):
        y0, x0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
        y1 = rng.integers(y0 + 2, h + 1)
        x1 = rng.integers(x0 + 2, w + 1)
        img[y0:y1, x0:x1] = rng.uniform(0.05, 0.95, size=3)
    return img


def _region_mask(rng: np.random.Generator, h: int, w: int, grid: int = 4) -> np.ndarray:
    """Half of the cells of a grid×grid tiling, chosen at random.

    The changed area is fixed so that labels vary with colour, not with area.
    """
    cells = np.zeros(grid * grid, dtype=bool)
    cells[rng.choice(grid * grid, size=grid * grid // 2, replace=False)] = True
    rows = np.arange(h) * grid // h
    cols = np.arange(w) * grid // w
    return cells.reshape(grid, grid)[rows[:, None], cols[None, :]]


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def perturb_lab(img: np.ndarray, shift, mask: np.ndarray | None = None) -> np.ndarray:
    """Add a Lab offset to the pixels selected by ``mask`` (all pixels if None), re-encode to 8-bit sRGB."""
    lab = srgb_to_lab(img)
    shift = np.asarray(shift, dtype=np.float64)
    if mask is None:
        lab = lab + shift
    else:
        lab = lab + mask[..., None] * shift
    return quantize8(lab_to_srgb(lab))


def gen_synthetic_dataset(n: int, size=(32, 32), seed: int = 0, max_shift: float = 12.0) -> list[LabeledPair]:
    """Seeded pairs of a multi-patch image and a copy with a Lab colour shift on random regions.

    The shift covers a random half of the cells of a 4×4 grid. Each shift
    component is uniform in [-max_shift, max_shift] scaled by a per-pair
    intensity in [0, 1]; labels are the pixel-mean CIEDE2000.
    """
    h, w = size
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        a = quantize8(_base_image(rng, h, w))
        shift = rng.uniform(-max_shift, max_shift, size=3) * rng.uniform(0.0, 1.0)
        mask = _region_mask(rng, h, w)
        b = perturb_lab(a, shift, mask)
        pairs.append(LabeledPair(a, b, image_cd_mean(a, b, "E2000")))
    return pairs


def split_dataset(pairs: Sequence[LabeledPair], train_fraction: float = 0.8, seed: int = 0):
    """Seeded random split into (train, held_out)."""
    order = np.random.default_rng(seed).permutation(len(pairs))
    cut = int(round(train_fraction * len(pairs)))
    return [pairs[i] for i in order[:cut]], [pairs[i] for i in order[cut:]]


def iter_batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for lo in range(0, len(items), size):
        yield items[lo : lo + size]
