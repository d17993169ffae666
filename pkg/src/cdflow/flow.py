"""Multi-scale autoregressive normalizing flow.

Layout is channels-last throughout: an image is H×W×3 and a batch is
N×H×W×C. Each of the ``K`` scales squeezes the input (2×2 blocks become
channels), applies ``L`` flow steps (actnorm, invertible 1×1 convolution,
affine coupling) and, except at the last scale, splits off half of the
channels as that scale's latent output. The emitted half gets a diagonal
Gaussian prior whose mean and log-std are predicted from the half that is
carried deeper; the final latent has a learnable unconditional Gaussian.

Forward passes are differentiable (built from :mod:`cdflow.autodiff`
operations). Inverse passes run on plain arrays and never record a graph.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, DomainError, NumericError, SingularityError

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FlowConfig:
    """Architecture hyperparameters.

    ``n_scales`` is K and ``n_steps`` is L. ``clamp`` bounds the coupling
    log-scale via ``clamp * tanh(raw / clamp)``.
    """

    n_scales: int = 3
    n_steps: int = 2
    hidden_width: int = 32
    clamp: float = 2.0
    input_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.n_scales < 2:
            raise DomainError("n_scales must be at least 2")
        if self.n_steps < 1:
            raise DomainError("n_steps must be at least 1")
        if self.hidden_width < 1:
            raise DomainError("hidden_width must be positive")
        if not self.clamp > 0:
            raise DomainError("clamp must be positive")
        h, w = self.input_size
        m = 2**self.n_scales
        if h <= 0 or w <= 0 or h % m or w % m:
            raise DimensionError(f"input size {h}×{w} is not divisible by 2^K = {m}")

    def channels(self, k: int) -> int:
        """Channel count inside scale ``k`` (1-based), after squeezing."""
        return 3 * 2 ** (k + 1)

    def spatial(self, k: int) -> tuple[int, int]:
        h, w = self.input_size
        return h // 2**k, w // 2**k

    def latent_shapes(self) -> list[tuple[int, int, int]]:
        """Shapes of z_1, z_3, ..., z_{2K-1} for a single image."""
        shapes = []
        for k in range(1, self.n_scales + 1):
            c = self.channels(k)
            if k < self.n_scales:
                c //= 2
            shapes.append((*self.spatial(k), c))
        return shapes

    @property
    def dim(self) -> int:
        h, w = self.input_size
        return 3 * h * w


@dataclass
class LatentStack:
    """Per-scale latents of a (batched) forward pass.

    ``parts[k]`` has shape N×h_k×w_k×c_k. ``priors[k]`` holds (mean, log_std)
    tensors for ``parts[k]``; the last entry is the unconditional top prior.
    ``log_det`` has one entry per image.
    """

    parts: list[Tensor]
    log_det: Tensor
    priors: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    batched: bool = True

    def flatten(self, start: int = 0) -> Tensor:
        """Concatenate parts ``start:`` into an N×D tensor."""
        n = self.parts[0].shape[0]
        return ad.concat([p.reshape(n, -1) for p in self.parts[start:]], axis=1)

    def arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parts]

    @property
    def n_elements(self) -> int:
        return sum(int(np.prod(p.shape[1:])) for p in self.parts)


# ---------------------------------------------------------------------------
# individual layers


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def squeeze(x):
    """N×H×W×C -> N×H/2×W/2×4C; channel order is block position major (TL, TR, BL, BR)."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"cannot squeeze odd spatial extent {h}×{w}")
    if isinstance(x, Tensor):
        y = x.reshape(n, h // 2, 2, w // 2, 2, c)
        return ad.transpose(y, (0, 1, 3, 2, 4, 5)).reshape(n, h // 2, w // 2, 4 * c)
    y = np.asarray(x).reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, h // 2, w // 2, 4 * c)


def unsqueeze(x):
    n, h, w, c4 = x.shape
    if c4 % 4:
        raise DimensionError(f"channel count {c4} is not divisible by 4")
    c = c4 // 4
    if isinstance(x, Tensor):
        y = x.reshape(n, h, w, 2, 2, c)
        return ad.transpose(y, (0, 1, 3, 2, 4, 5)).reshape(n, 2 * h, 2 * w, c)
    y = np.asarray(x).reshape(n, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, 2 * h, 2 * w, c)


def actnorm(z, scale, bias, reverse: bool = False):
    """Per-channel affine map ``s*z + t``; returns (output, log_det per image)."""
    s, t = _data(scale), _data(bias)
    if np.any(s == 0):
        raise SingularityError("actnorm scale has a zero component")
    n, h, w, _ = z.shape
    if reverse:
        out = (_data(z) - t) / s
        return out, -h * w * np.log(np.abs(s)).sum() * np.ones(n)
    out = z * scale + bias
    ld = ad.mul(float(h * w), ad.tsum(ad.log_abs(scale)))
    return out, ad.add(np.zeros(n), ld)


def actnorm_init(batch) -> tuple[np.ndarray, np.ndarray]:
    """Data-dependent actnorm parameters that standardise each channel of ``batch``.

    ``batch`` is a list of H×W×C arrays or one N×H×W×C array. Channels with
    zero variance get scale 1 and bias ``-mean``.
    """
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise DomainError("actnorm_init needs a non-empty batch")
        arr = np.stack([_data(b) for b in batch])
    else:
        arr = _data(batch)
        if arr.size == 0:
            raise DomainError("actnorm_init needs a non-empty batch")
    flat = arr.reshape(-1, arr.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    s = np.where(degenerate, 1.0, 1.0 / np.where(degenerate, 1.0, std))
    t = -mean * s
    return s, t


def _lu(weight: np.ndarray):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(weight)
    logdet = np.log(np.abs(np.diag(lu))).sum() if np.all(np.diag(lu) != 0) else -np.inf
    if logdet <= np.log(ad.SINGULAR_DET):
        raise SingularityError("1x1 convolution weight is singular")
    return lu, piv, logdet


def inv_conv(z, weight, reverse: bool = False):
    """Invertible 1×1 convolution ``z' = W z`` per pixel; returns (output, log_det per image)."""
    n, h, w, c = z.shape
    if reverse:
        lu, piv, logdet = _lu(_data(weight))
        out = sla.lu_solve((lu, piv), _data(z).reshape(-1, c).T).T.reshape(z.shape)
        return out, -h * w * logdet * np.ones(n)
    out = ad.channel_matmul(z, weight)
    ld = ad.mul(float(h * w), ad.logabsdet(weight))
    return out, ad.add(np.zeros(n), ld)


def _coupling_params(net: dict, clamp: float, za):
    hidden = ad.tanh(ad.conv2d(za, net["conv1.kernel"], net["conv1.bias"]))
    raw = ad.conv2d(hidden, net["conv2.kernel"], net["conv2.bias"])
    half = raw.shape[-1] // 2
    raw_s = ad.slice_channels(raw, 0, half)
    shift = ad.slice_channels(raw, half, 2 * half)
    log_s = ad.mul(clamp, ad.tanh(ad.mul(1.0 / clamp, raw_s)))
    return log_s, shift


def affine_coupling(z, net: dict, clamp: float = 2.0, reverse: bool = False):
    """Affine coupling: the first channel half conditions the second.

    ``net`` maps "conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias"
    to tensors; conv2 emits log-scale then shift for the second half.
    """
    c = z.shape[-1]
    if c % 2:
        raise DimensionError(f"affine coupling needs an even channel count, got {c}")
    d = c // 2
    if reverse:
        zd = _data(z)
        za = zd[..., :d]
        with ad.no_grad():
            log_s, shift = _coupling_params(net, clamp, Tensor(za))
        zb = (zd[..., d:] - shift.data) * np.exp(-log_s.data)
        return np.concatenate([za, zb], axis=-1), -log_s.data.sum(axis=(1, 2, 3))
    za = ad.slice_channels(z, 0, d)
    zb = ad.slice_channels(z, d, c)
    log_s, shift = _coupling_params(net, clamp, za)
    zb = ad.add(ad.mul(zb, ad.exp(log_s)), shift)
    return ad.concat([za, zb], axis=-1), ad.tsum(log_s, axis=(1, 2, 3))


def split(z, prior_kernel, prior_bias):
    """Halve channels into (emitted, carried) and predict the emitted half's prior.

    Returns ``(z_out, carry, (mean, log_std))``.
    """
    c = z.shape[-1]
    if c % 2:
        raise DimensionError(f"split needs an even channel count, got {c}")
    d = c // 2
    if isinstance(z, Tensor):
        z_out, carry = ad.slice_channels(z, 0, d), ad.slice_channels(z, d, c)
    else:
        z_out, carry = Tensor(z[..., :d]), Tensor(z[..., d:])
    stats = ad.conv2d(carry, prior_kernel, prior_bias)
    mean = ad.slice_channels(stats, 0, d)
    log_std = ad.slice_channels(stats, d, 2 * d)
    return z_out, carry, (mean, log_std)


def gaussian_log_density(z, mean, log_std) -> Tensor:
    """Sum of diagonal-Gaussian log densities over all but the batch axis."""
    u = ad.mul(ad.sub(z, mean), ad.exp(ad.neg(log_std)))
    per = ad.sub(ad.add(ad.mul(-0.5, ad.square(u)), ad.neg(log_std)), 0.5 * LOG_2PI)
    axes = tuple(range(1, per.ndim))
    return ad.tsum(per, axis=axes)


# ---------------------------------------------------------------------------
# the model


class FlowModel:
    """Parameters of the flow, keyed by name in schedule order.

    ``w_init`` is "orthogonal" (random orthogonal mixing matrices) or
    "identity". Coupling output layers and prior networks start at zero so a
    fresh model is volume preserving with log-det 0 and a standard normal
    prior.
    """

    def __init__(self, config: FlowConfig, seed: int = 0, w_init: str = "orthogonal", dtype=np.float64):
        if w_init not in ("orthogonal", "identity"):
            raise DomainError(f"unknown w_init {w_init!r}")
        self.config = config
        self.dtype = np.dtype(dtype)
        self.actnorm_initialized = False
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        K, L, hw = config.n_scales, config.n_steps, config.hidden_width
        for k in range(1, K + 1):
            c = config.channels(k)
            d = c // 2
            for l in range(1, L + 1):
                pre = f"scale{k}.step{l}."
                self._add(pre + "actnorm.scale", np.ones(c))
                self._add(pre + "actnorm.bias", np.zeros(c))
                if w_init == "orthogonal":
                    q, r = np.linalg.qr(rng.standard_normal((c, c)))
                    weight = q * np.sign(np.diag(r))
                else:
                    weight = np.eye(c)
                self._add(pre + "invconv.weight", weight)
                fan_in = 9 * d
                self._add(pre + "coupling.conv1.kernel", rng.standard_normal((3, 3, d, hw)) / np.sqrt(fan_in))
                self._add(pre + "coupling.conv1.bias", np.zeros(hw))
                self._add(pre + "coupling.conv2.kernel", np.zeros((3, 3, hw, c)))
                self._add(pre + "coupling.conv2.bias", np.zeros(c))
            if k < K:
                self._add(f"scale{k}.prior.kernel", np.zeros((3, 3, d, c)))
                self._add(f"scale{k}.prior.bias", np.zeros(c))
        top = config.latent_shapes()[-1]
        self._add("top.mean", np.zeros(top))
        self._add("top.log_std", np.zeros(top))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    @staticmethod
    def expected_parameter_shapes(config: FlowConfig) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in FlowModel(config, w_init="identity").params.items()}

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def coupling_net(self, k: int, l: int) -> dict[str, Tensor]:
        pre = f"scale{k}.step{l}.coupling."
        return {n: self.params[pre + n] for n in ("conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias")}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise DimensionError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            v = np.asarray(v)
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: expected shape {self.params[k].shape}, got {v.shape}")
            self.params[k].data = v.astype(self.dtype, copy=True)

    def copy(self) -> "FlowModel":
        other = FlowModel.__new__(FlowModel)
        other.config = self.config
        other.dtype = self.dtype
        other.actnorm_initialized = self.actnorm_initialized
        other.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return other

    def forward(self, x, init_actnorm: bool = False) -> LatentStack:
        return flow_forward(x, self, init_actnorm=init_actnorm)

    def inverse(self, stack) -> np.ndarray:
        return flow_inverse(stack, self)

    def log_likelihood(self, x):
        return log_likelihood(x, self)


def _check_input(x, config: FlowConfig, dtype) -> tuple[np.ndarray | Tensor, bool]:
    if isinstance(x, Tensor):
        arr = x
        shape = x.shape
    else:
        arr = np.asarray(x, dtype=dtype)
        shape = arr.shape
    if len(shape) == 3:
        arr = arr.reshape(1, *shape) if isinstance(arr, Tensor) else arr[None]
        batched = False
    elif len(shape) == 4:
        batched = True
    else:
        raise DimensionError(f"expected H×W×3 or N×H×W×3 input, got shape {shape}")
    if tuple(arr.shape[1:]) != (*config.input_size, 3):
        raise DimensionError(f"input of shape {tuple(arr.shape[1:])} does not match configured {(*config.input_size, 3)}")
    return (arr if isinstance(arr, Tensor) else Tensor(arr)), batched


def flow_forward(x, model: FlowModel, init_actnorm: bool = False) -> LatentStack:
    """Map images to their latent stack and the total log-determinant.

    With ``init_actnorm=True`` every actnorm layer is first set from the
    statistics of its input on this batch (data-dependent initialisation).
    """
    cfg = model.config
    z, batched = _check_input(x, cfg, model.dtype)
    n = z.shape[0]
    log_det = Tensor(np.zeros(n, dtype=model.dtype))
    parts: list[Tensor] = []
    priors: list[tuple[Tensor, Tensor]] = []
    P = model.params
    for k in range(1, cfg.n_scales + 1):
        z = squeeze(z)
        for l in range(1, cfg.n_steps + 1):
            pre = f"scale{k}.step{l}."
            if init_actnorm:
                s, t = actnorm_init(z.data)
                P[pre + "actnorm.scale"].data = s.astype(model.dtype)
                P[pre + "actnorm.bias"].data = t.astype(model.dtype)
            z, ld = actnorm(z, P[pre + "actnorm.scale"], P[pre + "actnorm.bias"])
            log_det = ad.add(log_det, ld)
            z, ld = inv_conv(z, P[pre + "invconv.weight"])
            log_det = ad.add(log_det, ld)
            z, ld = affine_coupling(z, model.coupling_net(k, l), cfg.clamp)
            log_det = ad.add(log_det, ld)
        if k < cfg.n_scales:
            z_out, z, prior = split(z, P[f"scale{k}.prior.kernel"], P[f"scale{k}.prior.bias"])
            parts.append(z_out)
            priors.append(prior)
        else:
            parts.append(z)
            priors.append((P["top.mean"], P["top.log_std"]))
    if init_actnorm:
        model.actnorm_initialized = True
    return LatentStack(parts=parts, log_det=log_det, priors=priors, batched=batched)


def flow_inverse(stack, model: FlowModel) -> np.ndarray:
    """Exact inverse of :func:`flow_forward`.

    ``stack`` is a :class:`LatentStack` or a list of per-scale arrays (batched
    N×h×w×c, or unbatched h×w×c).
    """
    cfg = model.config
    if isinstance(stack, LatentStack):
        parts = stack.arrays()
        batched = stack.batched
    else:
        parts = [np.asarray(p, dtype=model.dtype) for p in stack]
        batched = parts[0].ndim == 4
        if not batched:
            parts = [p[None] for p in parts]
    expected = cfg.latent_shapes()
    if len(parts) != len(expected) or any(tuple(p.shape[1:]) != s for p, s in zip(parts, expected)):
        raise DimensionError(f"latent shapes {[p.shape[1:] for p in parts]} do not match schedule {expected}")
    P = model.params
    with ad.no_grad():
        z = parts[-1]
        for k in range(cfg.n_scales, 0, -1):
            if k < cfg.n_scales:
                z = np.concatenate([parts[k - 1], z], axis=-1)
            for l in range(cfg.n_steps, 0, -1):
                pre = f"scale{k}.step{l}."
                z, _ = affine_coupling(z, model.coupling_net(k, l), cfg.clamp, reverse=True)
                z, _ = inv_conv(z, P[pre + "invconv.weight"], reverse=True)
                z, _ = actnorm(z, P[pre + "actnorm.scale"], P[pre + "actnorm.bias"], reverse=True)
            z = unsqueeze(z)
    if not np.all(np.isfinite(z)):
        raise NumericError("inverse produced non-finite values")
    return z if batched else z[0]


def latent_log_density(stack: LatentStack) -> Tensor:
    """log p_Z of a latent stack: conditional Gaussians per scale plus the top prior."""
    total = None
    for z, (mean, log_std) in zip(stack.parts, stack.priors):
        term = gaussian_log_density(z, mean, log_std)
        total = term if total is None else ad.add(total, term)
    return total


def log_likelihood(x, model: FlowModel, stack: LatentStack | None = None):
    """log p_X(x) = log p_Z(f(x)) + log|det df/dx|, one value per image.

    Returns a Tensor of shape (N,) for batched input, or a scalar Tensor for a
    single image.
    """
    if stack is None:
        stack = flow_forward(x, model)
    ll = ad.add(latent_log_density(stack), stack.log_det)
    if not np.all(np.isfinite(ll.data)):
        raise NumericError("log-likelihood is not finite")
    return ll if stack.batched else ll.reshape(())
