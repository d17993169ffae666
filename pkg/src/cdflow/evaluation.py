"""STRESS, PLCC (after logistic linearisation), SRCC and geometric-distortion evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .exceptions import ContractError, DegenerateCorrelationError, DimensionError, DomainError

DISTORTIONS = ("translate", "rotate", "dilate")
MAX_TRANSLATE_FRACTION = 0.05
MAX_ROTATE_DEG = 3.0
DILATE_FACTOR = 1.05


def _pair_arrays(E, V, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    E = np.asarray(E, dtype=np.float64).reshape(-1)
    V = np.asarray(V, dtype=np.float64).reshape(-1)
    if E.shape != V.shape:
        raise DimensionError(f"length mismatch: {E.size} predictions vs {V.size} labels")
    if E.size < min_len:
        raise DomainError(f"need at least {min_len} samples, got {E.size}")
    return E, V


def stress(E, V) -> float:
    """Standardised residual sum of squares between predictions E and labels V, times 100."""
    E, V = _pair_arrays(E, V, 2)
    ev = float(np.dot(E, V))
    if ev == 0.0:
        raise DegenerateCorrelationError("sum(E*V) is zero")
    F = float(np.dot(E, E)) / ev
    vv = float(np.dot(V, V))
    if vv == 0.0:
        raise DegenerateCorrelationError("labels are all zero")
    return 100.0 * math.sqrt(float(np.sum((E - F * V) ** 2)) / (F * F * vv))


def pearson(a, b) -> float:
    a, b = _pair_arrays(a, b, 2)
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if na == 0.0 or nb == 0.0:
        raise DegenerateCorrelationError("zero variance")
    return float(da @ db) / (na * nb)


def srcc(E, V) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    E, V = _pair_arrays(E, V, 3)
    try:
        return pearson(stats.rankdata(E), stats.rankdata(V))
    except DegenerateCorrelationError:
        raise DegenerateCorrelationError("zero rank variance") from None


def logistic4(e, b1, b2, b3, b4):
    """Monotone four-parameter logistic (b1 - b2) / (1 + exp(-(e - b3)/|b4|)) + b2."""
    z = -(np.asarray(e, dtype=np.float64) - b3) / abs(b4)
    return (b1 - b2) * 0.5 * (1.0 - np.tanh(z / 2.0)) + b2


@dataclass
class LogisticFit:
    params: tuple[float, float, float, float]
    sse: float
    converged: bool


def fit_logistic(E, V) -> LogisticFit:
    """Least-squares logistic fit by multi-start Nelder–Mead.

    The fit runs on standardised E so the result is invariant to increasing
    affine rescaling of E; returned parameters are in the original units.
    Starts place the midpoint at the 25/50/75% quantiles of E with slopes of
    0.5, 1 and 3 standard deviations and asymptotes at the V extremes;
    the best run is restarted once to polish it.
    """
    E, V = _pair_arrays(E, V, 5)
    mu, sd = float(E.mean()), float(E.std())
    if sd == 0.0:
        raise DegenerateCorrelationError("predictions are constant")
    if float(V.std()) == 0.0:
        raise DegenerateCorrelationError("labels are constant")
    u = (E - mu) / sd
    lo, hi = float(V.min()), float(V.max())
    span = hi - lo
    # sign of the trend decides which asymptote is which
    if np.corrcoef(u, V)[0, 1] < 0:
        lo, hi = hi, lo

    def sse(b):
        r = V - logistic4(u, *b)
        return float(r @ r)

    # absolute tolerance relative to the label energy; unbounded drifts (near-linear data) stop at maxfev
    opts = {"xatol": 1e-9, "fatol": 1e-13 * max(float(V @ V), 1e-300), "maxiter": 4000, "maxfev": 4000}
    best = None
    for q in (0.25, 0.5, 0.75):
        for slope in (0.5, 1.0, 3.0):
            start = np.array([hi, lo, np.quantile(u, q), slope])
            res = optimize.minimize(sse, start, method="Nelder-Mead", options=opts)
            if best is None or res.fun < best.fun:
                best = res
    # polish the winner from a fresh simplex
    best2 = optimize.minimize(sse, best.x, method="Nelder-Mead", options=opts)
    if best2.fun < best.fun:
        best = best2
    b1, b2, b3, b4 = best.x
    params = (float(b1), float(b2), float(mu + sd * b3), float(sd * abs(b4)))
    return LogisticFit(params=params, sse=float(best.fun), converged=bool(np.isfinite(best.fun)))


def plcc_linearized(E, V) -> tuple[float, tuple[float, float, float, float], bool]:
    """Pearson correlation between logistic-mapped predictions and labels.

    Returns ``(plcc, params, fit_ok)``. If no start produces a usable fit the
    raw Pearson correlation is returned with ``fit_ok=False``.
    """
    E, V = _pair_arrays(E, V, 5)
    if float(V.std()) == 0.0 or float(E.std()) == 0.0:
        raise DegenerateCorrelationError("zero variance")
    try:
        fit = fit_logistic(E, V)
        mapped = logistic4(E, *fit.params)
        return pearson(mapped, V), fit.params, True
    except (DegenerateCorrelationError, FloatingPointError, ValueError):
        return pearson(E, V), (float("nan"),) * 4, False


@dataclass
class EvalReport:
    stress: float
    plcc: float
    srcc: float
    fit_params: tuple[float, float, float, float]
    n: int
    fit_ok: bool = True
    predictions: list[float] = field(default_factory=list, repr=False)
    distortion_params: list[dict] = field(default_factory=list, repr=False)

    def to_kv(self) -> str:
        lines = [
            f"stress={self.stress:.6f}",
            f"plcc={self.plcc:.6f}",
            f"srcc={self.srcc:.6f}",
        ]
        lines += [f"beta{i + 1}={b:.6f}" for i, b in enumerate(self.fit_params)]
        lines += [f"n={self.n}", f"fit_ok={int(self.fit_ok)}"]
        return "\n".join(lines) + "\n"

    def to_table(self, title: str = "") -> str:
        rows = [("STRESS", f"{self.stress:10.4f}"), ("PLCC", f"{self.plcc:10.4f}"), ("SRCC", f"{self.srcc:10.4f}"), ("n", f"{self.n:10d}")]
        head = f"{title}\n" if title else ""
        return head + "\n".join(f"{k:<8}{v}" for k, v in rows) + "\n"


def report(E, V) -> EvalReport:
    E, V = _pair_arrays(E, V, 3)
    plcc, params, ok = plcc_linearized(E, V)
    return EvalReport(stress=stress(E, V), plcc=plcc, srcc=srcc(E, V), fit_params=params, n=E.size, fit_ok=ok, predictions=list(E))


# ---------------------------------------------------------------------------
# geometric distortions


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at real coordinates with edge replication."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bot = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    return top + fy * (bot - top)


def translate(img, dx: float, dy: float) -> np.ndarray:
    """Shift content right by ``dx`` and down by ``dy`` pixels; exposed borders replicate the edge."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return _bilinear(img, yy - dy, xx - dx)


def rotate(img, degrees: float) -> np.ndarray:
    """Rotate about the image centre (counter-clockwise in display coordinates)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    th = np.radians(degrees)
    c, s = np.cos(th), np.sin(th)
    dy, dx = yy - cy, xx - cx
    src_x = cx + c * dx - s * dy
    src_y = cy + s * dx + c * dy
    return _bilinear(img, src_y, src_x)


def dilate(img, factor: float = DILATE_FACTOR) -> np.ndarray:
    """Zoom in about the centre by ``factor`` and crop back to the original size."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return _bilinear(img, cy + (yy - cy) / factor, cx + (xx - cx) / factor)


def sample_distortion(kind: str, shape, rng: np.random.Generator) -> dict:
    """Draw distortion magnitudes uniformly within the allowed bounds."""
    h, w = shape[:2]
    if kind == "translate":
        return {"dx": float(rng.uniform(-1, 1) * MAX_TRANSLATE_FRACTION * w), "dy": float(rng.uniform(-1, 1) * MAX_TRANSLATE_FRACTION * h)}
    if kind == "rotate":
        return {"degrees": float(rng.uniform(-MAX_ROTATE_DEG, MAX_ROTATE_DEG))}
    if kind == "dilate":
        return {"factor": DILATE_FACTOR}
    raise DomainError(f"unknown distortion {kind!r}; choose from {DISTORTIONS}")


def apply_distortion(img, kind: str, params: dict) -> np.ndarray:
    if kind == "translate":
        return translate(img, params["dx"], params["dy"])
    if kind == "rotate":
        return rotate(img, params["degrees"])
    if kind == "dilate":
        return dilate(img, params["factor"])
    raise DomainError(f"unknown distortion {kind!r}; choose from {DISTORTIONS}")


def geometric_distort(img, kind: str, seed: int | np.random.Generator | None = None, return_params: bool = False):
    """Randomly translate (≤5% per axis), rotate (≤3°) or dilate (×1.05) an image."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    img = np.asarray(img, dtype=np.float64)
    params = sample_distortion(kind, img.shape, rng)
    out = np.clip(apply_distortion(img, kind, params), 0.0, 1.0)
    return (out, params) if return_params else out


def evaluate(
    metric: Callable[[np.ndarray, np.ndarray], float],
    pairs: Sequence,
    distortion: str | None = None,
    seed: int = 0,
    batch_metric: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> EvalReport:
    """Score ``metric`` on labelled pairs, optionally distorting the second image of each pair.

    ``batch_metric``, when given, is used instead of ``metric`` and receives
    stacked N×H×W×3 arrays.
    """
    if len(pairs) < 5:
        raise ContractError(f"evaluate needs at least 5 pairs, got {len(pairs)}")
    rng = np.random.default_rng(seed)
    firsts, seconds, labels, dparams = [], [], [], []
    for pair in pairs:
        b = np.asarray(pair.image_b, dtype=np.float64)
        if distortion is not None:
            b, params = geometric_distort(b, distortion, rng, return_params=True)
            dparams.append(params)
        firsts.append(np.asarray(pair.image_a, dtype=np.float64))
        seconds.append(b)
        labels.append(pair.delta_v)
    if batch_metric is not None:
        preds = np.asarray(batch_metric(np.stack(firsts), np.stack(seconds)), dtype=np.float64)
    else:
        preds = []
        for i, (a, b) in enumerate(zip(firsts, seconds)):
            try:
                preds.append(float(metric(a, b)))
            except Exception as exc:
                raise ContractError(f"metric failed on pair {i}: {exc}") from exc
        preds = np.asarray(preds)
    rep = report(preds, np.asarray(labels))
    rep.distortion_params = dparams
    return rep
