"""scikit-learn compatible wrappers around the flow metric and the pixel-mean baselines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .color import FORMULAE, image_cd_mean
from .evaluation import srcc
from .exceptions import DomainError
from .flow import FlowConfig, FlowModel, flow_forward, flow_inverse
from .metric import scale_distances
from .training import LabeledPair, TrainConfig, _stack_slice, train
from .validation import check_image, check_labels, check_pairs


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(n, lo + size)


class CDFlow(TransformerMixin, BaseEstimator):
    """Learned colour-difference metric.

    ``fit(X, y)`` trains on image pairs ``X`` (shape (N, 2, H, W, 3) or a
    sequence of pairs) with perceptual labels ``y``. ``transform`` maps
    images to flattened latents, ``predict`` gives ΔE for pairs.
    Defaults are the desk-scale settings; use n_scales=6, n_steps=8,
    lr_init=1e-5, decay_every_epochs=5, epochs=50 for the full-size recipe.
    """

    def __init__(
        self,
        n_scales: int = 3,
        n_steps: int = 2,
        hidden_width: int = 32,
        clamp: float = 2.0,
        lam: float = 1e-4,
        p: int = 2,
        batch_size: int = 4,
        lr_init: float = 5e-4,
        lr_decay_factor: float = 2.0,
        decay_every_epochs: int = 10,
        epochs: int = 30,
        dequantize: bool = True,
        random_state: int = 0,
        chunk_size: int = 64,
    ):
        self.n_scales = n_scales
        self.n_steps = n_steps
        self.hidden_width = hidden_width
        self.clamp = clamp
        self.lam = lam
        self.p = p
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.lr_decay_factor = lr_decay_factor
        self.decay_every_epochs = decay_every_epochs
        self.epochs = epochs
        self.dequantize = dequantize
        self.random_state = random_state
        self.chunk_size = chunk_size

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr_init=self.lr_init,
            lr_decay_factor=self.lr_decay_factor,
            decay_every_epochs=self.decay_every_epochs,
            epochs=self.epochs,
            lam=self.lam,
            p=self.p,
            seed=self.random_state,
            dequantize=self.dequantize,
        )

    def fit(self, X, y):
        a, b = check_pairs(X)
        y = check_labels(y, len(a))
        cfg = FlowConfig(self.n_scales, self.n_steps, self.hidden_width, self.clamp, a.shape[1:3])
        model = FlowModel(cfg, seed=self.random_state)
        pairs = [LabeledPair(a[i], b[i], y[i]) for i in range(len(a))]
        result = train(pairs, self._train_config(), model)
        self.model_ = result.model
        self.loss_log_ = result.log
        self.input_size_ = cfg.input_size
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "CDFlow":
        model = load_checkpoint(path)
        cfg = model.config
        est = cls(n_scales=cfg.n_scales, n_steps=cfg.n_steps, hidden_width=cfg.hidden_width, clamp=cfg.clamp)
        est.model_ = model
        est.loss_log_ = []
        est.input_size_ = cfg.input_size
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path)

    def transform(self, X) -> np.ndarray:
        """Flattened latent representation, one row per image."""
        check_is_fitted(self, "model_")
        X = check_image(X)
        single = X.ndim == 3
        X = X[None] if single else X
        rows = []
        with ad.no_grad():
            for lo, hi in _chunks(len(X), self.chunk_size):
                rows.append(flow_forward(X[lo:hi], self.model_).flatten().data)
        Z = np.concatenate(rows)
        return Z[0] if single else Z

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "model_")
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        shapes = self.model_.config.latent_shapes()
        sizes = np.cumsum([0] + [int(np.prod(s)) for s in shapes])
        parts = [Z[:, sizes[i] : sizes[i + 1]].reshape(len(Z), *s) for i, s in enumerate(shapes)]
        return flow_inverse(parts, self.model_)

    def predict_scales(self, X) -> np.ndarray:
        """ΔE_1 ... ΔE_K for every pair, shape (N, K)."""
        check_is_fitted(self, "model_")
        a, b = check_pairs(X)
        out = []
        with ad.no_grad():
            for lo, hi in _chunks(len(a), self.chunk_size):
                n = hi - lo
                stack = flow_forward(np.concatenate([a[lo:hi], b[lo:hi]]), self.model_)
                dists = scale_distances(_stack_slice(stack, 0, n), _stack_slice(stack, n, 2 * n))
                out.append(np.stack([d.data for d in dists], axis=1))
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return self.predict_scales(X)[:, 0]

    def score(self, X, y) -> float:
        """Spearman correlation between predicted ΔE and the labels."""
        return srcc(self.predict(X), y)


class PixelMeanCD(BaseEstimator):
    """Mean of a CIELAB-family formula over co-located pixels. Nothing to fit."""

    def __init__(self, formula: str = "E2000"):
        self.formula = formula

    def fit(self, X=None, y=None):
        if self.formula not in FORMULAE:
            raise DomainError(f"unknown formula {self.formula!r}; choose from {FORMULAE}")
        self.fitted_ = True
        return self

    def predict(self, X) -> np.ndarray:
        if self.formula not in FORMULAE:
            raise DomainError(f"unknown formula {self.formula!r}; choose from {FORMULAE}")
        a, b = check_pairs(X)
        return np.array([image_cd_mean(a[i], b[i], self.formula) for i in range(len(a))])

    def score(self, X, y) -> float:
        return srcc(self.predict(X), y)
