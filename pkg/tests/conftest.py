import numpy as np
import pytest

from cdflow.flow import FlowConfig, FlowModel


def rel_err(a, b, floor=1e-6):
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


def randomize(model: FlowModel, rng: np.random.Generator, scale: float = 0.1) -> FlowModel:
    """Perturb every parameter so the model looks trained (couplings and priors non-trivial)."""
    for name, p in model.params.items():
        if name.endswith("actnorm.scale"):
            p.data = np.exp(scale * rng.standard_normal(p.shape)) * rng.choice([-1.0, 1.0], size=p.shape)
        elif name.endswith("invconv.weight"):
            # scaled by 1/sqrt(C) so the mixing matrix stays well conditioned
            p.data = p.data + scale * rng.standard_normal(p.shape) / np.sqrt(p.shape[0])
        else:
            p.data = p.data + scale * rng.standard_normal(p.shape)
    model.actnorm_initialized = True
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return FlowConfig(n_scales=2, n_steps=1, hidden_width=4, clamp=2.0, input_size=(8, 8))
