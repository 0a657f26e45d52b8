"""Shared fixtures and the finite-difference gradient helper."""

from typing import Callable, Iterable

import numpy as np
import pytest

from guided_attention import tensor as T
from guided_attention.decoder import DecoderConfig
from guided_attention.encoder import EncoderConfig
from guided_attention.tensor import Tensor


@pytest.fixture(autouse=True)
def float64_precision():
    """Every test runs in 64-bit precision and leaves it that way."""
    T.set_default_dtype("float64")
    yield
    T.set_default_dtype("float64")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder_cfg() -> EncoderConfig:
    return EncoderConfig(num_blocks=3, layers_per_block=1, growth_rate=4, dropout=0.0, out_dim=16)


@pytest.fixture
def tiny_decoder_cfg() -> DecoderConfig:
    return DecoderConfig(
        num_layers=3,
        d_model=16,
        d_ff=32,
        heads=2,
        dropout=0.0,
        phi_kernel=3,
        phi_channels=4,
        max_len=8,
    )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def numeric_gradient(loss_fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to ``target.data`` (perturbed in place)."""

    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = loss_fn().item()
            flat[i] = original - step
            minus = loss_fn().item()
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * step)
    return grad


def assert_gradients(loss_fn: Callable[[], Tensor], targets: Iterable[Tensor], tol: float = 1e-4) -> None:
    """Compare autodiff gradients of ``loss_fn`` against central differences."""

    targets = list(targets)
    for t in targets:
        t.zero_grad()
    loss_fn().backward()
    for t in targets:
        assert t.grad is not None, "no gradient reached a target tensor"
        numeric = numeric_gradient(loss_fn, t)
        err = relative_error(t.grad, numeric)
        assert err < tol, f"relative gradient error {err:.3e} for shape {t.shape}"
