"""Squared-error loss: per sample ||y_hat - y||^2, averaged over a batch."""
from __future__ import annotations

import numpy as np


def _check(y_hat: np.ndarray, y: np.ndarray) -> None:
    if y_hat.shape != y.shape or y_hat.shape[-1] != 2:
        raise ValueError(f"prediction shape {y_hat.shape} and target shape {y.shape} must match (..., 2)")
    if not (np.isfinite(y_hat).all() and np.isfinite(y).all()):
        raise ValueError("non-finite value in loss input")


def sample_losses(y_hat, y) -> np.ndarray:
    y_hat, y = np.asarray(y_hat, dtype=float), np.asarray(y, dtype=float)
    _check(y_hat, y)
    return np.sum((y_hat - y) ** 2, axis=-1)


def mse_loss(y_hat, y) -> float:
    """Sum of squared differences over the two outputs (no halving, no per-element mean).

    For a batch of shape ``(N, 2)`` the result is the mean of the per-sample losses.
    """
    return float(np.mean(sample_losses(y_hat, y)))


def mse_grad(y_hat, y) -> np.ndarray:
    """d mse_loss / d y_hat."""
    y_hat, y = np.asarray(y_hat, dtype=float), np.asarray(y, dtype=float)
    _check(y_hat, y)
    n = y_hat.shape[0] if y_hat.ndim == 2 else 1
    return 2.0 * (y_hat - y) / n
