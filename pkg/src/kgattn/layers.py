"""Stateful normalization layers and weight initialization.

Both norms are built from the differentiable primitives in
:mod:`kgattn.autodiff`, so their gradients come out of the tape for free.
"""

from __future__ import annotations

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor, sqrt


def xavier_uniform(shape, rng, dtype=DEFAULT_DTYPE, gain: float = 1.0) -> np.ndarray:
    """Uniform Xavier/Glorot init; fans taken from the trailing two dims.

    Leading dims (e.g. a per-head stack) are treated as independent matrices.
    """
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_in, fan_out = shape[-2], shape[-1]
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class BatchNorm:
    """Per-feature normalization over the batch axis with running statistics.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running estimates with ``momentum``; eval mode uses the
    running estimates. Training requires a batch of at least 2 rows.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            n = x.data.shape[0]
            if n < 2:
                raise ValueError(
                    f"batch norm in training mode needs a batch of >= 2 rows, got {n}"
                )
            mean = x.mean(axis=0)
            centered = x - mean
            var = (centered * centered).mean(axis=0)
            out = self.gamma * (centered / sqrt(var + self.eps)) + self.beta
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean.data).astype(
                self.running_mean.dtype
            )
            self.running_var = ((1 - m) * self.running_var + m * var.data).astype(
                self.running_var.dtype
            )
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return self.gamma * ((x - self.running_mean) * inv) + self.beta

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, state):
        self.running_mean = state["running_mean"].copy()
        self.running_var = state["running_var"].copy()


class LayerNorm:
    """Normalization over the last axis with learned scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return self.gamma * (centered / sqrt(var + self.eps)) + self.beta

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}
