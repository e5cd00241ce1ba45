"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam over a named parameter dict.

    Parameters with ``grad is None`` are treated as having a zero gradient
    (their moments still decay). The update is
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)`` with the standard bias
    correction.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        """Flat array map for checkpointing (moments plus step counter)."""
        out = {"step_count": np.asarray(self.step_count, dtype=np.int64)}
        for name in self.params:
            out[f"m/{name}"] = self._m[name]
            out[f"v/{name}"] = self._v[name]
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        self.step_count = int(state["step_count"])
        for name in self.params:
            self._m[name] = state[f"m/{name}"].copy()
            self._v[name] = state[f"v/{name}"].copy()
