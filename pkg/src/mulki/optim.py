"""AdamW with decoupled weight decay, operating on Tensor leaves.

Bias-corrected first/second moments, then a multiplicative decay applied
before the moment update each step (so a step with zero gradient and
nonzero decay shrinks parameters, and a step with zero gradient and zero
decay is a no-op). Parameters whose grad is None are skipped entirely.

This is the single place in the package that rewrites parameter storage
during training; graphs never span an optimizer step.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr < 0:
            raise ContractError(f"invalid learning rate {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ContractError(f"invalid betas {betas}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(betas[0])
        self.beta2 = float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self._state: dict[int, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def reset_moments(self) -> None:
        """Forget all moment estimates, e.g. after parameters jump."""
        self._state.clear()

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            state = self._state.get(id(p))
            if state is None:
                state = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
                self._state[id(p)] = state
            state["t"] += 1
            t = state["t"]
            if self.weight_decay != 0.0:
                p.data *= 1.0 - self.lr * self.weight_decay
            state["m"] = self.beta1 * state["m"] + (1.0 - self.beta1) * g
            state["v"] = self.beta2 * state["v"] + (1.0 - self.beta2) * (g * g)
            m_hat = state["m"] / (1.0 - self.beta1**t)
            v_hat = state["v"] / (1.0 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
