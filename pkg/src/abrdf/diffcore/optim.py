"""Adaptive-moment gradient descent."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from abrdf.diffcore.params import ParameterBlock
from abrdf.errors import ConfigurationError, NumericError


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n: int, lr: float = 5e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.first_moment.copy(), self.second_moment.copy(),
                              self.step_count, self.lr, self.beta1, self.beta2, self.eps)

    @property
    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def optimizer_step(params: ParameterBlock, grads: np.ndarray,
                   state: OptimizerState) -> tuple[ParameterBlock, OptimizerState]:
    """One Adam update; returns new objects and leaves the inputs untouched."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape or state.first_moment.shape != params.values.shape:
        raise ConfigurationError(
            f"gradient length {grads.size} / moment length {state.first_moment.size} "
            f"!= parameter length {params.values.size}"
        )
    bad = ~np.isfinite(grads)
    if bad.any():
        name = params.block_of_index(int(np.flatnonzero(bad)[0]))
        raise NumericError(f"non-finite gradient in block {name!r}; step rejected")

    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return params.with_values(new_values), new_state
