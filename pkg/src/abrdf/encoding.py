"""Fourier-feature positional encoding for 3D positions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from abrdf.errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class EncodingConfig:
    num_frequencies: int = 10
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ConfigurationError("num_frequencies must be positive")

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_frequencies + (1 if self.include_input else 0))


def positional_encode(p, cfg: EncodingConfig = EncodingConfig()) -> np.ndarray:
    """Encode the last axis of ``p``.

    For every input component the output carries (optionally) the raw value,
    then ``sin(2^j pi p), cos(2^j pi p)`` for ``j = 0 .. L-1``.
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise NumericError("positional encoding of a non-finite input")
    scalar = p.ndim == 0
    if scalar:
        p = p[None]
    freqs = np.pi * 2.0 ** np.arange(cfg.num_frequencies)
    arg = p[..., :, None] * freqs                        # (..., d, L)
    sc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)   # (..., d, L, 2)
    sc = sc.reshape(p.shape + (2 * cfg.num_frequencies,))
    if cfg.include_input:
        sc = np.concatenate([p[..., None], sc], axis=-1)
    return sc.reshape(p.shape[:-1] + (-1,))
