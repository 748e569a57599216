"""Fully connected networks evaluated on a tape."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from abrdf.diffcore import tape as T
from abrdf.diffcore.params import ParameterBlock
from abrdf.errors import ConfigurationError, NumericError

ACTIVATIONS = ("relu", "sigmoid", "softplus", "linear")


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer widths ``(input, hidden..., output)`` and one activation per layer.

    ``skip_connections`` holds ``(layer_index, append_input)`` pairs; when the
    flag is set the network input is concatenated to that layer's input, as
    in the NeRF trunk.
    """

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    skip_connections: tuple[tuple[int, bool], ...] = field(default=())

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "skip_connections", tuple((int(i), bool(f)) for i, f in self.skip_connections))
        if len(widths) < 2:
            raise ConfigurationError("an MLP needs at least one layer")
        if any(w <= 0 for w in widths):
            raise ConfigurationError(f"layer widths must be positive: {widths}")
        if len(self.activations) != len(widths) - 1:
            raise ConfigurationError(
                f"{len(widths) - 1} layers but {len(self.activations)} activations"
            )
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}")
        for i, _ in self.skip_connections:
            if not 0 < i < self.num_layers:
                raise ConfigurationError(f"skip connection into layer {i} is out of range")

    @classmethod
    def simple(cls, d_in: int, hidden: int, depth: int, d_out: int,
               hidden_act: str = "relu", out_act: str = "linear", skips=()) -> "MlpArchitecture":
        widths = (d_in,) + (hidden,) * depth + (d_out,)
        acts = (hidden_act,) * depth + (out_act,)
        return cls(widths, acts, tuple((s, True) for s in skips))

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def fan_in(self, layer: int) -> int:
        extra = self.layer_widths[0] if (layer, True) in self.skip_connections else 0
        return self.layer_widths[layer] + extra

    def layout(self, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i in range(self.num_layers):
            out.append((f"{prefix}.layer{i}.weight", (self.fan_in(i), self.layer_widths[i + 1])))
            out.append((f"{prefix}.layer{i}.bias", (self.layer_widths[i + 1],)))
        return out


def glorot_init(params: ParameterBlock, arch: MlpArchitecture, prefix: str,
                rng: np.random.Generator) -> None:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, in place."""
    for i in range(arch.num_layers):
        w = params.view(f"{prefix}.layer{i}.weight")
        bound = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        params.view(f"{prefix}.layer{i}.bias")[...] = 0.0


def activate(x, name: str):
    if name == "relu":
        return T.relu(x)
    if name == "sigmoid":
        return T.sigmoid(x)
    if name == "softplus":
        return T.softplus(x)
    return x


def mlp_apply(p: Mapping[str, T.Var], arch: MlpArchitecture, x: T.Var, prefix: str,
              return_hidden: bool = False):
    """Evaluate on a tape. ``x`` has shape ``(batch, input_dim)``."""
    if x.shape[-1] != arch.input_dim:
        raise ConfigurationError(
            f"{prefix}: input width {x.shape[-1]} != architecture input {arch.input_dim}"
        )
    h = x
    for i in range(arch.num_layers):
        if (i, True) in arch.skip_connections:
            h = T.concat([h, x], axis=-1)
        try:
            w = p[f"{prefix}.layer{i}.weight"]
            b = p[f"{prefix}.layer{i}.bias"]
        except KeyError as exc:
            raise ConfigurationError(f"missing parameter block {exc.args[0]!r}") from None
        if w.shape != (h.shape[-1], arch.layer_widths[i + 1]):
            raise ConfigurationError(f"{prefix}.layer{i}.weight has shape {w.shape}")
        h = activate(h @ w + b, arch.activations[i])
    return h


def mlp_forward(params: ParameterBlock, arch: MlpArchitecture, inputs, prefix: str = "mlp") -> np.ndarray:
    """Plain evaluation: a vector maps to a vector, a ``(batch, d)`` array row-wise."""
    x = np.asarray(inputs, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{prefix}: non-finite network input")
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != arch.input_dim:
        raise ConfigurationError(
            f"{prefix}: input width {x.shape[-1]} != architecture input {arch.input_dim}"
        )
    tape = T.Tape(record=False)
    out = mlp_apply(tape.watch(params), arch, tape.constant(x), prefix).value
    return out[0] if single else out
