"""Flat parameter storage addressable by named sub-blocks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from abrdf.errors import ConfigurationError, NumericError


@dataclass
class ParameterBlock:
    """All learnable scalars in one float64 vector.

    ``layout`` is an ordered list of ``(name, shape)``; sub-blocks occupy
    consecutive, disjoint index ranges that together cover ``values``.
    """

    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]
    _offsets: dict[str, tuple[int, int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        self.layout = [(str(n), tuple(int(d) for d in s)) for n, s in self.layout]
        self._offsets = {}
        start = 0
        for name, shape in self.layout:
            if name in self._offsets:
                raise ConfigurationError(f"duplicate parameter block {name!r}")
            size = int(np.prod(shape, dtype=np.int64))
            self._offsets[name] = (start, start + size)
            start += size
        if start != self.values.size:
            raise ConfigurationError(
                f"layout covers {start} scalars but values has {self.values.size}"
            )
        self.check_finite()

    @classmethod
    def zeros(cls, layout) -> "ParameterBlock":
        total = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
        return cls(np.zeros(total), list(layout))

    def __len__(self) -> int:
        return self.values.size

    def __contains__(self, name: str) -> bool:
        return name in self._offsets

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def shape_of(self, name: str) -> tuple[int, ...]:
        return dict(self.layout)[name]

    def slice_of(self, name: str) -> slice:
        try:
            lo, hi = self._offsets[name]
        except KeyError:
            raise ConfigurationError(f"no parameter block named {name!r}") from None
        return slice(lo, hi)

    def view(self, name: str) -> np.ndarray:
        """Writable view of one sub-block in its declared shape."""
        return self.values[self.slice_of(name)].reshape(self.shape_of(name))

    def set(self, name: str, value) -> None:
        v = self.view(name)
        v[...] = value

    def copy(self) -> "ParameterBlock":
        return ParameterBlock(self.values.copy(), list(self.layout))

    def with_values(self, values: np.ndarray) -> "ParameterBlock":
        return ParameterBlock(values, list(self.layout))

    def block_of_index(self, i: int) -> str:
        for name, (lo, hi) in self._offsets.items():
            if lo <= i < hi:
                return name
        raise IndexError(i)

    def check_finite(self, what: str = "parameter") -> None:
        bad = ~np.isfinite(self.values)
        if bad.any():
            name = self.block_of_index(int(np.flatnonzero(bad)[0]))
            raise NumericError(f"non-finite {what} in block {name!r}")


def merge_blocks(*blocks: ParameterBlock, prefixes: list[str] | None = None) -> ParameterBlock:
    """Concatenate blocks, optionally prefixing each block's names with ``prefix.``."""
    layout: list[tuple[str, tuple[int, ...]]] = []
    values = []
    for i, b in enumerate(blocks):
        pre = f"{prefixes[i]}." if prefixes else ""
        layout.extend((pre + n, s) for n, s in b.layout)
        values.append(b.values)
    return ParameterBlock(np.concatenate(values) if values else np.zeros(0), layout)
