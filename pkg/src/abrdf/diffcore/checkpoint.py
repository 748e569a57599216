"""Checkpoint container.

Layout on disk: the 7-byte header ``b"ABRDF1\\n"`` followed by an
uncompressed ``.npz`` archive with arrays ``values``, ``first_moment``,
``second_moment`` and ``meta`` (a UTF-8 JSON document holding the layout
table, step count, optimizer hyperparameters, scene transform and any extra
configuration).
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from abrdf.diffcore.optim import OptimizerState
from abrdf.diffcore.params import ParameterBlock
from abrdf.errors import ConfigurationError

MAGIC = b"ABRDF1\n"


@dataclass
class Checkpoint:
    params: ParameterBlock
    opt_state: OptimizerState
    transform: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def step_count(self) -> int:
        return self.opt_state.step_count


def save_checkpoint(path, params: ParameterBlock, opt_state: OptimizerState,
                    transform: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "format": "ABRDF1",
        "layout": [[n, list(s)] for n, s in params.layout],
        "step_count": int(opt_state.step_count),
        "optimizer": opt_state.hyperparameters,
        "transform": transform or {},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(
        buf,
        values=params.values,
        first_moment=opt_state.first_moment,
        second_moment=opt_state.second_moment,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ConfigurationError(f"{path}: not an ABRDF1 checkpoint")
    with np.load(io.BytesIO(raw[len(MAGIC):]), allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode("utf-8"))
        layout = [(n, tuple(s)) for n, s in meta["layout"]]
        params = ParameterBlock(z["values"].copy(), layout)
        state = OptimizerState(
            z["first_moment"].copy(), z["second_moment"].copy(),
            int(meta["step_count"]), **meta["optimizer"],
        )
    return Checkpoint(params, state, meta.get("transform", {}), meta.get("extra", {}))
