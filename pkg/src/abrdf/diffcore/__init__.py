"""Minimal reverse-mode differentiation, MLPs and optimizer."""
from abrdf.diffcore.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from abrdf.diffcore.mlp import MlpArchitecture, glorot_init, mlp_apply, mlp_forward
from abrdf.diffcore.optim import OptimizerState, optimizer_step
from abrdf.diffcore.params import ParameterBlock, merge_blocks
from abrdf.diffcore.tape import Tape, Var

__all__ = [
    "Checkpoint",
    "MlpArchitecture",
    "OptimizerState",
    "ParameterBlock",
    "Tape",
    "Var",
    "glorot_init",
    "load_checkpoint",
    "merge_blocks",
    "mlp_apply",
    "mlp_forward",
    "optimizer_step",
    "save_checkpoint",
]


def backward(tape: Tape, loss: Var, loss_seed: float = 1.0):
    """Functional alias of :meth:`Tape.backward`."""
    return tape.backward(loss, loss_seed)
