"""Minimal float64 numerical kernel: tape autodiff, layers, parameters, Adam."""
import numpy as np

from . import autodiff
from .autodiff import Tape, Var
from .layers import dense, gmm_nll, gru_step, softmax
from .optim import Adam
from .params import ParamStore, load_params, save_params


def backward(tape: Tape, loss: Var, bound: dict[str, Var]) -> dict:
    """Gradient of ``loss`` for every bound parameter, keyed by name."""
    names = list(bound)
    grads = tape.gradient(loss, [bound[n] for n in names])
    return dict(zip(names, grads))


def jacobian(tape: Tape, outputs: Var, bound: dict[str, Var], names) -> "np.ndarray":
    """Rows: flattened outputs; columns: concatenated flattened ``names``."""
    missing = [n for n in names if n not in bound]
    if missing:
        raise KeyError(f"unknown parameter names {missing}")
    return tape.jacobian(outputs, [bound[n] for n in names])


__all__ = [
    "autodiff", "Tape", "Var", "dense", "gru_step", "softmax", "gmm_nll", "Adam",
    "ParamStore", "save_params", "load_params", "backward", "jacobian",
]
