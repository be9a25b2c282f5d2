"""Numerical kernel: tensors with reverse-mode differentiation, Adam, 3x3 SVD."""
from .adam import AdamState, adam_step
from .autodiff import (Tape, Tensor, add, as_tensor, dropout, mask_multiply, matmul,
                       maximum, mse, mul, propagate, relu, reshape, take, tsum)
from .checkpoint import load_checkpoint, save_checkpoint
from .linalg import svd3, svd3_batch


def backward(tape: Tape, loss: Tensor):
    """Gradients of ``loss`` for every parameter registered on ``tape``."""
    return tape.backward(loss)


__all__ = [
    "AdamState", "Tape", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "dropout", "load_checkpoint", "mask_multiply", "matmul", "maximum", "mse", "mul",
    "propagate", "relu", "reshape", "save_checkpoint", "svd3", "svd3_batch", "take", "tsum",
]
