"""Dense float64 linear algebra and a minimal reverse-mode autodiff tape."""

from fedrane.numeric.linalg import inv_sqrt_psd, sqrt_psd_trace, sym_eig
from fedrane.numeric.tape import (
    Var,
    add,
    backward,
    exp,
    log,
    matmul,
    pearson,
    relu,
    row_softmax,
    scale,
    sumv,
)

__all__ = [
    "Var",
    "add",
    "backward",
    "exp",
    "inv_sqrt_psd",
    "log",
    "matmul",
    "pearson",
    "relu",
    "row_softmax",
    "scale",
    "sqrt_psd_trace",
    "sum",
    "sumv",
    "sym_eig",
]
