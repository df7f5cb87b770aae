"""Tensor arithmetic, reverse-mode differentiation, layers, RNG streams and file formats."""

from . import nn, rng
from .io import load_checkpoint, load_zten, save_checkpoint, save_zten
from .optim import Adam, warmup_constant
from .tensor import Tape, Tensor, as_tensor, grad

__all__ = [
    "Tensor",
    "Tape",
    "grad",
    "as_tensor",
    "nn",
    "rng",
    "Adam",
    "warmup_constant",
    "save_zten",
    "load_zten",
    "save_checkpoint",
    "load_checkpoint",
    "check_gradient",
]


def check_gradient(f, inputs, h: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central differences.

    Relative error per input is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` in the
    Euclidean norm; the maximum over inputs is returned.
    """
    import numpy as np

    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    analytic = grad(f, inputs)
    worst = 0.0
    for i, x in enumerate(inputs):
        fd = np.zeros_like(x)
        flat = x.reshape(-1)
        out = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(*[Tensor(a) for a in inputs]).item()
            flat[j] = orig - h
            fm = f(*[Tensor(a) for a in inputs]).item()
            flat[j] = orig
            out[j] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(analytic[i]), np.linalg.norm(fd), 1e-30)
        worst = max(worst, float(np.linalg.norm(analytic[i] - fd) / denom))
    return worst
