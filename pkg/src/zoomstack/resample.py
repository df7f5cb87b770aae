"""Cross-scale linear operator ``A``, its adjoint, and patch-grid layout.

``A`` is separable: a 1-D matrix ``D`` (n_out x n_in) is applied along rows
and along columns, so ``A x = D_h x D_w^T`` per channel and the adjoint is
``D_h^T y D_w`` exactly, for either kernel.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .numerics import tensor as T
from .numerics.tensor import Tensor

KERNELS = ("average", "bicubic")


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@functools.lru_cache(maxsize=64)
def _matrix(kernel: str, factor: int, n_in: int) -> np.ndarray:
    n_out = n_in // factor
    m = np.zeros((n_out, n_in))
    if kernel == "average":
        for i in range(n_out):
            m[i, i * factor : (i + 1) * factor] = 1.0 / factor
    else:
        # Antialiased Keys cubic (kernel stretched by the factor), edge
        # replication at the borders.
        for i in range(n_out):
            center = (i + 0.5) * factor - 0.5
            lo = int(np.floor(center - 2 * factor))
            hi = int(np.ceil(center + 2 * factor))
            taps = np.arange(lo, hi + 1)
            w = _cubic((taps - center) / factor)
            w /= w.sum()
            for j, wj in zip(np.clip(taps, 0, n_in - 1), w):
                m[i, j] += wj
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class DownsampleOp:
    factor: int = 2
    kernel: str = "average"

    def __post_init__(self):
        f = self.factor
        if not isinstance(f, (int, np.integer)) or f < 2 or f & (f - 1):
            raise DomainError(f"downsampling factor must be a power of two >= 2, got {f}")
        if self.kernel not in KERNELS:
            raise DomainError(f"unknown kernel {self.kernel!r}")

    def matrix(self, n_in: int) -> np.ndarray:
        if n_in % self.factor:
            raise DimensionError(f"size {n_in} not divisible by factor {self.factor}")
        return _matrix(self.kernel, int(self.factor), int(n_in))


def _spatial_axes(ndim: int) -> tuple[int, int]:
    if ndim in (2, 3):
        return 0, 1
    if ndim == 4:
        return 1, 2
    raise DimensionError(f"expected an image of rank 2-4, got rank {ndim}")


def _separable(image: np.ndarray, dh: np.ndarray, dw: np.ndarray) -> np.ndarray:
    ah, aw = _spatial_axes(image.ndim)
    out = np.tensordot(dh, image, axes=([1], [ah]))  # spatial-h moved to axis 0
    out = np.moveaxis(out, 0, ah)
    out = np.tensordot(dw, out, axes=([1], [aw]))
    return np.moveaxis(out, 0, aw)


def apply(op: DownsampleOp, image) -> np.ndarray:
    """``A x``: downsample the spatial dims of ``image`` by ``op.factor``."""
    image = np.asarray(image, dtype=np.float64)
    ah, aw = _spatial_axes(image.ndim)
    return _separable(image, op.matrix(image.shape[ah]), op.matrix(image.shape[aw]))


def apply_transpose(op: DownsampleOp, image) -> np.ndarray:
    """``A^T y``: exact adjoint of :func:`apply`."""
    image = np.asarray(image, dtype=np.float64)
    ah, aw = _spatial_axes(image.ndim)
    f = op.factor
    dh = op.matrix(image.shape[ah] * f)
    dw = op.matrix(image.shape[aw] * f)
    return _separable(image, dh.T, dw.T)


def apply_t(op: DownsampleOp, image: Tensor) -> Tensor:
    """Differentiable :func:`apply` for an (N, H, W, C) tensor."""
    if image.ndim != 4:
        raise DimensionError("apply_t expects an (N, H, W, C) tensor")
    _, h, w, _ = image.shape
    dh, dw = op.matrix(h), op.matrix(w)
    x = image.transpose(0, 3, 1, 2)  # N C H W
    x = T.matmul(T.matmul(Tensor(dh), x), Tensor(dw.T))
    return x.transpose(0, 2, 3, 1)


# -- patch grids ------------------------------------------------------------------


@dataclass
class PatchGrid:
    """Row-major grid of equally shaped patches, ``patches[r * cols + c]``."""

    rows: int
    cols: int
    patches: np.ndarray  # (rows * cols, P, P, C)

    def __post_init__(self):
        if isinstance(self.patches, (list, tuple)):
            shapes = {np.shape(p) for p in self.patches}
            if len(shapes) != 1:
                raise DimensionError(f"heterogeneous patch shapes: {sorted(shapes)}")
            self.patches = np.stack([np.asarray(p, dtype=np.float64) for p in self.patches])
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.rows * self.cols != len(self.patches):
            raise DimensionError(f"{self.rows}x{self.cols} grid needs {self.rows * self.cols} patches, got {len(self.patches)}")


def arrange(grid: PatchGrid) -> np.ndarray:
    """Tile patches into one image in row-major spatial order."""
    p = grid.patches
    n, ph, pw = p.shape[:3]
    rest = p.shape[3:]
    img = p.reshape((grid.rows, grid.cols, ph, pw) + rest)
    img = np.swapaxes(img, 1, 2)
    return img.reshape((grid.rows * ph, grid.cols * pw) + rest)


def split(image, rows: int, cols: int) -> PatchGrid:
    """Inverse of :func:`arrange`."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h % rows or w % cols:
        raise DimensionError(f"{h}x{w} image cannot be split into a {rows}x{cols} grid")
    ph, pw = h // rows, w // cols
    rest = image.shape[2:]
    p = image.reshape((rows, ph, cols, pw) + rest)
    p = np.swapaxes(p, 1, 2).reshape((rows * cols, ph, pw) + rest)
    return PatchGrid(rows, cols, p)


def arrange_batch(patches, rows: int, cols: int):
    """:func:`arrange` for a stacked (rows*cols, P, P, C) array or tensor.

    Works on tensors too (differentiably), returning a (1, H, W, C) batch.
    """
    if isinstance(patches, Tensor):
        n, ph, pw, c = patches.shape
        x = patches.reshape(rows, cols, ph, pw, c).transpose(0, 2, 1, 3, 4)
        return x.reshape(1, rows * ph, cols * pw, c)
    return arrange(PatchGrid(rows, cols, patches))[None]


def split_batch(image: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`arrange_batch` for a (1, H, W, C) array."""
    return split(image[0], rows, cols).patches
