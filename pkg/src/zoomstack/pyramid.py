"""Multi-scale training data: toy corpus, pyramids, descriptors and records.

A scale-``s`` patch (``s = 1`` finest) covers ``2^(s-1) x 2^(s-1)`` base
patches.  It is paired with the grid of (normalised) base-scale descriptors
over that footprint, average-pooled down to ``cap_side x cap_side`` when
larger.  Extraction is aligned: offsets are multiples of ``P * 2^(s-1)`` in
base pixels, so no descriptor ever straddles a patch boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from .errors import ContractViolation, DimensionError, DomainError, IndexingError
from .numerics import rng as rngmod
from .numerics.io import load_zten, save_zten
from .resample import DownsampleOp, apply

DESCRIPTOR_DIM = 32
N_TEXTURES = 3


@dataclass(frozen=True)
class ScaleLevel:
    s: int

    @property
    def pixel_span(self) -> int:
        return 2 ** (self.s - 1)


@dataclass
class EmbeddingGrid:
    values: np.ndarray  # (rows, cols, D)
    scale: int

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


@dataclass
class PyramidRecord:
    patch: np.ndarray  # (P, P, 3)
    grid: EmbeddingGrid
    source: int
    offset: tuple[int, int]  # top-left, in pixels of the patch's own level


# -- toy corpus -------------------------------------------------------------------

# Per texture: base colour, stripe period (px), stripe angle (rad), stripe
# amplitude, dot density (per px), speckle amplitude.
_TEXTURES = [
    dict(color=(0.86, 0.56, 0.72), period=6.0, angle=0.0, stripe=0.10, dots=0.004, speckle=0.015),
    dict(color=(0.58, 0.36, 0.66), period=10.0, angle=np.pi / 3, stripe=0.08, dots=0.012, speckle=0.02),
    dict(color=(0.93, 0.82, 0.86), period=16.0, angle=-np.pi / 4, stripe=0.03, dots=0.0015, speckle=0.01),
]


def _smooth_field(r, shape, sigma):
    f = ndimage.gaussian_filter(r.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def toy_world(seed: int, size: int, texture: int | None = None) -> np.ndarray:
    """Procedural (size, size, 3) image in [0, 1].

    Coarse soft regions pick one of three textures; each texture fixes colour,
    stripe frequency/orientation, nucleus-like dot density and speckle, so the
    coarse layout predicts fine statistics.  ``texture`` forces one class.
    """
    if size <= 0 or size % 8:
        raise DimensionError(f"toy_world size must be a positive multiple of 8, got {size}")
    r = rngmod.stream(seed, "data")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if texture is None:
        fields = np.stack([_smooth_field(r, (size, size), size / 10.0) for _ in range(N_TEXTURES)])
        w = np.exp(4.0 * fields)
        weights = w / w.sum(axis=0, keepdims=True)
    else:
        if not 0 <= texture < N_TEXTURES:
            raise DomainError(f"texture must be in [0, {N_TEXTURES})")
        weights = np.zeros((N_TEXTURES, size, size))
        weights[texture] = 1.0
        for _ in range(N_TEXTURES):
            r.standard_normal((size, size))  # keep stream position independent of mode
    mid = _smooth_field(r, (size, size), size / 40.0)
    img = np.zeros((size, size, 3))
    for k, tex in enumerate(_TEXTURES):
        angle = tex["angle"] + r.uniform(-0.2, 0.2)
        phase = r.uniform(0, 2 * np.pi)
        color = np.asarray(tex["color"]) + r.uniform(-0.04, 0.04, size=3)
        wave = np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / tex["period"] + phase)
        dots = (r.random((size, size)) < tex["dots"]).astype(np.float64)
        dots = np.minimum(ndimage.gaussian_filter(dots, 1.2, mode="wrap") * 9.0, 1.0)
        speck = ndimage.gaussian_filter(r.standard_normal((size, size)), 0.7, mode="wrap")
        layer = color[None, None, :] * (1.0 + 0.08 * mid[..., None])
        layer = layer - tex["stripe"] * wave[..., None] * np.array([0.8, 1.0, 0.6])
        layer = layer * (1.0 - 0.55 * dots[..., None] * np.array([0.7, 0.9, 0.35]))
        layer = layer + tex["speckle"] * 2.2 * speck[..., None]
        img += weights[k][..., None] * layer
    return np.clip(img, 0.0, 1.0)


def band_energies(image: np.ndarray, octaves: int = 5) -> np.ndarray:
    """Fraction of non-DC spectral energy in each radial octave, finest first."""
    lum = np.asarray(image, dtype=np.float64)
    if lum.ndim == 3:
        lum = lum.mean(axis=2)
    lum = lum - lum.mean()
    power = np.abs(np.fft.fft2(lum)) ** 2
    fy = np.fft.fftfreq(lum.shape[0])[:, None]
    fx = np.fft.fftfreq(lum.shape[1])[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    total = power.sum()
    out = []
    hi = np.inf
    lo = 0.25
    for _ in range(octaves):
        mask = (radius >= lo) & (radius < hi)
        out.append(power[mask].sum() / total)
        hi, lo = lo, lo / 2
    return np.array(out)


# -- descriptors ---------------------------------------------------------------

_DCT_INDEX = [(u, v) for u in range(3) for v in range(3) if (u, v) != (0, 0)]


def featurize(patch: np.ndarray) -> np.ndarray:
    """Deterministic 32-dim descriptor of a (P, P, 3) patch.

    Layout: channel means (3), channel stds (3), the 8 lowest non-DC
    orthonormal DCT-II coefficients per channel (24, row-major over
    ``(u, v)`` with ``u`` the vertical frequency), mean absolute luminance
    gradient along x then y (2).
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise DimensionError(f"featurize expects (P, P, 3), got {patch.shape}")
    means = patch.mean(axis=(0, 1))
    stds = patch.std(axis=(0, 1))
    coeffs = sfft.dctn(patch, type=2, norm="ortho", axes=(0, 1))
    dct = np.array([coeffs[u, v, c] for c in range(3) for (u, v) in _DCT_INDEX])
    lum = patch.mean(axis=2)
    gx = np.abs(np.diff(lum, axis=1)).mean()
    gy = np.abs(np.diff(lum, axis=0)).mean()
    return np.concatenate([means, stds, dct, [gx, gy]])


def descriptor_transpose_permutation() -> np.ndarray:
    """Index map taking the descriptor of a patch to that of its transpose."""
    perm = list(range(6))
    for c in range(3):
        for (u, v) in _DCT_INDEX:
            perm.append(6 + 8 * c + _DCT_INDEX.index((v, u)))
    perm += [31, 30]
    return np.array(perm)


# -- pyramids and records ---------------------------------------------------------


def center_crop(image: np.ndarray, multiple: int) -> np.ndarray:
    h, w = image.shape[:2]
    nh, nw = (h // multiple) * multiple, (w // multiple) * multiple
    if nh == 0 or nw == 0:
        raise DimensionError(f"image {h}x{w} smaller than one conforming block of {multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return image[top : top + nh, left : left + nw]


def build_pyramid(image, levels: int, patch_size: int | None = None) -> list[np.ndarray]:
    image = np.asarray(image, dtype=np.float64)
    if levels < 1:
        raise DomainError("levels must be >= 1")
    unit = 2 ** (levels - 1) * (patch_size or 1)
    if image.shape[0] % unit or image.shape[1] % unit:
        raise DimensionError(f"image {image.shape[:2]} not divisible by {unit}")
    out = [image]
    op = DownsampleOp(2)
    for _ in range(levels - 1):
        out.append(apply(op, out[-1]))
    return out


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, desc: np.ndarray) -> np.ndarray:
        return (desc - self.mean) / self.std

    @classmethod
    def fit(cls, descriptors: np.ndarray) -> "Normalization":
        d = descriptors.reshape(-1, descriptors.shape[-1])
        std = d.std(axis=0)
        return cls(d.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    @classmethod
    def identity(cls, dim: int = DESCRIPTOR_DIM) -> "Normalization":
        return cls(np.zeros(dim), np.ones(dim))


def base_descriptors(image: np.ndarray, patch_size: int, featurizer: Callable = featurize) -> np.ndarray:
    """(H/P, W/P, D) grid of raw descriptors of the aligned base patches."""
    h, w = image.shape[:2]
    gh, gw = h // patch_size, w // patch_size
    out = []
    for i in range(gh):
        row = []
        for j in range(gw):
            row.append(featurizer(image[i * patch_size : (i + 1) * patch_size, j * patch_size : (j + 1) * patch_size]))
        out.append(row)
    return np.asarray(out)


def pool_grid(values: np.ndarray, cap_side: int) -> np.ndarray:
    """Average-pool a (r, c, D) grid down to at most ``cap_side`` per side."""
    r, c, d = values.shape
    fr = max(1, r // cap_side) if r > cap_side else 1
    fc = max(1, c // cap_side) if c > cap_side else 1
    if r % fr or c % fc:
        raise DimensionError(f"grid {r}x{c} cannot be pooled evenly to cap {cap_side}")
    return values.reshape(r // fr, fr, c // fc, fc, d).mean(axis=(1, 3))


def extract_records(
    pyramid: Sequence[np.ndarray],
    patch_size: int,
    featurizer: Callable = featurize,
    cap_side: int = 4,
    normalization: Normalization | None = None,
    source: int = 0,
    base_grid: np.ndarray | None = None,
) -> list[PyramidRecord]:
    """Aligned patches at every level, each paired with its descriptor grid."""
    P = patch_size
    if base_grid is None:
        base_grid = base_descriptors(pyramid[0], P, featurizer)
    if normalization is not None:
        base_grid = normalization(base_grid)
    records = []
    for level, img in enumerate(pyramid, start=1):
        h, w = img.shape[:2]
        if h % P or w % P:
            raise DimensionError(f"level {level} ({h}x{w}) not divisible by patch size {P}")
        span = 2 ** (level - 1)
        for i in range(h // P):
            for j in range(w // P):
                r0, c0 = i * span, j * span
                if r0 + span > base_grid.shape[0] or c0 + span > base_grid.shape[1]:
                    raise IndexingError(f"footprint of level-{level} patch ({i},{j}) leaves the image")
                grid = base_grid[r0 : r0 + span, c0 : c0 + span]
                if span > cap_side:
                    grid = pool_grid(grid, cap_side)
                records.append(
                    PyramidRecord(
                        patch=img[i * P : (i + 1) * P, j * P : (j + 1) * P],
                        grid=EmbeddingGrid(np.array(grid), level),
                        source=source,
                        offset=(i * P, j * P),
                    )
                )
    return records


# -- dataset ------------------------------------------------------------------


@dataclass
class PyramidDataset:
    """Flat, array-backed collection of records with frozen normalisation."""

    patch_size: int
    levels: int
    cap_side: int
    normalization: Normalization
    patches: np.ndarray  # (N, P, P, 3)
    grids: np.ndarray  # (N, cap, cap, D), zero outside each record's grid
    grid_shape: np.ndarray  # (N, 2)
    scales: np.ndarray  # (N,)
    sources: np.ndarray  # (N,)
    offsets: np.ndarray  # (N, 2)
    source_paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.scales)

    @property
    def dim(self) -> int:
        return self.grids.shape[-1]

    @property
    def cap(self) -> int:
        return self.cap_side * self.cap_side

    def grid(self, i: int) -> EmbeddingGrid:
        r, c = self.grid_shape[i]
        return EmbeddingGrid(self.grids[i, :r, :c].copy(), int(self.scales[i]))

    def record(self, i: int) -> PyramidRecord:
        return PyramidRecord(self.patches[i], self.grid(i), int(self.sources[i]), tuple(self.offsets[i]))

    def indices(self, scale: int | None = None, sources=None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if scale is not None:
            keep &= self.scales == scale
        if sources is not None:
            keep &= np.isin(self.sources, np.asarray(list(sources)))
        return np.nonzero(keep)[0]

    def subset(self, idx) -> "PyramidDataset":
        idx = np.asarray(idx)
        return PyramidDataset(
            self.patch_size, self.levels, self.cap_side, self.normalization,
            self.patches[idx], self.grids[idx], self.grid_shape[idx], self.scales[idx],
            self.sources[idx], self.offsets[idx], list(self.source_paths),
        )

    def counts(self) -> dict[int, int]:
        return {s: int((self.scales == s).sum()) for s in range(1, self.levels + 1)}

    # -- persistence ------------------------------------------------------------
    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        scales = {}
        for s in range(1, self.levels + 1):
            idx = self.indices(scale=s)
            side = min(2 ** (s - 1), self.cap_side)
            files = {
                "patches": f"patches_s{s}.zten",
                "grids": f"grids_s{s}.zten",
                "index": f"index_s{s}.zten",
            }
            save_zten(out / files["patches"], self.patches[idx])
            save_zten(out / files["grids"], self.grids[idx, :side, :side])
            index = np.column_stack([self.sources[idx], self.offsets[idx]]).astype(np.float64)
            save_zten(out / files["index"], index.reshape(len(idx), 3))
            scales[str(s)] = {"count": int(len(idx)), "grid_side": side, **files}
        manifest = {
            "format": "zoomstack-pyramid/1",
            "patch_size": self.patch_size,
            "levels": self.levels,
            "cap_side": self.cap_side,
            "cap": self.cap,
            "dim": self.dim,
            "normalization": {"mean": self.normalization.mean.tolist(), "std": self.normalization.std.tolist()},
            "sources": [str(p) for p in self.source_paths],
            "scales": scales,
        }
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "PyramidDataset":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        m = json.loads(path.read_text())
        if m.get("format") != "zoomstack-pyramid/1":
            raise ContractViolation(f"{path}: not a pyramid manifest")
        base = path.parent
        P, cap_side, dim = m["patch_size"], m["cap_side"], m["dim"]
        parts = {k: [] for k in ("patches", "grids", "shape", "scales", "sources", "offsets")}
        for s in range(1, m["levels"] + 1):
            info = m["scales"][str(s)]
            n = info["count"]
            if n == 0:
                continue
            patches = load_zten(base / info["patches"])
            g = load_zten(base / info["grids"])
            index = load_zten(base / info["index"]).astype(np.int64)
            side = info["grid_side"]
            padded = np.zeros((n, cap_side, cap_side, dim))
            padded[:, :side, :side] = g
            parts["patches"].append(patches)
            parts["grids"].append(padded)
            parts["shape"].append(np.full((n, 2), side))
            parts["scales"].append(np.full(n, s))
            parts["sources"].append(index[:, 0])
            parts["offsets"].append(index[:, 1:])
        norm = Normalization(np.asarray(m["normalization"]["mean"]), np.asarray(m["normalization"]["std"]))
        return cls(
            P, m["levels"], cap_side, norm,
            np.concatenate(parts["patches"]), np.concatenate(parts["grids"]),
            np.concatenate(parts["shape"]), np.concatenate(parts["scales"]),
            np.concatenate(parts["sources"]), np.concatenate(parts["offsets"]),
            list(m.get("sources", [])),
        )


def build_dataset(
    images: Sequence[np.ndarray],
    patch_size: int = 32,
    levels: int = 4,
    cap_side: int = 4,
    featurizer: Callable = featurize,
    normalization: Normalization | None = None,
    source_paths: Sequence = (),
) -> PyramidDataset:
    """Pyramids + records for a corpus; normalisation is fitted on all base
    descriptors unless one is supplied (e.g. the training set's)."""
    unit = 2 ** (levels - 1) * patch_size
    images = [center_crop(np.asarray(im, dtype=np.float64), unit) for im in images]
    bases = [base_descriptors(im, patch_size, featurizer) for im in images]
    if normalization is None:
        normalization = Normalization.fit(np.concatenate([b.reshape(-1, b.shape[-1]) for b in bases]))
    recs: list[PyramidRecord] = []
    for k, (im, base) in enumerate(zip(images, bases)):
        pyr = build_pyramid(im, levels, patch_size)
        recs.extend(extract_records(pyr, patch_size, featurizer, cap_side, normalization, source=k, base_grid=base))
    return dataset_from_records(recs, patch_size, levels, cap_side, normalization, source_paths)


def dataset_from_records(recs, patch_size, levels, cap_side, normalization, source_paths=()) -> PyramidDataset:
    n = len(recs)
    dim = recs[0].grid.dim
    grids = np.zeros((n, cap_side, cap_side, dim))
    shape = np.zeros((n, 2), dtype=np.int64)
    for i, rec in enumerate(recs):
        r, c = rec.grid.rows, rec.grid.cols
        grids[i, :r, :c] = rec.grid.values
        shape[i] = (r, c)
    return PyramidDataset(
        patch_size, levels, cap_side, normalization,
        np.stack([r.patch for r in recs]), grids, shape,
        np.array([r.grid.scale for r in recs]), np.array([r.source for r in recs]),
        np.array([r.offset for r in recs]), list(map(str, source_paths)),
    )
