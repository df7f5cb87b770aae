"""End-to-end pipeline stages shared by the CLI and the acceptance suite.

Every stage is a function of (config, inputs); randomness comes from the
seeds in the config, so reruns are bitwise identical in single-thread mode.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .bundle import ModelBundle
from .cdm import CdmNet
from .codec import LearnedConvCodec, OrthogonalLinearCodec
from .config import ExperimentConfig, write_config
from .denoiser import DenoiserNet
from .errors import IndexingError
from .pyramid import EmbeddingGrid, PyramidDataset, build_dataset, toy_world
from .summarizer import SummarizerNet, pack_batch, pack_tokens
from .training import TrainConfig, encode_patches, param_digest, train_cdm, train_codec, train_ldm


def corpus(seed: int, count: int, size: int) -> np.ndarray:
    """``count`` toy-world images with seeds ``seed .. seed + count - 1``."""
    return np.stack([toy_world(seed + i, size) for i in range(count)])


def datasets(cfg: ExperimentConfig) -> tuple[PyramidDataset, PyramidDataset]:
    """Training pyramid and a held-out pyramid normalised with the training stats."""
    d = cfg.dataset
    train = build_dataset(list(corpus(d.seed, d.count, d.size)), d.patch, d.levels, d.cap_side)
    val = build_dataset(
        list(corpus(d.val_seed, d.val_count, d.size)), d.patch, d.levels, d.cap_side, normalization=train.normalization
    )
    return train, val


def val_dataset(cfg: ExperimentConfig, normalization) -> PyramidDataset:
    """Held-out pyramid under a given (checkpoint) normalisation."""
    d = cfg.dataset
    images = list(corpus(d.val_seed, d.val_count, d.size))
    return build_dataset(images, d.patch, d.levels, d.cap_side, normalization=normalization)


def make_codec(cfg: ExperimentConfig):
    c = cfg.codec
    if c.kind == "orthogonal":
        return OrthogonalLinearCodec(c.f_vae, c.latent_channels, seed=c.seed)
    return LearnedConvCodec(c.latent_channels, hidden=c.hidden, seed=c.seed)


def train_codec_stage(cfg: ExperimentConfig, train: PyramidDataset, log_path=None):
    codec = make_codec(cfg)
    if cfg.codec.kind == "learned":
        c = cfg.codec
        tc = TrainConfig(lr=c.lr, warmup=c.warmup, batch=c.batch, steps=c.steps, seed=cfg.seed, log_every=100)
        train_codec(train.patches, codec, tc, adjoint_weight=c.adjoint_weight, log_path=log_path)
    return codec


def new_networks(cfg: ExperimentConfig) -> tuple[SummarizerNet, DenoiserNet]:
    arch = cfg.arch()
    kw = dict(arch["denoiser"])
    kw["channels"] = tuple(kw["channels"])
    return SummarizerNet(**arch["summarizer"]), DenoiserNet(**kw)


def train_ldm_stage(cfg: ExperimentConfig, train: PyramidDataset, codec, latents=None, scales=None, log_path=None):
    """Fresh summarizer + denoiser trained jointly; ``scales`` restricts the records."""
    summ, den = new_networks(cfg)
    tc = cfg.training.ldm
    if scales is not None:
        tc = TrainConfig(**{**tc.to_json(), "scales": tuple(scales)})
    result = train_ldm(train, codec, den, summ, tc, latents=latents, log_path=log_path)
    return summ, den, result


def train_cdm_stage(cfg: ExperimentConfig, train: PyramidDataset, summarizer, frozen_digest=None, log_path=None):
    cdm = CdmNet(**cfg.arch()["cdm"])
    result = train_cdm(train, summarizer, cdm, cfg.training.cdm, frozen_digest=frozen_digest, log_path=log_path)
    return cdm, result


def train_all(cfg: ExperimentConfig, out_dir, with_cdm: bool = True) -> ModelBundle:
    """Codec, then LDM + summarizer, then CDM on the frozen summarizer.

    Writes ``models.zckp``, per-stage JSONL logs, the resolved config, a
    manifest and ``timings.json`` to ``out_dir``.  Wall times stay out of the
    checkpoint and manifest so reruns are bitwise identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.json", cfg)
    timings = {}
    t0 = time.perf_counter()
    train, _ = datasets(cfg)
    timings["dataset"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    codec = train_codec_stage(cfg, train, out / "codec_log.jsonl")
    timings["codec"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    latents = encode_patches(codec, train.patches)
    summ, den, res = train_ldm_stage(cfg, train, codec, latents, log_path=out / "ldm_log.jsonl")
    timings["ldm"] = time.perf_counter() - t0
    digest = param_digest(summ)
    cdm = None
    if with_cdm:
        t0 = time.perf_counter()
        cdm, _ = train_cdm_stage(cfg, train, summ, digest, out / "cdm_log.jsonl")
        timings["cdm"] = time.perf_counter() - t0
    meta = {
        "arch": cfg.arch(),
        "config": cfg.to_dict(),
        "summarizer_digest": digest,
        "drop_fraction": res.drop_fraction,
    }
    bundle = ModelBundle(codec, summ, den, cdm, train.normalization, meta)
    bundle.save(out / "models.zckp")
    (out / "manifest.json").write_text(json.dumps({"kind": "train", "seed": cfg.seed, **meta}, indent=2))
    (out / "timings.json").write_text(json.dumps(timings, indent=2))
    return bundle


# -- conditions from dataset records -------------------------------------------------------


def record_index(ds: PyramidDataset, source: int, scale: int, row: int, col: int) -> int:
    """Index of the record of ``source`` at ``scale`` in patch cell ``(row, col)``."""
    p = ds.patch_size
    hit = np.flatnonzero(
        (ds.sources == source) & (ds.scales == scale) & (ds.offsets[:, 0] == row * p) & (ds.offsets[:, 1] == col * p)
    )
    if hit.size == 0:
        raise IndexingError(f"no record for source {source}, scale {scale}, cell ({row}, {col})")
    return int(hit[0])


def record_tokens(summarizer: SummarizerNet, ds: PyramidDataset, idx) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(idx))
    slots, mask = pack_batch(ds.grids[idx], ds.grid_shape[idx], summarizer.cap)
    return summarizer(slots, mask, ds.scales[idx]).data


def grid_tokens(summarizer: SummarizerNet, grid: EmbeddingGrid) -> np.ndarray:
    """(1, n_tokens, H_c) tokens for a free-standing descriptor grid."""
    slots, mask = pack_tokens(grid, summarizer.cap)
    return summarizer(slots[None], mask[None], [grid.scale]).data


def joint_records(ds: PyramidDataset, source: int, detail_scale: int, context_scale: int, row: int = 0, col: int = 0):
    """Context record at ``(row, col)`` and the row-major detail records under it."""
    side = 2 ** (context_scale - detail_scale)
    ctx = record_index(ds, source, context_scale, row, col)
    details = [
        record_index(ds, source, detail_scale, row * side + a, col * side + b) for a in range(side) for b in range(side)
    ]
    return ctx, details


def descriptor_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between diagonal-Gaussian fits of two descriptor sets."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    sa, sb = a.std(axis=0), b.std(axis=0)
    return float(np.sum((ma - mb) ** 2) + np.sum((sa - sb) ** 2))


def tile_grids(u: EmbeddingGrid, rows: int, cols: int, tile_scale: int, cap_side: int = 4) -> list[EmbeddingGrid]:
    """Split a coarse descriptor grid into per-tile grids at a finer scale.

    Tile ``(a, b)`` takes the block of cells covering its footprint; when the
    coarse grid is too small for that, the covering cell is used.  The result
    is pooled to the tile scale's grid side.
    """
    side = min(2 ** (tile_scale - 1), cap_side)
    g = u.values
    out = []
    for a in range(rows):
        for b in range(cols):
            r0, r1 = a * g.shape[0] // rows, max((a + 1) * g.shape[0] // rows, a * g.shape[0] // rows + 1)
            c0, c1 = b * g.shape[1] // cols, max((b + 1) * g.shape[1] // cols, b * g.shape[1] // cols + 1)
            block = g[r0:r1, c0:c1]
            k = block.shape[0] // side if block.shape[0] >= side else 1
            if block.shape[0] > side:
                block = block.reshape(side, k, side, k, -1).mean(axis=(1, 3))
            elif block.shape[0] < side:
                block = np.repeat(np.repeat(block, side // block.shape[0], axis=0), side // block.shape[1], axis=1)
            out.append(EmbeddingGrid(block, tile_scale))
    return out


def tiles_tokens(summarizer: SummarizerNet, grids: list[EmbeddingGrid]) -> np.ndarray:
    return np.concatenate([grid_tokens(summarizer, g) for g in grids])
