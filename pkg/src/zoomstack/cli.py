"""``zoomstack`` command line.

Every command is a function of (config, input files, seed).  Each writes its
outputs, the fully resolved config (``config.json``) and a run manifest
(``manifest.json``) into ``--out``.  Exit codes: 0 success, 1 failed
verification check, 2 config error, 3 contract violation, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import experiment as X
from .bundle import ModelBundle
from .cdm import sample_token_arrays
from .config import ExperimentConfig, load_config, resolve_seed, write_config
from .denoiser import extract_features
from .errors import ConfigError, ContractViolation, DimensionError, ZoomstackError
from .images import load_ppm, save_ppm
from .inversion import infer_conditions, save_inversion
from .numerics import rng as rngmod
from .numerics.io import load_zten, save_zten
from .pyramid import EmbeddingGrid, PyramidDataset, build_dataset
from .resample import arrange
from .sampler import (
    ddim_sample,
    denoiser_predictor,
    joint_multiscale_sample,
    run_manifest,
    super_resolve,
    write_manifest,
)
from .schedule import NoiseSchedule
from .training import encode_patches, param_digest
from .verify import SUITES, suite


# -- helpers ---------------------------------------------------------------------------


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bundle(path, *parts) -> ModelBundle:
    if not Path(path).exists():
        raise ContractViolation(f"checkpoint {path} does not exist")
    b = ModelBundle.load(path)
    missing = [p for p in parts if getattr(b, p) is None]
    if missing:
        raise ContractViolation(f"checkpoint {path} lacks {', '.join(missing)}")
    return b


def _image(path) -> np.ndarray:
    if not Path(path).exists():
        raise ContractViolation(f"input image {path} does not exist")
    return load_ppm(path)


def _grid(path, scale: int | None = None) -> EmbeddingGrid:
    """Descriptor grid from a ZTEN file; its scale comes from the sidecar if any."""
    path = Path(path)
    if not path.exists():
        raise ContractViolation(f"grid file {path} does not exist")
    values = load_zten(path)
    side = path.with_suffix(path.suffix + ".json")
    if side.exists():
        scale = json.loads(side.read_text()).get("scale", scale)
    if scale is None:
        raise ConfigError(f"grid {path} has no sidecar and no scale was given")
    if values.ndim != 3:
        raise DimensionError(f"grid {path} must be (rows, cols, dim), got {values.shape}")
    return EmbeddingGrid(values, int(scale))


def _training_data(args, cfg: ExperimentConfig, normalization=None) -> PyramidDataset:
    if getattr(args, "data", None):
        ds = PyramidDataset.load(args.data)
    else:
        ds = X.datasets(cfg)[0]
    if normalization is not None and not (
        np.array_equal(ds.normalization.mean, normalization.mean) and np.array_equal(ds.normalization.std, normalization.std)
    ):
        raise ContractViolation("dataset normalisation differs from the checkpoint's")
    return ds


def _check_scale(cfg: ExperimentConfig, scale: int, what: str = "scale"):
    if not 1 <= scale <= cfg.dataset.levels:
        raise ConfigError(f"{what} {scale} outside [1, {cfg.dataset.levels}]")


def _latent_hw(codec, cfg: ExperimentConfig) -> tuple[int, int]:
    h, w, _ = codec.latent_shape(cfg.dataset.patch, cfg.dataset.patch)
    return h, w


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    return {"arch": cfg.arch(), "config": cfg.to_dict(), **extra}


# -- corpus / pyramid --------------------------------------------------------------------


def cmd_corpus(args, cfg: ExperimentConfig) -> dict:
    out = _out(args)
    count = args.count if args.count is not None else cfg.dataset.count
    size = args.size if args.size is not None else cfg.dataset.size
    names = []
    for i, image in enumerate(X.corpus(cfg.seed, count, size)):
        name = f"img_{i:04d}.ppm"
        save_ppm(out / name, image)
        names.append(name)
    return {"kind": "corpus", "seed": cfg.seed, "count": count, "size": size, "images": names}


def cmd_pyramid(args, cfg: ExperimentConfig) -> dict:
    src = Path(args.inp)
    paths = sorted(src.glob("*.ppm")) if src.is_dir() else [src]
    if not paths:
        raise ContractViolation(f"no PPM images under {src}")
    levels = args.levels if args.levels is not None else cfg.dataset.levels
    patch = args.patch if args.patch is not None else cfg.dataset.patch
    ds = build_dataset([load_ppm(p) for p in paths], patch, levels, cfg.dataset.cap_side, source_paths=paths)
    out = _out(args)
    ds.save(out / "pyramid")
    return {"kind": "pyramid", "levels": levels, "patch": patch, "counts": ds.counts(), "dataset": "pyramid/manifest.json"}


# -- training ------------------------------------------------------------------------------


def cmd_train(args, cfg: ExperimentConfig) -> dict:
    out = _out(args)
    what = args.what
    if what == "all":
        bundle = X.train_all(cfg, out)
        return {"kind": "train", "stage": "all", "checkpoint": "models.zckp", "parts": bundle.meta.get("parts", [])}
    if what == "codec":
        ds = _training_data(args, cfg)
        codec = X.train_codec_stage(cfg, ds, out / "codec_log.jsonl")
        ModelBundle(codec, normalization=ds.normalization, meta=_meta(cfg)).save(out / "models.zckp")
        return {"kind": "train", "stage": "codec", "checkpoint": "models.zckp"}
    if what == "ldm":
        if not args.codec:
            raise ConfigError("train ldm needs --codec CKPT")
        codec = _bundle(args.codec).codec
        ds = _training_data(args, cfg)
        summ, den, res = X.train_ldm_stage(cfg, ds, codec, encode_patches(codec, ds.patches), log_path=out / "ldm_log.jsonl")
        meta = _meta(cfg, summarizer_digest=param_digest(summ), drop_fraction=res.drop_fraction)
        ModelBundle(codec, summ, den, None, ds.normalization, meta).save(out / "models.zckp")
        return {"kind": "train", "stage": "ldm", "checkpoint": "models.zckp", "drop_fraction": res.drop_fraction}
    if what == "cdm":
        if not args.ckpt:
            raise ConfigError("train cdm needs --ckpt CKPT")
        b = _bundle(args.ckpt, "summarizer", "denoiser")
        ds = _training_data(args, cfg, b.normalization)
        digest = (b.meta or {}).get("summarizer_digest")
        cdm, _ = X.train_cdm_stage(cfg, ds, b.summarizer, digest, out / "cdm_log.jsonl")
        meta = dict(b.meta or {})
        meta["cdm_config"] = cfg.to_dict()
        meta["arch"] = {**meta.get("arch", {}), "cdm": cfg.arch()["cdm"]}
        ModelBundle(b.codec, b.summarizer, b.denoiser, cdm, b.normalization, meta).save(out / "models.zckp")
        return {"kind": "train", "stage": "cdm", "checkpoint": "models.zckp"}
    raise ConfigError(f"unknown training stage {what!r}")


# -- sampling ------------------------------------------------------------------------------


def cmd_sample_patch(args, cfg: ExperimentConfig) -> dict:
    _check_scale(cfg, args.scale)
    if args.cdm and args.grid:
        raise ConfigError("--cdm and --grid are mutually exclusive")
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    b = _bundle(args.ckpt, "summarizer", "denoiser", *(("cdm",) if args.cdm else ()))
    out = _out(args)
    s = NoiseSchedule()
    tokens, source = None, "unconditional"
    if args.cdm:
        tokens, source = sample_token_arrays(b.cdm, args.scale, args.n, cfg.sampler.steps, seed=cfg.seed, s=s), "cdm"
    elif args.grid:
        g = _grid(args.grid, args.scale)
        if g.scale != args.scale:
            raise ContractViolation(f"grid scale {g.scale} != --scale {args.scale}")
        tokens, source = np.repeat(X.grid_tokens(b.summarizer, g), args.n, axis=0), "grid"
    eps = denoiser_predictor(b.denoiser, tokens, cfg.sampler.w)
    shape = (args.n,) + b.codec.latent_shape(cfg.dataset.patch, cfg.dataset.patch)
    z = ddim_sample(eps, s, shape, cfg.sampler.steps, cfg.sampler.eta, seed=cfg.seed)
    images = b.codec.decode(z)
    names = []
    for i, im in enumerate(images):
        names.append(f"sample_{i:03d}.ppm")
        save_ppm(out / names[-1], im)
    return {"kind": "sample-patch", "seed": cfg.seed, "scale": args.scale, "condition": source, "images": names}


def _joint_tokens(args, cfg: ExperimentConfig, b: ModelBundle, side: int):
    if args.cdm:
        ctx = sample_token_arrays(b.cdm, args.context_scale, 1, cfg.sampler.steps, seed=cfg.seed)
        det = sample_token_arrays(b.cdm, args.detail_scale, side * side, cfg.sampler.steps, seed=cfg.seed + 1)
        return det, ctx, {"condition": "cdm"}
    ds = X.val_dataset(cfg, b.normalization)
    ci, di = X.joint_records(ds, args.source, args.detail_scale, args.context_scale, args.row, args.col)
    return (
        X.record_tokens(b.summarizer, ds, di),
        X.record_tokens(b.summarizer, ds, ci),
        {"condition": "dataset", "source": args.source, "context_record": ci, "detail_records": di},
    )


def cmd_sample_joint(args, cfg: ExperimentConfig) -> dict:
    _check_scale(cfg, args.detail_scale, "detail scale")
    _check_scale(cfg, args.context_scale, "context scale")
    gap = args.context_scale - args.detail_scale
    if gap < 1:
        raise ConfigError("--context-scale must be coarser than --detail-scale")
    b = _bundle(args.ckpt, "summarizer", "denoiser", *(("cdm",) if args.cdm else ()))
    out = _out(args)
    det_tok, ctx_tok, cond = _joint_tokens(args, cfg, b, 2**gap)
    res = joint_multiscale_sample(
        denoiser_predictor(b.denoiser, det_tok, cfg.sampler.w),
        denoiser_predictor(b.denoiser, ctx_tok, cfg.sampler.w),
        b.codec,
        gap,
        cfg.sampler,
        seed=cfg.seed,
        latent_hw=_latent_hw(b.codec, cfg),
    )
    save_ppm(out / "detail.ppm", arrange(res.details))
    save_ppm(out / "context.ppm", res.context)
    print(f"residual_rmse {res.residual_rmse:.6f}")
    return run_manifest(
        "sample-joint",
        cfg.sampler,
        cfg.seed,
        res.residual_rmse,
        res.trajectory,
        detail_scale=args.detail_scale,
        context_scale=args.context_scale,
        images=["detail.ppm", "context.ppm"],
        **cond,
    )


# -- super-resolution / inversion / features -------------------------------------------------


def _factor_gap(factor: int) -> int:
    gap = int(round(np.log2(factor))) if factor > 0 else -1
    if gap < 1 or 2**gap != factor:
        raise ConfigError(f"--factor must be a power of two >= 2, got {factor}")
    return gap


def cmd_superres(args, cfg: ExperimentConfig) -> dict:
    modes = [m for m in ("invert", "grid", "uncond") if getattr(args, m)]
    if len(modes) > 1:
        raise ConfigError("choose at most one of --invert, --grid, --uncond")
    mode = modes[0] if modes else "invert"
    gap = _factor_gap(args.factor)
    tile_scale = args.scale - gap
    _check_scale(cfg, args.scale)
    _check_scale(cfg, tile_scale, "tile scale")
    low = _image(args.inp)
    patch = cfg.dataset.patch
    h, w = low.shape[:2]
    if (h * args.factor) % patch or (w * args.factor) % patch:
        raise DimensionError(f"{h}x{w} x{args.factor} does not tile into {patch}-pixel patches")
    rows, cols = h * args.factor // patch, w * args.factor // patch
    b = _bundle(args.ckpt, "summarizer", "denoiser")
    out = _out(args)
    extra = {}
    if mode == "uncond":
        tokens = None
    else:
        if mode == "invert":
            inv = infer_conditions(b.denoiser, b.summarizer, b.codec, low, args.scale, cfg.inversion, cap_side=cfg.dataset.cap_side)
            save_inversion(out / "grid.zten", inv, cfg.inversion)
            u = inv.grid
            extra["inversion_final_loss"] = inv.losses[-1]
        else:
            u = _grid(args.grid, args.scale)
        tokens = X.tiles_tokens(b.summarizer, X.tile_grids(u, rows, cols, tile_scale, cfg.dataset.cap_side))
    w = cfg.inversion.w if mode == "invert" else cfg.sampler.w
    res = super_resolve(denoiser_predictor(b.denoiser, tokens, w), b.codec, low, args.factor, cfg.sampler, patch, seed=cfg.seed)
    save_ppm(out / "superres.ppm", res.image)
    print(f"residual_rmse {res.residual_rmse:.6f}")
    return run_manifest(
        "superres", cfg.sampler, cfg.seed, res.residual_rmse, res.trajectory,
        mode=mode, factor=args.factor, scale=args.scale, images=["superres.ppm"], **extra,
    )


def cmd_invert(args, cfg: ExperimentConfig) -> dict:
    _check_scale(cfg, args.scale)
    image = _image(args.inp)
    b = _bundle(args.ckpt, "summarizer", "denoiser")
    out = _out(args)
    inv = infer_conditions(b.denoiser, b.summarizer, b.codec, image, args.scale, cfg.inversion, cap_side=cfg.dataset.cap_side)
    save_inversion(out / "grid.zten", inv, cfg.inversion)
    return {"kind": "invert", "seed": cfg.inversion.seed, "scale": args.scale, "grid": "grid.zten", "final_loss": inv.losses[-1]}


def cmd_features(args, cfg: ExperimentConfig) -> dict:
    _check_scale(cfg, args.scale)
    image = _image(args.inp)
    b = _bundle(args.ckpt, "summarizer", "denoiser")
    out = _out(args)
    s = NoiseSchedule()
    s.check_t(args.t)
    z0 = b.codec.encode(image)
    ab = s.alpha_bar[args.t]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * rngmod.stream(cfg.seed, "noise").standard_normal(z0.shape)
    tokens = X.grid_tokens(b.summarizer, _grid(args.grid, args.scale)) if args.grid else None
    feats = extract_features(b.denoiser, z_t, args.t, tokens[0] if tokens is not None else None, args.block)
    save_zten(out / "features.zten", feats)
    return {"kind": "features", "seed": cfg.seed, "scale": args.scale, "block": args.block, "t": args.t, "length": int(feats.shape[-1])}


# -- verification ----------------------------------------------------------------------------


def cmd_verify(args, cfg: ExperimentConfig) -> dict:
    codec = images = None
    if args.ckpt:
        b = _bundle(args.ckpt)
        codec = b.codec
        ds = X.val_dataset(cfg, b.normalization)
        images = ds.patches[ds.indices(scale=1)]
    checks = suite(args.suite, codec, images)
    for c in checks:
        print(c.line())
    report = {"suite": args.suite, "passed": all(c.passed for c in checks), "checks": [c.to_json() for c in checks]}
    if args.out:
        out = _out(args)
        (out / "report.json").write_text(json.dumps(report, indent=2))
    else:
        print(json.dumps(report, indent=2))
    return {"kind": "verify", **report}


# -- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. sampler.lam=0")
    common.add_argument("--seed", type=int, default=None, help="run seed (fallback: ZOOMSTACK_SEED, then config)")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads; 1 gives bitwise reproducibility")

    p = argparse.ArgumentParser(prog="zoomstack", description="Multi-scale latent diffusion toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="toy-world image corpus")
    csub = corpus.add_subparsers(dest="action", required=True)
    gen = csub.add_parser("gen", parents=[common])
    gen.add_argument("--count", type=int)
    gen.add_argument("--size", type=int)
    gen.add_argument("--out", required=True)
    gen.set_defaults(fn=cmd_corpus)

    pyr = sub.add_parser("pyramid", help="multi-scale patch dataset")
    psub = pyr.add_subparsers(dest="action", required=True)
    build = psub.add_parser("build", parents=[common])
    build.add_argument("--in", dest="inp", required=True, help="PPM file or directory of PPMs")
    build.add_argument("--out", required=True)
    build.add_argument("--levels", type=int)
    build.add_argument("--patch", type=int)
    build.set_defaults(fn=cmd_pyramid)

    train = sub.add_parser("train", parents=[common], help="train codec, ldm, cdm or all stages")
    train.add_argument("what", choices=("codec", "ldm", "cdm", "all"))
    train.add_argument("--out", required=True)
    train.add_argument("--data", help="pyramid directory (default: build from the config)")
    train.add_argument("--codec", help="codec checkpoint (train ldm)")
    train.add_argument("--ckpt", help="LDM checkpoint (train cdm)")
    train.set_defaults(fn=cmd_train)

    sample = sub.add_parser("sample", help="draw samples")
    ssub = sample.add_subparsers(dest="action", required=True)
    patch = ssub.add_parser("patch", parents=[common])
    patch.add_argument("--scale", type=int, required=True)
    patch.add_argument("--ckpt", required=True)
    patch.add_argument("--cdm", action="store_true", help="condition on CDM-sampled tokens")
    patch.add_argument("--grid", help="condition on a descriptor grid (ZTEN)")
    patch.add_argument("--n", type=int, default=4)
    patch.add_argument("--out", required=True)
    patch.set_defaults(fn=cmd_sample_patch)
    joint = ssub.add_parser("joint", parents=[common])
    joint.add_argument("--detail-scale", type=int, required=True)
    joint.add_argument("--context-scale", type=int, required=True)
    joint.add_argument("--ckpt", required=True)
    joint.add_argument("--cdm", action="store_true", help="condition on CDM-sampled tokens")
    joint.add_argument("--source", type=int, default=0, help="held-out image providing the conditions")
    joint.add_argument("--row", type=int, default=0)
    joint.add_argument("--col", type=int, default=0)
    joint.add_argument("--out", required=True)
    joint.set_defaults(fn=cmd_sample_joint)

    sr = sub.add_parser("superres", parents=[common], help="guided super-resolution")
    sr.add_argument("--in", dest="inp", required=True)
    sr.add_argument("--factor", type=int, required=True)
    sr.add_argument("--scale", type=int, required=True, help="scale of the input's pixels")
    sr.add_argument("--ckpt", required=True)
    sr.add_argument("--invert", action="store_true", help="infer conditions from the input (default)")
    sr.add_argument("--grid", help="descriptor grid for the input")
    sr.add_argument("--uncond", action="store_true")
    sr.add_argument("--out", required=True)
    sr.set_defaults(fn=cmd_superres)

    inv = sub.add_parser("invert", parents=[common], help="infer a descriptor grid for an image")
    inv.add_argument("--in", dest="inp", required=True)
    inv.add_argument("--scale", type=int, required=True)
    inv.add_argument("--ckpt", required=True)
    inv.add_argument("--out", required=True)
    inv.set_defaults(fn=cmd_invert)

    feat = sub.add_parser("features", parents=[common], help="denoiser block features")
    feat.add_argument("--in", dest="inp", required=True)
    feat.add_argument("--scale", type=int, required=True)
    feat.add_argument("--ckpt", required=True)
    feat.add_argument("--block", type=int, default=1)
    feat.add_argument("--t", type=int, default=100)
    feat.add_argument("--grid", help="condition on a descriptor grid (default unconditional)")
    feat.add_argument("--out", required=True)
    feat.set_defaults(fn=cmd_features)

    ver = sub.add_parser("verify", parents=[common], help="self-check suites")
    ver.add_argument("suite", choices=SUITES)
    ver.add_argument("--ckpt", help="adds the learned-codec direction check")
    ver.add_argument("--out", help="directory for report.json (stdout if omitted)")
    ver.set_defaults(fn=cmd_verify)
    return p


def resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set)
    explicit = args.seed is not None or "ZOOMSTACK_SEED" in os.environ
    seed = resolve_seed(args.seed, cfg.seed)
    if explicit:
        cfg.seed = seed
        cfg.training.ldm.seed = cfg.training.cdm.seed = cfg.inversion.seed = seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg.threads = args.threads
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        with threadpool_limits(limits=cfg.threads):
            manifest = args.fn(args, cfg)
        if getattr(args, "out", None):
            out = Path(args.out)
            write_config(out / "config.json", cfg)
            write_manifest(out / "manifest.json", manifest)
        if manifest.get("kind") == "verify" and not manifest["passed"]:
            return 1
        return 0
    except ZoomstackError as exc:
        print(f"zoomstack: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
