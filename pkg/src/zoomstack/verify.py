"""Self-check suites behind ``zoomstack verify``.

Each check returns a :class:`Check` with the measured value, the threshold it
is held to and the wall time, so the CLI can emit a machine-readable report.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .codec import OrthogonalLinearCodec
from .denoiser import DenoiserNet, GaussianOracle
from .numerics import check_gradient
from .numerics import rng as rngmod
from .numerics import tensor as T
from .numerics.tensor import Tape, Tensor
from .resample import DownsampleOp, apply, apply_transpose
from .sampler import (
    GuidanceConfig,
    Measurement,
    codec_error_approx,
    ddim_sample,
    exact_error_direction,
    guided_ddim_solve,
    oracle_predictor,
)
from .schedule import NoiseSchedule


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    seconds: float
    detail: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (limit {self.threshold:.3g}, {self.seconds:.1f}s) {self.detail}".rstrip()


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def _u(g, *shape):
    return g.uniform(-1.0, 1.0, size=shape)


def _wsum(t):
    w = np.random.default_rng(t.size).uniform(0.5, 1.5, size=t.shape)
    return T.sum_(t * Tensor(w))


def primitive_cases():
    """(name, scalar function, input shapes) for every differentiable primitive."""
    return [
        ("add", lambda a, b: _wsum(a + b), [(3, 4), (4,)]),
        ("sub", lambda a, b: _wsum(a - b), [(3, 4), (3, 1)]),
        ("mul", lambda a, b: _wsum(a * b), [(2, 3, 4), (4,)]),
        ("div", lambda a, b: _wsum(a / (b * b + 1.0)), [(3, 4), (3, 4)]),
        ("power", lambda a: _wsum(T.power(a * a + 0.5, 1.5)), [(5,)]),
        ("exp", lambda a: _wsum(T.exp(a)), [(6,)]),
        ("log", lambda a: _wsum(T.log(a * a + 1.0)), [(6,)]),
        ("sqrt", lambda a: _wsum(T.sqrt(a * a + 0.3)), [(6,)]),
        ("tanh", lambda a: _wsum(T.tanh(a)), [(6,)]),
        ("sigmoid", lambda a: _wsum(T.sigmoid(a)), [(6,)]),
        ("silu", lambda a: _wsum(T.silu(a)), [(2, 5)]),
        ("matmul", lambda a, b: _wsum(T.matmul(a, b)), [(2, 3, 4), (4, 5)]),
        ("reshape_transpose", lambda a: _wsum(T.transpose(T.reshape(a, (4, 6)))), [(2, 3, 4)]),
        ("getitem", lambda a: _wsum(a[1:, ::2]), [(4, 5)]),
        ("concat", lambda a, b: _wsum(T.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
        ("mean", lambda a: _wsum(T.mean(a, axis=1)), [(3, 4)]),
        ("conv2d", lambda x, w: _wsum(T.conv2d(x, w, 2, 1)), [(1, 6, 6, 2), (3, 3, 2, 3)]),
        ("conv_transpose2d", lambda x, w: _wsum(T.conv_transpose2d(x, w, 2, 1)), [(1, 3, 3, 2), (4, 4, 3, 2)]),
        ("avg_pool2d", lambda x: _wsum(T.avg_pool2d(x, 2)), [(2, 4, 4, 3)]),
        ("layer_norm", lambda x: _wsum(T.layer_norm(x)), [(3, 7)]),
        ("group_norm", lambda x: _wsum(T.group_norm(x, 2)), [(2, 3, 3, 4)]),
        ("softmax", lambda x: _wsum(T.softmax(x, axis=-1)), [(3, 5)]),
    ]


def check_gradients(seed: int = 0) -> Check:
    """Reverse mode vs central differences on every primitive and a small U-Net."""

    def run():
        g = np.random.default_rng(seed)
        worst, where = 0.0, ""
        for name, fn, shapes in primitive_cases():
            err = check_gradient(fn, [_u(g, *s) for s in shapes], h=1e-5)
            if err > worst:
                worst, where = err, name
        net = DenoiserNet(latent_channels=2, channels=(8, 8), ctx_dim=8, n_tokens=3, temb_dim=8, heads=2, seed=seed)
        net.conv_out.w.data = g.standard_normal(net.conv_out.w.shape) * 0.1
        ctx = g.standard_normal((1, 3, 8))

        def composite(z):
            return _wsum(net(z, [300], Tensor(ctx)))

        err = check_gradient(composite, [_u(g, 1, 4, 4, 2)], h=1e-5)
        if err > worst:
            worst, where = err, "denoiser composite"
        return worst, where

    (worst, where), dt = _timed(run)
    return Check("gradients", worst, 1e-4, worst < 1e-4, dt, f"worst: {where}")


def check_adjoint(pairs: int = 100, seed: int = 0) -> Check:
    """``<Ax, y> = <x, A^T y>`` for both kernels on random pairs."""

    def run():
        g = np.random.default_rng(seed)
        worst = 0.0
        for kernel in ("average", "bicubic"):
            for factor in (2, 4):
                op = DownsampleOp(factor, kernel)
                for _ in range(pairs // 2):
                    x = g.standard_normal((16, 16, 3))
                    y = g.standard_normal((16 // factor, 16 // factor, 3))
                    lhs = float(np.sum(apply(op, x) * y))
                    rhs = float(np.sum(x * apply_transpose(op, y)))
                    worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30))
        return worst

    worst, dt = _timed(run)
    return Check("adjoint", worst, 1e-10, worst < 1e-10, dt)


def check_linear_codec_identity(states: int = 100, seed: int = 0) -> Check:
    """2 x forward-only estimate == exact gradient for the orthogonal codec."""

    def run():
        g = np.random.default_rng(seed)
        codec = OrthogonalLinearCodec(4, seed=seed)
        op = DownsampleOp(4)
        worst = 0.0
        for _ in range(states):
            z = g.standard_normal((8, 8, codec.latent_channels))
            m = Measurement(g.random((8, 8, 3)), op)
            diff = 2 * codec_error_approx(codec, z, m, 0.005) - exact_error_direction(codec, z, m)
            worst = max(worst, float(np.abs(diff).max()))
        return worst

    worst, dt = _timed(run)
    return Check("approx == exact / 2 (orthogonal codec)", worst, 1e-10, worst < 1e-10, dt)


def direction_cosines(codec, states: int = 50, seed: int = 0, factor: int = 4, zeta: float = 0.005, images=None):
    """Cosine between forward-only and exact error directions on random states.

    States are encodings of ``images`` (if given) plus latent noise; targets
    are downsampled images perturbed by pixel noise.
    """
    g = rngmod.stream(seed, "probe")
    op = DownsampleOp(factor)
    out = []
    for k in range(states):
        if images is not None:
            x = images[k % len(images)]
        else:
            x = np.clip(0.5 + 0.2 * g.standard_normal((32, 32, 3)), 0.0, 1.0)
        z = codec.encode(x) + 0.3 * g.standard_normal(codec.latent_shape(*x.shape[:2]))
        y = np.clip(apply(op, x) + 0.1 * g.standard_normal((32 // factor, 32 // factor, 3)), 0.0, 1.0)
        m = Measurement(y, op)
        a = codec_error_approx(codec, z, m, zeta).reshape(-1)
        e = exact_error_direction(codec, z, m).reshape(-1)
        out.append(float(a @ e / (np.linalg.norm(a) * np.linalg.norm(e))))
    return np.array(out)


def check_learned_codec_cosine(codec, images=None, states: int = 50) -> Check:
    cos, dt = _timed(lambda: direction_cosines(codec, states, images=images))
    return Check("learned codec direction cosine (min)", float(cos.min()), 0.95, bool(cos.min() > 0.95), dt, f"mean {cos.mean():.4f}")


def oracle_moments(n: int = 10_000, dim: int = 4, seed: int = 0):
    s = NoiseSchedule()
    o = GaussianOracle(np.zeros(dim), np.ones(dim))
    z = ddim_sample(oracle_predictor(o, s), s, (n, dim), steps=50, seed=seed)
    return np.abs(z.mean(axis=0)).max(), np.abs(z.var(axis=0) - 1.0).max()


def check_oracle(n: int = 10_000, seed: int = 0) -> list[Check]:
    (mean_err, var_err), dt = _timed(lambda: oracle_moments(n, seed=seed))
    return [
        Check("DDIM oracle mean |.|inf", float(mean_err), 0.05, bool(mean_err < 0.05), dt),
        Check("DDIM oracle diag covariance rel. dev.", float(var_err), 0.10, bool(var_err < 0.10), dt),
    ]


def guidance_footprint(steps: int = 10, seed: int = 0) -> dict:
    """Tapes built and peak live tensors for approximate vs exact guidance."""
    s = NoiseSchedule()
    codec = OrthogonalLinearCodec(4, seed=seed)
    o = GaussianOracle(np.zeros((8, 8, 48)), np.ones((8, 8, 48)))
    eps = oracle_predictor(o, s)
    g = np.random.default_rng(seed)
    op = DownsampleOp(4)
    m = Measurement(apply(op, codec.decode(g.standard_normal((8, 8, 48)))), op)
    out = {}
    for mode in ("approx", "exact"):
        before = Tape.constructed
        Tensor.reset_peak()
        base = Tensor.live
        guided_ddim_solve(eps, codec, m, GuidanceConfig(steps=steps, mode=mode), s, seed=seed)
        out[mode] = {"tapes": Tape.constructed - before, "peak_tensors": Tensor.peak - base}
    return out


def check_backprop_free(seed: int = 0) -> list[Check]:
    fp, dt = _timed(lambda: guidance_footprint(seed=seed))
    a, e = fp["approx"], fp["exact"]
    return [
        Check("tapes built in approximate guidance", a["tapes"], 0, a["tapes"] == 0, dt),
        Check(
            "peak live tensors approx - exact",
            a["peak_tensors"] - e["peak_tensors"],
            0,
            a["peak_tensors"] < e["peak_tensors"],
            dt,
            f"approx {a['peak_tensors']} vs exact {e['peak_tensors']}",
        ),
    ]


def suite(name: str, codec=None, images=None) -> list[Check]:
    """Checks for one suite name (``all`` runs every suite)."""
    out: list[Check] = []
    if name in ("gradients", "all"):
        out.append(check_gradients())
    if name in ("adjoint", "all"):
        out.append(check_adjoint())
    if name in ("oracle", "all"):
        out.extend(check_oracle())
    if name in ("guidance", "all"):
        out.append(check_linear_codec_identity())
        out.extend(check_backprop_free())
        if codec is not None:
            out.append(check_learned_codec_cosine(codec, images))
    return out


SUITES = ("all", "adjoint", "gradients", "oracle", "guidance")

