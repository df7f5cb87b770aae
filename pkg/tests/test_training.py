import json

import numpy as np
import pytest

from zoomstack.bundle import ModelBundle
from zoomstack.errors import ConfigError, ContractViolation
from zoomstack.numerics import optim
from zoomstack.training import (
    TrainConfig,
    encode_patches,
    param_digest,
    token_cache,
    train_cdm,
    train_ldm,
    validation_loss,
)


def _cfg(**kw):
    base = dict(steps=3, batch=8, warmup=1, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize(
    "kw",
    [dict(warmup=10, steps=5), dict(p_drop=1.0), dict(p_drop=-0.1), dict(batch=0), dict(lr=0.0), dict(ema=1.0), dict(ema=-0.1)],
)
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**{"steps": 100, "warmup": 0, **kw})


def test_initial_loss_near_one(tiny_dataset, tiny_models):
    codec, summ, den, _ = tiny_models
    res = train_ldm(tiny_dataset, codec, den, summ, _cfg(steps=1, batch=64))
    assert 0.8 <= res.history[0]["loss"] <= 1.2


def test_ldm_training_is_bitwise_reproducible(tiny_dataset, tiny_models):
    from zoomstack.denoiser import DenoiserNet
    from zoomstack.summarizer import SummarizerNet

    def run():
        summ = SummarizerNet(hidden=16, heads=2, layers=1, n_scales=3, seed=0)
        den = DenoiserNet(latent_channels=4, channels=(8, 8), ctx_dim=16, n_tokens=17, temb_dim=16, heads=2, seed=0)
        train_ldm(tiny_dataset, tiny_models[0], den, summ, _cfg())
        return param_digest(den, summ)

    assert run() == run()


def test_drop_fraction_matches_p_drop(tiny_dataset, tiny_models):
    codec, summ, den, _ = tiny_models
    res = train_ldm(tiny_dataset, codec, den, summ, _cfg(steps=60, batch=32, log_every=100))
    assert abs(res.drop_fraction - 0.1) <= 0.02


def test_scale_restriction(tiny_dataset, tiny_models):
    codec, summ, den, _ = tiny_models
    res = train_ldm(tiny_dataset, codec, den, summ, _cfg(scales=(3,)))
    assert all(set(h["scale_loss"]) == {3} for h in res.history)
    with pytest.raises(ConfigError):
        train_ldm(tiny_dataset, codec, den, summ, _cfg(scales=(9,)))


def test_checkpoint_round_trip_preserves_validation_loss(tmp_path, tiny_dataset, tiny_models):
    codec, summ, den, cdm = tiny_models
    train_ldm(tiny_dataset, codec, den, summ, _cfg())
    lat = encode_patches(codec, tiny_dataset.patches)
    before = validation_loss(den, summ, lat, tiny_dataset)
    meta = {
        "arch": {
            "denoiser": dict(latent_channels=4, channels=[8, 8], ctx_dim=16, n_tokens=17, temb_dim=16, heads=2, seed=0),
            "summarizer": dict(hidden=16, heads=2, layers=1, n_scales=3, seed=0),
            "cdm": dict(n_tokens=17, token_dim=16, hidden=16, layers=1, heads=2, n_scales=3, seed=0),
        }
    }
    ModelBundle(codec, summ, den, cdm, tiny_dataset.normalization, meta).save(tmp_path / "m.zckp")
    b = ModelBundle.load(tmp_path / "m.zckp")
    assert validation_loss(b.denoiser, b.summarizer, lat, tiny_dataset) == before
    assert param_digest(b.cdm) == param_digest(cdm)


def test_constant_learning_rate_is_honoured(monkeypatch, tiny_dataset, tiny_models):
    codec, summ, den, _ = tiny_models
    seen = []
    orig = optim.Adam.step

    def spy(self, grads, lr=None):
        seen.append(lr)
        return orig(self, grads, lr=lr)

    monkeypatch.setattr(optim.Adam, "step", spy)
    train_ldm(tiny_dataset, codec, den, summ, TrainConfig(lr=1e-4, warmup=0, steps=4, batch=4))
    assert seen == [1e-4] * 4


def test_warmup_is_linear_then_constant():
    lrs = [optim.warmup_constant(k, 1e-3, 4) for k in range(6)]
    np.testing.assert_allclose(lrs, [2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3])


def test_training_log_is_jsonl(tmp_path, tiny_dataset, tiny_models):
    codec, summ, den, _ = tiny_models
    train_ldm(tiny_dataset, codec, den, summ, _cfg(), log_path=tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [0, 1, 2]


def test_token_cache_has_one_set_per_record(tiny_dataset, tiny_models):
    _, summ, _, _ = tiny_models
    tok = token_cache(tiny_dataset, summ)
    assert tok.shape == (len(tiny_dataset), 17, 16)


def test_cdm_training_leaves_summarizer_untouched(tiny_dataset, tiny_models):
    _, summ, _, cdm = tiny_models
    digest = param_digest(summ)
    res = train_cdm(tiny_dataset, summ, cdm, _cfg(p_drop=0.0), frozen_digest=digest)
    assert param_digest(summ) == digest
    assert res.history[-1] == {"token_cache": len(tiny_dataset)}


def test_cdm_rejects_modified_summarizer(tiny_dataset, tiny_models):
    _, summ, _, cdm = tiny_models
    digest = param_digest(summ)
    summ.parameters()[0].data += 1e-3
    with pytest.raises(ContractViolation):
        train_cdm(tiny_dataset, summ, cdm, _cfg(p_drop=0.0), frozen_digest=digest)


def test_cdm_loss_halves_on_structured_tokens():
    # Two well-separated modes: the per-scale Gaussian baseline is poor, so
    # the residual network has structure to learn.
    from zoomstack.cdm import CdmNet
    from zoomstack.schedule import NoiseSchedule
    from zoomstack.training import _train_cdm_on_tokens, cdm_validation_loss

    g = np.random.default_rng(0)
    pattern = g.standard_normal((5, 8))
    sign = g.choice([-1.0, 1.0], size=(400, 1, 1))
    tokens = sign * pattern + 0.05 * g.standard_normal((400, 5, 8))
    cdm = CdmNet(n_tokens=5, token_dim=8, hidden=32, layers=1, heads=2, n_scales=1, seed=0)
    cfg = TrainConfig(steps=800, batch=32, warmup=20, lr=3e-3, p_drop=0.0, log_every=10)
    scales = np.ones(400, dtype=int)
    cdm.fit_standardization(tokens, scales)
    before = cdm_validation_loss(cdm, tokens, scales)
    _train_cdm_on_tokens(tokens, scales, cdm, cfg, NoiseSchedule())
    assert cdm_validation_loss(cdm, tokens, scales) <= 0.5 * before


def test_ema_tracks_closed_form_and_copies_back():
    from zoomstack.numerics.tensor import Tensor

    p = Tensor(np.zeros(3))
    ema = optim.EMA([p], decay=0.5)
    for v in (1.0, 2.0, 4.0):
        p.data = np.full(3, v)
        ema.update()
    expected = 0.5 * (0.5 * (0.5 * 1.0) + 0.5 * 2.0) + 0.5 * 4.0
    assert np.allclose(ema.shadow[0], expected)
    ema.copy_to()
    assert np.allclose(p.data, expected)


def test_rebalanced_draws_are_uniform_over_scales():
    from zoomstack.numerics import rng as rngmod
    from zoomstack.training import _draw

    scales = np.array([1] * 900 + [2] * 90 + [3] * 10)
    pool = np.arange(len(scales))
    cfg = TrainConfig(steps=1, batch=3000, warmup=0, rebalance=True)
    idx = _draw(pool, scales, cfg, rngmod.stream(0, "data"))
    freq = np.bincount(scales[idx], minlength=4)[1:] / len(idx)
    assert np.allclose(freq, 1 / 3, atol=0.03)


def test_cdm_training_with_ema_is_reproducible(tiny_dataset, tiny_models):
    from zoomstack.cdm import CdmNet

    _, summ, _, _ = tiny_models
    digests = []
    for _ in range(2):
        cdm = CdmNet(17, 16, 16, 1, 2, 3)
        train_cdm(tiny_dataset, summ, cdm, _cfg(p_drop=0.0, rebalance=True, ema=0.9))
        digests.append(param_digest(cdm))
    assert digests[0] == digests[1]
