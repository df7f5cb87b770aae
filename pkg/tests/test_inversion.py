import json

import numpy as np
import pytest

from zoomstack.errors import DomainError, NumericalError
from zoomstack.inversion import (
    InversionConfig,
    anneal_t,
    grid_side,
    infer_conditions,
    prior_penalty,
    save_inversion,
)
from zoomstack.numerics.io import load_zten
from zoomstack.pyramid import EmbeddingGrid
from zoomstack.training import param_digest
from hypothesis import given
from hypothesis import strategies as st


def test_anneal_endpoints_and_midpoint():
    cfg = InversionConfig()
    assert anneal_t(0, cfg) == 950
    assert anneal_t(199, cfg) == 50
    assert anneal_t(100, cfg) == 498


@given(
    n=st.integers(2, 400),
    lo=st.integers(1, 500),
    span=st.integers(0, 499),
)
def test_anneal_is_linear_and_monotone(n, lo, span):
    cfg = InversionConfig(n=n, t_lo=lo, t_hi=lo + span)
    ts = [anneal_t(k, cfg) for k in range(n)]
    assert all(a >= b for a, b in zip(ts, ts[1:]))
    exact = cfg.t_hi - np.arange(n) * (cfg.t_hi - cfg.t_lo) / (n - 1)
    assert np.abs(np.array(ts) - exact).max() <= 0.5


@pytest.mark.parametrize("k", [-1, 200])
def test_anneal_out_of_range(k):
    with pytest.raises(DomainError):
        anneal_t(k, InversionConfig())


def test_invalid_config():
    with pytest.raises(DomainError):
        InversionConfig(n=0)
    with pytest.raises(DomainError):
        InversionConfig(t_lo=600, t_hi=500)


def test_prior_penalty_cases():
    g = np.random.default_rng(0)
    assert prior_penalty(g.standard_normal((1, 1, 8))) == 0.0
    same = np.broadcast_to(g.standard_normal(8), (2, 2, 8))
    assert prior_penalty(same) == pytest.approx(-1.0, abs=1e-12)
    ortho = np.zeros((1, 2, 8))
    ortho[0, 0, 0] = ortho[0, 1, 1] = 1.0
    assert prior_penalty(EmbeddingGrid(ortho, 2)) == pytest.approx(0.0, abs=1e-15)


def test_prior_penalty_zero_cell_names_index():
    u = np.ones((2, 2, 4))
    u[1, 0] = 0.0
    with pytest.raises(NumericalError, match="cell 2"):
        prior_penalty(u)


def test_grid_side():
    assert [grid_side(s) for s in (1, 2, 3, 4)] == [1, 2, 4, 4]


def test_inversion_freezes_networks_and_reduces_loss(tmp_path, tiny_models):
    codec, summ, den, _ = tiny_models
    den.conv_out.w.data = np.random.default_rng(1).standard_normal(den.conv_out.w.shape) * 0.05
    before = param_digest(den, summ)
    image = np.random.default_rng(2).random((16, 16, 3))
    cfg = InversionConfig(n=12, t_hi=600, t_lo=100)
    res = infer_conditions(den, summ, codec, image, 2, cfg)
    assert param_digest(den, summ) == before
    assert res.grid.values.shape == (2, 2, 32)
    assert res.timesteps[0] == 600 and res.timesteps[-1] == 100
    assert len(res.losses) == 12 and np.all(np.isfinite(res.losses))
    again = infer_conditions(den, summ, codec, image, 2, cfg)
    assert again.grid.values.tobytes() == res.grid.values.tobytes()

    save_inversion(tmp_path / "u.zten", res, cfg, target="x.ppm")
    np.testing.assert_array_equal(load_zten(tmp_path / "u.zten"), res.grid.values)
    side = json.loads((tmp_path / "u.zten.json").read_text())
    assert side["scale"] == 2 and side["config"]["n"] == 12 and side["target"] == "x.ppm"
    assert side["losses"] == res.losses
