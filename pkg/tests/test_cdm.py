import numpy as np
import pytest

from zoomstack.cdm import CdmNet, cdm_epsilon, sample_conditions, sample_token_arrays
from zoomstack.errors import DimensionError, DomainError
from zoomstack.schedule import NoiseSchedule

S = NoiseSchedule()


@pytest.fixture(scope="module")
def net():
    n = CdmNet(n_tokens=5, token_dim=8, hidden=16, layers=1, heads=2, n_scales=3, seed=0)
    g = np.random.default_rng(0)
    n.out.w.data = g.standard_normal(n.out.w.shape) * 0.1
    return n


def test_untrained_output_is_zero():
    net = CdmNet(n_tokens=5, token_dim=8, hidden=16, layers=1, heads=2, n_scales=3)
    c = np.random.default_rng(0).standard_normal((2, 5, 8))
    out = net(c, 500, 1).data
    assert out.shape == (2, 5, 8) and np.all(out == 0.0)
    # The noise estimate is then the Gaussian baseline alone.
    np.testing.assert_allclose(cdm_epsilon(net, c, 500, 1), np.sqrt(1 - S.alpha_bar[500]) * c, rtol=1e-14)


def test_untrained_net_samples_the_per_scale_gaussian():
    net = CdmNet(n_tokens=5, token_dim=8, hidden=16, layers=1, heads=2, n_scales=3)
    g = np.random.default_rng(3)
    tokens = np.concatenate([g.normal(1.0, 0.5, (200, 5, 8)), g.normal(-3.0, 0.1, (200, 5, 8))])
    scales = np.repeat([1, 3], 200)
    net.fit_standardization(tokens, scales)
    x = sample_token_arrays(net, 3, 2000, steps=20, seed=0)
    assert abs(x.mean() + 3.0) < 0.01 and abs(x.std() - 0.1) < 0.01


def test_standardization_round_trip_and_state(tmp_path):
    net = CdmNet(n_tokens=5, token_dim=8, hidden=16, layers=1, heads=2, n_scales=3)
    g = np.random.default_rng(4)
    tokens = g.normal(2.0, 3.0, (30, 5, 8))
    scales = g.integers(1, 4, 30)
    net.fit_standardization(tokens, scales)
    z = net.standardize(tokens, scales)
    np.testing.assert_allclose(net.unstandardize(z, scales), tokens, atol=1e-12)
    np.testing.assert_allclose(z[scales == 2].mean(axis=0), 0.0, atol=1e-12)
    other = CdmNet(n_tokens=5, token_dim=8, hidden=16, layers=1, heads=2, n_scales=3)
    other.load_state_dict(net.state_dict("cdm/"), "cdm/")
    np.testing.assert_array_equal(other.token_std, net.token_std)


def test_single_matches_batch(net):
    c = np.random.default_rng(1).standard_normal((3, 5, 8))
    np.testing.assert_allclose(cdm_epsilon(net, c[1], 300, 2), cdm_epsilon(net, c, 300, 2)[1], atol=1e-12)


def test_scale_changes_output(net):
    c = np.random.default_rng(2).standard_normal((1, 5, 8))
    assert np.linalg.norm(cdm_epsilon(net, c, 300, 1) - cdm_epsilon(net, c, 300, 3)) > 0


def test_errors(net):
    with pytest.raises(DimensionError):
        cdm_epsilon(net, np.zeros((1, 4, 8)), 10, 1)
    with pytest.raises(DomainError):
        cdm_epsilon(net, np.zeros((1, 5, 8)), 10, 4)
    with pytest.raises(DomainError):
        cdm_epsilon(net, np.zeros((1, 5, 8)), 10, 0)


def test_sampling_is_seeded_and_finite(net):
    a = sample_token_arrays(net, 2, 3, steps=5, seed=4)
    b = sample_token_arrays(net, 2, 3, steps=5, seed=4)
    assert a.shape == (3, 5, 8) and np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()
    conds = sample_conditions(net, 2, 2, steps=5, seed=4)
    assert [c.scale for c in conds] == [2, 2]
    np.testing.assert_array_equal(conds[0].tokens, a[0])
