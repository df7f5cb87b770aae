import numpy as np
import pytest

from zoomstack.errors import ContractViolation, DomainError
from zoomstack.numerics import Tape
from zoomstack.numerics import tensor as T
from zoomstack.numerics.tensor import Tensor
from zoomstack.pyramid import EmbeddingGrid
from zoomstack.summarizer import SummarizerNet, pack_batch, pack_tokens, summarize


@pytest.fixture(scope="module")
def net():
    return SummarizerNet(seed=7)


def _grid(side, scale, seed=0):
    return EmbeddingGrid(np.random.default_rng(seed).standard_normal((side, side, 32)), scale)


def test_pack_single_cell():
    slots, mask = pack_tokens(_grid(1, 1))
    assert slots.shape == (16, 32)
    assert mask.tolist() == [True] + [False] * 15


def test_pack_full_grid():
    _, mask = pack_tokens(_grid(4, 3))
    assert mask.all()


def test_pack_is_row_major_by_sentinels():
    values = np.zeros((2, 2, 32))
    for r in range(2):
        for c in range(2):
            values[r, c, 0] = 10 * r + c
    slots, _ = pack_tokens(EmbeddingGrid(values, 2))
    assert slots[:4, 0].tolist() == [0, 1, 10, 11]


def test_pack_rejects_oversized_grid():
    with pytest.raises(ContractViolation):
        pack_tokens(_grid(8, 4))


def test_pack_batch_matches_single():
    g = _grid(2, 2)
    padded = np.zeros((1, 4, 4, 32))
    padded[0, :2, :2] = g.values
    slots, mask = pack_batch(padded, np.array([[2, 2]]))
    s1, m1 = pack_tokens(g)
    np.testing.assert_array_equal(slots[0], s1)
    np.testing.assert_array_equal(mask[0], m1)


def test_output_shape_constant_and_layer_normalised(net):
    for side, scale in [(1, 1), (2, 2), (4, 3), (4, 4)]:
        out = summarize(net, _grid(side, scale))
        assert out.tokens.shape == (17, 64)
        np.testing.assert_allclose(out.tokens.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.tokens.var(axis=1), 1.0, atol=1e-5)


def test_deterministic(net):
    g = _grid(2, 2)
    assert summarize(net, g).tokens.tobytes() == summarize(net, g).tokens.tobytes()


def test_scale_changes_output(net):
    g = _grid(2, 2)
    a = summarize(net, EmbeddingGrid(g.values, 2)).tokens
    b = summarize(net, EmbeddingGrid(g.values, 3)).tokens
    assert np.linalg.norm(a - b) > 0


def test_unknown_scale(net):
    with pytest.raises(DomainError):
        summarize(net, _grid(1, 5))
    with pytest.raises(DomainError):
        summarize(net, _grid(1, 0))


def test_gradients_reach_grid_table_and_padding(net):
    g = np.random.default_rng(3)
    values = Tensor(g.standard_normal((4, 16, 32)), requires_grad=True)
    mask = np.zeros((4, 16), dtype=bool)
    mask[:, :4] = True
    target = g.standard_normal((4, 17, 64))
    params = net.named_parameters()
    with Tape() as tape:
        out = net(values, mask, [1, 2, 3, 4])
        loss = T.mean((out - target) * (out - target))
    grads = tape.gradient(loss, [values] + list(params.values()))
    assert np.abs(grads[0][:, :4]).max() > 0
    named = dict(zip(params, grads[1:]))
    for name, gr in named.items():
        assert np.abs(gr).max() > 0, name


def test_padding_participates_by_default(net):
    """Regression: with the default (unmasked) attention, padding slots change
    the output when the padding token changes."""
    g = _grid(1, 1)
    before = summarize(net, g).tokens
    saved = net.pad_token.data
    net.pad_token.data = saved + np.random.default_rng(0).standard_normal(saved.shape)
    try:
        after = summarize(net, g).tokens
    finally:
        net.pad_token.data = saved
    assert np.abs(after[0] - before[0]).max() > 1e-6


def test_masked_padding_is_invariant_to_padding_content():
    net = SummarizerNet(seed=7, mask_padding=True)
    g = _grid(2, 2)
    slots, mask = pack_tokens(g)
    base = net(slots[None], mask[None], [2]).data[0]
    net.pad_token.data = net.pad_token.data + np.random.default_rng(0).standard_normal(64)
    moved = net(slots[None], mask[None], [2]).data[0]
    real = np.r_[np.flatnonzero(mask), 16]
    np.testing.assert_allclose(moved[real], base[real], atol=1e-12)
