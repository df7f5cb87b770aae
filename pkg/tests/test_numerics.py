import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zoomstack.errors import CapabilityError, DimensionError
from zoomstack.numerics import Tape, Tensor, check_gradient, grad, load_checkpoint, save_checkpoint
from zoomstack.numerics import nn, rng
from zoomstack.numerics import tensor as T
from zoomstack.numerics.io import load_zten, save_zten, zten_bytes, zten_from_bytes


def _rand(*shape, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=shape)


def test_matmul_identity_and_hand_case():
    m = _rand(3, 4)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(m)).data, m)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_grad_is_ones_times_b_transpose():
    a, b = _rand(5, 7, seed=1), _rand(7, 3, seed=2)
    ga, gb = grad(lambda x, y: (x @ y).sum(), [a, b])
    np.testing.assert_allclose(ga, np.ones((5, 3)) @ b.T, rtol=0, atol=1e-14)
    np.testing.assert_allclose(gb, a.T @ np.ones((5, 3)), rtol=0, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_sum_and_square_grads():
    x = _rand(4, 3)
    (g,) = grad(lambda t: t.sum(), [x])
    assert np.array_equal(g, np.ones_like(x))
    (g,) = grad(lambda t: (t * t).sum(), [x])
    np.testing.assert_allclose(g, 2 * x, atol=1e-15)


# Each entry: (name, fn of tensors -> scalar, input shapes). Random weights in
# the reductions keep the checks from degenerating to trivially symmetric sums.
_W = np.random.default_rng(99)


def _wsum(t):
    w = np.random.default_rng(t.size).uniform(0.5, 1.5, size=t.shape)
    return (t * w).sum()


PRIMITIVES = [
    ("add_broadcast", lambda a, b: _wsum(a + b), [(3, 4), (4,)]),
    ("sub", lambda a, b: _wsum(a - b), [(3, 4), (3, 1)]),
    ("mul", lambda a, b: _wsum(a * b), [(2, 3, 4), (4,)]),
    ("div", lambda a, b: _wsum(a / (b * b + 1.0)), [(3, 4), (3, 4)]),
    ("pow", lambda a: _wsum((a * a + 0.5) ** 1.5), [(5,)]),
    ("exp", lambda a: _wsum(T.exp(a)), [(6,)]),
    ("log", lambda a: _wsum(T.log(a * a + 1.0)), [(6,)]),
    ("sqrt", lambda a: _wsum(T.sqrt(a * a + 0.3)), [(6,)]),
    ("tanh", lambda a: _wsum(T.tanh(a)), [(6,)]),
    ("sigmoid", lambda a: _wsum(T.sigmoid(a)), [(6,)]),
    ("silu", lambda a: _wsum(T.silu(a)), [(2, 5)]),
    ("matmul_batched", lambda a, b: _wsum(a @ b), [(2, 3, 4), (4, 5)]),
    ("reshape_transpose", lambda a: _wsum(a.reshape(4, 6).transpose(1, 0)), [(2, 3, 4)]),
    ("getitem", lambda a: _wsum(a[1:, ::2]), [(4, 5)]),
    ("concat", lambda a, b: _wsum(T.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
    ("stack", lambda a, b: _wsum(T.stack([a, b], axis=0)), [(2, 3), (2, 3)]),
    ("mean_axis", lambda a: _wsum(a.mean(axis=1)), [(3, 4)]),
    ("conv2d_s1", lambda x, w: _wsum(T.conv2d(x, w, 1, 1)), [(2, 5, 5, 3), (3, 3, 3, 4)]),
    ("conv2d_s2", lambda x, w: _wsum(T.conv2d(x, w, 2, 1)), [(1, 6, 6, 2), (3, 3, 2, 3)]),
    ("conv_transpose2d", lambda x, w: _wsum(T.conv_transpose2d(x, w, 2, 1)), [(1, 3, 3, 2), (4, 4, 3, 2)]),
    ("avg_pool2d", lambda x: _wsum(T.avg_pool2d(x, 2)), [(2, 4, 4, 3)]),
    ("upsample_nearest2d", lambda x: _wsum(T.upsample_nearest2d(x, 2)), [(1, 2, 3, 2)]),
    ("layer_norm", lambda x: _wsum(T.layer_norm(x)), [(3, 7)]),
    ("group_norm", lambda x: _wsum(T.group_norm(x, 2)), [(2, 3, 3, 4)]),
    ("softmax", lambda x: _wsum(T.softmax(x, axis=-1)), [(3, 5)]),
]


@pytest.mark.parametrize("name,fn,shapes", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_matches_central_differences(name, fn, shapes):
    inputs = [_rand(*s, seed=i + 10) for i, s in enumerate(shapes)]
    assert check_gradient(fn, inputs, h=1e-5) < 1e-4


def test_attention_block_composite_gradient():
    r = rng.stream(3, "init")
    block = nn.TransformerBlock(8, 2, r)
    cross = nn.Attention(8, 2, r, context_dim=6)

    def f(x, c):
        h = block(x)
        return _wsum(cross(h, c))

    assert check_gradient(f, [_rand(2, 3, 8), _rand(2, 4, 6, seed=5)]) < 1e-4


def test_unsupported_primitive_raises_capability_error():
    x = Tensor(_rand(3), requires_grad=True)
    with Tape() as tape:
        y = T.clip(x, 0.0, 0.5).sum()
    with pytest.raises(CapabilityError):
        tape.gradient(y, [x])


def test_no_recording_outside_tape():
    x = Tensor(_rand(3), requires_grad=True)
    before = Tape.constructed
    y = (x * x).sum()
    assert not y.requires_grad
    assert Tape.constructed == before


def test_backward_visits_each_node_once():
    # A diamond graph: x feeds two branches that merge again.
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        a = x * 3.0
        b = x * x
        y = (a + b).sum()
    (g,) = tape.gradient(y, [x])
    assert g[0] == pytest.approx(3.0 + 4.0)
    assert len(tape.nodes) == 4


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_deterministic_outputs(seed):
    x = _rand(2, 4, 4, 3, seed=seed)
    w = _rand(3, 3, 3, 2, seed=seed + 1)
    a = T.conv2d(x, w, 1, 1).data
    b = T.conv2d(x, w, 1, 1).data
    assert a.tobytes() == b.tobytes()


def test_named_streams_are_replayable_and_distinct():
    a = rng.stream(7, "noise").standard_normal(5)
    b = rng.stream(7, "noise").standard_normal(5)
    c = rng.stream(7, "init").standard_normal(5)
    d = rng.stream(8, "noise").standard_normal(5)
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, c)
    assert not np.allclose(a, d)


def test_zten_layout(tmp_path):
    arr = np.arange(6, dtype=float).reshape(2, 3)
    raw = zten_bytes(arr)
    assert raw[:4] == b"ZTEN"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:16], "little") == 3
    assert np.frombuffer(raw[16:], "<f8").tolist() == arr.ravel().tolist()
    assert np.array_equal(zten_from_bytes(raw), arr)
    save_zten(tmp_path / "a.zten", arr)
    assert np.array_equal(load_zten(tmp_path / "a.zten"), arr)


def test_checkpoint_round_trip(tmp_path):
    state = {"b/x": _rand(3, 2), "a/y": _rand(4)}
    save_checkpoint(tmp_path / "c.zckp", state, meta={"step": 3})
    raw = (tmp_path / "c.zckp").read_bytes()
    assert raw[:4] == b"ZCKP"
    loaded, meta = load_checkpoint(tmp_path / "c.zckp")
    assert meta == {"step": 3}
    for k in state:
        assert loaded[k].tobytes() == state[k].tobytes()


def test_frozen_excludes_parameters():
    lin = nn.Linear(3, 2, rng.stream(0, "init"))
    x = Tensor(_rand(1, 3), requires_grad=True)
    with lin.frozen():
        with Tape() as tape:
            y = lin(x).sum()
        assert all(not p.requires_grad for p in lin.parameters())
        assert np.abs(tape.gradient(y, [x])[0]).sum() > 0
    assert all(p.requires_grad for p in lin.parameters())
