import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowdet import ops
from flowdet.detector.flops import dwconv_macs
from flowdet.gradcheck import gradcheck
from flowdet.tensor import (NonFiniteError, ShapeError, Tensor, dump_tensor, load_tensor, no_grad, read_tensor,
                            sabotage, save_tensor, trace)


def rnd(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 5, 4)))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    out = ops.conv2d(x, Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x.data)


def test_conv_sum_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    assert np.abs(out - ref).max() < 1e-12


def test_conv_errors():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_conv_gradcheck():
    rng = np.random.default_rng(2)
    x, w, b = rnd(rng, 2, 3, 6, 5), rnd(rng, 2, 3, 3, 3), rnd(rng, 2)
    rep = gradcheck(lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1), [x, w, b])
    assert rep.max_rel_err < 1e-6


def test_dwconv_identity():
    x = Tensor(np.random.default_rng(3).standard_normal((1, 3, 5, 5)))
    wd = np.zeros((3, 3, 3))
    wd[:, 1, 1] = 1.0
    out = ops.dwconv(x, Tensor(wd), Tensor(np.eye(3)))
    assert np.allclose(out.data, x.data, atol=0)


def test_dwconv_mac_count():
    assert dwconv_macs(2, 3, 3, 4, 4) == 2 * 9 * 16 + 3 * 2 * 16 == 384


def test_dwconv_equals_dense_expansion():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 6, 5))
    wd, wp, b = rng.standard_normal((3, 3, 3)), rng.standard_normal((4, 3)), rng.standard_normal(4)
    dense = wp[:, :, None, None] * wd[None]  # O,C,3,3
    got = ops.dwconv(Tensor(x), Tensor(wd), Tensor(wp), Tensor(b)).data
    ref = ops.conv2d(Tensor(x), Tensor(dense), Tensor(b), pad=1).data
    assert np.abs(got - ref).max() < 1e-10


def test_softmax_values():
    assert np.allclose(ops.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])
    got = ops.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data
    assert np.abs(got - [0.09003, 0.24473, 0.66524]).max() < 1e-5


@given(st.floats(-50, 50), st.floats(-20, 20))
def test_softmax_shift_invariance(x, c):
    a = ops.softmax(Tensor(np.array([x, x + c]))).data
    b = ops.softmax(Tensor(np.array([0.0, c]))).data
    assert np.allclose(a, b, atol=1e-12)
    assert abs(a.sum() - 1) < 1e-12


def test_split_concat_round_trip():
    x = Tensor(np.random.default_rng(5).standard_normal((2, 64, 3, 3)))
    parts = ops.split(x, 2, axis=1)
    assert [p.shape[1] for p in parts] == [32, 32]
    assert np.array_equal(ops.concat(parts, axis=1).data, x.data)


def test_layernorm_moments():
    x = Tensor(np.random.default_rng(6).standard_normal((5, 17)) * 3 + 2)
    y = ops.layernorm(x, eps=0.0).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-10
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-8


def test_backward_sum_and_square():
    x = Tensor(np.random.default_rng(7).standard_normal((3, 4)), requires_grad=True)
    ops.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))
    x.zero_grad()
    ops.sum(ops.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_graph_topological_order():
    a = Tensor(np.ones(2), requires_grad=True)
    b = a * 2
    c = b + a
    d = ops.sum(c * b)
    order = trace(d).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            if p.requires_grad:  # constants are not traced
                assert pos[id(p)] < pos[id(n)]
    assert len(order) == len({id(n) for n in order})


def test_matmul_gradcheck():
    rng = np.random.default_rng(8)
    rep = gradcheck(ops.matmul, [rnd(rng, 3, 4), rnd(rng, 4, 2)])
    assert rep.max_rel_err < 1e-6


def test_composite_gradcheck():
    rng = np.random.default_rng(9)

    def fn(a, b, g):
        h = ops.tanh(ops.matmul(a, b))
        h = ops.layernorm(h, g, None, axis=-1)
        h = ops.silu(h) + ops.relu(h + 0.3) * 0.5
        return ops.softmax(ops.scale(h, 1.7), axis=-1)

    rep = gradcheck(fn, [rnd(rng, 3, 4), rnd(rng, 4, 5), rnd(rng, 5)])
    assert rep.max_rel_err < 1e-5


def test_gradcheck_linear_is_exact():
    rng = np.random.default_rng(10)
    w = rng.standard_normal((4, 3))
    rep = gradcheck(lambda x: ops.matmul(x, Tensor(w)), [rnd(rng, 2, 4)])
    assert rep.passed and rep.max_rel_err < 1e-9


def test_gradcheck_sigmoid_chain():
    rng = np.random.default_rng(11)
    rep = gradcheck(lambda x: ops.sigmoid(ops.sigmoid(ops.sigmoid(x))), [rnd(rng, 5)])
    assert rep.max_rel_err < 1e-6


def test_gradcheck_negative_control():
    rng = np.random.default_rng(12)
    x = rnd(rng, 5)
    with sabotage("sigmoid"):
        rep = gradcheck(ops.sigmoid, [x])
    assert not rep.passed
    assert gradcheck(ops.sigmoid, [x]).passed


def test_gradcheck_requires_f64():
    with pytest.raises(TypeError):
        gradcheck(ops.sigmoid, [Tensor(np.ones(3, dtype=np.float32))])


def test_non_finite_is_error():
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        ops.log(Tensor(np.array([0.0])))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2
    assert not y.requires_grad and y.is_leaf


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_dump_round_trip(tmp_path, dtype):
    arr = np.random.default_rng(13).standard_normal((2, 3, 4)).astype(dtype)
    buf = dump_tensor(arr)
    assert buf[:8] == b"FDTENSOR"
    back, end = load_tensor(buf)
    assert end == len(buf)
    assert back.dtype == dtype and np.array_equal(back, arr)
    save_tensor(tmp_path / "t.bin", arr)
    assert np.array_equal(read_tensor(tmp_path / "t.bin"), arr)


def test_forward_is_deterministic():
    def run():
        rng = np.random.default_rng(14)
        x, w = Tensor(rng.standard_normal((1, 2, 6, 6))), Tensor(rng.standard_normal((3, 2, 3, 3)))
        return ops.softmax(ops.conv2d(x, w, pad=1), axis=1).data

    assert run().tobytes() == run().tobytes()


_PRIMS = {
    "add": (lambda a, b: a + b, 2),
    "mul": (lambda a, b: a * b, 2),
    "sub_div": (lambda a, b: (a - b) / (ops.square(b) + 1.0), 2),
    "matmul": (lambda a, b: ops.matmul(a, ops.transpose(b, (1, 0))), 2),
    "sigmoid": (ops.sigmoid, 1),
    "tanh": (ops.tanh, 1),
    "silu": (ops.silu, 1),
    "exp": (lambda a: ops.exp(ops.scale(a, 0.3)), 1),
    "softmax": (lambda a: ops.softmax(a, axis=-1), 1),
    "log_softmax": (lambda a: ops.log_softmax(a, axis=0), 1),
    "layernorm": (lambda a: ops.layernorm(a, axis=-1), 1),
    "split_concat": (lambda a: ops.concat(ops.split(a, 2, axis=1)[::-1], axis=1), 1),
    "mean": (lambda a: ops.mean(a, axis=0), 1),
}


@pytest.mark.parametrize("name", sorted(_PRIMS))
def test_primitives_gradcheck_many_seeds(name):
    fn, arity = _PRIMS[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng([seed, 99])
        ins = [rnd(rng, 3, 4) for _ in range(arity)]
        worst = max(worst, gradcheck(fn, ins, seed=seed).max_rel_err)
    assert worst < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_conv_gradcheck_property(c, o, h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    x, wt, b = rnd(rng, 1, c, h, w), rnd(rng, o, c, k, k), rnd(rng, o)
    rep = gradcheck(lambda x, wt, b: ops.conv2d(x, wt, b, stride=stride, pad=k // 2), [x, wt, b])
    assert rep.max_rel_err < 1e-5
