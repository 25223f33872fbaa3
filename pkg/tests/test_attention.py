import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowdet.attention import (SAA, GlobalContextBranch, LocalDetailBranch, SaaConfig, gate_fuse,
                               global_context_attention, ldb_only_forward, local_detail_attention, saa_forward,
                               sinusoidal_2d, window_merge, window_partition)
from flowdet.detector import build_model, micro_config
from flowdet.detector.ablation import gate_statistics
from flowdet.data import SynthSceneSpec, synth_dataset
from flowdet.gradsuite import randomize, run_suite
from flowdet.tensor import Tensor

F64 = np.float64


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def test_partition_row_major():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    win, layout = window_partition(Tensor(x), 2)
    assert win.shape == (4, 1, 2, 2) and layout.num_windows == 4
    assert np.array_equal(win.data[0, 0], [[0, 1], [4, 5]])
    assert np.array_equal(win.data[1, 0], [[2, 3], [6, 7]])
    assert np.array_equal(win.data[2, 0], [[8, 9], [12, 13]])


@pytest.mark.parametrize("hw,w", [((4, 4), 2), ((5, 7), 2), ((6, 6), 4), ((3, 3), 8)])
def test_partition_round_trip(hw, w):
    x = np.random.default_rng(0).standard_normal((2, 3) + hw)
    win, layout = window_partition(Tensor(x), w)
    assert np.array_equal(window_merge(win, layout).data, x)


def test_partition_whole_map_window():
    x = np.random.default_rng(1).standard_normal((1, 2, 4, 4))
    win, _ = window_partition(Tensor(x), 4)
    assert np.array_equal(win.data, x)


def test_partition_rejects_bad_window():
    with pytest.raises(ValueError):
        window_partition(Tensor(np.zeros((1, 1, 4, 4))), 0)


def test_single_token_windows_return_value_projection():
    rng = np.random.default_rng(2)
    cfg = SaaConfig(embed_dim=8, heads=2, window_size=1)
    b = randomize(LocalDetailBranch(rng, cfg, F64), rng, 0.5)
    x = rng.standard_normal((1, 8, 3, 4))
    out = local_detail_attention(Tensor(x), cfg, b).data
    tok = x.reshape(8, -1).T
    v = tok @ b.qkv.weight.data[:, 16:]
    ref = (v @ b.proj.weight.data + b.proj.bias.data).T.reshape(1, 8, 3, 4)
    assert np.abs(out - ref).max() < 1e-12


def _masked_full_attention(x, cfg, b):
    """Every token attends over the whole map; pairs in different windows are masked out."""
    n, c, h, w = x.shape
    ws, nh, d = cfg.window_size, cfg.heads, cfg.head_dim
    tok = x.reshape(n, c, h * w).transpose(0, 2, 1)
    qkv = tok @ b.qkv.weight.data
    q, k, v = (qkv[..., i * c:(i + 1) * c].reshape(n, h * w, nh, d).transpose(0, 2, 1, 3) for i in range(3))
    ys, xs = np.divmod(np.arange(h * w), w)
    same = (ys[:, None] // ws == ys[None] // ws) & (xs[:, None] // ws == xs[None] // ws)
    ry = ys[:, None] % ws - ys[None] % ws + ws - 1
    rx = xs[:, None] % ws - xs[None] % ws + ws - 1
    table = b.lpe.data.reshape(2 * ws - 1, 2 * ws - 1, nh)
    bias = table[ry, rx].transpose(2, 0, 1)  # heads, L, L
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d) + bias
    logits = np.where(same, logits, -np.inf)
    out = (_softmax(logits) @ v).transpose(0, 2, 1, 3).reshape(n, h * w, c)
    out = out @ b.proj.weight.data + b.proj.bias.data
    return out.transpose(0, 2, 1).reshape(n, c, h, w)


@pytest.mark.parametrize("ws", [1, 2, 4])
def test_window_attention_equals_block_diagonal_full_attention(ws):
    rng = np.random.default_rng(3)
    cfg = SaaConfig(embed_dim=8, heads=2, window_size=ws)
    b = randomize(LocalDetailBranch(rng, cfg, F64), rng, 0.5)
    x = rng.standard_normal((2, 8, 8, 8))
    got = local_detail_attention(Tensor(x), cfg, b).data
    assert np.abs(got - _masked_full_attention(x, cfg, b)).max() < 1e-6


def test_zero_lpe_is_no_lpe():
    rng = np.random.default_rng(4)
    cfg = SaaConfig(embed_dim=8, heads=2, window_size=2)
    b = LocalDetailBranch(rng, cfg, F64)
    x = Tensor(rng.standard_normal((1, 8, 4, 6)))
    assert np.array_equal(local_detail_attention(x, cfg, b).data,
                          local_detail_attention(x, cfg, b, use_lpe=False).data)


def _full_attention(x, cfg, b):
    n, c, h, w = x.shape
    nh, d = cfg.heads, cfg.head_dim
    tok = x.reshape(n, c, h * w).transpose(0, 2, 1)
    ys, xs = np.divmod(np.arange(h * w), w)
    pe = sinusoidal_2d(ys.astype(float), xs.astype(float), c)
    wk, wv = b.kv.weight.data[:, :c], b.kv.weight.data[:, c:]

    def heads(t):
        return t.reshape(n, h * w, nh, d).transpose(0, 2, 1, 3)

    q, k, v = heads((tok + pe) @ b.q.weight.data), heads((tok + pe) @ wk), heads(tok @ wv)
    attn = _softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(d))
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(n, h * w, c) @ b.proj.weight.data + b.proj.bias.data
    return out.transpose(0, 2, 1).reshape(n, c, h, w)


def test_gcb_without_reduction_is_full_attention():
    rng = np.random.default_rng(5)
    cfg = SaaConfig(embed_dim=8, heads=2, reduction_ratio=1)
    b = randomize(GlobalContextBranch(rng, cfg, F64), rng, 0.5)
    x = rng.standard_normal((2, 8, 5, 6))
    got = global_context_attention(Tensor(x), cfg, b).data
    assert np.abs(got - _full_attention(x, cfg, b)).max() < 1e-10


@pytest.mark.parametrize("hw,r,tokens", [((8, 8), 2, 16), ((8, 8), 4, 4), ((7, 5), 2, 12), ((8, 8), 1, 64)])
def test_gcb_key_count_and_row_sums(hw, r, tokens):
    rng = np.random.default_rng(6)
    cfg = SaaConfig(embed_dim=8, heads=2, reduction_ratio=r)
    b = GlobalContextBranch(rng, cfg, F64)
    out, attn = global_context_attention(Tensor(rng.standard_normal((1, 8) + hw)), cfg, b, return_weights=True)
    assert out.shape == (1, 8) + hw
    assert attn.shape == (1, 2, hw[0] * hw[1], tokens)
    assert np.abs(attn.data.sum(axis=-1) - 1).max() < 1e-12


def test_gate_fuse_cases():
    rng = np.random.default_rng(7)
    fl, fg = Tensor(rng.standard_normal((1, 3, 2, 2))), Tensor(rng.standard_normal((1, 3, 2, 2)))
    zero = Tensor(np.zeros((1, 3, 2, 2)))
    assert np.array_equal(gate_fuse(fl, fg, Tensor(np.zeros((1, 1, 2, 2))), zero).data, fl.data)
    assert np.array_equal(gate_fuse(fl, fg, Tensor(np.ones((1, 1, 2, 2))), zero).data, fg.data)
    mid = gate_fuse(Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.full((1, 1, 1, 1), 4.0)),
                    Tensor(np.full((1, 1, 1, 1), 0.5)), Tensor(np.zeros((1, 1, 1, 1))))
    assert mid.item() == 3.0


def test_gate_fuse_shape_mismatch():
    a = Tensor(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ValueError):
        gate_fuse(a, Tensor(np.zeros((1, 3, 2, 3))), Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ValueError):
        gate_fuse(a, a, Tensor(np.zeros((1, 1, 3, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gate_fuse_is_convex(seed):
    rng = np.random.default_rng(seed)
    fl, fg = rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((1, 4, 3, 3))
    g = rng.uniform(0, 1, (1, 1, 3, 3))
    out = gate_fuse(Tensor(fl), Tensor(fg), Tensor(g)).data
    assert np.all(out >= np.minimum(fl, fg) - 1e-12)
    assert np.all(out <= np.maximum(fl, fg) + 1e-12)


def test_closed_gate_reduces_to_local_branch():
    rng = np.random.default_rng(8)
    cfg = SaaConfig(embed_dim=8, heads=2, ffn_dim=16)
    s = randomize(SAA(rng, cfg, F64), rng, 0.5)
    s.cross.weight.data[...] = 0
    s.cross.bias.data[...] = 0
    s.gate.weight.data[...] = 0
    s.gate.bias.data[...] = -60.0
    x = Tensor(rng.standard_normal((1, 8, 6, 6)))
    assert np.abs(saa_forward(x, cfg, s).data - ldb_only_forward(x, cfg, s).data).max() < 1e-12
    frozen = SaaConfig(embed_dim=8, heads=2, ffn_dim=16, gate_value=0.0)
    assert np.array_equal(saa_forward(x, frozen, s).data, ldb_only_forward(x, frozen, s).data)


def test_cold_start_is_pure_gate_blend():
    rng = np.random.default_rng(9)
    cfg = SaaConfig(embed_dim=8, heads=2)
    s = SAA(rng, cfg, F64)
    saa_forward(Tensor(rng.standard_normal((1, 8, 4, 4))), cfg, s)
    assert np.all(s.last_gate == 0.5)


@pytest.mark.parametrize("hw", [(4, 4), (5, 7), (8, 3), (1, 1)])
def test_saa_preserves_shape(hw):
    rng = np.random.default_rng(10)
    cfg = SaaConfig(embed_dim=8, heads=2)
    s = randomize(SAA(rng, cfg, F64), rng, 0.3)
    assert saa_forward(Tensor(rng.standard_normal((2, 8) + hw)), cfg, s).shape == (2, 8) + hw


def test_config_invariants():
    with pytest.raises(ValueError):
        SaaConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        SaaConfig(reduction_ratio=0)
    with pytest.raises(ValueError):
        SaaConfig(gate_value=1.5)


@pytest.mark.parametrize("name", ["local_attention", "global_attention", "gate_fuse", "saa_forward"])
def test_registered_gradchecks(name):
    (row,) = run_suite([name])
    assert row.passed and row.max_rel_err < 1e-5, row


def test_gate_statistics_untrained():
    model = build_model(micro_config())
    scenes = synth_dataset(4, SynthSceneSpec(image_size=(16, 16), scale_range=(3.0, 6.0)), seed=3)
    stats = gate_statistics(model, scenes)
    assert abs(stats["gate_mean"] - 0.5) < 1e-6
    for key in ("small_count", "large_count", "small_mean_gate", "large_mean_gate"):
        assert key in stats
    assert stats["small_count"] + stats["large_count"] == sum(len(gt) for _, gt in scenes)
    for key in ("small_mean_gate", "large_mean_gate"):
        if stats[key] is not None:
            assert abs(stats[key] - 0.5) < 1e-6
