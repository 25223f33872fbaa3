import numpy as np
import pytest

from flowdet import ops
from flowdet.deform import (ARB, GDU, PAFC, GduConfig, OffsetField, PafcConfig, arb_forward, bilinear_sample,
                            deform_conv, dense_to_points, gdu_branch, gdu_forward, modulation_psi, pafc_forward,
                            predict_offsets)
from flowdet.gradcheck import gradcheck
from flowdet.gradsuite import randomize, run_suite
from flowdet.tensor import Tensor, no_grad

F64 = np.float64


def test_bilinear_integer_coordinate():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    out = bilinear_sample(Tensor(x), (2.0, 3.0)).data
    assert np.array_equal(out, x[:, :, 2, 3])


def test_bilinear_four_corner_average():
    x = Tensor(np.array([[[[0.0, 2.0], [4.0, 6.0]]]]))
    assert bilinear_sample(x, (0.5, 0.5)).data[0, 0] == 3.0


def test_bilinear_out_of_bounds_reads_zero():
    x = Tensor(np.ones((1, 1, 3, 3)))
    assert bilinear_sample(x, (-2.0, 1.0)).data[0, 0] == 0.0
    assert bilinear_sample(x, (-0.5, 1.0)).data[0, 0] == 0.5


def test_bilinear_gradient_wrt_position():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    p = Tensor(np.array([1.3, 2.6]), requires_grad=True)
    rep = gradcheck(bilinear_sample, [x, p])
    assert rep.max_rel_err < 1e-5


def test_cold_start_offsets_are_zero():
    rng = np.random.default_rng(2)
    g = GDU(rng, 4, GduConfig(), F64)
    fields = predict_offsets(Tensor(rng.standard_normal((2, 4, 6, 6))), g.cfg, g)
    for of in fields.values():
        assert np.all(of.offsets.data == 0)
        assert np.all(of.psi.data == 1.0)


def test_zero_sigma_gives_zero_offsets():
    rng = np.random.default_rng(3)
    cfg = GduConfig(sigma=0.0)
    g = randomize(GDU(rng, 3, cfg, F64), rng, 1.0)
    for of in predict_offsets(Tensor(rng.standard_normal((1, 3, 5, 5))), cfg, g).values():
        assert np.all(of.offsets.data == 0)


def test_offsets_respect_axis_caps():
    rng = np.random.default_rng(4)
    cfg = GduConfig(sigma=4.0)
    g = randomize(GDU(rng, 2, cfg, F64), rng, 3.0)
    with no_grad():
        fields = predict_offsets(Tensor(rng.standard_normal((1000, 2, 5, 5)) * 3), cfg, g)
    h, v = fields["horizontal"], fields["vertical"]
    assert np.abs(h.dx.data).max() <= cfg.sigma and np.abs(h.dy.data).max() <= cfg.epsilon
    assert np.abs(v.dy.data).max() <= cfg.sigma and np.abs(v.dx.data).max() <= cfg.epsilon
    # the caps are reached in practice, not just trivially satisfied
    assert np.abs(h.dx.data).max() > cfg.epsilon


def test_psi_values():
    assert modulation_psi(0.0) == 1.0
    assert abs(modulation_psi(4.0, tau=4.0) - np.exp(-1)) < 1e-15
    assert abs(modulation_psi(4.0) - 0.36788) < 1e-5
    r = np.linspace(0, 20, 401)
    assert np.all(np.diff(modulation_psi(r, 2.5)) < 0)
    with pytest.raises(ValueError):
        modulation_psi(-1.0)


def test_zero_offset_gdu_branch_is_dense_conv():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    wk, pts = dense_to_points(w)
    cfg = GduConfig(kernel_points=pts)
    n, k = 2, len(pts)
    of = OffsetField(Tensor(np.zeros((n, 2 * k, 7, 6))), Tensor(np.ones((n, k, 7, 6))), Tensor(np.ones((n, k, 7, 6))))
    got = gdu_branch(Tensor(x), cfg, Tensor(wk), of).data
    ref = ops.conv2d(Tensor(x), Tensor(w), pad=1).data
    assert np.abs(got - ref).max() < 1e-10


def test_single_point_closed_form():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 1, 5, 6)))
    cfg = GduConfig(kernel_points=[(0, 0)], sigma=1.0)
    dy = Tensor(np.zeros((1, 1, 5, 6)))
    dx = Tensor(np.full((1, 1, 5, 6), 0.5))
    offsets = Tensor(np.stack([dy.data, dx.data], axis=2).reshape(1, 2, 5, 6))
    of = OffsetField(offsets, Tensor(np.ones((1, 1, 5, 6))), Tensor(np.full((1, 1, 5, 6), modulation_psi(0.5, cfg.tau))))
    out = gdu_branch(x, cfg, Tensor(np.ones((1, 1, 1))), of).data
    for y in range(5):
        for xx in range(6):
            ref = bilinear_sample(x, (y, xx + 0.5)).data[0, 0] * modulation_psi(0.5, cfg.tau)
            assert abs(out[0, 0, y, xx] - ref) < 1e-12


def test_gdu_zero_input_gives_zero():
    rng = np.random.default_rng(7)
    g = randomize(GDU(rng, 3, GduConfig(), F64), rng, 0.5)
    for p in (g.merge.bias,):
        p.data[...] = 0
    out = gdu_forward(Tensor(np.zeros((1, 3, 6, 6))), g.cfg, g)
    assert np.all(out.data == 0)


def test_psi_never_amplifies():
    rng = np.random.default_rng(8)
    cfg = GduConfig()
    g = randomize(GDU(rng, 2, cfg, F64), rng, 1.0)
    x = Tensor(np.abs(rng.standard_normal((1, 2, 8, 8))))
    kernel = Tensor(np.abs(g.kernels[0].data))
    of = predict_offsets(x, cfg, g)["horizontal"]
    with_psi = gdu_branch(x, cfg, kernel, of, use_psi=True).data
    without = gdu_branch(x, cfg, kernel, of, use_psi=False).data
    assert np.abs(with_psi).max() <= np.abs(without).max()
    assert np.all(with_psi <= without + 1e-15)


def test_gdu_rejects_tiny_maps():
    g = GDU(np.random.default_rng(0), 2, GduConfig(), F64)
    with pytest.raises(ValueError):
        gdu_forward(Tensor(np.zeros((1, 2, 2, 2))), g.cfg, g)


def test_gdu_config_invariants():
    with pytest.raises(ValueError):
        GduConfig(kernel_points=[(1, 1)])
    with pytest.raises(ValueError):
        GduConfig(sigma=1.0, epsilon=2.0)
    with pytest.raises(ValueError):
        GduConfig(tau=0.0)


def test_arb_zero_weights_is_identity():
    rng = np.random.default_rng(9)
    a = ARB(rng, 4, GduConfig(), F64)
    for p in a.parameters():
        p.data[...] = 0
    y = Tensor(rng.standard_normal((2, 4, 6, 7)))
    assert np.array_equal(arb_forward(y, a).data, y.data)


@pytest.mark.parametrize("hw", [(5, 5), (6, 9), (11, 4)])
def test_arb_preserves_shape(hw):
    rng = np.random.default_rng(10)
    a = randomize(ARB(rng, 4, GduConfig(), F64), rng, 0.3)
    assert arb_forward(Tensor(rng.standard_normal((1, 4) + hw)), a).shape == (1, 4) + hw


def test_pafc_channel_bookkeeping():
    assert PafcConfig(16, arb_count=3).fusion_channels == 16 // 2 * 4
    p = PAFC(np.random.default_rng(0), PafcConfig(8, arb_count=3), F64)
    assert len(p.arbs) == 2
    assert p.fusion.weight.shape[1] == 16


def test_pafc_single_stage_is_fusion_of_split():
    rng = np.random.default_rng(11)
    cfg = PafcConfig(6, arb_count=1)
    p = randomize(PAFC(rng, cfg, F64), rng, 0.5)
    x = Tensor(rng.standard_normal((1, 6, 5, 5)))
    out = pafc_forward(x, cfg, p).data
    stem = ops.silu(p.stem(x)).data
    w = np.exp(p.stage_weights.data) / np.exp(p.stage_weights.data).sum()
    cat = np.concatenate([stem[:, :3] * w[0], stem[:, 3:] * w[1]], axis=1)
    ref = p.fusion(Tensor(cat)).data
    assert np.abs(out - ref).max() < 1e-12


def test_pafc_odd_channels_rejected():
    with pytest.raises(ValueError):
        PafcConfig(7)


def test_stage_weights_normalise():
    p = randomize(PAFC(np.random.default_rng(1), PafcConfig(8), F64), np.random.default_rng(2), 1.0)
    w = ops.softmax(p.stage_weights, axis=0).data
    assert abs(w.sum() - 1) < 1e-15


def test_deform_conv_gradient_wrt_offsets():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 9)), requires_grad=True)
    dy = Tensor(rng.uniform(-0.45, 0.45, (1, 9, 5, 5)), requires_grad=True)
    dx = Tensor(rng.uniform(-0.45, 0.45, (1, 9, 5, 5)), requires_grad=True)
    pts = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)]
    rep = gradcheck(lambda x, w, dy, dx: deform_conv(x, w, pts, dy, dx), [x, w, dy, dx], max_elems=30)
    assert rep.max_rel_err < 1e-5


@pytest.mark.parametrize("name", ["bilinear_sample", "gdu_forward", "arb_forward", "pafc_forward"])
def test_registered_gradchecks(name):
    (row,) = run_suite([name])
    assert row.passed, row
    assert row.max_rel_err < 1e-5
