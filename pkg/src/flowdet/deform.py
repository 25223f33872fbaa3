"""Geometric Deformable Unit, Adaptive Refinement Block and the PAFC cascade.

The GDU runs two deformable-convolution branches. The horizontal branch lets
its sampling points move up to ``sigma`` pixels along x but only ``epsilon``
along y; the vertical branch is the mirror image. Each sampled value is
weighted by a per-location modulation (sigmoid head) times a kernel weight and
by ``psi(|offset|) = exp(-(|offset| / tau)**2)``, which shrinks the
contribution of far-displaced samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import Conv2d, LayerNorm, Module, param, uniform_init, zeros
from .tensor import Tensor

BRANCHES = ("horizontal", "vertical")


def grid_points(k: int = 3) -> list[tuple[int, int]]:
    r = k // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


@dataclass
class GduConfig:
    kernel_points: list[tuple[int, int]] = field(default_factory=lambda: grid_points(3))
    sigma: float = 4.0
    epsilon: float | None = None  # defaults to sigma / 4
    tau: float = 4.0
    branches: tuple[str, ...] = BRANCHES

    def __post_init__(self):
        self.kernel_points = [tuple(int(v) for v in p) for p in self.kernel_points]
        if self.epsilon is None:
            self.epsilon = self.sigma / 4.0
        if (0, 0) not in self.kernel_points:
            raise ValueError("kernel_points must contain the origin (0, 0)")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 <= self.epsilon <= max(self.sigma, 0.0):
            raise ValueError("epsilon must satisfy 0 <= epsilon <= sigma")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        for b in self.branches:
            if b not in BRANCHES:
                raise ValueError(f"unknown branch {b!r}")

    @property
    def num_points(self) -> int:
        return len(self.kernel_points)

    @property
    def reach(self) -> int:
        return max(max(abs(dy), abs(dx)) for dy, dx in self.kernel_points)


@dataclass
class OffsetField:
    offsets: Tensor  # N, 2K, H, W; channel 2k is dy, 2k+1 is dx
    mod_weights: Tensor  # N, K, H, W
    psi: Tensor  # N, K, H, W

    @property
    def dy(self) -> Tensor:
        n, k2, h, w = self.offsets.shape
        return self.offsets.reshape(n, k2 // 2, 2, h, w)[:, :, 0]

    @property
    def dx(self) -> Tensor:
        n, k2, h, w = self.offsets.shape
        return self.offsets.reshape(n, k2 // 2, 2, h, w)[:, :, 1]


def modulation_psi(r, tau: float = 4.0):
    """Offset-magnitude weight exp(-(r / tau)^2); scalar/array in, same out."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("offset magnitude must be >= 0")
    out = np.exp(-((r / tau) ** 2))
    return float(out) if out.ndim == 0 else out


def psi_from_offsets(dy: Tensor, dx: Tensor, tau: float) -> Tensor:
    """psi of the Euclidean offset norm, computed from squared components (smooth at 0)."""
    r2 = ops.add(ops.square(dy), ops.square(dx))
    return ops.exp(ops.scale(r2, -1.0 / (tau * tau)))


def bilinear_sample(x: Tensor, p) -> Tensor:
    return ops.bilinear_sample(x, p)


def deform_conv(x: Tensor, weight: Tensor, kernel_points, dy: Tensor | None = None,
                dx: Tensor | None = None, modulation: Tensor | None = None) -> Tensor:
    """Stride-1 deformable convolution with output grid equal to the input grid.

    ``weight`` is O,C,K for K = len(kernel_points); ``dy``/``dx``/``modulation``
    are N,K,H,W (omitted means zero offset / unit modulation).
    """
    n, c, h, w = x.shape
    k = len(kernel_points)
    if weight.shape[1:] != (c, k):
        raise ValueError(f"weight shape {weight.shape} does not match C={c}, K={k}")
    pk = np.asarray(kernel_points, dtype=x.dtype)
    base_y = np.arange(h, dtype=x.dtype)[None, None, :, None] + pk[None, :, 0, None, None]
    base_x = np.arange(w, dtype=x.dtype)[None, None, None, :] + pk[None, :, 1, None, None]
    base_y = np.broadcast_to(base_y, (n, k, h, w))
    base_x = np.broadcast_to(base_x, (n, k, h, w))
    py = Tensor(np.ascontiguousarray(base_y)) if dy is None else ops.add(dy, Tensor(base_y))
    px = Tensor(np.ascontiguousarray(base_x)) if dx is None else ops.add(dx, Tensor(base_x))
    cols = ops.deform_sample(x, py, px)  # N,C,K,H,W
    if modulation is not None:
        cols = ops.mul(cols, ops.reshape(modulation, (n, 1, k, h, w)))
    return ops.einsum("nckhw,ock->nohw", cols, weight)


def dense_to_points(weight: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """O,C,kh,kw dense kernel -> (O,C,K weight, matching kernel_points)."""
    o, c, kh, kw = weight.shape
    pts = [(dy, dx) for dy in range(-(kh // 2), kh // 2 + 1) for dx in range(-(kw // 2), kw // 2 + 1)]
    return weight.reshape(o, c, kh * kw), pts


class GDU(Module):
    """Parameters for one Geometric Deformable Unit operating on ``channels`` maps."""

    def __init__(self, rng, channels: int, cfg: GduConfig | None = None, dtype=np.float32):
        self.cfg = cfg or GduConfig()
        k = self.cfg.num_points
        c = channels
        self.dw_depth = uniform_init(rng, (c, 3, 3), 9, dtype)
        self.dw_point = uniform_init(rng, (c, c), c, dtype)
        self.dw_bias = zeros((c,), dtype)
        self.offset_heads = [Conv2d(rng, c, 2 * k, 1, dtype=dtype, zero=True) for _ in self.cfg.branches]
        self.mod_heads = [Conv2d(rng, c, k, 1, dtype=dtype, zero=True) for _ in self.cfg.branches]
        self.kernels = [uniform_init(rng, (c, c, k), c * k, dtype) for _ in self.cfg.branches]
        self.merge = Conv2d(rng, c, c, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return gdu_forward(x, self.cfg, self)

    def zero_(self) -> "GDU":
        for p in self.parameters():
            p.data[...] = 0
        return self


def _branch_scales(cfg: GduConfig, branch: str) -> tuple[float, float]:
    """(y scale, x scale) of the tanh offset head for a branch."""
    if branch == "horizontal":
        return cfg.epsilon, cfg.sigma
    return cfg.sigma, cfg.epsilon


def predict_offsets(x: Tensor, cfg: GduConfig, params: GDU) -> dict[str, OffsetField]:
    """Offset, modulation and psi fields for every configured branch."""
    feat = ops.dwconv(x, params.dw_depth, params.dw_point, params.dw_bias)
    k = cfg.num_points
    n, _, h, w = x.shape
    fields = {}
    for i, branch in enumerate(cfg.branches):
        raw = ops.tanh(params.offset_heads[i](feat))  # N,2K,H,W
        sy, sx = _branch_scales(cfg, branch)
        scales = np.tile(np.array([sy, sx], dtype=x.dtype), k).reshape(1, 2 * k, 1, 1)
        offsets = ops.mul(raw, Tensor(scales))
        omega = ops.sigmoid(params.mod_heads[i](feat))
        of = OffsetField(offsets, omega, None)
        of.psi = psi_from_offsets(of.dy, of.dx, cfg.tau)
        fields[branch] = of
    return fields


def gdu_branch(x: Tensor, cfg: GduConfig, kernel: Tensor, of: OffsetField, use_psi: bool = True) -> Tensor:
    mod = ops.mul(of.mod_weights, of.psi) if use_psi else of.mod_weights
    return deform_conv(x, kernel, cfg.kernel_points, of.dy, of.dx, mod)


def gdu_forward(x: Tensor, cfg: GduConfig, params: GDU, use_psi: bool = True) -> Tensor:
    """Both branches, averaged, then mixed by a pointwise conv."""
    if min(x.shape[2:]) < 2 * cfg.reach + 1:
        raise ValueError(f"spatial dims {x.shape[2:]} smaller than kernel extent {2 * cfg.reach + 1}")
    fields = predict_offsets(x, cfg, params)
    outs = [gdu_branch(x, cfg, params.kernels[i], fields[b], use_psi) for i, b in enumerate(cfg.branches)]
    acc = outs[0]
    for o in outs[1:]:
        acc = ops.add(acc, o)
    if len(outs) > 1:
        acc = ops.scale(acc, 1.0 / len(outs))
    return params.merge(acc)


class ARB(Module):
    """Adaptive Refinement Block: GDU -> channel LayerNorm -> SiLU -> 1x1 conv, plus identity."""

    def __init__(self, rng, channels: int, cfg: GduConfig | None = None, dtype=np.float32):
        self.gdu = GDU(rng, channels, cfg, dtype)
        self.norm = LayerNorm(channels, axis=1, dtype=dtype)
        self.proj = Conv2d(rng, channels, channels, 1, dtype=dtype)

    def forward(self, y: Tensor) -> Tensor:
        return arb_forward(y, self)


def arb_forward(y: Tensor, params: ARB) -> Tensor:
    h = params.gdu(y)
    h = ops.silu(params.norm(h))
    return ops.add(y, params.proj(h))


@dataclass
class PafcConfig:
    in_channels: int
    arb_count: int = 3  # n: the chain produces Y_2..Y_n, so n - 1 ARBs
    out_channels: int | None = None
    hidden_channels: int | None = None
    gdu: GduConfig = field(default_factory=GduConfig)

    def __post_init__(self):
        if self.arb_count < 1:
            raise ValueError("arb_count must be >= 1")
        if self.hidden_channels is None:
            self.hidden_channels = self.in_channels
        if self.out_channels is None:
            self.out_channels = self.in_channels
        if self.hidden_channels % 2:
            raise ValueError(f"PAFC split needs an even channel count, got {self.hidden_channels}")

    @property
    def fusion_channels(self) -> int:
        return self.hidden_channels // 2 * (self.arb_count + 1)


class PAFC(Module):
    def __init__(self, rng, cfg: PafcConfig, dtype=np.float32):
        self.cfg = cfg
        half = cfg.hidden_channels // 2
        self.stem = Conv2d(rng, cfg.in_channels, cfg.hidden_channels, 1, dtype=dtype)
        self.arbs = [ARB(rng, half, cfg.gdu, dtype) for _ in range(cfg.arb_count - 1)]
        self.stage_weights = zeros((cfg.arb_count + 1,), dtype)
        self.fusion = Conv2d(rng, cfg.fusion_channels, cfg.out_channels, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return pafc_forward(x, self.cfg, self)


def pafc_forward(x: Tensor, cfg: PafcConfig, params: PAFC) -> Tensor:
    """Stem conv, split, ARB chain from Y_1, softmax-weighted concat, 1x1 fusion."""
    stem = ops.silu(params.stem(x))
    ys = ops.split(stem, 2, axis=1)
    for arb in params.arbs:
        ys.append(arb(ys[-1]))
    wts = ops.softmax(params.stage_weights, axis=0)
    weighted = [ops.mul(y, ops.reshape(wts[i], (1, 1, 1, 1))) for i, y in enumerate(ys)]
    return params.fusion(ops.concat(weighted, axis=1))
