"""Scale-Aware Attention: windowed local branch, spatial-reduction global branch, gated fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import FeedForward, LayerNorm, Linear, Module, zeros
from .tensor import Tensor


@dataclass
class SaaConfig:
    embed_dim: int = 64
    heads: int = 4
    window_size: int = 2
    reduction_ratio: int = 2
    ffn_dim: int | None = None
    use_gpe: bool = True
    gate_value: float | None = None  # freeze the gate to a constant blend weight

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")
        if self.gate_value is not None and not 0.0 <= self.gate_value <= 1.0:
            raise ValueError("gate_value must lie in [0, 1]")
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


# --------------------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowLayout:
    n: int
    channels: int
    height: int
    width: int
    window: int

    @property
    def padded(self) -> tuple[int, int]:
        w = self.window
        return -(-self.height // w) * w, -(-self.width // w) * w

    @property
    def grid(self) -> tuple[int, int]:
        hp, wp = self.padded
        return hp // self.window, wp // self.window

    @property
    def num_windows(self) -> int:
        gh, gw = self.grid
        return gh * gw


def window_partition(x: Tensor, w: int) -> tuple[Tensor, WindowLayout]:
    """N,C,H,W -> (N*nw, C, w, w), windows in row-major order within each image."""
    if w <= 0:
        raise ValueError(f"window size must be positive, got {w}")
    n, c, h, wd = x.shape
    layout = WindowLayout(n, c, h, wd, w)
    hp, wp = layout.padded
    if (hp, wp) != (h, wd):
        x = ops.pad2d(x, 0, hp - h, 0, wp - wd)
    gh, gw = layout.grid
    t = ops.reshape(x, (n, c, gh, w, gw, w))
    t = ops.transpose(t, (0, 2, 4, 1, 3, 5))
    return ops.reshape(t, (n * gh * gw, c, w, w)), layout


def window_merge(windows: Tensor, layout: WindowLayout) -> Tensor:
    n, c, w = layout.n, windows.shape[1], layout.window
    gh, gw = layout.grid
    t = ops.reshape(windows, (n, gh, gw, c, w, w))
    t = ops.transpose(t, (0, 3, 1, 4, 2, 5))
    x = ops.reshape(t, (n, c, gh * w, gw * w))
    if (gh * w, gw * w) != (layout.height, layout.width):
        x = x[:, :, : layout.height, : layout.width]
    return x


def relative_position_index(w: int) -> np.ndarray:
    """(w*w, w*w) indices into a (2w-1)^2 relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def sinusoidal_2d(ys: np.ndarray, xs: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2-D sine/cosine encoding: first half of ``dim`` encodes y, second half x."""
    if dim % 4:
        raise ValueError("sinusoidal_2d needs dim divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))

    def enc(p):
        a = np.asarray(p, dtype=np.float64)[:, None] * freqs[None]
        return np.concatenate([np.sin(a), np.cos(a)], axis=1)

    return np.concatenate([enc(ys), enc(xs)], axis=1).astype(dtype)


def grid_positions(h: int, w: int, r: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Centres of the r x r cells (ragged edge cells use their valid pixels), row-major."""
    def centres(n):
        starts = np.arange(0, n, r)
        ends = np.minimum(starts + r, n)
        return (starts + ends - 1) / 2.0

    cy, cx = np.meshgrid(centres(h), centres(w), indexing="ij")
    return cy.reshape(-1), cx.reshape(-1)


def to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def to_map(t: Tensor, h: int, w: int) -> Tensor:
    n, l, c = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1)), (n, c, h, w))


def _heads(t: Tensor, heads: int) -> Tensor:
    b, l, c = t.shape
    return ops.transpose(ops.reshape(t, (b, l, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, l, d = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1, 3)), (b, l, h * d))


def attend(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
           mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d) + bias) v over B,h,L,d tensors; returns (out, weights)."""
    d = q.shape[-1]
    logits = ops.scale(ops.einsum("bhqd,bhkd->bhqk", q, k), 1.0 / np.sqrt(d))
    if bias is not None:
        logits = ops.add(logits, bias)
    if mask is not None:
        logits = ops.add(logits, Tensor(mask.astype(q.dtype)))
    attn = ops.softmax(logits, axis=-1)
    return ops.einsum("bhqk,bhkd->bhqd", attn, v), attn


# --------------------------------------------------------------------------- branches


class LocalDetailBranch(Module):
    def __init__(self, rng, cfg: SaaConfig, dtype=np.float32):
        c = cfg.embed_dim
        self.qkv = Linear(rng, c, 3 * c, bias=False, dtype=dtype)
        self.proj = Linear(rng, c, c, dtype=dtype)
        w = cfg.window_size
        self.lpe = zeros(((2 * w - 1) ** 2, cfg.heads), dtype)

    def forward(self, x: Tensor, cfg: SaaConfig) -> Tensor:
        return local_detail_attention(x, cfg, self)


def local_detail_attention(x: Tensor, cfg: SaaConfig, params: LocalDetailBranch,
                           use_lpe: bool = True) -> Tensor:
    """Self-attention inside non-overlapping w x w windows, merged back to N,C,H,W."""
    w = cfg.window_size
    windows, layout = window_partition(x, w)
    b, c = windows.shape[:2]
    tok = ops.transpose(ops.reshape(windows, (b, c, w * w)), (0, 2, 1))
    qkv = params.qkv(tok)
    q, k, v = (_heads(t, cfg.heads) for t in ops.split(qkv, 3, axis=2))
    bias = None
    if use_lpe:
        idx = relative_position_index(w)
        bias = ops.transpose(ops.take(params.lpe, idx, axis=0), (2, 0, 1))  # heads,L,L
    mask = None
    if layout.padded != (layout.height, layout.width):
        valid = np.zeros(layout.padded, dtype=bool)
        valid[: layout.height, : layout.width] = True
        gh, gw = layout.grid
        vw = valid.reshape(gh, w, gw, w).transpose(0, 2, 1, 3).reshape(gh * gw, w * w)
        vw = np.tile(vw, (layout.n, 1))
        mask = np.where(vw, 0.0, -1e9)[:, None, None, :]
    out, _ = attend(q, k, v, bias, mask)
    out = params.proj(_merge_heads(out))
    out = ops.reshape(ops.transpose(out, (0, 2, 1)), (b, c, w, w))
    return window_merge(out, layout)


class GlobalContextBranch(Module):
    def __init__(self, rng, cfg: SaaConfig, dtype=np.float32):
        c = cfg.embed_dim
        self.q = Linear(rng, c, c, bias=False, dtype=dtype)
        self.kv = Linear(rng, c, 2 * c, bias=False, dtype=dtype)
        self.proj = Linear(rng, c, c, dtype=dtype)

    def forward(self, x: Tensor, cfg: SaaConfig) -> Tensor:
        return global_context_attention(x, cfg, self)


def global_context_attention(x: Tensor, cfg: SaaConfig, params: GlobalContextBranch,
                             return_weights: bool = False):
    """Full-resolution queries against keys/values from an r x r average-pooled map.

    Scene positional encodings are added to the query and key inputs before
    projection (values are position-free).
    """
    n, c, h, w = x.shape
    r = cfg.reduction_ratio
    tok = to_tokens(x)
    red = ops.avg_pool2d(x, r) if r > 1 else x
    rtok = to_tokens(red)
    q_in, k_in = tok, rtok
    if cfg.use_gpe:
        qy, qx = grid_positions(h, w, 1)
        ky, kx = grid_positions(h, w, r)
        q_in = ops.add(tok, Tensor(sinusoidal_2d(qy, qx, c, x.dtype)))
        k_in = ops.add(rtok, Tensor(sinusoidal_2d(ky, kx, c, x.dtype)))
    q = _heads(params.q(q_in), cfg.heads)
    wk, wv = ops.split(params.kv.weight, 2, axis=1)
    k = _heads(ops.matmul(k_in, wk), cfg.heads)
    v = _heads(ops.matmul(rtok, wv), cfg.heads)
    out, attn = attend(q, k, v)
    out = to_map(params.proj(_merge_heads(out)), h, w)
    return (out, attn) if return_weights else out


def gate_fuse(f_local: Tensor, f_global: Tensor, w_gate: Tensor, f_cross: Tensor | None = None) -> Tensor:
    """f_local * (1 - gate) + f_global * gate + f_cross, gate broadcast over channels."""
    if f_local.shape != f_global.shape:
        raise ValueError(f"gate_fuse: local {f_local.shape} vs global {f_global.shape}")
    if f_cross is not None and f_cross.shape != f_local.shape:
        raise ValueError(f"gate_fuse: cross {f_cross.shape} vs {f_local.shape}")
    try:
        np.broadcast_shapes(w_gate.shape, f_local.shape)
    except ValueError:
        raise ValueError(f"gate_fuse: gate {w_gate.shape} does not broadcast to {f_local.shape}") from None
    one = Tensor(np.ones((), dtype=f_local.dtype))
    out = ops.add(ops.mul(f_local, ops.sub(one, w_gate)), ops.mul(f_global, w_gate))
    if f_cross is not None:
        out = ops.add(out, f_cross)
    return out


class SAA(Module):
    """One pre-norm encoder layer: x + gated(LDB, GCB) then x + FFN."""

    def __init__(self, rng, cfg: SaaConfig, dtype=np.float32):
        self.cfg = cfg
        c = cfg.embed_dim
        self.norm1 = LayerNorm(c, axis=1, dtype=dtype)
        self.ldb = LocalDetailBranch(rng, cfg, dtype)
        self.gcb = GlobalContextBranch(rng, cfg, dtype)
        self.gate = Linear(rng, c, 1, dtype=dtype, zero=True)
        self.cross = Linear(rng, c, c, dtype=dtype, zero=True)
        self.norm2 = LayerNorm(c, axis=1, dtype=dtype)
        self.ffn = FeedForward(rng, c, cfg.ffn_dim, dtype)
        self.last_gate: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        return saa_forward(x, self.cfg, self)


def gate_map(a: Tensor, cfg: SaaConfig, params: SAA) -> Tensor:
    n, c, h, w = a.shape
    if cfg.gate_value is not None:
        return Tensor(np.full((n, 1, h, w), cfg.gate_value, dtype=a.dtype))
    g = ops.sigmoid(params.gate(to_tokens(a)))  # N,L,1
    return to_map(g, h, w)


def _ffn_block(y: Tensor, params: SAA) -> Tensor:
    h, w = y.shape[2:]
    z = to_tokens(params.norm2(y))
    return ops.add(y, to_map(params.ffn(z), h, w))


def saa_forward(x: Tensor, cfg: SaaConfig, params: SAA) -> Tensor:
    n, c, h, w = x.shape
    a = params.norm1(x)
    f_local = local_detail_attention(a, cfg, params.ldb)
    f_global = global_context_attention(a, cfg, params.gcb)
    g = gate_map(a, cfg, params)
    params.last_gate = g.data
    prod = to_tokens(ops.mul(f_local, f_global))
    f_cross = to_map(params.cross(prod), h, w)
    fused = gate_fuse(f_local, f_global, g, f_cross)
    return _ffn_block(ops.add(x, fused), params)


def ldb_only_forward(x: Tensor, cfg: SaaConfig, params: SAA) -> Tensor:
    """Same residual/FFN wrapper with the fusion replaced by the local branch alone."""
    a = params.norm1(x)
    return _ffn_block(ops.add(x, local_detail_attention(a, cfg, params.ldb)), params)


class PlainAttention(Module):
    """Single-branch full self-attention encoder layer (the SAA-off ablation)."""

    def __init__(self, rng, cfg: SaaConfig, dtype=np.float32):
        self.cfg = SaaConfig(cfg.embed_dim, cfg.heads, cfg.window_size, 1, cfg.ffn_dim, cfg.use_gpe)
        c = cfg.embed_dim
        self.norm1 = LayerNorm(c, axis=1, dtype=dtype)
        self.attn = GlobalContextBranch(rng, self.cfg, dtype)
        self.norm2 = LayerNorm(c, axis=1, dtype=dtype)
        self.ffn = FeedForward(rng, c, self.cfg.ffn_dim, dtype)
        self.last_gate = None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.add(x, global_context_attention(self.norm1(x), self.cfg, self.attn))
        return _ffn_block(y, self)
