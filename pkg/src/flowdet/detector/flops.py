"""Analytic FLOP counts (2 x multiply-adds) for the detector, from the config alone.

Only dense products are counted: convolutions, linear layers, attention
logits/value products and bilinear sampling. Elementwise activations,
normalisation and pooling are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..attention import SaaConfig
from .config import ModelConfig


@dataclass
class FlopReport:
    layers: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(self.layers.values()))

    def module_totals(self, depth: int = 1) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, v in self.layers.items():
            key = ".".join(name.split(".")[:depth])
            out[key] = out.get(key, 0) + v
        return out

    def add(self, prefix: str, parts: dict[str, int]) -> None:
        for k, v in parts.items():
            self.layers[f"{prefix}.{k}" if prefix else k] = int(v)


def conv_flops(c_in: int, c_out: int, kh: int, kw: int, h_out: int, w_out: int) -> int:
    """2 * O * C * kh * kw * H' * W'."""
    return 2 * c_out * c_in * kh * kw * h_out * w_out


def dwconv_macs(c_in: int, c_out: int, k: int, h: int, w: int) -> int:
    """Multiply-accumulates of a stride-1 depthwise k x k filter followed by a 1x1 mix."""
    return c_in * k * k * h * w + c_out * c_in * h * w


def linear_flops(tokens: int, d_in: int, d_out: int) -> int:
    return 2 * tokens * d_in * d_out


def attention_flops(t_q: int, t_k: int, d: int) -> int:
    """Logits (q k^T) plus the weighted sum of values, summed over heads (d = total width)."""
    return 2 * t_q * t_k * d + 2 * t_q * t_k * d


def gdu_flops(c: int, h: int, w: int, k: int = 9, branches: int = 2) -> dict[str, int]:
    hw = h * w
    parts = {
        "dwconv": 2 * dwconv_macs(c, c, 3, h, w),
        "offset_heads": branches * conv_flops(c, 2 * k, 1, 1, h, w),
        "mod_heads": branches * conv_flops(c, k, 1, 1, h, w),
        "sampling": branches * 2 * 4 * c * k * hw,
        "deform_conv": branches * 2 * c * c * k * hw,
        "merge": conv_flops(c, c, 1, 1, h, w),
    }
    return parts


def pafc_flops(c: int, h: int, w: int, arb_count: int, k: int = 9) -> dict[str, int]:
    half = c // 2
    parts = {"stem": conv_flops(c, c, 1, 1, h, w)}
    for i in range(arb_count - 1):
        for name, v in gdu_flops(half, h, w, k).items():
            parts[f"arb{i}.gdu.{name}"] = v
        parts[f"arb{i}.proj"] = conv_flops(half, half, 1, 1, h, w)
    parts["fusion"] = conv_flops(half * (arb_count + 1), c, 1, 1, h, w)
    return parts


def plain_stage_flops(c: int, h: int, w: int, arb_count: int) -> dict[str, int]:
    parts = {"stem": conv_flops(c, c, 1, 1, h, w)}
    for i in range(arb_count - 1):
        parts[f"conv{i}"] = conv_flops(c, c, 3, 3, h, w)
    return parts


def ldb_flops(cfg: SaaConfig, h: int, w: int) -> dict[str, int]:
    win = cfg.window_size
    hp, wp = -(-h // win) * win, -(-w // win) * win
    tokens = hp * wp
    windows = tokens // (win * win)
    c = cfg.embed_dim
    return {
        "qkv": linear_flops(tokens, c, 3 * c),
        "attention": windows * attention_flops(win * win, win * win, c),
        "proj": linear_flops(tokens, c, c),
    }


def gcb_flops(cfg: SaaConfig, h: int, w: int) -> dict[str, int]:
    """``kv_path`` collects every term proportional to the reduced token count."""
    r = cfg.reduction_ratio
    t_q = h * w
    t_k = -(-h // r) * -(-w // r)
    c = cfg.embed_dim
    return {
        "q": linear_flops(t_q, c, c),
        "kv_path": linear_flops(t_k, c, 2 * c) + attention_flops(t_q, t_k, c),
        "proj": linear_flops(t_q, c, c),
    }


def saa_flops(cfg: SaaConfig, h: int, w: int) -> dict[str, int]:
    c = cfg.embed_dim
    t = h * w
    parts = {f"ldb.{k}": v for k, v in ldb_flops(cfg, h, w).items()}
    parts.update({f"gcb.{k}": v for k, v in gcb_flops(cfg, h, w).items()})
    parts["gate"] = linear_flops(t, c, 1) if cfg.gate_value is None else 0
    parts["cross"] = linear_flops(t, c, c)
    parts["ffn"] = linear_flops(t, c, cfg.ffn_dim) + linear_flops(t, cfg.ffn_dim, c)
    return parts


def plain_attention_flops(cfg: SaaConfig, h: int, w: int) -> dict[str, int]:
    full = SaaConfig(cfg.embed_dim, cfg.heads, cfg.window_size, 1, cfg.ffn_dim, cfg.use_gpe)
    c, t = cfg.embed_dim, h * w
    parts = {f"attn.{k}": v for k, v in gcb_flops(full, h, w).items()}
    parts["ffn"] = linear_flops(t, c, full.ffn_dim) + linear_flops(t, full.ffn_dim, c)
    return parts


def decoder_flops(cfg: ModelConfig, tokens: int) -> dict[str, int]:
    c, q = cfg.saa.embed_dim, cfg.query_count
    per = {
        "q": linear_flops(q, c, c),
        "kv": linear_flops(tokens, c, 2 * c),
        "attention": attention_flops(q, tokens, c),
        "proj": linear_flops(q, c, c),
        "ffn": linear_flops(q, c, cfg.decoder_ffn) + linear_flops(q, cfg.decoder_ffn, c),
    }
    parts = {}
    for i in range(cfg.decoder_layers):
        parts.update({f"layer{i}.{k}": v for k, v in per.items()})
    return parts


def count_flops(cfg: ModelConfig) -> FlopReport:
    """Per-layer FLOPs for one image at the configured input size."""
    h, w = cfg.input_size
    c1, c2 = cfg.stage_channels
    k = cfg.gdu_kernel**2
    rep = FlopReport()
    h1, w1 = -(-h // 2), -(-w // 2)
    h2, w2 = -(-h1 // 2), -(-w1 // 2)
    rep.add("backbone.down1", {"conv": conv_flops(cfg.in_channels, c1, 3, 3, h1, w1)})
    if cfg.backbone == "pafc":
        rep.add("backbone.stage1", pafc_flops(c1, h1, w1, cfg.arb_count, k))
    else:
        rep.add("backbone.stage1", plain_stage_flops(c1, h1, w1, cfg.arb_count))
    rep.add("backbone.down2", {"conv": conv_flops(c1, c2, 3, 3, h2, w2)})
    if cfg.backbone == "pafc":
        rep.add("backbone.stage2", pafc_flops(c2, h2, w2, cfg.arb_count, k))
    else:
        rep.add("backbone.stage2", plain_stage_flops(c2, h2, w2, cfg.arb_count))
    dim = cfg.saa.embed_dim
    rep.add("input_proj", {"conv": conv_flops(c2, dim, 1, 1, h2, w2)})
    if cfg.encoder == "saa":
        rep.add("encoder", saa_flops(cfg.saa, h2, w2))
    else:
        rep.add("encoder", plain_attention_flops(cfg.saa, h2, w2))
    rep.add("decoder", decoder_flops(cfg, h2 * w2))
    q = cfg.query_count
    rep.add("heads", {
        "class": linear_flops(q, dim, cfg.class_count + 1),
        "box": linear_flops(q, dim, dim) + linear_flops(q, dim, 4),
    })
    return rep
