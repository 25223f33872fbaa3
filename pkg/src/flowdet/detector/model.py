"""Toy end-to-end detector: PAFC backbone, SAA encoder layer, query decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import ops
from ..attention import (
    SAA, PlainAttention, _heads, _merge_heads, attend, grid_positions, sinusoidal_2d, to_tokens,
)
from ..deform import PAFC, PafcConfig
from ..nn import Conv2d, FeedForward, LayerNorm, Linear, Module, param
from ..tensor import DTYPES, Tensor, no_grad
from .config import ConfigError, ModelConfig


@dataclass
class DetectionSet:
    """Per-image set prediction: Q boxes (cx, cy, w, h in [0, 1]) and Q x (classes + 1) logits."""

    boxes: np.ndarray
    class_logits: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        z = self.class_logits - self.class_logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def scored(self) -> tuple[np.ndarray, np.ndarray]:
        """(label index, confidence) from the argmax non-background class."""
        p = self.probs[:, :-1]
        labels = p.argmax(axis=-1)
        return labels, p[np.arange(len(p)), labels]


class PlainStage(Module):
    """Ablation stand-in for PAFC: stem 1x1 then dense 3x3 residual blocks at full width."""

    def __init__(self, rng, channels: int, blocks: int, dtype):
        self.stem = Conv2d(rng, channels, channels, 1, dtype=dtype)
        self.convs = [Conv2d(rng, channels, channels, 3, dtype=dtype) for _ in range(blocks)]
        self.norms = [LayerNorm(channels, axis=1, dtype=dtype) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        y = ops.silu(self.stem(x))
        for conv, norm in zip(self.convs, self.norms):
            y = ops.add(y, ops.silu(norm(conv(y))))
        return y


class Backbone(Module):
    """Two stride-2 stages, each a 3x3 strided conv followed by a PAFC (or plain) block."""

    def __init__(self, rng, cfg: ModelConfig, dtype):
        c1, c2 = cfg.stage_channels
        self.down1 = Conv2d(rng, cfg.in_channels, c1, 3, stride=2, dtype=dtype)
        self.down2 = Conv2d(rng, c1, c2, 3, stride=2, dtype=dtype)
        if cfg.backbone == "pafc":
            gdu = cfg.gdu()
            self.stage1 = PAFC(rng, PafcConfig(c1, cfg.arb_count, gdu=gdu), dtype)
            self.stage2 = PAFC(rng, PafcConfig(c2, cfg.arb_count, gdu=gdu), dtype)
        else:
            self.stage1 = PlainStage(rng, c1, cfg.arb_count - 1, dtype)
            self.stage2 = PlainStage(rng, c2, cfg.arb_count - 1, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.stage1(ops.silu(self.down1(x)))
        return self.stage2(ops.silu(self.down2(x)))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def reference_grid(count: int) -> np.ndarray:
    """Initial reference points (cy, cx) in (0, 1): a row-major grid covering the image."""
    side = int(np.ceil(np.sqrt(count)))
    c = (np.arange(side) + 0.5) / side
    cy, cx = np.meshgrid(c, c, indexing="ij")
    return np.stack([cy.reshape(-1), cx.reshape(-1)], axis=1)[:count]


def spatial_prior(ref: Tensor, log_width: Tensor, token_yx: np.ndarray) -> Tensor:
    """Gaussian attention bias -|t - ref|^2 / (2 s^2) per query, shaped 1,1,Q,L."""
    q = ref.shape[0]
    ty = Tensor(token_yx[None, :, 0].astype(ref.dtype))
    tx = Tensor(token_yx[None, :, 1].astype(ref.dtype))
    ry, rx = (ops.reshape(p, (q, 1)) for p in ops.split(ref, 2, axis=1))
    d2 = ops.add(ops.square(ops.sub(ty, ry)), ops.square(ops.sub(tx, rx)))
    inv = ops.exp(ops.scale(log_width, -2.0))  # 1 / s^2
    bias = ops.scale(ops.mul(d2, ops.reshape(inv, (q, 1))), -0.5)
    return ops.reshape(bias, (1, 1, q, token_yx.shape[0]))


class DecoderLayer(Module):
    """Post-norm cross-attention + FFN (no query self-attention); optional additive attention bias."""

    def __init__(self, rng, dim: int, heads: int, ffn: int, dtype):
        self.heads = heads
        self.q = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.k = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.v = Linear(rng, dim, dim, bias=False, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(rng, dim, ffn, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)

    def forward(self, tgt: Tensor, query_pos: Tensor, memory: Tensor, memory_pos: Tensor,
                bias: Tensor | None = None) -> Tensor:
        q = _heads(self.q(ops.add(tgt, query_pos)), self.heads)
        k = _heads(self.k(ops.add(memory, memory_pos)), self.heads)
        v = _heads(self.v(memory), self.heads)
        out, _ = attend(q, k, v, bias)
        tgt = self.norm1(ops.add(tgt, self.proj(_merge_heads(out))))
        return self.norm2(ops.add(tgt, self.ffn(tgt)))


class FlowDet(Module):
    def __init__(self, cfg: ModelConfig, rng_seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        dtype = DTYPES[cfg.dtype]
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
        dim = cfg.saa.embed_dim
        self.backbone = Backbone(rng, cfg, dtype)
        self.input_proj = Conv2d(rng, cfg.stage_channels[1], dim, 1, dtype=dtype)
        if cfg.encoder == "saa":
            self.encoder = SAA(rng, cfg.saa, dtype)
        else:
            self.encoder = PlainAttention(rng, cfg.saa, dtype)
        self.query_embed = param(rng.standard_normal((cfg.query_count, dim)), dtype)
        # each query looks around a learned reference point; boxes are centred relative to it
        self.ref_logit = param(_logit(reference_grid(cfg.query_count)), dtype)
        self.ref_log_width = param(np.full(cfg.query_count, np.log(cfg.ref_width or 1.0)), dtype)
        self.decoder = [DecoderLayer(rng, dim, cfg.saa.heads, cfg.decoder_ffn, dtype)
                        for _ in range(cfg.decoder_layers)]
        self.class_head = Linear(rng, dim, cfg.class_count + 1, dtype=dtype)
        self.box_fc1 = Linear(rng, dim, dim, dtype=dtype)
        self.box_fc2 = Linear(rng, dim, 4, dtype=dtype)
        fh, fw = cfg.feature_size
        ys, xs = grid_positions(fh, fw, 1)
        self._memory_pos = sinusoidal_2d(ys, xs, dim, dtype)
        self._pixel_mean = np.asarray(cfg.pixel_mean, dtype).reshape(1, -1, 1, 1)
        self._pixel_std = np.asarray(cfg.pixel_std, dtype).reshape(1, -1, 1, 1)
        self._token_yx = np.stack([(ys + 0.5) / fh, (xs + 0.5) / fw], axis=1)

    def forward(self, images) -> tuple[Tensor, Tensor]:
        """images N,3,H,W -> (class logits N,Q,K+1, boxes N,Q,4 sigmoid cx,cy,w,h)."""
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images, dtype=self.dtype))
        if images.ndim != 4 or images.shape[1] != self.cfg.in_channels or tuple(images.shape[2:]) != tuple(self.cfg.input_size):
            raise ConfigError(f"expected images N,{self.cfg.in_channels},{self.cfg.input_size[0]},"
                              f"{self.cfg.input_size[1]}, got {images.shape}")
        n = images.shape[0]
        images = ops.div(ops.sub(images, Tensor(self._pixel_mean)), Tensor(self._pixel_std))
        feat = self.input_proj(self.backbone(images))
        feat = self.encoder(feat)
        memory = to_tokens(feat)
        mem_pos = Tensor(self._memory_pos)
        dim = self.cfg.saa.embed_dim
        tgt = Tensor(np.zeros((n, self.cfg.query_count, dim), dtype=self.dtype))
        qpos = ops.reshape(self.query_embed, (1, self.cfg.query_count, dim))
        ref = ops.sigmoid(self.ref_logit)
        bias = spatial_prior(ref, self.ref_log_width, self._token_yx) if self.cfg.ref_width > 0 else None
        for layer in self.decoder:
            tgt = layer(tgt, qpos, memory, mem_pos, bias)
        logits = self.class_head(tgt)
        raw = self.box_fc2(ops.silu(self.box_fc1(tgt)))
        centre, size = ops.split(raw, [2, 2], axis=2)
        # boxes are cx, cy; the reference is stored cy, cx
        ref_xy = ops.reshape(ops.concat(ops.split(self.ref_logit, 2, axis=1)[::-1], axis=1),
                             (1, self.cfg.query_count, 2))
        boxes = ops.sigmoid(ops.concat([ops.add(centre, ref_xy), size], axis=2))
        return logits, boxes

    def predict(self, images) -> list[DetectionSet]:
        with no_grad():
            logits, boxes = self.forward(images)
        return [DetectionSet(boxes.data[i].astype(np.float64), logits.data[i].astype(np.float64))
                for i in range(boxes.shape[0])]

    def gdus(self):
        if self.cfg.backbone != "pafc":
            return []
        return [arb.gdu for stage in (self.backbone.stage1, self.backbone.stage2) for arb in stage.arbs]


def build_model(cfg: ModelConfig, rng_seed: int | None = None) -> FlowDet:
    """Deterministic initialisation; offset heads, LPE, gate and cross projection start at zero."""
    return FlowDet(cfg, rng_seed)


def detections_to_records(dets: list[DetectionSet], image_ids, image_size, category_ids) -> list[dict]:
    """DetectionSets -> COCO results records in pixel x, y, w, h."""
    h, w = image_size
    out = []
    for det, img_id in zip(dets, image_ids):
        labels, scores = det.scored()
        cx, cy, bw, bh = (det.boxes[:, i] for i in range(4))
        x1 = np.clip((cx - bw / 2) * w, 0, w)
        y1 = np.clip((cy - bh / 2) * h, 0, h)
        x2 = np.clip((cx + bw / 2) * w, 0, w)
        y2 = np.clip((cy + bh / 2) * h, 0, h)
        for q in range(len(scores)):
            if x2[q] <= x1[q] or y2[q] <= y1[q]:
                continue
            out.append({
                "image_id": img_id,
                "category_id": int(category_ids[labels[q]]),
                "bbox": [float(x1[q]), float(y1[q]), float(x2[q] - x1[q]), float(y2[q] - y1[q])],
                "score": float(scores[q]),
            })
    return out
