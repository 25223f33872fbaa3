"""AdamW with a cosine schedule, deterministic batching and the training step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..tensor import NonFiniteError, Tensor
from .config import ModelConfig, OptimConfig
from .loss import LossBreakdown, LossWeights, Target, set_loss


class TrainingDiverged(RuntimeError):
    pass


def cosine_lr(step: int, opt: OptimConfig) -> float:
    """Learning rate for 0-based ``step``; no warmup, decays to ``min_lr`` at ``total_steps``."""
    t = min(max(step, 0), opt.total_steps) / max(opt.total_steps, 1)
    return opt.min_lr + 0.5 * (opt.lr - opt.min_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, step: int, tensors: dict[str, np.ndarray]) -> "OptimizerState":
        st = cls(step)
        for k, a in tensors.items():
            kind, name = k.split(".", 1)
            (st.m if kind == "m" else st.v)[name] = a
        return st


def adamw_update(named_params, state: OptimizerState, opt: OptimConfig, lr: float) -> float:
    """One decoupled-weight-decay Adam step; returns the pre-clip global grad norm."""
    named = [(k, p) for k, p in named_params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for _, p in named))
    clip = 1.0
    if opt.grad_clip and norm > opt.grad_clip:
        clip = opt.grad_clip / (norm + 1e-12)
    b1, b2 = opt.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in named:
        g = p.grad * p.dtype.type(clip)
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k] = m.astype(p.dtype, copy=False)
        state.v[k] = v.astype(p.dtype, copy=False)
        if lr == 0.0:
            continue
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps) + opt.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
    state.step = t
    return norm


@dataclass
class Batch:
    images: np.ndarray  # N,3,H,W
    targets: list[Target]


def make_batch(scenes, category_ids: Sequence[int], dtype=np.float32, flip: np.ndarray | None = None) -> Batch:
    """Stack (image, GroundTruth) pairs; ``flip`` marks images to mirror left-right."""
    images, targets = [], []
    for i, (img, gt) in enumerate(scenes):
        tgt = Target.from_truth(gt, category_ids)
        if flip is not None and flip[i]:
            img = img[:, :, ::-1]
            boxes = tgt.boxes.copy()
            boxes[:, 0] = 1.0 - boxes[:, 0]
            tgt = Target(boxes, tgt.labels)
        images.append(img)
        targets.append(tgt)
    return Batch(np.ascontiguousarray(np.stack(images), dtype=dtype), targets)


def batch_schedule(count: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for 0-based ``step``: a fresh seeded permutation every epoch."""
    per_epoch = max(count // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(count)
    if count < batch_size:
        return perm
    return perm[pos * batch_size : (pos + 1) * batch_size]


def train_step(model, batch: Batch, state: OptimizerState, opt: OptimConfig | None = None,
               weights: LossWeights | None = None, lr: float | None = None) -> tuple[LossBreakdown, OptimizerState]:
    """forward -> match -> loss -> backward -> AdamW; lr defaults to the cosine value at state.step."""
    cfg: ModelConfig = model.cfg
    opt = opt or cfg.optimizer
    weights = weights or LossWeights.from_config(cfg)
    if lr is None:
        lr = cosine_lr(state.step, opt)
    model.zero_grad()
    try:
        logits, boxes = model(Tensor(batch.images.astype(model.dtype, copy=False)))
        loss = set_loss(logits, boxes, batch.targets, weights)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"step {state.step}: non-finite value in forward pass ({exc})") from None
    vals = loss.values()
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingDiverged(f"step {state.step}: non-finite loss {vals}")
    try:
        loss.total.backward()
    except NonFiniteError as exc:
        raise TrainingDiverged(f"step {state.step}: non-finite gradient ({exc})") from None
    adamw_update(model.named_parameters(), state, opt, lr)
    return loss, state


@dataclass
class LossRecord:
    step: int
    cls: float
    l1: float
    giou: float
    total: float
    lr: float


def fit(model, scenes, steps: int, category_ids: Sequence[int], state: OptimizerState | None = None,
        seed: int | None = None, flip: bool = True,
        callback: Callable[[LossRecord], None] | None = None) -> tuple[list[LossRecord], OptimizerState]:
    """Run ``steps`` training steps starting at ``state.step`` (so resumed runs keep counting)."""
    cfg = model.cfg
    state = state or OptimizerState()
    seed = cfg.seed if seed is None else seed
    history = []
    for _ in range(steps):
        step = state.step
        idx = batch_schedule(len(scenes), cfg.batch_size, seed, step)
        flips = np.random.default_rng([seed, step, 1]).random(len(idx)) < 0.5 if flip else None
        batch = make_batch([scenes[i] for i in idx], category_ids, model.dtype, flips)
        lr = cosine_lr(step, cfg.optimizer)
        loss, state = train_step(model, batch, state, lr=lr)
        rec = LossRecord(step + 1, **loss.values(), lr=lr)
        history.append(rec)
        if callback:
            callback(rec)
    return history, state
