"""Set-prediction loss: Hungarian matching, weighted class CE, L1 and 1 - GIoU box terms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import ops
from ..metrics import cxcywh_to_xyxy
from ..tensor import Tensor
from .matching import MatchResult, hungarian_match


@dataclass
class Target:
    """Ground truth for one image: boxes as normalised cx, cy, w, h and 0-based class indices."""

    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_truth(cls, gt, category_ids: Sequence[int]) -> "Target":
        lookup = {c: i for i, c in enumerate(category_ids)}
        return cls(gt.boxes_cxcywh, [lookup[int(c)] for c in gt.labels])


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    eos_coef: float = 0.1

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(cfg.lambda_cls, cfg.lambda_l1, cfg.lambda_giou, cfg.eos_coef)


@dataclass
class LossBreakdown:
    cls: Tensor
    l1: Tensor
    giou: Tensor
    total: Tensor
    matches: list[MatchResult] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("cls", "l1", "giou", "total")}


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between xyxy boxes (M x K)."""
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    encl = np.prod(erb - elt, axis=-1)
    return inter / union - (encl - union) / encl


def match_cost(probs: np.ndarray, boxes: np.ndarray, target: Target, w: LossWeights) -> np.ndarray:
    """Q x T cost: w_cls * (-p_class) + w_l1 * L1 + w_giou * (1 - GIoU)."""
    c_cls = -probs[:, target.labels]
    c_l1 = np.abs(boxes[:, None, :] - target.boxes[None]).sum(-1)
    c_giou = 1.0 - giou_matrix(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(target.boxes))
    return w.cls * c_cls + w.l1 * c_l1 + w.giou * c_giou


def _xyxy(b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy, bw, bh = (ops.index(b, (slice(None), i)) for i in range(4))
    hw, hh = ops.scale(bw, 0.5), ops.scale(bh, 0.5)
    return ops.sub(cx, hw), ops.sub(cy, hh), ops.add(cx, hw), ops.add(cy, hh)


def giou_pairs(pred: Tensor, tgt: np.ndarray) -> Tensor:
    """Differentiable GIoU between row-aligned cx, cy, w, h boxes (M,4) and fixed targets."""
    px1, py1, px2, py2 = _xyxy(pred)
    t = cxcywh_to_xyxy(tgt)
    tx1, ty1, tx2, ty2 = (Tensor(t[:, i].astype(pred.dtype)) for i in range(4))
    iw = ops.clamp_min(ops.sub(ops.minimum(px2, tx2), ops.maximum(px1, tx1)), 0.0)
    ih = ops.clamp_min(ops.sub(ops.minimum(py2, ty2), ops.maximum(py1, ty1)), 0.0)
    inter = ops.mul(iw, ih)
    area_p = ops.mul(ops.sub(px2, px1), ops.sub(py2, py1))
    area_t = ops.mul(ops.sub(tx2, tx1), ops.sub(ty2, ty1))
    union = ops.sub(ops.add(area_p, area_t), inter)
    ew = ops.sub(ops.maximum(px2, tx2), ops.minimum(px1, tx1))
    eh = ops.sub(ops.maximum(py2, ty2), ops.minimum(py1, ty1))
    encl = ops.mul(ew, eh)
    return ops.sub(ops.div(inter, union), ops.div(ops.sub(encl, union), encl))


def set_loss(logits: Tensor, boxes: Tensor, targets: Sequence[Target], weights: LossWeights | None = None
             ) -> LossBreakdown:
    """Batch loss for logits N,Q,K+1 and boxes N,Q,4 (last class = no-object).

    cls is the eos-weighted cross-entropy mean over all queries; l1 and giou
    are summed over matched pairs and divided by the number of targets.
    """
    w = weights or LossWeights()
    n, q, k1 = logits.shape
    if len(targets) != n:
        raise ValueError(f"{len(targets)} targets for a batch of {n}")
    probs = np.exp(logits.data - logits.data.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)

    target_cls = np.full((n, q), k1 - 1, dtype=np.int64)
    img_idx, qry_idx, tgt_boxes = [], [], []
    matches = []
    for b, tgt in enumerate(targets):
        if len(tgt) and (tgt.labels.min() < 0 or tgt.labels.max() >= k1 - 1):
            raise ValueError(f"target labels must lie in [0, {k1 - 2}]")
        cost = match_cost(probs[b].astype(np.float64), boxes.data[b].astype(np.float64), tgt, w)
        m = hungarian_match(cost.reshape(q, len(tgt)))
        matches.append(m)
        for qi, ti in m.pairs:
            target_cls[b, qi] = tgt.labels[ti]
            img_idx.append(b)
            qry_idx.append(qi)
            tgt_boxes.append(tgt.boxes[ti])

    dtype = logits.dtype
    class_w = np.ones(k1, dtype=dtype)
    class_w[-1] = w.eos_coef
    wq = class_w[target_cls]
    onehot = np.zeros((n, q, k1), dtype=dtype)
    np.put_along_axis(onehot, target_cls[..., None], 1.0, axis=-1)
    nll = ops.scale(ops.sum(ops.mul(ops.log_softmax(logits, axis=-1), Tensor(onehot)), axis=-1), -1.0)
    cls = ops.scale(ops.sum(ops.mul(nll, Tensor(wq))), 1.0 / float(wq.sum()))

    num_targets = max(sum(len(t) for t in targets), 1)
    if img_idx:
        sel = (np.array(img_idx), np.array(qry_idx))
        pb = ops.index(boxes, sel)
        tb = np.stack(tgt_boxes)
        l1 = ops.scale(ops.sum(ops.abs(ops.sub(pb, Tensor(tb.astype(dtype))))), 1.0 / num_targets)
        g = giou_pairs(pb, tb)
        giou = ops.scale(ops.sum(ops.scale(ops.sub(g, 1.0), -1.0)), 1.0 / num_targets)
    else:
        l1 = ops.scale(ops.sum(boxes), 0.0)
        giou = ops.scale(ops.sum(boxes), 0.0)
    total = ops.add(ops.add(ops.scale(cls, w.cls), ops.scale(l1, w.l1)), ops.scale(giou, w.giou))
    return LossBreakdown(cls, l1, giou, total, matches)
