"""Box overlap measures, COCO-style AP evaluation and a wall-clock latency bench."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = ("all", "small", "medium", "large")
SMALL_MAX = 32.0**2
LARGE_MIN = 96.0**2


class DegenerateBoxError(ValueError):
    pass


def _check_box(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (4,):
        raise DegenerateBoxError(f"box must have 4 coordinates, got shape {b.shape}")
    if not (b[2] > b[0] and b[3] > b[1]):
        raise DegenerateBoxError(f"degenerate box {b.tolist()} (need x2 > x1 and y2 > y1)")
    return b


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    a, b = _check_box(a), _check_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def giou(a, b) -> float:
    a, b = _check_box(a), _check_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    encl = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return float(inter / union - (encl - union) / encl)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between M and K xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None] - inter)


def xywh_to_xyxy(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2], b[..., :2] + b[..., 2:]], axis=-1)


def cxcywh_to_xyxy(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def xyxy_to_cxcywh(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


@dataclass
class ApReport:
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    ap_per_iou: list = field(default_factory=list)  # AP at each of IOU_THRESHOLDS
    gt_counts: dict = field(default_factory=dict)
    pr_curves: dict = field(default_factory=dict)  # category id -> {"recall", "precision"} at IoU 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pr_curves"] = {str(k): v for k, v in self.pr_curves.items()}
        return d

    def headline(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap_s": self.ap_s, "ap_l": self.ap_l}


def in_stratum(area, name: str):
    """small: area < 32^2, medium: 32^2 <= area <= 96^2, large: area > 96^2."""
    area = np.asarray(area, dtype=np.float64)
    if name == "all":
        return np.ones(area.shape, bool)
    if name == "small":
        return area < SMALL_MAX
    if name == "medium":
        return (area >= SMALL_MAX) & (area <= LARGE_MIN)
    if name == "large":
        return area > LARGE_MIN
    raise ValueError(f"unknown stratum {name!r}")


def _evaluate_image(dets: list[dict], gts: list[dict], thr: float, stratum: str, max_dets: int):
    """Greedy COCO matching for one image/category/threshold.

    Returns (scores, tp flags, ignore flags) for detections and the number of
    non-ignored ground truths.
    """
    g_area = np.array([g["area"] for g in gts], dtype=np.float64)
    g_ignore = ~in_stratum(g_area, stratum)
    gorder = np.argsort(g_ignore, kind="mergesort")
    gts = [gts[i] for i in gorder]
    g_ignore = g_ignore[gorder]
    dorder = np.argsort([-d["score"] for d in dets], kind="mergesort")[:max_dets]
    dets = [dets[i] for i in dorder]
    scores = np.array([d["score"] for d in dets], dtype=np.float64)
    tp = np.zeros(len(dets), bool)
    d_ignore = np.zeros(len(dets), bool)
    if dets and gts:
        ious = box_iou_matrix(xywh_to_xyxy([d["bbox"] for d in dets]), xywh_to_xyxy([g["bbox"] for g in gts]))
    matched = np.zeros(len(gts), bool)
    for di in range(len(dets)):
        best, best_iou = -1, min(thr, 1 - 1e-10)
        for gi in range(len(gts)):
            if matched[gi]:
                continue
            if best > -1 and not g_ignore[best] and g_ignore[gi]:
                break
            if ious[di, gi] < best_iou:
                continue
            best, best_iou = gi, ious[di, gi]
        if best > -1:
            matched[best] = True
            tp[di] = True
            d_ignore[di] = g_ignore[best]
        else:
            w, h = dets[di]["bbox"][2:]
            d_ignore[di] = not in_stratum(w * h, stratum)
    return scores, tp, d_ignore, int((~g_ignore).sum())


def _precision_at_recall(tp: np.ndarray, fp: np.ndarray, npig: int):
    tpc = np.cumsum(tp, dtype=np.float64)
    fpc = np.cumsum(fp, dtype=np.float64)
    recall = tpc / npig
    precision = tpc / np.maximum(tpc + fpc, np.finfo(np.float64).eps)
    # precision envelope
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    inds = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    q = np.zeros(len(RECALL_THRESHOLDS))
    valid = inds < len(precision)
    q[valid] = precision[inds[valid]]
    return q


def ap_evaluate(dets: Sequence[dict], gts: Sequence[dict], categories: Iterable[int],
                max_dets: int = 100) -> ApReport:
    """COCO-convention AP over IoU 0.50:0.05:0.95 with 101-point interpolation.

    ``dets`` are results-format records ``{image_id, category_id, bbox, score}``
    with ``bbox`` as x, y, w, h in pixels. ``gts`` use the same keys minus
    ``score`` and may carry ``area`` (defaults to w * h). Size strata ignore
    ground truth outside the area range and unmatched detections outside it.
    """
    cats = list(categories)
    cat_set = set(cats)
    gts = [dict(g, area=g.get("area", g["bbox"][2] * g["bbox"][3])) for g in gts]
    for rec in list(dets) + list(gts):
        if rec["category_id"] not in cat_set:
            raise KeyError(f"unknown category id {rec['category_id']}")

    by_key_d: dict[tuple, list] = {}
    by_key_g: dict[tuple, list] = {}
    for d in dets:
        by_key_d.setdefault((d["image_id"], d["category_id"]), []).append(d)
    for g in gts:
        by_key_g.setdefault((g["image_id"], g["category_id"]), []).append(g)
    image_ids = sorted({k[0] for k in by_key_d} | {k[0] for k in by_key_g}, key=lambda v: (str(type(v)), v))

    results: dict[str, np.ndarray] = {}
    pr_curves: dict = {}
    gt_counts = {}
    for name in AREA_RANGES:
        gt_counts[name] = int(in_stratum([g["area"] for g in gts], name).sum())
        table = np.full((len(IOU_THRESHOLDS), len(cats)), np.nan)
        for ci, cat in enumerate(cats):
            for ti, thr in enumerate(IOU_THRESHOLDS):
                all_scores, all_tp, all_ig = [], [], []
                npig = 0
                for img in image_ids:
                    s, tp, ig, n = _evaluate_image(by_key_d.get((img, cat), []), by_key_g.get((img, cat), []),
                                                   float(thr), name, max_dets)
                    all_scores.append(s)
                    all_tp.append(tp)
                    all_ig.append(ig)
                    npig += n
                if npig == 0:
                    continue
                scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
                order = np.argsort(-scores, kind="mergesort")
                tp = np.concatenate(all_tp)[order] if all_tp else np.zeros(0, bool)
                ig = np.concatenate(all_ig)[order] if all_ig else np.zeros(0, bool)
                tps = tp & ~ig
                fps = ~tp & ~ig
                q = _precision_at_recall(tps, fps, npig)
                table[ti, ci] = q.mean()
                if name == "all" and ti == 0:
                    pr_curves[cat] = {"recall": RECALL_THRESHOLDS.tolist(), "precision": q.tolist()}
        results[name] = table

    def summarize(name, ti=None):
        t = results[name] if ti is None else results[name][ti : ti + 1]
        vals = t[~np.isnan(t)]
        return float(vals.mean()) if vals.size else 0.0

    return ApReport(
        ap=summarize("all"),
        ap50=summarize("all", 0),
        ap75=summarize("all", 5),
        ap_s=summarize("small"),
        ap_m=summarize("medium"),
        ap_l=summarize("large"),
        ap_per_iou=[summarize("all", ti) for ti in range(len(IOU_THRESHOLDS))],
        gt_counts=gt_counts,
        pr_curves=pr_curves,
    )


def size_stratum(area: float) -> str:
    """Exactly one of small / medium / large under the COCO cut-offs."""
    for name in ("small", "medium", "large"):
        if in_stratum(area, name):
            return name
    raise ValueError(f"area {area} outside every stratum")


@dataclass
class LatencyReport:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    fps: float
    iters: int
    warmup: int


def latency_bench(fn: Callable[[], object], iters: int = 50, warmup: int = 10) -> LatencyReport:
    """Time ``iters`` calls of ``fn`` after ``warmup`` untimed calls."""
    if warmup < 10:
        raise ValueError("warmup must be at least 10 iterations")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    for _ in range(warmup):
        fn()
    times = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter()
        fn()
        times[i] = (time.perf_counter() - t0) * 1000.0
    mean = float(times.mean())
    return LatencyReport(mean, float(np.percentile(times, 50)), float(np.percentile(times, 95)),
                         1000.0 / mean, iters, warmup)
