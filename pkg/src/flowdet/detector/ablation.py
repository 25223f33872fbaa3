"""Component, gate-weight, window and reduction sweeps over the toy detector."""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from ..data import SYNTH_CATEGORIES
from ..metrics import ap_evaluate
from .config import ModelConfig
from .flops import count_flops
from .model import FlowDet, build_model, detections_to_records
from .train import fit

MODES = ("components", "gate", "window", "reduction")
COMPONENT_ROWS = (
    ("plain-attn + plain-conv", "plain", "plain"),
    ("plain-attn + PAFC", "pafc", "plain"),
    ("SAA + plain-conv", "plain", "saa"),
    ("SAA + PAFC", "pafc", "saa"),
)
LOCAL_WEIGHTS = (0.3, 0.4, 0.5, 0.6, 0.7)
WINDOW_SIZES = (1, 2, 4, 8)
REDUCTION_RATIOS = (1, 2, 4)


def sweep_configs(mode: str, base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """(row label, config) for every row of a sweep."""
    if mode == "components":
        return [(label, base.replace(backbone=bb, encoder=enc)) for label, bb, enc in COMPONENT_ROWS]
    if mode == "gate":
        # the gate weighs the global branch, so a local weight a freezes it at 1 - a
        return [(f"local={a:.1f} global={1 - a:.1f}",
                 base.replace(saa=dataclasses.replace(base.saa, gate_value=round(1.0 - a, 10))))
                for a in LOCAL_WEIGHTS]
    if mode == "window":
        return [(f"window={w}", base.replace(saa=dataclasses.replace(base.saa, window_size=w)))
                for w in WINDOW_SIZES]
    if mode == "reduction":
        return [(f"reduction={r}", base.replace(saa=dataclasses.replace(base.saa, reduction_ratio=r)))
                for r in REDUCTION_RATIOS]
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {MODES}")


def evaluate_model(model: FlowDet, scenes, category_ids: Sequence[int] | None = None, batch: int = 16):
    """ApReport of ``model`` on (image, GroundTruth) pairs, image ids are list positions."""
    category_ids = list(category_ids or [c["id"] for c in SYNTH_CATEGORIES])
    records, gts = [], []
    for start in range(0, len(scenes), batch):
        chunk = scenes[start:start + batch]
        dets = model.predict(np.stack([img for img, _ in chunk]))
        ids = list(range(start, start + len(chunk)))
        records += detections_to_records(dets, ids, model.cfg.input_size, category_ids)
        for i, (_, gt) in zip(ids, chunk):
            gts += gt.coco_annotations(i, start_id=1000 * i + 1)
    return ap_evaluate(records, gts, category_ids)


def gate_statistics(model: FlowDet, scenes, small_side: float | None = None) -> dict:
    """Mean global-branch gate inside small-object vs large-object boxes.

    ``scenes`` are (image, GroundTruth) pairs. An object is small when its
    longer box side is below ``small_side`` pixels (default: a quarter of the
    input height). Each object contributes the mean gate over the feature
    cells whose centres fall inside its box (at least the cell holding the box
    centre). Empty for a plain encoder.
    """
    if model.cfg.encoder != "saa":
        return {}
    h, w = model.cfg.input_size
    small_side = h / 4 if small_side is None else small_side
    model.predict(np.stack([img for img, _ in scenes]))
    g = model.encoder.last_gate[:, 0]  # N,fh,fw
    fh, fw = g.shape[1:]
    sy, sx = h / fh, w / fw
    cy = (np.arange(fh) + 0.5) * sy
    cx = (np.arange(fw) + 0.5) * sx
    strata: dict[str, list[float]] = {"small": [], "large": []}
    for i, (_, gt) in enumerate(scenes):
        for (x1, y1, x2, y2) in gt.boxes:
            inside = ((cy >= y1) & (cy < y2))[:, None] & ((cx >= x1) & (cx < x2))[None]
            if not inside.any():
                inside = np.zeros((fh, fw), bool)
                inside[min(int((y1 + y2) / 2 / sy), fh - 1), min(int((x1 + x2) / 2 / sx), fw - 1)] = True
            key = "small" if max(x2 - x1, y2 - y1) < small_side else "large"
            strata[key].append(float(g[i][inside].mean()))
    out = {"gate_mean": float(g.mean()), "gate_std": float(g.std()), "small_side_px": float(small_side)}
    for key, vals in strata.items():
        out[f"{key}_count"] = len(vals)
        out[f"{key}_mean_gate"] = float(np.mean(vals)) if vals else None
    return out


def ablation_harness(mode: str, base: ModelConfig | None = None, train_scenes=None, test_scenes=None,
                     steps: int = 0, category_ids: Sequence[int] | None = None) -> list[dict]:
    """One row per sweep entry with params, analytic FLOPs and (when ``steps`` > 0) AP metrics.

    Every row trains from the same seed on the same scenes, so rows differ only
    in the toggled component.
    """
    base = base or ModelConfig()
    category_ids = list(category_ids or [c["id"] for c in SYNTH_CATEGORIES])
    rows = []
    for label, cfg in sweep_configs(mode, base):
        model = build_model(cfg)
        row = {"mode": mode, "row": label, "params": model.num_parameters(),
               "flops": count_flops(cfg).total}
        if steps > 0:
            if not train_scenes or not test_scenes:
                raise ValueError("training rows need train_scenes and test_scenes")
            history, _ = fit(model, train_scenes, steps, category_ids)
            rep = evaluate_model(model, test_scenes, category_ids)
            row.update(final_loss=history[-1].total, ap=rep.ap, ap50=rep.ap50, ap_s=rep.ap_s, ap_l=rep.ap_l)
        else:
            row.update(final_loss=math.nan, ap=math.nan, ap50=math.nan, ap_s=math.nan, ap_l=math.nan)
        rows.append(row)
    return rows
