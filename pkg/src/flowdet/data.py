"""COCO annotation ingestion, dataset statistics, synthetic traffic scenes and result files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metrics import xyxy_to_cxcywh

_IMAGE_KEYS = {"id", "file_name", "width", "height"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "area"}
_CAT_KEYS = {"id", "name"}
# keys COCO files commonly carry that we accept without comment
_KNOWN_EXTRA = {
    "images": {"split", "license", "coco_url", "flickr_url", "date_captured"},
    "annotations": {"iscrowd", "segmentation", "occlusion", "ignore"},
    "categories": {"supercategory"},
    "top": {"info", "licenses", "images", "annotations", "categories"},
}


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation document."""


class CocoParseError(AnnotationError):
    def __init__(self, path, byte_offset: int, msg: str):
        self.byte_offset = byte_offset
        super().__init__(f"{path}: JSON parse error at byte {byte_offset}: {msg}")


class ReferenceIntegrityError(AnnotationError):
    def __init__(self, kind: str, ref_id, ann_id):
        self.kind = kind
        self.ref_id = ref_id
        super().__init__(f"annotation {ann_id} references missing {kind} id {ref_id}")


@dataclass
class CocoDoc:
    images: list[dict]
    annotations: list[dict]
    categories: list[dict]
    unknown_fields: list[str] = field(default_factory=list)

    @property
    def category_ids(self) -> list[int]:
        return [c["id"] for c in self.categories]

    def annotations_by_image(self) -> dict:
        out: dict = {img["id"]: [] for img in self.images}
        for a in self.annotations:
            out[a["image_id"]].append(a)
        return out


def parse_coco(obj: Mapping, source: str = "<memory>") -> CocoDoc:
    """Validate an already-decoded COCO dict."""
    if not isinstance(obj, Mapping):
        raise AnnotationError(f"{source}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if key not in obj or not isinstance(obj[key], list):
            raise AnnotationError(f"{source}: missing list {key!r}")
    unknown = sorted(f"top.{k}" for k in obj if k not in _KNOWN_EXTRA["top"])

    def check(records, required, kind):
        for rec in records:
            if not isinstance(rec, Mapping):
                raise AnnotationError(f"{source}: {kind} entry is not an object")
            missing = required - set(rec)
            if missing:
                raise AnnotationError(f"{source}: {kind} {rec.get('id')} missing {sorted(missing)}")
            for k in rec:
                if k not in required and k not in _KNOWN_EXTRA[kind]:
                    unknown.append(f"{kind}.{k}")

    check(obj["images"], _IMAGE_KEYS, "images")
    check(obj["annotations"], _ANN_KEYS - {"area"}, "annotations")
    check(obj["categories"], _CAT_KEYS, "categories")

    images = {}
    for img in obj["images"]:
        if img["id"] in images:
            raise AnnotationError(f"{source}: duplicate image id {img['id']}")
        images[img["id"]] = img
    cats = {}
    for c in obj["categories"]:
        if c["id"] in cats:
            raise AnnotationError(f"{source}: duplicate category id {c['id']}")
        cats[c["id"]] = c
    seen = set()
    anns = []
    for a in obj["annotations"]:
        if a["id"] in seen:
            raise AnnotationError(f"{source}: duplicate annotation id {a['id']}")
        seen.add(a["id"])
        if a["image_id"] not in images:
            raise ReferenceIntegrityError("image", a["image_id"], a["id"])
        if a["category_id"] not in cats:
            raise ReferenceIntegrityError("category", a["category_id"], a["id"])
        img = images[a["image_id"]]
        x, y, w, h = (float(v) for v in a["bbox"])
        tol = 1e-6
        if w <= 0 or h <= 0 or x < -tol or y < -tol or x + w > img["width"] + tol or y + h > img["height"] + tol:
            raise AnnotationError(f"{source}: annotation {a['id']} bbox {a['bbox']} outside image {img['id']}")
        area = float(a.get("area", w * h))
        if area <= 0:
            raise AnnotationError(f"{source}: annotation {a['id']} has non-positive area")
        anns.append(dict(a, area=area))
    if len(anns) != len(obj["annotations"]):
        raise AnnotationError("annotation count changed during load")
    return CocoDoc(list(obj["images"]), anns, list(obj["categories"]), sorted(set(unknown)))


def load_annotations(path) -> CocoDoc:
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        byte_offset = len(text[: exc.pos].encode("utf-8"))
        raise CocoParseError(path, byte_offset, exc.msg) from None
    return parse_coco(obj, str(path))


def coco_to_dict(doc: CocoDoc) -> dict:
    return {"images": doc.images, "annotations": doc.annotations, "categories": doc.categories}


# --------------------------------------------------------------------------- statistics


@dataclass
class StatsTable:
    splits: list[str]
    image_counts: dict[str, int]
    rows: list[tuple[str, dict[str, int]]]  # (category name, split -> count)

    def total_row(self) -> dict[str, int]:
        return {s: sum(r[1][s] for r in self.rows) for s in self.splits}

    @staticmethod
    def _with_total(counts: dict[str, int]) -> list[int]:
        vals = list(counts.values())
        return vals + [sum(vals)]

    def as_rows(self) -> list[list]:
        """Header + Images + one row per category + Total Objects, with a Total column."""
        out = [["Category"] + self.splits + ["Total"]]
        out.append(["Images"] + self._with_total(self.image_counts))
        for name, counts in self.rows:
            out.append([name] + self._with_total(counts))
        out.append(["Total Objects"] + self._with_total(self.total_row()))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.as_rows())
        return buf.getvalue()


def dataset_stats(doc: CocoDoc, splits: Mapping | None = None) -> StatsTable:
    """Per-category, per-split object counts in the layout of a dataset card.

    ``splits`` maps image id -> split name; otherwise an image's own ``split``
    field is used, falling back to a single ``all`` split.
    """
    def split_of(img):
        if splits is not None:
            return splits[img["id"]]
        return img.get("split", "all")

    order = ["train", "val", "test"]
    names = {split_of(img) for img in doc.images}
    split_names = [s for s in order if s in names] + sorted(names - set(order))
    if not split_names:
        split_names = ["all"]
    img_split = {img["id"]: split_of(img) for img in doc.images}
    image_counts = {s: 0 for s in split_names}
    for s in img_split.values():
        image_counts[s] += 1
    per_cat = {c["id"]: {s: 0 for s in split_names} for c in doc.categories}
    for a in doc.annotations:
        per_cat[a["category_id"]][img_split[a["image_id"]]] += 1
    rows = [(c["name"], per_cat[c["id"]]) for c in doc.categories]
    return StatsTable(split_names, image_counts, rows)


# --------------------------------------------------------------------------- splits and results files


def split_manifest(doc: CocoDoc | Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                   names=("train", "val", "test")) -> dict[str, list]:
    """Seeded shuffle of image ids into named splits sized by ``ratios``."""
    ids = [img["id"] for img in doc.images] if isinstance(doc, CocoDoc) else list(doc)
    if len(ratios) != len(names):
        raise ValueError("ratios and names differ in length")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    counts = [int(math.floor(r * len(ids) + 1e-9)) for r in ratios]
    counts[0] += len(ids) - sum(counts)
    out, start = {}, 0
    for name, n in zip(names, counts):
        out[name] = [ids[i] for i in perm[start : start + n]]
        start += n
    return out


def write_manifest(ids: Iterable, path) -> None:
    try:
        with open(path, "w") as fh:
            fh.writelines(f"{i}\n" for i in ids)
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            out.append(int(line) if line.lstrip("-").isdigit() else line)
    return out


def export_detections(dets: Sequence[Mapping], path) -> None:
    """Write COCO results JSON: [{image_id, category_id, bbox: [x, y, w, h], score}]."""
    records = [
        {
            "image_id": d["image_id"],
            "category_id": int(d["category_id"]),
            "bbox": [round(float(v), 6) for v in d["bbox"]],
            "score": round(float(d["score"]), 6),
        }
        for d in dets
    ]
    try:
        with open(path, "w") as fh:
            json.dump(records, fh)
    except OSError as exc:
        raise OSError(f"cannot write detections to {path}: {exc}") from exc


def load_detections(path) -> list[dict]:
    try:
        with open(path) as fh:
            recs = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read detections from {path}: {exc}") from exc
    for r in recs:
        if set(r) < {"image_id", "category_id", "bbox", "score"}:
            raise AnnotationError(f"{path}: result record missing keys: {r}")
    return recs


# --------------------------------------------------------------------------- synthetic scenes

SYNTH_CATEGORIES = [
    {"id": 1, "name": "vehicle"},
    {"id": 2, "name": "bus"},
    {"id": 3, "name": "pedestrian"},
]
# width/height aspect (w / h) and base RGB per class
_CLASS_SHAPE = {1: 1.4, 2: 2.2, 3: 0.45}
_CLASS_COLOR = {1: (0.85, 0.15, 0.12), 2: (0.95, 0.8, 0.1), 3: (0.15, 0.35, 0.95)}
REFERENCE_HEIGHT = 1080
REFERENCE_MIN_SIDE = 15


@dataclass
class SynthSceneSpec:
    image_size: tuple[int, int] = (64, 64)
    object_count: tuple[int, int] = (1, 4)
    scale_range: tuple[float, float] = (7.0, 22.0)  # object height in px, far row -> near row
    occlusion_cap: float = 0.75
    shear: float = 0.35
    horizon: float = 0.15  # fraction of the height above which nothing is placed
    seed: int = 0
    max_attempts: int = 400

    def __post_init__(self):
        h, w = self.image_size
        lo, hi = self.object_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad object_count range {self.object_count}")
        min_side = REFERENCE_MIN_SIDE * h / REFERENCE_HEIGHT
        if self.scale_range[0] < min_side or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"scale_range {self.scale_range} invalid (minimum side {min_side:.2f} px)")
        if not 0.0 <= self.occlusion_cap <= 0.75:
            raise ValueError("occlusion_cap must lie in [0, 0.75]")
        if self.scale_range[1] * max(_CLASS_SHAPE.values()) >= w or self.scale_range[1] >= h * (1 - self.horizon):
            raise ValueError("largest object does not fit the image")


@dataclass
class GroundTruth:
    boxes: np.ndarray  # K,4 xyxy pixels (tight extents of the rendered shape)
    labels: np.ndarray  # K category ids
    image_size: tuple[int, int]
    visible: np.ndarray | None = None  # visible fraction per object
    masks: np.ndarray | None = None  # K,H,W full (unoccluded) object masks

    @property
    def boxes_cxcywh(self) -> np.ndarray:
        """Boxes normalised to [0, 1] as cx, cy, w, h."""
        h, w = self.image_size
        scale = np.array([w, h, w, h], dtype=np.float64)
        return xyxy_to_cxcywh(self.boxes / scale).reshape(-1, 4)

    @property
    def areas(self) -> np.ndarray:
        b = self.boxes.reshape(-1, 4)
        return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])

    def __len__(self) -> int:
        return len(self.labels)

    def coco_annotations(self, image_id, start_id: int = 1) -> list[dict]:
        out = []
        for i, (b, lab) in enumerate(zip(self.boxes, self.labels)):
            x1, y1, x2, y2 = (float(v) for v in b)
            out.append({"id": start_id + i, "image_id": image_id, "category_id": int(lab),
                        "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1)})
        return out


def _quad_mask(h: int, w: int, quad: np.ndarray) -> np.ndarray:
    """Pixels whose centres lie inside a convex quad given clockwise in (x, y) image coords."""
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.ones((h, w), bool)
    for i in range(4):
        x0, y0 = quad[i]
        x1, y1 = quad[(i + 1) % 4]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= cross >= 0
    return inside


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(-1, 1, size=(3, 5, 5))
    yi = np.linspace(0, 4, h)
    xi = np.linspace(0, 4, w)
    y0 = np.clip(np.floor(yi).astype(int), 0, 3)
    x0 = np.clip(np.floor(xi).astype(int), 0, 3)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    smooth = (coarse[:, y0][:, :, x0] * (1 - fy) * (1 - fx) + coarse[:, y0 + 1][:, :, x0] * fy * (1 - fx)
              + coarse[:, y0][:, :, x0 + 1] * (1 - fy) * fx + coarse[:, y0 + 1][:, :, x0 + 1] * fy * fx)
    gray = 0.38 + 0.12 * np.linspace(0, 1, h)[:, None]
    img = gray[None] + 0.05 * smooth.mean(axis=0, keepdims=True) + 0.02 * smooth
    img += 0.02 * rng.standard_normal((3, h, w))
    # lane markings converging on the vanishing column
    vx = w / 2
    for lane in (-0.35, 0.35):
        for y in range(int(0.2 * h), h, 4):
            t = (y - 0.15 * h) / (0.85 * h)
            x = int(round(vx + lane * w * t))
            if 0 <= x < w:
                img[:, y : y + 2, x] = 0.75
    return img


def _object_quad(cx: float, bottom: float, obj_h: float, aspect: float, shear: float, w: int) -> np.ndarray:
    obj_w = obj_h * aspect
    top = bottom - obj_h
    lean = shear * (cx - w / 2) / (w / 2) * obj_h * 0.5  # tops lean toward the vanishing column
    narrow = 0.12 * obj_w  # foreshortened top edge
    return np.array([
        [cx - obj_w / 2 + narrow - lean, top],
        [cx + obj_w / 2 - narrow - lean, top],
        [cx + obj_w / 2, bottom],
        [cx - obj_w / 2, bottom],
    ])


def synth_generate(spec: SynthSceneSpec, return_masks: bool = False) -> tuple[np.ndarray, GroundTruth]:
    """Render one synthetic intersection-like scene; returns (3,H,W float32 image, labels).

    Objects shrink linearly toward the horizon and lean toward the vanishing
    column. They are painted far-to-near, so nearer objects occlude farther
    ones; placements that would leave any object more than ``occlusion_cap``
    hidden are rejected.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    img = _background(rng, h, w)
    lo, hi = spec.object_count
    target = int(rng.integers(lo, hi + 1))
    horizon = spec.horizon * h
    s_lo, s_hi = spec.scale_range

    objs: list[dict] = []
    attempts = 0
    while len(objs) < target:
        attempts += 1
        if attempts > spec.max_attempts:
            raise RuntimeError(f"could not place {target} objects within {spec.max_attempts} attempts")
        label = int(rng.integers(1, len(SYNTH_CATEGORIES) + 1))
        u = rng.uniform(0, 1)
        obj_h = s_lo + (s_hi - s_lo) * u
        bottom = horizon + obj_h + (h - horizon - obj_h) * u  # deeper rows hold bigger objects
        bottom = min(bottom + rng.uniform(-1.5, 1.5), h - 0.5)
        aspect = _CLASS_SHAPE[label] * rng.uniform(0.9, 1.1)
        half = obj_h * aspect / 2
        cx = rng.uniform(half + 0.5, w - half - 0.5)
        quad = _object_quad(cx, bottom, obj_h, aspect, spec.shear, w)
        mask = _quad_mask(h, w, quad)
        if mask.sum() < 4:
            continue
        cand = objs + [{"label": label, "mask": mask, "depth": bottom, "order": len(objs)}]
        cand_sorted = sorted(cand, key=lambda o: (o["depth"], o["order"]))
        ok = True
        for i, o in enumerate(cand_sorted):
            cover = np.zeros((h, w), bool)
            for nearer in cand_sorted[i + 1 :]:
                cover |= nearer["mask"]
            vis = (o["mask"] & ~cover).sum() / o["mask"].sum()
            if 1.0 - vis > spec.occlusion_cap:
                ok = False
                break
        if ok:
            objs.append(cand[-1])

    objs.sort(key=lambda o: (o["depth"], o["order"]))
    boxes, labels, visible, masks = [], [], [], []
    for i, o in enumerate(objs):
        m = o["mask"]
        base = np.array(_CLASS_COLOR[o["label"]]) + rng.uniform(-0.08, 0.08, size=3)
        rows = np.nonzero(m.any(axis=1))[0]
        cols = np.nonzero(m.any(axis=0))[0]
        y1, y2 = rows[0], rows[-1] + 1
        x1, x2 = cols[0], cols[-1] + 1
        shade = 1.0 - 0.35 * (np.arange(h)[:, None] - y1) / max(y2 - y1, 1)
        rows_of_pixels = np.nonzero(m)[0]
        for c in range(3):
            img[c][m] = np.clip(base[c] * shade[rows_of_pixels, 0], 0, 1)
        if o["label"] != 3:
            band = m & (np.arange(h)[:, None] >= y1 + 0.2 * (y2 - y1)) & (np.arange(h)[:, None] < y1 + 0.45 * (y2 - y1))
            img[:, band] *= 0.55
        cover = np.zeros((h, w), bool)
        for nearer in objs[i + 1 :]:
            cover |= nearer["mask"]
        visible.append(float((m & ~cover).sum() / m.sum()))
        boxes.append([x1, y1, x2, y2])
        labels.append(o["label"])
        masks.append(m)
    gt = GroundTruth(
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.array(labels, dtype=np.int64),
        image_size=(h, w),
        visible=np.array(visible),
        masks=np.array(masks).reshape(-1, h, w) if return_masks else None,
    )
    return np.clip(img, 0, 1).astype(np.float32), gt


def synth_dataset(count: int, spec: SynthSceneSpec | None = None, seed: int = 0):
    """``count`` scenes with per-scene seeds derived from ``seed``."""
    spec = spec or SynthSceneSpec()
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    scenes = []
    for s in seeds:
        sp = SynthSceneSpec(**{**spec.__dict__, "seed": int(s)})
        scenes.append(synth_generate(sp))
    return scenes


def synth_coco(scenes, first_image_id: int = 1) -> CocoDoc:
    """COCO document describing already-generated synthetic scenes."""
    images, anns = [], []
    for i, (img, gt) in enumerate(scenes):
        image_id = first_image_id + i
        h, w = gt.image_size
        images.append({"id": image_id, "file_name": f"synth_{image_id:06d}.png", "width": w, "height": h})
        anns.extend(gt.coco_annotations(image_id, start_id=len(anns) + 1))
    return CocoDoc(images, anns, [dict(c) for c in SYNTH_CATEGORIES])


def load_image(path) -> np.ndarray:
    """PNG/PPM -> 3,H,W float32 in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_coco_dir(directory, annotation_file: str = "annotations.json"):
    """Images + labels from a directory holding COCO JSON and the referenced image files."""
    directory = Path(directory)
    doc = load_annotations(directory / annotation_file)
    by_img = doc.annotations_by_image()
    scenes = []
    for img in doc.images:
        pix = load_image(directory / img["file_name"])
        if pix.shape[1:] != (img["height"], img["width"]):
            raise AnnotationError(f"{img['file_name']}: size {pix.shape[1:]} != annotated {img['height']}x{img['width']}")
        boxes = np.array([[a["bbox"][0], a["bbox"][1], a["bbox"][0] + a["bbox"][2], a["bbox"][1] + a["bbox"][3]]
                          for a in by_img[img["id"]]], dtype=np.float64).reshape(-1, 4)
        labels = np.array([a["category_id"] for a in by_img[img["id"]]], dtype=np.int64)
        scenes.append((pix, GroundTruth(boxes, labels, (img["height"], img["width"]))))
    return doc, scenes


def save_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = (np.clip(image.transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
