"""Synthetic shape scenes, COCO-style annotation files, and AP evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import Box, GroundTruthSet, cxcywh_to_xyxy, pairwise_iou
from .exceptions import DatasetFormatError, GenerationError

SHAPES = ("circle", "square", "triangle")
FORMAT_VERSION = 1
COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    min_objects: int = 1
    max_objects: int = 8
    size_range: tuple[int, int] = (8, 16)
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        lo, hi = self.size_range
        if not 2 <= lo <= hi or hi + 2 > min(self.image_size):
            raise ValueError(f"size_range {self.size_range} does not fit {self.image_size}")


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N, 3, H, W]
    gts: list
    categories: tuple = SHAPES

    def __len__(self) -> int:
        return len(self.gts)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def float_images(self, indices=None, dtype=np.float32) -> np.ndarray:
        imgs = self.images if indices is None else self.images[np.asarray(indices)]
        return imgs.astype(dtype) / 255.0

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset(self.images[idx], [self.gts[i] for i in idx], self.categories)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    box: Box
    score: float
    class_id: int


# -- generation ----------------------------------------------------------------------
def _render(canvas: np.ndarray, kind: str, x0: float, y0: float, s: float, color: np.ndarray) -> None:
    h, w = canvas.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    if kind == "square":
        mask = (xs >= x0) & (xs <= x0 + s) & (ys >= y0) & (ys <= y0 + s)
    elif kind == "circle":
        r = s / 2
        mask = (xs - x0 - r) ** 2 + (ys - y0 - r) ** 2 <= r * r
    else:  # upward triangle: apex at top centre, base along the bottom edge
        t = (ys - y0) / s
        mask = (t >= 0) & (t <= 1) & (np.abs(xs - (x0 + s / 2)) <= t * s / 2)
    canvas[:, mask] = color[:, None]


def _place(rng: np.random.Generator, spec: SceneSpec, count: int):
    h, w = spec.image_size
    placed: list[tuple[int, int, int]] = []
    for _ in range(count):
        for _attempt in range(spec.max_retries):
            s = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            x0 = int(rng.integers(1, w - s))
            y0 = int(rng.integers(1, h - s))
            # 1px gap between bounding boxes
            if all(x0 + s + 1 <= px or px + ps + 1 <= x0 or y0 + s + 1 <= py or py + ps + 1 <= y0
                   for px, py, ps in placed):
                placed.append((x0, y0, s))
                break
        else:
            return None
    return placed


def generate_image(rng: np.random.Generator, spec: SceneSpec, image_id: int = 0):
    h, w = spec.image_size
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(10):
        placed = _place(rng, spec, count)
        if placed is not None:
            break
    else:
        raise GenerationError(f"could not place {count} shapes in a {h}x{w} image")
    background = rng.integers(0, 60, size=3)
    canvas = np.empty((3, h, w), dtype=np.float64)
    canvas[:] = background[:, None, None]
    canvas += rng.normal(0.0, 4.0, size=canvas.shape)
    boxes = []
    for x0, y0, s in placed:
        cls = int(rng.integers(len(SHAPES)))
        color = rng.integers(110, 256, size=3).astype(np.float64)
        _render(canvas, SHAPES[cls], x0, y0, s, color)
        boxes.append(Box((x0 + s / 2) / w, (y0 + s / 2) / h, s / w, s / h, cls))
    image = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    return image, GroundTruthSet(tuple(boxes), image_id)


def generate(spec: SceneSpec, count: int, start_id: int = 0) -> Dataset:
    """Deterministic scenes: image ``i`` depends only on ``(spec.seed, start_id + i)``."""
    images, gts = [], []
    for i in range(count):
        image_id = start_id + i
        rng = np.random.default_rng([spec.seed, image_id])
        img, g = generate_image(rng, spec, image_id)
        images.append(img)
        gts.append(g)
    h, w = spec.image_size
    arr = np.stack(images) if images else np.zeros((0, 3, h, w), dtype=np.uint8)
    return Dataset(arr, gts, SHAPES)


VAL_SEED_OFFSET = 1000


def desk_benchmark(n_train: int = 2000, n_val: int = 500, seed: int = 0,
                   spec: SceneSpec = SceneSpec()) -> tuple[Dataset, Dataset]:
    """Train/val splits; the val split uses a disjoint seed and disjoint image ids."""
    train = generate(replace(spec, seed=seed), n_train)
    val = generate(replace(spec, seed=seed + VAL_SEED_OFFSET), n_val, start_id=n_train)
    return train, val


# -- persistence -----------------------------------------------------------------------
def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``annotations.json`` plus one ``.npy`` tensor per image."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 0
    for img, g in zip(dataset.images, dataset.gts):
        fname = f"images/{int(g.image_id):06d}.npy"
        np.save(root / fname, img, allow_pickle=False)
        images.append({"id": int(g.image_id), "height": int(img.shape[1]), "width": int(img.shape[2]), "file": fname})
        for b in g.boxes:
            annotations.append(
                {"id": ann_id, "image_id": int(g.image_id), "bbox": [b.cx, b.cy, b.w, b.h], "category_id": b.class_id}
            )
            ann_id += 1
    doc = {
        "version": FORMAT_VERSION,
        "images": images,
        "annotations": annotations,
        "categories": [{"id": i, "name": n} for i, n in enumerate(dataset.categories)],
    }
    (root / "annotations.json").write_text(json.dumps(doc, indent=1))
    return root


def _require(obj: dict, key: str, where: str, kind=None):
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"{where}: expected an object")
    if key not in obj:
        raise DatasetFormatError(f"{where}: missing field '{key}'")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise DatasetFormatError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
    return value


def parse_annotations(doc: dict):
    """Validate an annotation document; returns (image records, gts by image id, category names)."""
    for key in ("images", "annotations", "categories"):
        _require(doc, key, "root", list)
    cats = sorted(doc["categories"], key=lambda c: _require(c, "id", "categories[]", int))
    names = tuple(_require(c, "name", f"categories[{i}]", str) for i, c in enumerate(cats))
    records = []
    for i, rec in enumerate(doc["images"]):
        where = f"images[{i}]"
        records.append({
            "id": _require(rec, "id", where, int),
            "height": _require(rec, "height", where, int),
            "width": _require(rec, "width", where, int),
            "file": _require(rec, "file", where, str),
        })
    boxes: dict[int, list[Box]] = {r["id"]: [] for r in records}
    for i, ann in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        image_id = _require(ann, "image_id", where, int)
        bbox = _require(ann, "bbox", where, list)
        cat = _require(ann, "category_id", where, int)
        if len(bbox) != 4:
            raise DatasetFormatError(f"{where}.bbox: expected 4 numbers, got {len(bbox)}")
        if image_id not in boxes:
            raise DatasetFormatError(f"{where}.image_id: unknown image {image_id}")
        if not 0 <= cat < len(names):
            raise DatasetFormatError(f"{where}.category_id: {cat} not in categories")
        try:
            boxes[image_id].append(Box(*map(float, bbox), cat))
        except (TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{where}.bbox: {exc}") from exc
    gts = {k: GroundTruthSet(tuple(v), k) for k, v in boxes.items()}
    return records, gts, names


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    path = root / "annotations.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    records, gts, names = parse_annotations(doc)
    images = []
    for rec in records:
        img = np.load(root / rec["file"], allow_pickle=False)
        if img.shape != (3, rec["height"], rec["width"]):
            raise DatasetFormatError(f"{rec['file']}: shape {img.shape} does not match its record")
        images.append(img)
    arr = np.stack(images) if images else np.zeros((0, 3, 1, 1), dtype=np.uint8)
    return Dataset(arr, [gts[r["id"]] for r in records], names)


# -- evaluation -------------------------------------------------------------------------
@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict = field(default_factory=dict)
    per_threshold: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "per_class": self.per_class, "per_threshold": self.per_threshold}


def _class_ap(dets: list[DetectionRecord], gts_by_image: dict[int, np.ndarray], npos: int, thr: float) -> float:
    if npos == 0:
        return float("nan")
    if not dets:
        return 0.0
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts_by_image.items()}
    tp = np.zeros(len(dets))
    for rank, idx in enumerate(order):
        d = dets[idx]
        g = gts_by_image.get(d.image_id)
        if g is None or len(g) == 0:
            continue
        ious = pairwise_iou(np.array([d.box.corners]), g)[0]
        ious[used[d.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= thr:
            used[d.image_id][best] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_ap(detections: Iterable[DetectionRecord], gts: Sequence[GroundTruthSet],
                iou_thresholds: Sequence[float] = COCO_THRESHOLDS) -> APReport:
    """COCO-style AP: greedy score-ordered matching, 101-point interpolation,
    averaged over classes that have ground truth and over IoU thresholds."""
    detections = list(detections)
    classes = sorted({b.class_id for g in gts for b in g.boxes} | {d.class_id for d in detections})
    per_class: dict[int, list[float]] = {}
    for c in classes:
        by_image = {}
        npos = 0
        for g in gts:
            corners = np.array([b.corners for b in g.boxes if b.class_id == c]).reshape(-1, 4)
            by_image[g.image_id] = corners
            npos += len(corners)
        dets = [d for d in detections if d.class_id == c]
        per_class[c] = [_class_ap(dets, by_image, npos, t) for t in iou_thresholds]
    valid = [c for c in classes if not np.isnan(per_class[c][0])]
    per_threshold = {}
    for k, t in enumerate(iou_thresholds):
        per_threshold[float(t)] = float(np.mean([per_class[c][k] for c in valid])) if valid else 0.0

    def at(t):
        key = min(per_threshold, key=lambda x: abs(x - t)) if per_threshold else None
        return per_threshold.get(key, 0.0) if key is not None and abs(key - t) < 1e-9 else float("nan")

    ap = float(np.mean(list(per_threshold.values()))) if per_threshold else 0.0
    return APReport(ap, at(0.5), at(0.75), {c: float(np.mean(per_class[c])) for c in valid}, per_threshold)


def mean_random_pair_iou(gts: Sequence[GroundTruthSet], n_pairs: int = 10000, seed: int = 0) -> float:
    """Mean IoU between boxes drawn independently at random from the whole dataset."""
    boxes = np.concatenate([g.array for g in gts if len(g)], axis=0)
    rng = np.random.default_rng(seed)
    a = boxes[rng.integers(len(boxes), size=n_pairs)]
    b = boxes[rng.integers(len(boxes), size=n_pairs)]
    ca, cb = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    lt = np.maximum(ca[:, :2], cb[:, :2])
    rb = np.minimum(ca[:, 2:], cb[:, 2:])
    inter = np.prod(np.maximum(rb - lt, 0.0), axis=1)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return float(np.mean(inter / union))
