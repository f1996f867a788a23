"""Boxes, IoU/GIoU, and spatial transforms applied jointly to images and labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .exceptions import DimensionError, ParameterError
from .tensor import Tensor

# A box survives a crop when at least this fraction of its area stays visible.
VISIBILITY_THRESHOLD = 0.25


@dataclass(frozen=True)
class Box:
    """Normalized center/size box with a class label."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ParameterError(f"box center ({self.cx}, {self.cy}) outside [0,1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ParameterError(f"box size ({self.w}, {self.h}) outside (0,1]")
        if self.class_id < 0:
            raise ParameterError("class_id must be >= 0")

    @classmethod
    def from_corners(cls, x0, y0, x1, y1, class_id: int = 0) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, class_id)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class GroundTruthSet:
    boxes: tuple[Box, ...] = ()
    image_id: int | str = 0

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    @property
    def array(self) -> np.ndarray:
        """``[n, 4]`` cxcywh array."""
        if not self.boxes:
            return np.zeros((0, 4))
        return np.array([b.as_array() for b in self.boxes])

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.class_id for b in self.boxes], dtype=np.int64)

    @classmethod
    def from_arrays(cls, boxes, labels, image_id=0) -> "GroundTruthSet":
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return cls(tuple(Box(*map(float, b), int(c)) for b, c in zip(boxes, labels)), image_id)


@dataclass(frozen=True)
class SpatialTransform:
    """One spatial augmentation step.

    ``kind`` is ``identity``, ``flip_h``, ``crop`` (with a normalized
    ``crop_region``) or ``resize`` (with a pixel ``resize_target``).
    """

    kind: str = "identity"
    crop_region: tuple[float, float, float, float] | None = None
    resize_target: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in {"identity", "flip_h", "crop", "resize"}:
            raise ParameterError(f"unknown transform kind {self.kind!r}")
        if (self.crop_region is not None) != (self.kind == "crop"):
            raise ParameterError("crop_region must be given exactly for crop transforms")
        if self.kind == "crop":
            x0, y0, x1, y1 = self.crop_region
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise ParameterError(f"invalid crop region {self.crop_region}")
        if self.kind == "resize":
            if self.resize_target is None or min(self.resize_target) < 1:
                raise ParameterError("resize needs a positive (h, w) target")


Transform = Union[SpatialTransform, Sequence[SpatialTransform]]


def _steps(t: Transform) -> tuple[SpatialTransform, ...]:
    return (t,) if isinstance(t, SpatialTransform) else tuple(t)


# -- conversions ----------------------------------------------------------------
def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _corners(b) -> np.ndarray:
    if isinstance(b, Box):
        return np.array(b.corners)
    return np.asarray(b, dtype=np.float64)


# -- overlap measures --------------------------------------------------------------
def _area(c: np.ndarray) -> np.ndarray:
    return (c[..., 2] - c[..., 0]) * (c[..., 3] - c[..., 1])


def _iou_union(a: np.ndarray, b: np.ndarray):
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.maximum(rb - lt, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    return inter / union, union


def iou(a, b) -> float:
    """Intersection over union of two boxes (``Box`` or corner-form sequences)."""
    value, _ = _iou_union(_corners(a), _corners(b))
    return float(value)


def giou(a, b) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box."""
    ca, cb = _corners(a), _corners(b)
    value, union = _iou_union(ca, cb)
    hull_wh = np.maximum(ca[2:], cb[2:]) - np.minimum(ca[:2], cb[:2])
    hull = hull_wh[0] * hull_wh[1]
    return float(value - (hull - union) / hull)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``[n, m]`` IoU between corner-form arrays ``a [n,4]`` and ``b [m,4]``."""
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    return _iou_union(a, b)[0]


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    value, union = _iou_union(a, b)
    hull_wh = np.maximum(a[..., 2:], b[..., 2:]) - np.minimum(a[..., :2], b[..., :2])
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return value - (hull - union) / hull


def tensor_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    c, s = boxes[..., 0:2], boxes[..., 2:4]
    half = s * 0.5
    return T.concat([c - half, c + half], axis=-1)


def tensor_giou(pred_xyxy: Tensor, target_xyxy) -> Tensor:
    """Row-wise GIoU between ``[M,4]`` predicted and target corner boxes (differentiable)."""
    tgt = T.as_tensor(target_xyxy, dtype=pred_xyxy.dtype)
    if pred_xyxy.shape != tgt.shape:
        raise DimensionError(f"giou shapes differ: {pred_xyxy.shape} vs {tgt.shape}")
    area_p = (pred_xyxy[:, 2] - pred_xyxy[:, 0]) * (pred_xyxy[:, 3] - pred_xyxy[:, 1])
    area_t = (tgt[:, 2] - tgt[:, 0]) * (tgt[:, 3] - tgt[:, 1])
    lt = T.maximum(pred_xyxy[:, 0:2], tgt[:, 0:2])
    rb = T.minimum(pred_xyxy[:, 2:4], tgt[:, 2:4])
    wh = T.clamp(rb - lt, lo=0.0)
    inter = wh[:, 0] * wh[:, 1]
    union = area_p + area_t - inter
    hull_lt = T.minimum(pred_xyxy[:, 0:2], tgt[:, 0:2])
    hull_rb = T.maximum(pred_xyxy[:, 2:4], tgt[:, 2:4])
    hull_wh = hull_rb - hull_lt
    hull = hull_wh[:, 0] * hull_wh[:, 1]
    return inter / union - (hull - union) / hull


# -- transforms ------------------------------------------------------------------
def flip_boxes(boxes: np.ndarray) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 4)
    out[:, 0] = 1.0 - out[:, 0]
    return out


def crop_boxes(boxes: np.ndarray, region, threshold: float = VISIBILITY_THRESHOLD):
    """Re-express cxcywh boxes relative to ``region``; returns (boxes, keep mask, visible fraction)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0, y0, x1, y1 = region
    corners = cxcywh_to_xyxy(boxes)
    clipped = np.stack(
        [
            np.clip(corners[:, 0], x0, x1),
            np.clip(corners[:, 1], y0, y1),
            np.clip(corners[:, 2], x0, x1),
            np.clip(corners[:, 3], y0, y1),
        ],
        axis=-1,
    )
    visible = np.maximum(clipped[:, 2] - clipped[:, 0], 0.0) * np.maximum(clipped[:, 3] - clipped[:, 1], 0.0)
    fraction = visible / np.maximum(_area(corners), 1e-300)
    keep = (fraction >= threshold) & (visible > 0)
    sx, sy = x1 - x0, y1 - y0
    renorm = np.stack(
        [(clipped[:, 0] - x0) / sx, (clipped[:, 1] - y0) / sy, (clipped[:, 2] - x0) / sx, (clipped[:, 3] - y0) / sy],
        axis=-1,
    )
    renorm = xyxy_to_cxcywh(np.clip(renorm, 0.0, 1.0))
    # unclipped boxes skip the corner round trip so the identity crop is exact
    inside = np.all(clipped == corners, axis=-1)
    direct = np.stack([(boxes[:, 0] - x0) / sx, (boxes[:, 1] - y0) / sy, boxes[:, 2] / sx, boxes[:, 3] / sy], axis=-1)
    renorm[inside] = direct[inside]
    return renorm, keep, fraction


def transform_boxes(g: GroundTruthSet, t: Transform, threshold: float = VISIBILITY_THRESHOLD) -> GroundTruthSet:
    boxes, labels = g.array, g.labels
    for step in _steps(t):
        if step.kind == "flip_h":
            boxes = flip_boxes(boxes)
        elif step.kind == "crop":
            boxes, keep, _ = crop_boxes(boxes, step.crop_region, threshold)
            boxes, labels = boxes[keep], labels[keep]
    return GroundTruthSet.from_arrays(boxes, labels, g.image_id)


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinearly rescale ``[C,H,W]`` to ``size`` with half-pixel alignment."""
    c, h, w = img.shape
    oh, ow = size
    if (oh, ow) == (h, w):
        return img.copy()
    ys = (np.arange(oh) + 0.5) * (h / oh)
    xs = (np.arange(ow) + 0.5) * (w / ow)
    py = np.clip(ys - 0.5, 0.0, h - 1.0)
    px = np.clip(xs - 0.5, 0.0, w - 1.0)
    y0 = np.floor(py).astype(np.intp)
    x0 = np.floor(px).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (py - y0)[:, None]
    wx = (px - x0)[None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bottom = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(img.dtype, copy=False)


def pixel_rect(region, height: int, width: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = region
    return (int(round(x0 * width)), int(round(y0 * height)), int(round(x1 * width)), int(round(y1 * height)))


def snap_region(region, height: int, width: int) -> tuple[float, float, float, float]:
    """Round a normalized region to the pixel grid so image and box crops agree."""
    px0, py0, px1, py1 = pixel_rect(region, height, width)
    return (px0 / width, py0 / height, px1 / width, py1 / height)


def transform_image(img, t: Transform):
    """Apply ``t`` to a ``[C,H,W]`` image (ndarray or Tensor, returned in kind)."""
    wrap = isinstance(img, Tensor)
    arr = img.data if wrap else np.asarray(img)
    for step in _steps(t):
        if step.kind == "flip_h":
            arr = arr[..., ::-1].copy()
        elif step.kind == "crop":
            _, h, w = arr.shape
            px0, py0, px1, py1 = pixel_rect(step.crop_region, h, w)
            if px1 <= px0 or py1 <= py0:
                raise ParameterError(f"crop {step.crop_region} is empty on a {h}x{w} image")
            arr = arr[:, py0:py1, px0:px1].copy()
        elif step.kind == "resize":
            arr = resize_bilinear(arr, step.resize_target)
    return Tensor(arr) if wrap else arr


# -- sampling ---------------------------------------------------------------------
@dataclass(frozen=True)
class TransformPolicy:
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    min_crop_fraction: float = 0.5
    resize_menu: tuple[int, ...] = (64, 80, 96, 112, 128)
    max_size: int | None = None


RESIZE_ONLY = TransformPolicy(flip_prob=0.0, crop_prob=0.0)


def sample_crop_region(rng, min_fraction: float = 0.5) -> tuple[float, float, float, float]:
    w = rng.uniform(min_fraction, 1.0)
    h = rng.uniform(min_fraction, 1.0)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return (x0, y0, x0 + w, y0 + h)


def sample_transform(rng, policy: TransformPolicy = TransformPolicy(), image_size=(64, 64)) -> list[SpatialTransform]:
    """Draw a flip / crop / resize chain.

    Coins are drawn as ``rng.random() < p`` (flip first, then crop).  The
    resize step scales the short edge of the (cropped) image to a value drawn
    from ``policy.resize_menu``; an empty menu disables resizing.
    """
    h, w = image_size
    steps: list[SpatialTransform] = []
    if rng.random() < policy.flip_prob:
        steps.append(SpatialTransform("flip_h"))
    if rng.random() < policy.crop_prob:
        region = snap_region(sample_crop_region(rng, policy.min_crop_fraction), h, w)
        steps.append(SpatialTransform("crop", crop_region=region))
        px0, py0, px1, py1 = pixel_rect(region, h, w)
        h, w = py1 - py0, px1 - px0
    if policy.resize_menu:
        short = int(policy.resize_menu[int(rng.integers(len(policy.resize_menu)))])
        scale = short / min(h, w)
        target = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
        if policy.max_size is not None and max(target) > policy.max_size:
            scale = policy.max_size / max(h, w)
            target = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
        steps.append(SpatialTransform("resize", resize_target=target))
    return steps
