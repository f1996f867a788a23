"""Training loop, optimizer, batch-loss composition and model analyses."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .augmentation import AugPlan, AugmentedBatch, Projector, augment_features, build_dataaug_batch, encoder_flip
from .boxes import (
    Box,
    GroundTruthSet,
    SpatialTransform,
    TransformPolicy,
    crop_boxes,
    flip_boxes,
    iou,
    sample_crop_region,
    snap_region,
    transform_boxes,
    transform_image,
)
from .data import DetectionRecord, evaluate_ap
from .exceptions import ConfigurationError, NumericError, ParameterError, TrainingDivergedError
from .matching import LossResult, LossWeights, hungarian, matching_cost, one2one_loss, repeat_gts
from .model import DETR, EncodedFeatureSet, FeatureSet

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "ap", "ap50", "ap75", "loss_cls", "loss_l1", "loss_giou", "lr", "seconds")
REGIMES = ("one2one", "group", "hybrid")


@dataclass(frozen=True)
class MatchRegime:
    kind: str = "one2one"
    k: int = 1
    extra_queries: int = 0

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.kind!r}")
        if self.k < 1:
            raise ConfigurationError("K must be >= 1")
        if self.kind == "hybrid" and self.extra_queries < 1:
            raise ConfigurationError("hybrid matching needs extra queries")

    def extra_query_sets(self, num_queries: int) -> list[int]:
        if self.kind == "group":
            return [num_queries] * (self.k - 1)
        if self.kind == "hybrid":
            return [self.extra_queries]
        return []


# -- optimizer -------------------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay over parameter groups ``[(params, lr), ...]``."""

    def __init__(self, groups, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [{"params": list(p), "lr": float(lr)} for p, lr in groups]
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.state: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def scale_lr(self, factor: float) -> None:
        for g in self.groups:
            g["lr"] *= factor

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for group in self.groups:
            lr = group["lr"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                m, v = self.state.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
                g = p.grad.astype(p.data.dtype, copy=False)
                m = self.b1 * m + (1 - self.b1) * g
                v = self.b2 * v + (1 - self.b2) * g * g
                self.state[id(p)] = (m, v)
                p.data *= 1 - lr * self.weight_decay
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- loss composition ---------------------------------------------------------------------
def _encode(model: DETR, data) -> EncodedFeatureSet:
    if isinstance(data, EncodedFeatureSet):
        return data
    if isinstance(data, FeatureSet):
        return model.encoder_forward(data)
    return model.encoder_forward(model.backbone_forward(data))


def view_loss(model: DETR, encoded: EncodedFeatureSet, gts: Sequence[GroundTruthSet], regime: MatchRegime,
              weights: LossWeights) -> list[LossResult]:
    """Per-image losses for one batched view under ``regime``."""
    preds = model.decoder_forward(model.query_embed, encoded)
    losses = [one2one_loss(preds.image(b), g, weights) for b, g in enumerate(gts)]
    if regime.kind == "group":
        for q in model.extra_queries:
            extra = model.decoder_forward(q, encoded)
            losses = [acc + one2one_loss(extra.image(b), g, weights) for b, (acc, g) in enumerate(zip(losses, gts))]
    elif regime.kind == "hybrid":
        q = model.extra_queries[0]
        extra = model.decoder_forward(q, encoded)
        out = []
        for b, (acc, g) in enumerate(zip(losses, gts)):
            if q.shape[0] < regime.k * len(g):
                raise ParameterError(f"{q.shape[0]} extra queries cannot host {regime.k} x {len(g)} targets")
            part = one2one_loss(extra.image(b), repeat_gts(g, regime.k), weights)
            part.components = {f"{k}_extra": v for k, v in part.components.items()}
            out.append(acc + part)
        losses = out
    return losses


def make_views(model: DETR, images: np.ndarray, gts: Sequence[GroundTruthSet], plan: AugPlan, rng,
               projectors: Projector | None = None, policy: TransformPolicy = TransformPolicy()) -> AugmentedBatch:
    if plan.mode == "dataaug":
        return build_dataaug_batch(list(images), gts, plan.n_views, rng, policy)
    features = model.backbone_forward(images)
    if plan.mode == "feataug_flip" and plan.placement == "encoder":
        return encoder_flip(model.encoder_forward(features), gts)
    return augment_features(features, gts, plan, rng, projectors)


def batch_loss(model: DETR, images: np.ndarray, gts: Sequence[GroundTruthSet], plan: AugPlan,
               regime: MatchRegime = MatchRegime(), weights: LossWeights = LossWeights(), rng=None,
               projectors: Projector | None = None, policy: TransformPolicy = TransformPolicy()) -> LossResult:
    """Sum over views of the per-image losses, averaged over source images."""
    rng = rng if rng is not None else np.random.default_rng(0)
    batch = make_views(model, images, gts, plan, rng, projectors, policy)
    total = None
    for view in batch.views:
        for part in view_loss(model, _encode(model, view.data), view.gts, regime, weights):
            total = part if total is None else total + part
    n_images = len(gts)
    total.total = total.total * (1.0 / n_images)
    total.components = {k: v / n_images for k, v in total.components.items()}
    return total


# -- metrics --------------------------------------------------------------------------------
@dataclass
class MetricLog:
    rows: list = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0

    def append(self, **row) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.rows.append({k: row.get(k, 0.0) for k in METRIC_FIELDS})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(float(v)) if k != "epoch" else int(v)) for k, v in row.items()})

    @classmethod
    def from_csv(cls, path) -> "MetricLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.rows.append({k: (int(row[k]) if k == "epoch" else float(row[k])) for k in METRIC_FIELDS})
        return log

    @property
    def final_ap(self) -> float:
        return self.rows[-1]["ap"] if self.rows else float("nan")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def detections_for(model: DETR, images: np.ndarray, image_ids, top_k: int = 10, chunk: int = 50) -> list[DetectionRecord]:
    records = []
    for start in range(0, len(images), chunk):
        dets = model.predict(images[start:start + chunk], top_k=top_k)
        for image_id, per_image in zip(image_ids[start:start + chunk], dets):
            for d in per_image:
                box = np.clip(d.box, 1e-6, 1.0)
                records.append(DetectionRecord(int(image_id), Box(*map(float, box), d.class_id), d.score, d.class_id))
    return records


def evaluate_model(model: DETR, images: np.ndarray, gts: Sequence[GroundTruthSet], top_k: int = 10):
    return evaluate_ap(detections_for(model, images, [g.image_id for g in gts], top_k), gts)


# -- training loop -----------------------------------------------------------------------------
@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 2e-4
    lr_backbone_ratio: float = 0.1
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 5 / 6
    grad_clip: float = 0.1
    base_flip: bool = True
    top_k: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.lr_backbone_ratio, self.weight_decay) <= 0:
            raise ConfigurationError("learning rates and weight decay must be positive")
        if not 0 < self.lr_drop_fraction < 1:
            raise ConfigurationError("lr_drop_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")

    @property
    def drop_epoch(self) -> int:
        return int(math.floor(self.lr_drop_fraction * self.epochs))


def steps_per_epoch(n_images: int, plan: AugPlan, batch_size: int) -> int:
    if plan.mode == "dataaug":
        per_step = max(1, batch_size // plan.n_views)
        return math.ceil(math.ceil(n_images / plan.n_views) / per_step)
    return math.ceil(n_images / batch_size)


def _epoch_batches(n_images: int, plan: AugPlan, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n_images)
    if plan.mode == "dataaug":
        order = order[: math.ceil(n_images / plan.n_views)]
        per_step = max(1, batch_size // plan.n_views)
    else:
        per_step = batch_size
    return [order[i:i + per_step] for i in range(0, len(order), per_step)]


def _base_augment(images: np.ndarray, gts: list, rng, enabled: bool):
    if not enabled:
        return images, gts
    images = images.copy()
    out = []
    for i, g in enumerate(gts):
        if rng.random() < 0.5:
            images[i] = images[i][..., ::-1]
            g = transform_boxes(g, SpatialTransform("flip_h"))
        out.append(g)
    return images, out


def _dump_batch(run_dir, images, gts, exc) -> Path | None:
    if run_dir is None:
        return None
    path = Path(run_dir) / "diverged_batch.npz"
    np.savez(path, images=images, boxes=np.array([g.array for g in gts], dtype=object),
             labels=np.array([g.labels for g in gts], dtype=object), message=str(exc))
    return path


def run_training(model: DETR, projectors: Projector | None, plan: AugPlan, regime: MatchRegime,
                 weights: LossWeights, settings: TrainSettings, train_images: np.ndarray,
                 train_gts: list, val_images: np.ndarray | None = None, val_gts: list | None = None,
                 run_dir=None, callback=None) -> MetricLog:
    """Optimize ``model`` in place and return the per-epoch metric log."""
    rng = np.random.default_rng([settings.seed, 1])
    params = model.parameters() + (projectors.parameters() if projectors is not None else [])
    backbone_ids = {id(p) for p in model.backbone.parameters()}
    groups = [
        ([p for p in params if id(p) in backbone_ids], settings.lr * settings.lr_backbone_ratio),
        ([p for p in params if id(p) not in backbone_ids], settings.lr),
    ]
    opt = AdamW(groups, weight_decay=settings.weight_decay)
    log = MetricLog(seed=settings.seed)
    dropped = False
    dtype = model.config.np_dtype
    for epoch in range(1, settings.epochs + 1):
        if not dropped and epoch > settings.drop_epoch:
            opt.scale_lr(0.1)
            dropped = True
        start = time.perf_counter()
        sums: dict[str, float] = {}
        batches = _epoch_batches(len(train_images), plan, settings.batch_size, rng)
        for idx in batches:
            imgs = train_images[idx].astype(dtype, copy=False)
            gts = [train_gts[i] for i in idx]
            imgs, gts = _base_augment(imgs, gts, rng, settings.base_flip and plan.mode != "dataaug")
            try:
                result = batch_loss(model, imgs, gts, plan, regime, weights, rng, projectors)
                if not np.isfinite(result.total.item()):
                    raise NumericError("loss is not finite")
                for p in params:
                    p.grad = None
                result.total.backward()
            except NumericError as exc:
                dump = _dump_batch(run_dir, imgs, gts, exc)
                raise TrainingDivergedError(f"epoch {epoch}: {exc}; batch dumped to {dump}") from exc
            clip_grad_norm(params, settings.grad_clip)
            opt.step()
            for k, v in result.components.items():
                sums[k] = sums.get(k, 0.0) + v
        seconds = time.perf_counter() - start
        report = None
        if val_images is not None and val_gts is not None:
            report = evaluate_model(model, val_images.astype(dtype, copy=False), val_gts, settings.top_k)
        n = max(len(batches), 1)
        log.append(
            epoch=epoch,
            ap=report.ap if report else float("nan"),
            ap50=report.ap50 if report else float("nan"),
            ap75=report.ap75 if report else float("nan"),
            loss_cls=sums.get("loss_cls", 0.0) / n,
            loss_l1=sums.get("loss_l1", 0.0) / n,
            loss_giou=sums.get("loss_giou", 0.0) / n,
            lr=opt.groups[1]["lr"],
            seconds=seconds,
        )
        logger.info("epoch %d ap=%.4f loss_cls=%.4f (%.1fs)", epoch, log.rows[-1]["ap"], log.rows[-1]["loss_cls"], seconds)
        if callback is not None:
            callback(epoch, log)
    return log


# -- analyses -----------------------------------------------------------------------------------
def _last_layer_matches(model: DETR, images: np.ndarray, gts: Sequence[GroundTruthSet], weights: LossWeights,
                        chunk: int = 50):
    """Per image: (assignment, last-layer boxes) under the model's primary queries."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), chunk):
            imgs = T.as_tensor(images[start:start + chunk], dtype=model.config.np_dtype)
            last = model.forward(imgs).last
            probs = T.sigmoid(last.logits).data.astype(np.float64)
            boxes = last.boxes.data.astype(np.float64)
            for b, g in enumerate(gts[start:start + chunk]):
                match = hungarian(matching_cost(boxes[b], probs[b], g, weights))
                out.append((match, boxes[b]))
    return out


def pilot_study(model: DETR, images: np.ndarray, gts: Sequence[GroundTruthSet], transform_kind: str = "flip",
                seed: int = 0, weights: LossWeights = LossWeights(), min_crop_fraction: float = 0.5) -> dict:
    """How often does an object change query between an image and its transformed copy?

    Returns the fraction of corresponding objects whose matched query index
    changed and the mean IoU, in normalized view coordinates, of the object
    boxes whose query did not change.
    """
    if transform_kind not in ("identity", "flip", "crop", "flip_crop"):
        raise ConfigurationError(f"unknown transform {transform_kind!r}")
    rng = np.random.default_rng(seed)
    h, w = images.shape[-2:]
    t_images, t_gts, keep_maps = [], [], []
    for img, g in zip(images, gts):
        steps: list[SpatialTransform] = []
        if transform_kind in ("flip", "flip_crop"):
            steps.append(SpatialTransform("flip_h"))
        if transform_kind in ("crop", "flip_crop"):
            region = snap_region(sample_crop_region(rng, min_crop_fraction), h, w)
            steps.append(SpatialTransform("crop", crop_region=region))
            steps.append(SpatialTransform("resize", resize_target=(h, w)))
        boxes, labels = g.array, g.labels
        index = np.arange(len(g))
        for st in steps:
            if st.kind == "flip_h":
                boxes = flip_boxes(boxes)
            elif st.kind == "crop":
                boxes, keep, _ = crop_boxes(boxes, st.crop_region)
                boxes, labels, index = boxes[keep], labels[keep], index[keep]
        t_images.append(transform_image(img, steps))
        t_gts.append(GroundTruthSet.from_arrays(boxes, labels, g.image_id))
        keep_maps.append(index)
    base = _last_layer_matches(model, images, gts, weights)
    other = _last_layer_matches(model, np.stack(t_images), t_gts, weights)
    changed, total, ious = 0, 0, []
    for g, tg, index, (m1, _), (m2, _) in zip(gts, t_gts, keep_maps, base, other):
        for j, i in enumerate(index):
            total += 1
            if m1.gt_to_query[i] != m2.gt_to_query[j]:
                changed += 1
            else:
                ious.append(iou(g.boxes[i], tg.boxes[j]))
    return {
        "transform": transform_kind,
        "objects": total,
        "reassigned": changed,
        "reassigned_fraction": changed / total if total else 0.0,
        "unchanged": len(ious),
        "mean_iou_unchanged": float(np.mean(ious)) if ious else float("nan"),
        "reference": {"reassigned_fraction": 0.959, "mean_iou_unchanged": 0.782},
    }


def query_stats(model: DETR, images: np.ndarray, gts: Sequence[GroundTruthSet],
                weights: LossWeights = LossWeights()) -> dict:
    """Matched-prediction box statistics per primary query."""
    n_q = model.query_embed.shape[0]
    samples: list[list[np.ndarray]] = [[] for _ in range(n_q)]
    for (match, boxes), g in zip(_last_layer_matches(model, images, gts, weights), gts):
        for q in match.gt_to_query:
            samples[q].append(boxes[q])
    rows = []
    for q in range(n_q):
        arr = np.array(samples[q]).reshape(-1, 4)
        row = {"query": q, "count": len(arr), "never_matched": len(arr) == 0}
        for k, name in enumerate(("cx", "cy", "w", "h")):
            row[f"mean_{name}"] = float(arr[:, k].mean()) if len(arr) else float("nan")
            row[f"var_{name}"] = float(arr[:, k].var()) if len(arr) else float("nan")
        rows.append(row)
    pooled = np.concatenate([np.array(s).reshape(-1, 4) for s in samples if s], axis=0) if any(samples) else np.zeros((0, 4))
    dataset_var = float(pooled[:, 0].var() + pooled[:, 1].var()) if len(pooled) else float("nan")
    matched = [r for r in rows if r["count"] >= 2]
    below = [r for r in matched if r["var_cx"] + r["var_cy"] < dataset_var]
    return {
        "rows": rows,
        "samples": samples,
        "dataset_center_variance": dataset_var,
        "position_aware_fraction": len(below) / len(matched) if matched else float("nan"),
    }


QUERY_FIELDS = ("query", "count", "never_matched", "mean_cx", "mean_cy", "mean_w", "mean_h",
                "var_cx", "var_cy", "var_w", "var_h")


def write_query_stats(stats: dict, directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "query_stats.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=QUERY_FIELDS)
        writer.writeheader()
        for row in stats["rows"]:
            writer.writerow({k: row[k] for k in QUERY_FIELDS})
    with open(root / "query_samples.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", "cx", "cy", "w", "h"])
        for q, items in enumerate(stats["samples"]):
            for box in items:
                writer.writerow([q, *map(repr, map(float, box))])
