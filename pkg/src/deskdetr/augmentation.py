"""One-to-many supervision by augmenting images or backbone features.

Each training image contributes several *views* to the same batch: the
original plus spatially transformed copies with correspondingly transformed
ground truths.  Every view is matched to the shared object queries on its
own, so one object is supervised through several queries.

Image-level views (``dataaug``) pass through the whole network.  Feature-level
views (``feataug_*``) reuse one backbone pass: the backbone maps are flipped
and/or cropped with RoIAlign before the encoder.  Cropped maps go through a
per-scale projector (1x1 conv + group norm) that only exists at training time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .boxes import (
    GroundTruthSet,
    SpatialTransform,
    TransformPolicy,
    sample_crop_region,
    sample_transform,
    transform_boxes,
    transform_image,
)
from .exceptions import ConfigurationError, DimensionError, ParameterError
from .model import EncodedFeatureSet, FeatureSet, ModelConfig
from .nn import Conv2d, GroupNorm, Module
from .tensor import Tensor

MODES = ("none", "dataaug", "feataug_flip", "feataug_crop", "feataug_fc")


@dataclass
class AugPlan:
    """Which views each training image contributes.

    ``placement`` selects whether feature flips act on backbone output
    (default) or on encoder output (ablation only).  ``projector`` is
    ``separate`` (projector on cropped views) or ``none`` (ablation).
    """

    mode: str = "none"
    n_views: int = 2
    crop_min_fraction: float = 0.5
    placement: str = "backbone"
    projector: str = "separate"
    sampling_ratio: int | None = None
    crop_out_scale: float = 1.0  # cropped maps are resized to this fraction of each scale's size

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown augmentation mode {self.mode!r}")
        if self.mode == "dataaug" and self.n_views < 2:
            raise ConfigurationError("dataaug needs at least two views per image")
        if self.placement not in ("backbone", "encoder"):
            raise ConfigurationError(f"unknown placement {self.placement!r}")
        if self.placement == "encoder" and self.mode != "feataug_flip":
            raise ConfigurationError("encoder placement is only defined for feataug_flip")
        if self.projector not in ("separate", "none"):
            raise ConfigurationError(f"unknown projector setting {self.projector!r}")
        if not self.crop_out_scale > 0:
            raise ConfigurationError("crop_out_scale must be positive")

    @property
    def uses_crop(self) -> bool:
        return self.mode in ("feataug_crop", "feataug_fc")

    @property
    def needs_projectors(self) -> bool:
        return self.uses_crop and self.projector == "separate"

    @property
    def views_per_image(self) -> int:
        return {"none": 1, "dataaug": self.n_views, "feataug_flip": 2, "feataug_crop": 2, "feataug_fc": 3}[self.mode]


@dataclass
class View:
    """One batched view: features (or images) for several source images, with per-image targets."""

    data: object  # FeatureSet, EncodedFeatureSet or a [B,3,H,W] ndarray
    gts: list
    tag: str
    sources: list = field(default_factory=list)


@dataclass
class AugmentedBatch:
    views: list

    @property
    def tags(self) -> list[str]:
        return [v.tag for v in self.views]

    def __len__(self) -> int:
        return len(self.views)


# -- flipping -----------------------------------------------------------------------
def flip_gts(gts: Sequence[GroundTruthSet]) -> list[GroundTruthSet]:
    flip = SpatialTransform("flip_h")
    return [transform_boxes(g, flip) for g in gts]


def flip_features(f):
    """Reverse the width axis of every scale; keeps the feature-set type."""
    return type(f)([T.reverse_along_axis(m, axis=-1) for m in f.maps], f.scale_factors)


def _require_backbone_features(f) -> None:
    if not isinstance(f, FeatureSet):
        raise TypeError("feature augmentation consumes backbone features (FeatureSet), "
                        f"got {type(f).__name__}")


def feataug_flip(f: FeatureSet, gts: Sequence[GroundTruthSet]) -> AugmentedBatch:
    _require_backbone_features(f)
    gts = list(gts)
    src = list(range(len(gts)))
    return AugmentedBatch([View(f, gts, "original", src), View(flip_features(f), flip_gts(gts), "flipped", src)])


def encoder_flip(e: EncodedFeatureSet, gts: Sequence[GroundTruthSet]) -> AugmentedBatch:
    """Flip applied after the encoder (placement ablation only)."""
    if not isinstance(e, EncodedFeatureSet):
        raise TypeError("encoder_flip expects encoded features")
    gts = list(gts)
    src = list(range(len(gts)))
    return AugmentedBatch([View(e, gts, "original", src), View(flip_features(e), flip_gts(gts), "flipped", src)])


# -- RoIAlign cropping -----------------------------------------------------------------
def roi_sample_points(region, height: int, width: int, out_size: tuple[int, int],
                      sampling_ratio: int | None = None):
    """Sample locations (pixel units) for cropping ``region`` into ``out_size`` bins.

    Returns ``(points [oh*sy*ow*sx, 2], sy, sx)``; points are ordered so that a
    reshape to ``[oh, sy, ow, sx]`` recovers the bin structure.  Without an
    explicit ``sampling_ratio`` each bin gets ``ceil(bin size)`` samples per axis.
    """
    x0, y0, x1, y1 = region
    oh, ow = out_size
    bin_w = (x1 - x0) * width / ow
    bin_h = (y1 - y0) * height / oh
    sx = sampling_ratio or max(1, math.ceil(bin_w - 1e-9))
    sy = sampling_ratio or max(1, math.ceil(bin_h - 1e-9))
    xs = x0 * width + (np.arange(ow)[:, None] + (np.arange(sx)[None, :] + 0.5) / sx) * bin_w
    ys = y0 * height + (np.arange(oh)[:, None] + (np.arange(sy)[None, :] + 0.5) / sy) * bin_h
    gy = np.broadcast_to(ys[:, :, None, None], (oh, sy, ow, sx))
    gx = np.broadcast_to(xs[None, None, :, :], (oh, sy, ow, sx))
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1), sy, sx


def roialign(feature: Tensor, region, out_size: tuple[int, int], sampling_ratio: int | None = None) -> Tensor:
    """Crop-and-resize one ``[C,H,W]`` map over a normalized region."""
    _validate_region(region)
    c, h, w = feature.shape
    points, sy, sx = roi_sample_points(region, h, w, out_size, sampling_ratio)
    sampled = T.bilinear_sample(feature, points)
    oh, ow = out_size
    return sampled.reshape(c, oh, sy, ow, sx).mean(axis=(2, 4))


def _validate_region(region) -> None:
    x0, y0, x1, y1 = region
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ParameterError(f"crop region {tuple(region)} must be non-degenerate and inside [0,1]^2")


def roialign_crop(f: FeatureSet, region, out_sizes: Sequence[tuple[int, int]] | None = None,
                  sampling_ratio: int | None = None) -> FeatureSet:
    """Crop the same normalized region from every scale.

    ``region`` is one ``(x0, y0, x1, y1)`` tuple shared by the batch or a list
    with one region per image.  By default each scale is resized back to its
    own spatial size, so token counts do not change.
    """
    b = f.batch_size
    regions = [tuple(region)] * b if np.ndim(region) == 1 else [tuple(r) for r in region]
    if len(regions) != b:
        raise DimensionError(f"{len(regions)} regions for a batch of {b}")
    for r in regions:
        _validate_region(r)
    sizes = list(out_sizes) if out_sizes is not None else f.spatial_shapes
    maps = []
    for m, size in zip(f.maps, sizes):
        crops = [roialign(m[i], regions[i], size, sampling_ratio) for i in range(b)]
        maps.append(T.stack(crops, axis=0))
    return type(f)(maps, f.scale_factors)


class Projector(Module):
    """Per-scale 1x1 convolution + group norm, initialized to the identity map."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        dt = cfg.np_dtype
        c = cfg.hidden_dim
        self.convs = []
        for _ in range(cfg.num_scales):
            conv = Conv2d(c, c, 1, rng, dtype=dt)
            conv.weight.data[...] = np.eye(c, dtype=dt)[:, :, None, None]
            conv.bias.data[...] = 0.0
            self.convs.append(conv)
        self.norms = [GroupNorm(cfg.norm_groups, c, dtype=dt) for _ in range(cfg.num_scales)]

    def __call__(self, f: FeatureSet) -> FeatureSet:
        if len(f.maps) > len(self.convs):
            raise ConfigurationError(f"projector covers {len(self.convs)} scales, features have {len(f.maps)}")
        return FeatureSet([norm(conv(m)) for m, conv, norm in zip(f.maps, self.convs, self.norms)], f.scale_factors)


def _crop_view(f: FeatureSet, gts: list, rng, projectors: Projector | None, plan: AugPlan) -> View:
    regions = [sample_crop_region(rng, plan.crop_min_fraction) for _ in gts]
    sizes = [(max(1, round(h * plan.crop_out_scale)), max(1, round(w * plan.crop_out_scale)))
             for h, w in f.spatial_shapes]
    cropped = roialign_crop(f, regions, sizes, sampling_ratio=plan.sampling_ratio)
    if plan.projector == "separate":
        if projectors is None:
            raise ConfigurationError("cropped views need a projector for every scale")
        cropped = projectors(cropped)
    crop_gts = [transform_boxes(g, SpatialTransform("crop", crop_region=r)) for g, r in zip(gts, regions)]
    return View(cropped, crop_gts, "cropped", list(range(len(gts))))


def feataug_crop(f: FeatureSet, gts: Sequence[GroundTruthSet], rng, projectors: Projector | None,
                 plan: AugPlan | None = None) -> AugmentedBatch:
    _require_backbone_features(f)
    plan = plan or AugPlan("feataug_crop")
    gts = list(gts)
    return AugmentedBatch([View(f, gts, "original", list(range(len(gts)))), _crop_view(f, gts, rng, projectors, plan)])


def feataug_fc(f: FeatureSet, gts: Sequence[GroundTruthSet], rng, projectors: Projector | None,
               plan: AugPlan | None = None) -> AugmentedBatch:
    _require_backbone_features(f)
    plan = plan or AugPlan("feataug_fc")
    flipped = feataug_flip(f, gts)
    return AugmentedBatch(flipped.views + [_crop_view(f, list(gts), rng, projectors, plan)])


def augment_features(f: FeatureSet, gts: Sequence[GroundTruthSet], plan: AugPlan, rng,
                     projectors: Projector | None = None) -> AugmentedBatch:
    """Dispatch on ``plan.mode`` for the feature-level modes (and ``none``)."""
    if plan.mode == "none":
        return AugmentedBatch([View(f, list(gts), "original", list(range(len(gts))))])
    if plan.mode == "feataug_flip":
        return feataug_flip(f, gts)
    if plan.mode == "feataug_crop":
        return feataug_crop(f, gts, rng, projectors, plan)
    if plan.mode == "feataug_fc":
        return feataug_fc(f, gts, rng, projectors, plan)
    raise ConfigurationError(f"{plan.mode} is not a feature-level mode")


# -- image-level views ------------------------------------------------------------------
def build_dataaug_batch(images: Sequence[np.ndarray], gts: Sequence[GroundTruthSet], n_views: int, rng,
                        policy: TransformPolicy = TransformPolicy()) -> AugmentedBatch:
    """``n_views`` independently transformed copies of every image.

    Views of equal pixel size are grouped into one batched :class:`View`
    (tag ``dataaug_k`` for the k-th copy).
    """
    if n_views < 2:
        raise ParameterError("dataaug needs n_views >= 2")
    groups: dict[tuple, View] = {}
    for k in range(n_views):
        for i, (img, g) in enumerate(zip(images, gts)):
            steps = sample_transform(rng, policy, image_size=img.shape[-2:])
            out = transform_image(img, steps)
            key = (k, out.shape)
            if key not in groups:
                groups[key] = View([], [], f"dataaug_{k}", [])
            groups[key].data.append(out)
            groups[key].gts.append(transform_boxes(g, steps))
            groups[key].sources.append(i)
    views = []
    for view in groups.values():
        view.data = np.stack(view.data)
        views.append(view)
    return AugmentedBatch(views)
