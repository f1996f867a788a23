"""Scikit-learn style estimator wrapping model construction, training and inference."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .augmentation import AugPlan, Projector
from .boxes import GroundTruthSet
from .data import APReport
from .exceptions import ConfigurationError, DimensionError
from .matching import LossWeights
from .model import DETR, Detection, ModelConfig, config_dict, load_checkpoint, save_checkpoint
from .train import MatchRegime, MetricLog, TrainSettings, config_hash, evaluate_model, run_training

MIN_SIDE = 32


def check_images(X, dtype=np.float64) -> np.ndarray:
    """Validate a ``[N, 3, H, W]`` image batch; uint8 input is scaled to [0, 1]."""
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise DimensionError(f"expected images shaped [N, 3, H, W], got {arr.shape}")
    if min(arr.shape[-2:]) < MIN_SIDE:
        raise DimensionError(f"images must be at least {MIN_SIDE}x{MIN_SIDE}, got {arr.shape[-2:]}")
    if arr.dtype == np.uint8:
        return arr.astype(dtype) / 255.0
    if not np.issubdtype(arr.dtype, np.floating):
        raise DimensionError(f"images must be uint8 or floating point, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or Inf")
    return arr.astype(dtype, copy=False)


def check_targets(y, n: int) -> list[GroundTruthSet]:
    targets = list(y)
    if len(targets) != n:
        raise DimensionError(f"{len(targets)} target sets for {n} images")
    for i, g in enumerate(targets):
        if not isinstance(g, GroundTruthSet):
            raise TypeError(f"targets[{i}] is {type(g).__name__}, expected GroundTruthSet")
    return targets


class DETRDetector(BaseEstimator):
    """Small detection transformer trained with one-to-one or one-to-many matching.

    ``regime`` picks the query-side scheme (``one2one``, ``group``, ``hybrid``);
    ``aug_mode`` picks the view-side scheme (``none``, ``dataaug``,
    ``feataug_flip``, ``feataug_crop``, ``feataug_fc``).  Both can be combined.
    ``y`` is a list of :class:`GroundTruthSet`, one per image.
    """

    def __init__(self, num_classes=3, hidden_dim=64, num_heads=4, enc_layers=2, dec_layers=2, num_queries=25,
                 ffn_dim=128, num_scales=2, regime="one2one", group_k=2, hybrid_k=3, hybrid_queries=None,
                 aug_mode="none", n_views=2, placement="backbone", projector="separate",
                 crop_min_fraction=0.5, crop_out_scale=1.0, base_flip=True, epochs=30, batch_size=8, lr=2e-4,
                 lr_backbone_ratio=0.1, weight_decay=1e-4, lr_drop_fraction=5 / 6, cls_coef=2.0, l1_coef=5.0,
                 giou_coef=2.0, focal_alpha=0.25, focal_gamma=2.0, grad_clip=0.1, top_k=10, dtype="float32",
                 seed=0):
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.num_queries = num_queries
        self.ffn_dim = ffn_dim
        self.num_scales = num_scales
        self.regime = regime
        self.group_k = group_k
        self.hybrid_k = hybrid_k
        self.hybrid_queries = hybrid_queries
        self.aug_mode = aug_mode
        self.n_views = n_views
        self.placement = placement
        self.projector = projector
        self.crop_min_fraction = crop_min_fraction
        self.crop_out_scale = crop_out_scale
        self.base_flip = base_flip
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_backbone_ratio = lr_backbone_ratio
        self.weight_decay = weight_decay
        self.lr_drop_fraction = lr_drop_fraction
        self.cls_coef = cls_coef
        self.l1_coef = l1_coef
        self.giou_coef = giou_coef
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.grad_clip = grad_clip
        self.top_k = top_k
        self.dtype = dtype
        self.seed = seed

    # -- derived configuration ------------------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(hidden_dim=self.hidden_dim, num_heads=self.num_heads, enc_layers=self.enc_layers,
                           dec_layers=self.dec_layers, num_queries=self.num_queries, num_classes=self.num_classes,
                           ffn_dim=self.ffn_dim, num_scales=self.num_scales, dtype=self.dtype)

    def match_regime(self) -> MatchRegime:
        if self.regime == "group":
            return MatchRegime("group", k=self.group_k)
        if self.regime == "hybrid":
            extra = self.hybrid_queries if self.hybrid_queries is not None else 3 * self.num_queries
            return MatchRegime("hybrid", k=self.hybrid_k, extra_queries=extra)
        return MatchRegime(self.regime)

    def aug_plan(self) -> AugPlan:
        return AugPlan(self.aug_mode, n_views=self.n_views, crop_min_fraction=self.crop_min_fraction,
                       placement=self.placement, projector=self.projector, crop_out_scale=self.crop_out_scale)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.cls_coef, self.l1_coef, self.giou_coef, self.focal_alpha, self.focal_gamma)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             lr_backbone_ratio=self.lr_backbone_ratio, weight_decay=self.weight_decay,
                             lr_drop_fraction=self.lr_drop_fraction, grad_clip=self.grad_clip,
                             base_flip=self.base_flip, top_k=self.top_k, seed=self.seed)

    def config_hash(self) -> str:
        return config_hash(self.get_params())

    def build(self) -> "DETRDetector":
        """Validate hyperparameters and create freshly initialized modules."""
        cfg = self.model_config()
        regime, plan = self.match_regime(), self.aug_plan()
        self.train_settings()
        self.loss_weights()
        self.model_ = DETR(cfg, seed=self.seed, extra_query_sets=regime.extra_query_sets(cfg.num_queries))
        self.projectors_ = Projector(cfg, np.random.default_rng([self.seed, 2])) if plan.needs_projectors else None
        self.history_ = MetricLog(config_hash=self.config_hash(), seed=self.seed)
        return self

    # -- estimator API ------------------------------------------------------------------------
    def fit(self, X, y, eval_set=None, run_dir=None, callback=None) -> "DETRDetector":
        images = check_images(X, np.dtype(self.dtype))
        gts = check_targets(y, len(images))
        for g in gts:
            if len(g) and int(g.labels.max()) >= self.num_classes:
                raise ConfigurationError(f"image {g.image_id} has class {int(g.labels.max())} >= {self.num_classes}")
        val_images = val_gts = None
        if eval_set is not None:
            val_images = check_images(eval_set[0], np.dtype(self.dtype))
            val_gts = check_targets(eval_set[1], len(val_images))
        self.build()
        log = run_training(self.model_, self.projectors_, self.aug_plan(), self.match_regime(), self.loss_weights(),
                           self.train_settings(), images, gts, val_images, val_gts, run_dir=run_dir,
                           callback=callback)
        log.config_hash = self.history_.config_hash
        self.history_ = log
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("DETRDetector is not fitted; call fit() or load()")

    def predict(self, X) -> list[list[Detection]]:
        self._check_fitted()
        return self.model_.predict(check_images(X, np.dtype(self.dtype)), top_k=self.top_k)

    def evaluate(self, X, y) -> APReport:
        self._check_fitted()
        images = check_images(X, np.dtype(self.dtype))
        return evaluate_model(self.model_, images, check_targets(y, len(images)), self.top_k)

    def score(self, X, y) -> float:
        """COCO-style AP over IoU thresholds 0.50:0.95."""
        return self.evaluate(X, y).ap

    # -- persistence -----------------------------------------------------------------------------
    def save(self, path) -> None:
        self._check_fitted()
        params = {f"model.{k}": v for k, v in self.model_.state_dict().items()}
        if self.projectors_ is not None:
            params.update({f"projector.{k}": p.data.copy() for k, p in self.projectors_.named_parameters()})
        extra = {"estimator": self.get_params(), "config_hash": self.config_hash()}
        save_checkpoint(path, params, config_dict(self.model_config()), extra)

    @classmethod
    def load(cls, path) -> "DETRDetector":
        params, _, extra = load_checkpoint(Path(path))
        est = cls(**extra["estimator"])
        est.build()
        est.model_.load_state_dict({k[len("model."):]: v for k, v in params.items() if k.startswith("model.")})
        if est.projectors_ is not None:
            for name, p in est.projectors_.named_parameters():
                p.data[...] = params[f"projector.{name}"]
        return est


def detector_from_config(config: dict, **overrides) -> DETRDetector:
    """Build an estimator from a JSON-style dict, rejecting unknown keys."""
    merged = {**config, **{k: v for k, v in overrides.items() if v is not None}}
    valid = DETRDetector._get_param_names()
    unknown = sorted(set(merged) - set(valid))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return DETRDetector(**merged)

