"""The miniature detection transformer.

A strided convolutional backbone produces multi-scale feature maps, a
transformer encoder refines the concatenated multi-scale tokens, and a
transformer decoder turns learned object queries into one box/class
prediction per query after every decoder layer (heads are shared).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError, DatasetFormatError, DimensionError
from .matching import LayerPrediction
from .nn import MLP, Conv2d, GroupNorm, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor

MIN_IMAGE_SIDE = 32
BACKBONE_STRIDES = (8, 16, 32)


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    num_queries: int = 25
    num_classes: int = 3
    ffn_dim: int = 128
    num_scales: int = 2
    backbone_channels: tuple = (16, 32, 64, 64, 64)
    dtype: str = "float32"

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")
        if self.num_scales not in (1, 2, 3):
            raise ConfigurationError("num_scales must be 1, 2 or 3")
        if self.dec_layers < 1 or self.enc_layers < 0:
            raise ConfigurationError("need at least one decoder layer and a non-negative encoder depth")
        if self.num_queries < 1 or self.num_classes < 1:
            raise ConfigurationError("num_queries and num_classes must be positive")
        if len(self.backbone_channels) != 5:
            raise ConfigurationError("backbone_channels needs five stage widths")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def norm_groups(self) -> int:
        for g in (8, 4, 2):
            if self.hidden_dim % g == 0:
                return g
        return 1


@dataclass
class FeatureSet:
    """Backbone output: one ``[B, C, H, W]`` map per scale, ordered fine to coarse."""

    maps: list
    scale_factors: tuple

    @property
    def batch_size(self) -> int:
        return self.maps[0].shape[0]

    @property
    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [tuple(m.shape[-2:]) for m in self.maps]


@dataclass
class EncodedFeatureSet:
    """Encoder output.  Kept distinct from :class:`FeatureSet` so backbone-level
    augmentations cannot be handed encoded features by accident."""

    maps: list
    scale_factors: tuple

    @property
    def batch_size(self) -> int:
        return self.maps[0].shape[0]

    @property
    def spatial_shapes(self) -> list[tuple[int, int]]:
        return [tuple(m.shape[-2:]) for m in self.maps]


@dataclass
class Predictions:
    """Per-decoder-layer batched predictions (boxes ``[B,N,4]``, logits ``[B,N,K+1]``)."""

    layers: list

    def __len__(self) -> int:
        return len(self.layers)

    def image(self, b: int) -> list[LayerPrediction]:
        return [LayerPrediction(layer.boxes[b], layer.logits[b]) for layer in self.layers]

    @property
    def last(self) -> LayerPrediction:
        return self.layers[-1]


@dataclass
class Detection:
    box: np.ndarray  # normalized cxcywh
    score: float
    class_id: int
    query: int


def sine_position_encoding(height: int, width: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """``[H*W, dim]`` 2-D sinusoidal encoding of pixel-centre positions normalized to [0, 2*pi]."""
    half = dim // 2
    ys = (np.arange(height) + 0.5) / height * 2 * math.pi
    xs = (np.arange(width) + 0.5) / width * 2 * math.pi
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)

    def encode(v):
        pos = v[:, None] / dim_t
        out = np.empty_like(pos)
        out[:, 0::2] = np.sin(pos[:, 0::2])
        out[:, 1::2] = np.cos(pos[:, 1::2])
        return out

    ey, ex = encode(ys), encode(xs)
    grid = np.concatenate(
        [np.repeat(ey[:, None, :], width, axis=1), np.repeat(ex[None, :, :], height, axis=0)], axis=-1
    )
    return grid.reshape(height * width, 2 * half)


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        chans = (3,) + cfg.backbone_channels
        self.stages = [Conv2d(chans[i], chans[i + 1], 3, rng, stride=2, padding=1, dtype=dt)
                       for i in range(2 + cfg.num_scales)]
        self.input_proj = [
            Conv2d(chans[3 + s], cfg.hidden_dim, 1, rng, dtype=dt) for s in range(cfg.num_scales)
        ]
        self.input_norm = [GroupNorm(cfg.norm_groups, cfg.hidden_dim, dtype=dt) for _ in range(cfg.num_scales)]
        self.num_scales = cfg.num_scales

    def __call__(self, images: Tensor) -> FeatureSet:
        if images.ndim == 3:
            images = images.reshape((1,) + images.shape)
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected [B,3,H,W] images, got {images.shape}")
        if min(images.shape[-2:]) < MIN_IMAGE_SIDE:
            raise DimensionError(f"images must be at least {MIN_IMAGE_SIDE}px per side, got {images.shape[-2:]}")
        x = images
        raw = []
        for i, stage in enumerate(self.stages):
            x = T.relu(stage(x))
            if i >= 2:
                raw.append(x)
        maps = [norm(proj(r)) for r, proj, norm in zip(raw, self.input_proj, self.input_norm)]
        return FeatureSet(maps, tuple(1.0 / s for s in BACKBONE_STRIDES[: self.num_scales]))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.attn = MultiHeadAttention(cfg.hidden_dim, cfg.num_heads, rng, dt)
        self.norm1 = LayerNorm(cfg.hidden_dim, dt)
        self.ffn = MLP([cfg.hidden_dim, cfg.ffn_dim, cfg.hidden_dim], rng, dt)
        self.norm2 = LayerNorm(cfg.hidden_dim, dt)

    def __call__(self, src: Tensor, pos: Tensor) -> Tensor:
        qk = src + pos
        src = self.norm1(src + self.attn(qk, qk, src))
        return self.norm2(src + self.ffn(src))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.self_attn = MultiHeadAttention(cfg.hidden_dim, cfg.num_heads, rng, dt)
        self.norm1 = LayerNorm(cfg.hidden_dim, dt)
        self.cross_attn = MultiHeadAttention(cfg.hidden_dim, cfg.num_heads, rng, dt)
        self.norm2 = LayerNorm(cfg.hidden_dim, dt)
        self.ffn = MLP([cfg.hidden_dim, cfg.ffn_dim, cfg.hidden_dim], rng, dt)
        self.norm3 = LayerNorm(cfg.hidden_dim, dt)

    def __call__(self, tgt: Tensor, query_pos: Tensor, memory: Tensor, pos: Tensor) -> Tensor:
        qk = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(qk, qk, tgt))
        tgt = self.norm2(tgt + self.cross_attn(tgt + query_pos, memory + pos, memory))
        return self.norm3(tgt + self.ffn(tgt))


class DETR(Module):
    """Backbone, encoder, decoder and shared prediction heads.

    ``query_embed`` holds the primary object queries.  Extra query groups
    (grouped or hybrid one-to-many training) are separate parameters and are
    never touched at inference time.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, extra_query_sets: Sequence[int] = ()):
        self.config = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        c = cfg.hidden_dim
        self.backbone = Backbone(cfg, rng)
        self.level_embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.num_scales, c)).astype(dt), requires_grad=True)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.dec_layers)]
        self.decoder_norm = LayerNorm(c, dt)
        self.query_embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.num_queries, c)).astype(dt), requires_grad=True)
        self.reference = Linear(c, 2, rng, dt)
        self.class_head = Linear(c, cfg.num_classes + 1, rng, dt)
        self.class_head.bias.data[:] = -math.log((1 - 0.01) / 0.01)
        self.box_head = MLP([c, c, c, 4], rng, dt)
        self.box_head.layers[-1].weight.data[:] = 0.0
        self.box_head.layers[-1].bias.data[:] = 0.0
        self.extra_queries = [
            Tensor(rng.normal(0.0, 1.0, size=(n, c)).astype(dt), requires_grad=True) for n in extra_query_sets
        ]
        self.counters = {"encoder_tokens": 0, "decoder_queries": 0, "images": 0}
        self._pos_cache: dict = {}

    # -- stages ---------------------------------------------------------------
    def _positions(self, shapes: list[tuple[int, int]]) -> Tensor:
        parts = []
        for s, (h, w) in enumerate(shapes):
            key = (h, w)
            if key not in self._pos_cache:
                self._pos_cache[key] = sine_position_encoding(h, w, self.config.hidden_dim).astype(
                    self.config.np_dtype
                )
            parts.append(T.as_tensor(self._pos_cache[key]) + self.level_embed[s:s + 1])
        return T.concat(parts, axis=0)

    @staticmethod
    def _flatten(maps: list) -> Tensor:
        tokens = []
        for m in maps:
            b, c, h, w = m.shape
            tokens.append(m.reshape(b, c, h * w).transpose(0, 2, 1))
        return T.concat(tokens, axis=1)

    @staticmethod
    def _unflatten(tokens: Tensor, shapes: list[tuple[int, int]]) -> list:
        maps, start = [], 0
        b, _, c = tokens.shape
        for h, w in shapes:
            part = tokens[:, start:start + h * w, :]
            maps.append(part.transpose(0, 2, 1).reshape(b, c, h, w))
            start += h * w
        return maps

    def backbone_forward(self, images) -> FeatureSet:
        return self.backbone(T.as_tensor(images, dtype=self.config.np_dtype))

    def encoder_forward(self, features: FeatureSet) -> EncodedFeatureSet:
        if not isinstance(features, FeatureSet):
            raise TypeError("encoder_forward expects backbone features")
        if not self.encoder:
            return EncodedFeatureSet(list(features.maps), features.scale_factors)
        shapes = features.spatial_shapes
        src = self._flatten(features.maps)
        pos = self._positions(shapes)
        for layer in self.encoder:
            src = layer(src, pos)
        return EncodedFeatureSet(self._unflatten(src, shapes), features.scale_factors)

    def decoder_forward(self, queries: Tensor, memory: EncodedFeatureSet) -> Predictions:
        if not isinstance(memory, EncodedFeatureSet):
            raise TypeError("decoder_forward expects encoded features")
        shapes = memory.spatial_shapes
        mem = self._flatten(memory.maps)
        pos = self._positions(shapes)
        b = mem.shape[0]
        n, c = queries.shape
        # reference point of each query, in logit space
        ref_logit = self.reference(queries)
        tgt = T.as_tensor(np.zeros((b, n, c), dtype=self.config.np_dtype))
        layers = []
        for layer in self.decoder:
            tgt = layer(tgt, queries, mem, pos)
            hs = self.decoder_norm(tgt)
            delta = self.box_head(hs)
            centre = T.sigmoid(delta[..., 0:2] + ref_logit)
            size = T.sigmoid(delta[..., 2:4] - 2.0)
            boxes = T.concat([centre, size], axis=-1)
            layers.append(LayerPrediction(boxes, self.class_head(hs)))
        return Predictions(layers)

    def forward(self, images, queries: Tensor | None = None) -> Predictions:
        features = self.backbone_forward(images)
        encoded = self.encoder_forward(features)
        return self.decoder_forward(self.query_embed if queries is None else queries, encoded)

    # -- inference ----------------------------------------------------------------
    def inference_parameters(self) -> list[Tensor]:
        extra = {id(q) for q in self.extra_queries}
        return [p for p in self.parameters() if id(p) not in extra]

    def predict(self, images, top_k: int = 10) -> list[list[Detection]]:
        """Top-``k`` last-layer detections per image, ranked by best object-class logit."""
        with T.no_grad():
            images = T.as_tensor(images, dtype=self.config.np_dtype)
            if images.ndim == 3:
                images = images.reshape((1,) + images.shape)
            features = self.backbone_forward(images)
            encoded = self.encoder_forward(features)
            self.counters["encoder_tokens"] += sum(h * w for h, w in features.spatial_shapes) * images.shape[0]
            self.counters["decoder_queries"] += self.query_embed.shape[0] * images.shape[0]
            self.counters["images"] += images.shape[0]
            last = self.decoder_forward(self.query_embed, encoded).last
        logits = last.logits.data[..., :-1].astype(np.float64)
        boxes = last.boxes.data.astype(np.float64)
        out = []
        for b in range(logits.shape[0]):
            best = logits[b].max(axis=1)
            labels = logits[b].argmax(axis=1)
            order = np.argsort(-best, kind="stable")[: min(top_k, len(best))]
            scores = 1.0 / (1.0 + np.exp(-best[order]))
            out.append([Detection(boxes[b, q].copy(), float(s), int(labels[q]), int(q)) for q, s in zip(order, scores)])
        return out

    # -- parameters ------------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, value in state.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            if own[name].shape != tuple(value.shape):
                raise DimensionError(f"{name}: shape {value.shape} != {own[name].shape}")
            own[name].data[...] = value


# -- checkpoint file ------------------------------------------------------------------
CHECKPOINT_MAGIC = b"DDTRCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict, extra: dict | None = None) -> None:
    """Write ``magic | u32 version | u64 header length | JSON header | float64 payload``."""
    entries, offset = [], 0
    blobs = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "float64"})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "config": config, "params": entries, "extra": extra or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DatasetFormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported checkpoint version {version}")
    start = len(CHECKPOINT_MAGIC) + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen])
    payload = memoryview(raw)[start + hlen:]
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).copy()
    return params, header["config"], header.get("extra", {})


def config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["backbone_channels"] = list(cfg.backbone_channels)
    return d
