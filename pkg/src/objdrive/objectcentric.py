"""Object-centric policy inputs: score, softmax, weight, prune, aggregate.

Scores are normalized over *all* detections of a frame, features are scaled
by their weight, and only then are the top-k kept (no renormalization).
Batched functions treat a minibatch of frames as segments of one long
object list so every frame can hold a different number of boxes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .perception import BackboneConfig, BoundingBox, backbone_forward, global_pool, pixel_attention_pool, roi_pool


class Variant(str, enum.Enum):
    GLOBAL_ONLY = "global_only"
    PIXEL_ATTENTION = "pixel_attention"
    DENSE_SUM = "dense_sum"
    SPARSE_SUM = "sparse_sum"
    SPARSE_CONCAT = "sparse_concat"
    HEURISTIC_SPARSE_SUM = "heuristic_sparse_sum"

    @property
    def label(self) -> str:
        return VARIANT_LABELS[self]

    @property
    def uses_objects(self) -> bool:
        return self not in (Variant.GLOBAL_ONLY, Variant.PIXEL_ATTENTION)

    @property
    def learned_selector(self) -> bool:
        return self in (Variant.DENSE_SUM, Variant.SPARSE_SUM, Variant.SPARSE_CONCAT)

    @property
    def sparse(self) -> bool:
        return self in (Variant.SPARSE_SUM, Variant.SPARSE_CONCAT, Variant.HEURISTIC_SPARSE_SUM)


VARIANT_LABELS = {
    Variant.GLOBAL_ONLY: "baseline",
    Variant.PIXEL_ATTENTION: "pixel attention",
    Variant.DENSE_SUM: "dense object",
    Variant.SPARSE_SUM: "sparse object",
    Variant.SPARSE_CONCAT: "sparse object concat",
    Variant.HEURISTIC_SPARSE_SUM: "heuristic selector",
}


@dataclass(frozen=True)
class RepresentationConfig:
    variant: Variant = Variant.SPARSE_SUM
    k: int = 5
    selector_uses_global: bool = True
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def global_dim(self) -> int:
        return self.backbone.depth

    @property
    def object_dim(self) -> int:
        return self.backbone.object_dim

    @property
    def output_dim(self) -> int:
        v = self.variant
        if not v.uses_objects:
            return self.global_dim
        if v is Variant.SPARSE_CONCAT:
            return self.global_dim + self.k * self.object_dim
        return self.global_dim + self.object_dim

    @property
    def selector_in_dim(self) -> int:
        return self.object_dim + (self.global_dim if self.selector_uses_global else 0)


@dataclass
class ObjectSet:
    """One frame's detections after scoring.  ``order`` lists kept indices, best first."""
    boxes: list[BoundingBox]
    features: np.ndarray
    scores: np.ndarray
    weights: np.ndarray
    order: np.ndarray
    degenerate: list[bool]


def init_selector(cfg: RepresentationConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    fan_in = cfg.selector_in_dim
    return {"selector.w": dc.uniform_init(rng, (fan_in, 1), fan_in),
            "selector.b": dc.uniform_init(rng, (1,), fan_in)}


# ---------------------------------------------------------------------------
# single-frame operations


def score_objects(features: Tensor, g: Tensor, sel_w: Tensor, sel_b: Tensor, use_global: bool = True) -> Tensor:
    """Linear relevance score of each (K, D_o) object feature, optionally with G appended."""
    k = features.shape[0]
    if k == 0:
        return Tensor(np.zeros(0))
    x = features
    if use_global:
        x = dc.concat([features, dc.take(dc.reshape(g, (1, -1)), np.zeros(k, dtype=np.int64))], axis=1)
    return dc.reshape(dc.linear(x, sel_w, sel_b), (k,))


def normalize(scores: Tensor) -> Tensor:
    return dc.segment_softmax(scores, np.zeros(scores.shape[0], dtype=np.int64), 1)


def weight_features(features: Tensor, weights: Tensor) -> Tensor:
    return dc.mul(features, dc.reshape(weights, (-1, 1)))


def top_k(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest weights, descending; ties go to the lower index."""
    order = np.argsort(-np.asarray(weights), kind="stable")[:k]
    dc.record_branch("top_k", order)
    return order


def aggregate_sum(features: Tensor) -> Tensor:
    """Order-independent sum of (K, D_o) rows; zeros when K == 0."""
    return dc.reshape(dc.segment_sum(features, np.zeros(features.shape[0], dtype=np.int64), 1), (-1,))


def aggregate_concat(sorted_features: Tensor, k: int) -> Tensor:
    """Concatenate up to k rows (already best-first), zero-padding missing slots."""
    n = min(k, sorted_features.shape[0])
    d = sorted_features.shape[1]
    kept = dc.take(sorted_features, np.arange(n))
    return dc.reshape(dc.scatter_rows(kept, np.arange(n), k), (k * d,))


def heuristic_scores(boxes, width: int, height: int) -> np.ndarray:
    """Box area as a fraction of the image, the input to the size-based selector."""
    return np.array([b.area for b in boxes], dtype=np.float64) / float(width * height)


# ---------------------------------------------------------------------------
# batched representation


@dataclass
class RepresentationInfo:
    objects: list[ObjectSet | None]
    attention: np.ndarray | None = None


def represent_batch(cfg: RepresentationConfig, images: Tensor, boxes: list[list[BoundingBox]],
                    params: dict[str, Tensor]) -> tuple[Tensor, RepresentationInfo]:
    """Policy inputs (N, output_dim) for a batch of frames."""
    n = images.shape[0]
    if len(boxes) != n:
        raise ValueError(f"{n} images but {len(boxes)} box lists")
    fmap = backbone_forward(images, params, cfg.backbone)
    g = global_pool(fmap)
    v = cfg.variant
    if v is Variant.GLOBAL_ONLY:
        return g, RepresentationInfo([None] * n)
    if v is Variant.PIXEL_ATTENTION:
        pooled, mass = pixel_attention_pool(fmap, params["attention.w"], params["attention.b"])
        return pooled, RepresentationInfo([None] * n, attention=mass)

    flat_boxes = [b for frame in boxes for b in frame]
    seg = np.repeat(np.arange(n), [len(frame) for frame in boxes]).astype(np.int64)
    feats, degenerate = roi_pool(fmap, flat_boxes, seg, cfg.backbone)
    if v.learned_selector:
        x = feats
        if cfg.selector_uses_global:
            x = dc.concat([feats, dc.take(g, seg)], axis=1)
        if x.shape[1] != params["selector.w"].shape[0]:
            raise dc.ShapeError("selector", f"input width {x.shape[1]} vs weights {params['selector.w'].shape}")
        scores = dc.reshape(dc.linear(x, params["selector.w"], params["selector.b"]), (len(flat_boxes),))
    else:
        h, w = cfg.backbone.image_size
        scores = Tensor(heuristic_scores(flat_boxes, w, h))
    wbar = dc.segment_softmax(scores, seg, n)
    weighted = dc.mul(feats, dc.reshape(wbar, (-1, 1)))

    starts = np.concatenate([[0], np.cumsum([len(frame) for frame in boxes])])
    orders = []
    for i in range(n):
        local = wbar.data[starts[i]:starts[i + 1]]
        orders.append(top_k(local, cfg.k) if v.sparse else np.argsort(-local, kind="stable"))

    if v is Variant.SPARSE_CONCAT:
        rows = np.concatenate([starts[i] + o for i, o in enumerate(orders)]).astype(np.int64)
        slots = np.concatenate([i * cfg.k + np.arange(len(o)) for i, o in enumerate(orders)]).astype(np.int64)
        obj = dc.scatter_rows(dc.take(weighted, rows), slots, n * cfg.k)
        obj = dc.reshape(obj, (n, cfg.k * cfg.object_dim))
    elif v.sparse:
        rows = np.concatenate([starts[i] + o for i, o in enumerate(orders)]).astype(np.int64)
        obj = dc.segment_sum(dc.take(weighted, rows), seg[rows], n)
    else:
        obj = dc.segment_sum(weighted, seg, n)

    infos = []
    for i in range(n):
        a, b = starts[i], starts[i + 1]
        infos.append(ObjectSet(boxes=list(boxes[i]), features=feats.data[a:b], scores=scores.data[a:b],
                               weights=wbar.data[a:b], order=orders[i], degenerate=degenerate[a:b]))
    return dc.concat([g, obj], axis=1), RepresentationInfo(infos)


def build_representation(cfg: RepresentationConfig, image: np.ndarray, boxes: list[BoundingBox],
                         params: dict[str, Tensor]) -> tuple[Tensor, RepresentationInfo]:
    """Single-frame policy input vector (output_dim,)."""
    x, info = represent_batch(cfg, Tensor(np.asarray(image)[None]), [list(boxes)], params)
    return dc.reshape(x, (cfg.output_dim,)), info
