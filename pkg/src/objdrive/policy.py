"""Policy heads, behavioral-cloning training, and perplexity evaluation."""
from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .objectcentric import RepresentationConfig, Variant, init_selector, represent_batch
from .perception import BackboneConfig, init_attention, init_backbone

HEAD_SIZES = {"action9": 9, "offline900": 900}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    representation: RepresentationConfig = field(default_factory=RepresentationConfig)
    head: str = "action9"
    zero_head: bool = False

    def __post_init__(self):
        if self.head not in HEAD_SIZES:
            raise ValueError(f"unknown head {self.head!r}; choose from {sorted(HEAD_SIZES)}")
        if self.lr < 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("training hyperparameters must be positive")
        if isinstance(self.representation, dict):
            object.__setattr__(self, "representation", representation_from_dict(self.representation))

    @property
    def n_classes(self) -> int:
        return HEAD_SIZES[self.head]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["representation"]["variant"] = self.representation.variant.value
        d["representation"]["backbone"] = {k: list(v) if isinstance(v, tuple) else v
                                           for k, v in d["representation"]["backbone"].items()}
        return d


def representation_from_dict(d: dict) -> RepresentationConfig:
    d = dict(d)
    bb = d.pop("backbone", None)
    if isinstance(bb, dict):
        bb = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in bb.items()})
    return RepresentationConfig(**d, **({"backbone": bb} if bb is not None else {}))


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "representation" in d:
        d["representation"] = representation_from_dict(d["representation"])
    return TrainConfig(**d)


# ---------------------------------------------------------------------------
# parameters


def init_policy(cfg: TrainConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Backbone, optional selector/attention, and a linear head, seeded by ``cfg.seed``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    rep = cfg.representation
    params = init_backbone(rep.backbone, rng)
    if rep.variant.learned_selector:
        params.update(init_selector(rep, rng))
    if rep.variant is Variant.PIXEL_ATTENTION:
        params.update(init_attention(rep.backbone, rng))
    d = rep.output_dim
    if cfg.zero_head:
        params["head.w"] = np.zeros((d, cfg.n_classes))
        params["head.b"] = np.zeros(cfg.n_classes)
    else:
        params["head.w"] = dc.uniform_init(rng, (d, cfg.n_classes), d)
        params["head.b"] = dc.uniform_init(rng, (cfg.n_classes,), d)
    return params


def check_params(params: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    """Raise ValueError if ``params`` could not have come from ``init_policy(cfg)``."""
    want = {k: v.shape for k, v in init_policy(replace(cfg, zero_head=True), np.random.default_rng(0)).items()}
    got = {k: v.shape for k, v in params.items()}
    if want != got:
        missing = sorted(set(want) - set(got))
        extra = sorted(set(got) - set(want))
        wrong = sorted(k for k in set(want) & set(got) if want[k] != got[k])
        raise ValueError(f"parameters do not match config: missing {missing}, unexpected {extra}, "
                         f"wrong shape {wrong}")


def _as_tensors(params: dict[str, np.ndarray], trainable: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward


def forward(cfg: TrainConfig, images: Tensor, boxes, params: dict[str, Tensor]):
    """(logits (N, classes), RepresentationInfo) as graph nodes."""
    x, info = represent_batch(cfg.representation, images, boxes, params)
    return dc.linear(x, params["head.w"], params["head.b"]), info


def predict(images: np.ndarray, boxes, params: dict[str, np.ndarray], cfg: TrainConfig,
            return_info: bool = False):
    """Logits for one image (C, H, W) or a batch (N, C, H, W); no gradients are kept."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images, boxes = images[None], [list(boxes)]
    check_params(params, cfg)
    logits, info = forward(cfg, Tensor(images), boxes, _as_tensors(params, False))
    out = logits.data[0] if single else logits.data
    return (out, info) if return_info else out


def bc_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy; labels outside the head raise ValueError."""
    if logits.data.ndim == 1:
        logits = dc.reshape(logits, (1, -1))
    return dc.cross_entropy(logits, np.atleast_1d(labels))


# ---------------------------------------------------------------------------
# training


def _batch(examples, idx):
    images = np.stack([examples[i][0].image_float() for i in idx])
    boxes = [examples[i][0].boxes for i in idx]
    labels = np.array([examples[i][1] for i in idx], dtype=np.int64)
    return images, boxes, labels


def loss_and_grads(cfg: TrainConfig, params: dict[str, np.ndarray], images, boxes, labels):
    tensors = _as_tensors(params, True)
    logits, _ = forward(cfg, Tensor(images), boxes, tensors)
    loss = bc_loss(logits, labels)
    grads = dc.backpropagate(loss, tensors)
    return float(loss.data), grads


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    epoch_losses: list[float]

    def loss_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,mean_loss\n")
        for i, v in enumerate(self.epoch_losses, 1):
            buf.write(f"{i},{v:.10g}\n")
        return buf.getvalue()


def train(examples, cfg: TrainConfig, params: dict[str, np.ndarray] | None = None, log=None,
          stop_below: float | None = None) -> TrainResult:
    """Minibatch Adam on (FrameRecord, label) pairs; shuffle order is fixed by ``cfg.seed``.

    Flagged frames (noise or intervention) are refused.  With ``stop_below``
    training ends after the first epoch whose mean loss is under it.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    if any(f.flagged for f, _ in examples):
        raise ValueError("training examples must not carry noise or intervention flags")
    labels = np.array([lab for _, lab in examples])
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError(f"labels outside the {cfg.n_classes}-way head")
    params = {k: v.copy() for k, v in (params or init_policy(cfg)).items()}
    check_params(params, cfg)
    state = dc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 104729])
    losses = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(examples))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            images, boxes, lab = _batch(examples, idx)
            loss, grads = loss_and_grads(cfg, params, images, boxes, lab)
            dc.adam_step(params, grads, state)
            total += loss * len(idx)
        losses.append(total / len(perm))
        if log is not None:
            log(epoch + 1, losses[-1])
        if stop_below is not None and losses[-1] < stop_below:
            break
    return TrainResult(params, losses)


def evaluate_perplexity(params: dict[str, np.ndarray], cfg: TrainConfig, examples, batch_size: int = 64) -> float:
    """Mean cross-entropy over (FrameRecord, label) pairs (not exponentiated)."""
    examples = list(examples)
    if not examples:
        raise ValueError("cannot evaluate on an empty test set")
    check_params(params, cfg)
    tensors = _as_tensors(params, False)
    total = 0.0
    for start in range(0, len(examples), batch_size):
        idx = range(start, min(start + batch_size, len(examples)))
        images, boxes, labels = _batch(examples, idx)
        logits, _ = forward(cfg, Tensor(images), boxes, tensors)
        total += float(bc_loss(logits, labels).data) * len(labels)
    return total / len(examples)
