"""Shared convolutional features: global pooling, RoI pooling, pixel attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

CLASSES = ("vehicle", "pedestrian")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image pixels (x = column, y = row)."""
    cls: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown box class {self.cls!r}")

    @property
    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    def clipped(self, width: int, height: int) -> "BoundingBox | None":
        """Clip to the image; None if nothing of positive area remains."""
        x0, x1 = max(0.0, self.x_min), min(float(width), self.x_max)
        y0, y1 = max(0.0, self.y_min), min(float(height), self.y_max)
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(self.cls, x0, y0, x1, y1)


def clip_boxes(boxes, width: int, height: int) -> list[BoundingBox]:
    out = []
    for b in boxes:
        c = b.clipped(width, height)
        if c is not None:
            out.append(c)
    return out


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = 3
    image_size: tuple[int, int] = (96, 96)
    roi_bins: int = 2

    @property
    def depth(self) -> int:
        return self.widths[-1]

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def map_size(self) -> tuple[int, int]:
        h, w = self.image_size
        for _ in self.widths:
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    @property
    def object_dim(self) -> int:
        return self.depth * self.roi_bins ** 2


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    c_in = cfg.in_channels
    for i, c_out in enumerate(cfg.widths):
        fan_in = c_in * cfg.kernel ** 2
        params[f"backbone.conv{i}.w"] = dc.uniform_init(rng, (c_out, c_in, cfg.kernel, cfg.kernel), fan_in)
        params[f"backbone.conv{i}.b"] = dc.uniform_init(rng, (c_out,), fan_in)
        c_in = c_out
    return params


def backbone_forward(images: Tensor, params: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    """Stride-2 conv+relu blocks: (N, 3, H, W) -> (N, D, H/16, W/16)."""
    if images.data.ndim != 4 or images.shape[1:] != (cfg.in_channels, *cfg.image_size):
        raise dc.ShapeError("backbone", f"image batch {images.shape} does not match "
                                        f"{(cfg.in_channels, *cfg.image_size)}")
    x = images
    for i in range(len(cfg.widths)):
        x = dc.relu(dc.conv2d(x, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"],
                              stride=2, padding=cfg.kernel // 2))
    return x


def global_pool(fmap: Tensor) -> Tensor:
    return dc.global_avg_pool(fmap)


def box_to_window(box: BoundingBox, stride: int, map_h: int, map_w: int, bins: int) -> tuple[tuple[int, int, int, int], bool]:
    """Project an image-pixel box onto feature cells.

    Floor the start, ceil the end, clip, then grow to at least ``bins`` cells
    per side.  Returns ``(row0, row1, col0, col1), degenerate`` where
    ``degenerate`` marks boxes that collapsed to zero area and were replaced
    by their nearest cell.
    """
    degenerate = False
    spans = []
    for lo, hi, size in ((box.y_min, box.y_max, map_h), (box.x_min, box.x_max, map_w)):
        a = min(max(math.floor(lo / stride), 0), size)
        b = min(max(math.ceil(hi / stride), 0), size)
        if b <= a:
            degenerate = True
            cell = min(max(math.floor(0.5 * (lo + hi) / stride), 0), size - 1)
            a, b = cell, cell + 1
        while b - a < min(bins, size):
            if b < size:
                b += 1
            else:
                a -= 1
        spans.append((a, b))
    (r0, r1), (c0, c1) = spans
    return (r0, r1, c0, c1), degenerate


def roi_pool(fmap: Tensor, boxes, image_index, cfg: BackboneConfig) -> tuple[Tensor, list[bool]]:
    """Per-object features (K, D*bins^2) for boxes given in image pixels."""
    h, w = fmap.shape[2], fmap.shape[3]
    windows, flags = [], []
    for b in boxes:
        win, deg = box_to_window(b, cfg.stride, h, w, cfg.roi_bins)
        windows.append(win)
        flags.append(deg)
    feats = dc.roi_pool(fmap, np.asarray(image_index, dtype=np.int64),
                        np.asarray(windows, dtype=np.int64).reshape(-1, 4), cfg.roi_bins)
    return feats, flags


def init_attention(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {"attention.w": dc.uniform_init(rng, (cfg.depth, 1), cfg.depth),
            "attention.b": np.zeros(1)}


def pixel_attention_pool(fmap: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, np.ndarray]:
    """Spatial-softmax weighted average of cell features.

    A 1x1 projection gives one logit per cell.  Returns the (N, D) pooled
    feature and the (N, H, W) attention mass.
    """
    n, c, h, wd = fmap.shape
    cells = dc.reshape(dc.transpose(fmap, (0, 2, 3, 1)), (n * h * wd, c))
    logits = dc.reshape(dc.linear(cells, w, b), (n, h * wd))
    attn = dc.softmax(logits)
    pooled = dc.bmm(dc.reshape(fmap, (n, c, h * wd)), dc.reshape(attn, (n, h * wd, 1)))
    return dc.reshape(pooled, (n, c)), attn.data.reshape(n, h, wd)
