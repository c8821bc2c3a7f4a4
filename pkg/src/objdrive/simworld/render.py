"""Egocentric top-down raster, ground-truth boxes and a detector-noise model.

The ego sits at the bottom-centre of the image facing up; the raster spans
48 m ahead by 48 m across at 0.5 m per pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..perception import BoundingBox
from .world import WorldState, corners

IMAGE_SIZE = 96
METERS_PER_PIXEL = 0.5
ROUTE_SPACING = 2.0
ROUTE_RANGE = 40.0
ROUTE_RADIUS = 0.6

_rows, _cols = np.meshgrid(np.arange(IMAGE_SIZE), np.arange(IMAGE_SIZE), indexing="ij")
PIXEL_FWD = (IMAGE_SIZE - _rows - 0.5) * METERS_PER_PIXEL
PIXEL_LEFT = (IMAGE_SIZE / 2 - _cols - 0.5) * METERS_PER_PIXEL


def to_ego_frame(w: WorldState, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(w.ego.heading), math.sin(w.ego.heading)
    dx = pts[..., 0] - w.ego.x
    dy = pts[..., 1] - w.ego.y
    return dx * c + dy * s, -dx * s + dy * c


def to_pixels(fwd, left):
    """Continuous (x=column, y=row) image coordinates of ego-frame points."""
    return IMAGE_SIZE / 2 - np.asarray(left) / METERS_PER_PIXEL, IMAGE_SIZE - np.asarray(fwd) / METERS_PER_PIXEL


def pixel_world_coords(w: WorldState) -> np.ndarray:
    c, s = math.cos(w.ego.heading), math.sin(w.ego.heading)
    x = w.ego.x + PIXEL_FWD * c - PIXEL_LEFT * s
    y = w.ego.y + PIXEL_FWD * s + PIXEL_LEFT * c
    return np.stack([x, y], axis=-1)


def _visible(w: WorldState, radius: float = 60.0):
    return [a for a in w.agents if math.hypot(a.x - w.ego.x, a.y - w.ego.y) < radius]


def render(w: WorldState, draw_route: bool = True) -> np.ndarray:
    """(3, 96, 96) image in [0, 1]: drivable area, vehicles, pedestrians + route."""
    img = np.zeros((3, IMAGE_SIZE, IMAGE_SIZE))
    world = pixel_world_coords(w)
    img[0] = w.road.drivable(world)
    px, py = world[..., 0], world[..., 1]
    for a in _visible(w):
        c, s = math.cos(a.heading), math.sin(a.heading)
        rx, ry = px - a.x, py - a.y
        inside = (np.abs(rx * c + ry * s) <= a.length / 2) & (np.abs(-rx * s + ry * c) <= a.width / 2)
        ch = 1 if a.kind == "vehicle" else 2
        img[ch][inside] = 1.0
    if draw_route:
        route = w.ego_route
        ds = np.arange(ROUTE_SPACING, ROUTE_RANGE + 1e-9, ROUTE_SPACING)
        s = w.ego.s + ds
        ds = ds[s <= route.length]
        if ds.size:
            dots = route.point_at(w.ego.s + ds)
            fwd, left = to_ego_frame(w, dots)
            level = 0.9 - 0.015 * ds
            for f, l, v in zip(fwd, left, level):
                if -2 < f < 50 and abs(l) < 26:
                    disk = (PIXEL_FWD - f) ** 2 + (PIXEL_LEFT - l) ** 2 <= ROUTE_RADIUS ** 2
                    np.maximum(img[2], np.where(disk, v, 0.0), out=img[2])
    return img


def ground_truth_boxes(w: WorldState) -> list[BoundingBox]:
    """Clipped axis-aligned pixel boxes around every agent footprint in view."""
    out = []
    for a in _visible(w):
        fwd, left = to_ego_frame(w, corners(a))
        cx, cy = to_pixels(fwd, left)
        box = BoundingBox(a.kind, float(cx.min()), float(cy.min()), float(cx.max()), float(cy.max()))
        box = box.clipped(IMAGE_SIZE, IMAGE_SIZE)
        if box is not None:
            out.append(box)
    return out


@dataclass(frozen=True)
class DetectorNoiseConfig:
    jitter_px: float = 0.0
    drop_prob: float = 0.0
    false_positive_rate: float = 0.0

    def __post_init__(self):
        if self.jitter_px < 0:
            raise ValueError("jitter must be nonnegative")
        if not (0.0 <= self.drop_prob <= 1.0 and 0.0 <= self.false_positive_rate <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def is_zero(self) -> bool:
        return self.jitter_px == 0 and self.drop_prob == 0 and self.false_positive_rate == 0


NOISY_DETECTOR = DetectorNoiseConfig(jitter_px=2.0, drop_prob=0.1, false_positive_rate=0.1)

# plausible (width, height) ranges in pixels for spurious boxes
_FP_SIZES = {"vehicle": ((3.0, 10.0), (3.0, 10.0)), "pedestrian": ((1.0, 2.0), (1.0, 2.0))}


def perturb_detections_detail(boxes, noise: DetectorNoiseConfig, rng: np.random.Generator,
                              size: int = IMAGE_SIZE) -> tuple[list[BoundingBox], np.ndarray, int]:
    """Like ``perturb_detections`` but also returns the keep mask and false-positive count."""
    if noise.is_zero:
        return list(boxes), np.ones(len(boxes), dtype=bool), 0
    out = []
    kept = np.zeros(len(boxes), dtype=bool)
    for i, b in enumerate(boxes):
        if rng.random() < noise.drop_prob:
            continue
        kept[i] = True
        j = rng.normal(0.0, noise.jitter_px, size=4) if noise.jitter_px > 0 else np.zeros(4)
        x0, x1 = sorted((b.x_min + j[0], b.x_max + j[2]))
        y0, y1 = sorted((b.y_min + j[1], b.y_max + j[3]))
        c = BoundingBox(b.cls, x0, y0, x1, y1).clipped(size, size)
        if c is not None:
            out.append(c)
    n_fp = 0
    if noise.false_positive_rate > 0 and rng.random() < noise.false_positive_rate:
        cls = "vehicle" if rng.random() < 0.7 else "pedestrian"
        (wl, wh), (hl, hh) = _FP_SIZES[cls]
        bw, bh = rng.uniform(wl, wh), rng.uniform(hl, hh)
        x0, y0 = rng.uniform(0, size - bw), rng.uniform(0, size - bh)
        out.append(BoundingBox(cls, x0, y0, x0 + bw, y0 + bh))
        n_fp = 1
    return out, kept, n_fp


def perturb_detections(boxes, noise: DetectorNoiseConfig, rng: np.random.Generator,
                       size: int = IMAGE_SIZE) -> list[BoundingBox]:
    """Jitter corners, drop boxes, and add spurious ones; identity when noise is zero."""
    return perturb_detections_detail(boxes, noise, rng, size)[0]
