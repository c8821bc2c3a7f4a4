"""Road geometry: grid/highway maps, lane polylines, routes, crosswalks."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

TEMPLATE_VERSION = 1


@lru_cache(maxsize=None)
def _template_names() -> tuple[str, ...]:
    files = resources.files("objdrive.simworld") / "templates"
    return tuple(sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json")))


def load_template(name: str) -> dict:
    if name not in _template_names():
        raise KeyError(f"unknown scenario template {name!r}")
    raw = (resources.files("objdrive.simworld") / "templates" / f"{name}.json").read_text()
    return validate_template(json.loads(raw))


def validate_template(tpl: dict) -> dict:
    if tpl.get("version") != TEMPLATE_VERSION:
        raise ValueError(f"template version {tpl.get('version')!r} not supported (want {TEMPLATE_VERSION})")
    kind = tpl.get("kind")
    if kind == "urban":
        need = ("grid", "spacing", "lane_width", "plaza_half", "vehicles", "pedestrians", "spawn", "route")
    elif kind == "highway":
        need = ("length", "lanes", "lane_width", "vehicles", "spawn")
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")
    missing = [k for k in need if k not in tpl]
    if missing:
        raise ValueError(f"template {tpl.get('name')!r} missing fields {missing}")
    return tpl


def templates_for(kind: str) -> list[str]:
    names = [n for n in _template_names() if load_template(n)["kind"] == kind]
    if not names:
        raise ValueError(f"unknown scenario kind {kind!r}")
    return names


def wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


class Route:
    """Polyline with arc-length parameterization and per-segment plaza tags."""

    def __init__(self, pts: np.ndarray, seg_plaza: np.ndarray, seg_turn: np.ndarray):
        self.pts = np.asarray(pts, dtype=np.float64)
        d = np.diff(self.pts, axis=0)
        self.seg_len = np.hypot(d[:, 0], d[:, 1])
        if np.any(self.seg_len <= 0):
            raise ValueError("degenerate route segment")
        self.seg_dir = d / self.seg_len[:, None]
        self.seg_heading = np.arctan2(d[:, 1], d[:, 0])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.seg_plaza = np.asarray(seg_plaza, dtype=np.int64)
        self.seg_turn = np.asarray(seg_turn, dtype=np.int64)
        self.plazas = self._plaza_intervals()

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def _plaza_intervals(self):
        out = []
        i = 0
        n = len(self.seg_plaza)
        while i < n:
            pid = self.seg_plaza[i]
            if pid < 0:
                i += 1
                continue
            j = i
            while j + 1 < n and self.seg_plaza[j + 1] == pid:
                j += 1
            out.append((int(pid), float(self.cum[i]), float(self.cum[j + 1]), int(self.seg_turn[i])))
            i = j + 1
        return out

    def segment_at(self, s):
        return np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1)

    def point_at(self, s):
        s = np.clip(s, 0.0, self.cum[-1])
        i = self.segment_at(s)
        t = s - self.cum[i]
        return self.pts[i] + self.seg_dir[i] * np.expand_dims(t, -1)

    def heading_at(self, s):
        return self.seg_heading[self.segment_at(np.clip(s, 0.0, self.cum[-1]))]

    def project(self, p, hint_s: float, back: float = 6.0, fwd: float = 40.0) -> float:
        """Arc length of the closest route point to ``p`` near ``hint_s``."""
        i0 = int(self.segment_at(max(0.0, hint_s - back)))
        i1 = int(self.segment_at(min(self.length, hint_s + fwd))) + 1
        a = self.pts[i0:i1]
        dvec = self.seg_dir[i0:i1]
        rel = np.asarray(p) - a
        t = np.clip(np.einsum("ij,ij->i", rel, dvec), 0.0, self.seg_len[i0:i1])
        close = a + dvec * t[:, None]
        dist = np.hypot(close[:, 0] - p[0], close[:, 1] - p[1])
        k = int(np.argmin(dist))
        return float(self.cum[i0 + k] + t[k])

    def next_plaza(self, s: float):
        """First plaza interval (id, s_in, s_out, turn) whose exit is ahead of ``s``."""
        for iv in self.plazas:
            if iv[2] > s:
                return iv
        return None


class RoadMap:
    """Drivable geometry of one scenario template, optionally translated."""

    def __init__(self, template: dict, origin=(0.0, 0.0)):
        self.template = validate_template(template)
        self.kind = template["kind"]
        self.lane_width = float(template["lane_width"])
        self.origin = np.asarray(origin, dtype=np.float64)
        if self.kind == "urban":
            nx, ny = template["grid"]
            sp = float(template["spacing"])
            self.plaza_half = float(template["plaza_half"])
            self.nodes = np.array([[i * sp, j * sp] for j in range(ny) for i in range(nx)]) + self.origin
            self.nx, self.ny = nx, ny
            self.neighbors = []
            for j in range(ny):
                for i in range(nx):
                    nb = []
                    for di, dj in ((1, 0), (0, 1), (-1, 0), (0, -1)):
                        a, b = i + di, j + dj
                        if 0 <= a < nx and 0 <= b < ny:
                            nb.append(b * nx + a)
                    self.neighbors.append(nb)
            self.roads = [(self.nodes[a], self.nodes[b]) for a in range(len(self.nodes))
                          for b in self.neighbors[a] if a < b]
        else:
            self.plaza_half = 0.0
            length = float(template["length"])
            self.nodes = np.zeros((0, 2))
            self.neighbors = []
            self.n_lanes = int(template["lanes"])
            self.roads = [(self.origin + [-100.0, 0.0], self.origin + [length, 0.0])]
        self._road_arr = np.array([[*a, *b] for a, b in self.roads])

    # -- drivable area --------------------------------------------------

    @property
    def road_half_width(self) -> float:
        if self.kind == "highway":
            return self.lane_width * self.n_lanes / 2.0
        return self.lane_width

    def drivable(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        ok = np.zeros(len(flat), dtype=bool)
        hw = self.road_half_width
        for x0, y0, x1, y1 in self._road_arr:
            if y0 == y1:
                ok |= (np.abs(flat[:, 1] - y0) <= hw) & (flat[:, 0] >= min(x0, x1)) & (flat[:, 0] <= max(x0, x1))
            else:
                ok |= (np.abs(flat[:, 0] - x0) <= hw) & (flat[:, 1] >= min(y0, y1)) & (flat[:, 1] <= max(y0, y1))
        for c in self.nodes:
            ok |= (np.abs(flat[:, 0] - c[0]) <= self.plaza_half) & (np.abs(flat[:, 1] - c[1]) <= self.plaza_half)
        return ok.reshape(pts.shape[:-1])

    def in_plaza(self, pid: int, p, margin: float = 0.0) -> bool:
        c = self.nodes[pid]
        h = self.plaza_half + margin
        return abs(p[0] - c[0]) <= h and abs(p[1] - c[1]) <= h

    # -- urban routes ---------------------------------------------------

    def _dir(self, a: int, b: int) -> np.ndarray:
        d = self.nodes[b] - self.nodes[a]
        return d / np.hypot(*d)

    def _lane_offset(self, d: np.ndarray) -> np.ndarray:
        # right-hand traffic: lane center sits half a lane to the right of the road axis
        return np.array([d[1], -d[0]]) * (self.lane_width / 2.0)

    def edge_endpoints(self, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        d = self._dir(a, b)
        off = self._lane_offset(d)
        return self.nodes[a] + d * self.plaza_half + off, self.nodes[b] - d * self.plaza_half + off

    def connector(self, a: int, b: int, c: int, step: float = 0.5) -> tuple[np.ndarray, int]:
        """Points through plaza ``b`` from arm a->b to arm b->c; returns (pts, turn)."""
        din, dout = self._dir(a, b), self._dir(b, c)
        p = self.nodes[b] - din * self.plaza_half + self._lane_offset(din)
        q = self.nodes[b] + dout * self.plaza_half + self._lane_offset(dout)
        cross = din[0] * dout[1] - din[1] * dout[0]
        if abs(cross) < 1e-9:
            if np.dot(din, dout) < 0:
                raise ValueError("u-turns are not routable")
            n = max(2, int(math.ceil(np.hypot(*(q - p)) / 2.0)) + 1)
            return np.linspace(p, q, n), 0
        turn = 1 if cross > 0 else -1
        left = np.array([-din[1], din[0]])
        normal = left if turn > 0 else -left
        radius = self.plaza_half + (self.lane_width / 2.0) * (1 if turn > 0 else -1)
        center = p + normal * radius
        a0 = math.atan2(p[1] - center[1], p[0] - center[0])
        n = max(3, int(math.ceil(radius * math.pi / 2 / step)) + 1)
        ang = a0 + turn * np.linspace(0.0, math.pi / 2, n)
        pts = center + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts[0], pts[-1] = p, q
        return pts, turn

    def random_walk(self, rng: np.random.Generator, a: int, b: int, n_edges: int) -> list[int]:
        seq = [a, b]
        while len(seq) < n_edges + 1:
            prev, cur = seq[-2], seq[-1]
            options = [n for n in self.neighbors[cur] if n != prev]
            seq.append(options[int(rng.integers(len(options)))])
        return seq

    def route_from_nodes(self, seq: list[int]) -> Route:
        pts, seg_plaza, seg_turn = [], [], []
        for i in range(len(seq) - 1):
            a, b = seq[i], seq[i + 1]
            p0, p1 = self.edge_endpoints(a, b)
            if not pts:
                pts.append(p0)
            pts.append(p1)
            seg_plaza.append(-1)
            seg_turn.append(0)
            if i + 2 < len(seq):
                cpts, turn = self.connector(a, b, seq[i + 2])
                for cp in cpts[1:]:
                    pts.append(cp)
                    seg_plaza.append(b)
                    seg_turn.append(turn)
        return Route(np.array(pts), np.array(seg_plaza), np.array(seg_turn))

    def crosswalks(self) -> list[tuple[np.ndarray, np.ndarray, int]]:
        """(center, unit vector across the road, plaza id) for every arm of every plaza."""
        out = []
        for pid, c in enumerate(self.nodes):
            for nb in self.neighbors[pid]:
                d = self._dir(pid, nb)
                center = c + d * (self.plaza_half + 2.0)
                out.append((center, np.array([d[1], -d[0]]), pid))
        return out

    # -- highway routes -------------------------------------------------

    def lane_route(self, lane: int) -> Route:
        (x0, y0), (x1, _) = self.roads[0]
        y = y0 - self.road_half_width + self.lane_width * (lane + 0.5)
        return Route(np.array([[x0, y], [x1, y]]), np.array([-1]), np.array([0]))
