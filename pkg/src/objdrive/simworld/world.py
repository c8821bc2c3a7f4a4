"""World state, scripted traffic, ego dynamics, collisions and interventions."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..controller import Control, PidState, reset
from .roads import RoadMap, Route, load_template, templates_for, wrap_angle

FPS = 12
DT = 1.0 / FPS
SPEED_CAP = 20.0 / 3.6          # 20 km/h
WHEELBASE = 2.5
MAX_WHEEL_ANGLE = math.radians(30.0)
A_THROTTLE = 3.0
A_BRAKE = 6.0
DRAG = 0.1
VEHICLE_SIZE = (4.5, 2.0)
PEDESTRIAN_SIZE = (0.6, 0.6)
STATE_VERSION = 1

MIN_INTERVENTION_S = 15.0
STUCK_WINDOW_S = 10.0
STUCK_DISTANCE = 0.5
OFFROAD_S = 1.0


@dataclass
class AgentState:
    kind: str                      # ego | vehicle | pedestrian
    ident: int
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float
    route_nodes: list[int] = field(default_factory=list)
    lane: int = -1
    s: float = 0.0
    desired_speed: float = 0.0
    reserved: int = -1
    yaw_rate: float = 0.0
    crosswalk: int = -1
    u: float = 0.0
    direction: int = 1
    wait: float = 0.0
    crossing: bool = False

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("footprint must be positive")


@dataclass
class InterventionState:
    active: bool = False
    start: float = 0.0
    reason: str = ""
    history: list = field(default_factory=list)
    offroad_frames: int = 0


class WorldState:
    """Everything needed to advance a scenario; mutated in place by ``step``."""

    def __init__(self, template: dict, seed: int, origin=(0.0, 0.0)):
        self.template = template
        self.kind = template["kind"]
        self.seed = int(seed)
        self.road = RoadMap(template, origin)
        self.frame = 0
        self.ego: AgentState | None = None
        self.agents: list[AgentState] = []
        self.rng = np.random.default_rng(seed)
        self.expert_pid = PidState()
        self.reservations: dict[int, int] = {}
        self.contacts: set[int] = set()
        self.intervention = InterventionState()
        self._routes: dict[int, Route] = {}
        self.crosswalks = self.road.crosswalks() if self.kind == "urban" else []

    @property
    def time(self) -> float:
        return self.frame / FPS

    def route(self, agent: AgentState) -> Route:
        r = self._routes.get(agent.ident)
        if r is None:
            r = self.road.route_from_nodes(agent.route_nodes) if agent.route_nodes else self.road.lane_route(agent.lane)
            self._routes[agent.ident] = r
        return r

    @property
    def ego_route(self) -> Route:
        return self.route(self.ego)

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": STATE_VERSION,
            "template": self.template["name"],
            "origin": [float(v) for v in self.road.origin],
            "seed": self.seed,
            "frame": self.frame,
            "ego": asdict(self.ego),
            "agents": [asdict(a) for a in self.agents],
            "rng": self.rng.bit_generator.state,
            "expert_pid": asdict(self.expert_pid),
            "reservations": {str(k): v for k, v in sorted(self.reservations.items())},
            "contacts": sorted(self.contacts),
            "intervention": asdict(self.intervention),
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    @classmethod
    def from_dict(cls, d: dict) -> "WorldState":
        if d.get("version") != STATE_VERSION:
            raise ValueError(f"world state version {d.get('version')!r} not supported")
        w = cls(load_template(d["template"]), d["seed"], d["origin"])
        w.frame = d["frame"]
        w.ego = AgentState(**d["ego"])
        w.agents = [AgentState(**a) for a in d["agents"]]
        w.rng.bit_generator.state = d["rng"]
        pid = dict(d["expert_pid"])
        for key in ("speed_targets", "heading_offsets"):
            pid[key] = tuple(pid[key])
        w.expert_pid = PidState(**pid)
        w.reservations = {int(k): v for k, v in d["reservations"].items()}
        w.contacts = set(d["contacts"])
        w.intervention = InterventionState(**d["intervention"])
        return w

    @classmethod
    def deserialize(cls, raw: bytes) -> "WorldState":
        return cls.from_dict(json.loads(raw))

    def translated(self, dx: float, dy: float) -> "WorldState":
        """Same scenario with map, agents and ego shifted by (dx, dy)."""
        d = self.to_dict()
        d["origin"] = [d["origin"][0] + dx, d["origin"][1] + dy]
        for a in [d["ego"], *d["agents"]]:
            a["x"] += dx
            a["y"] += dy
        return WorldState.from_dict(d)


# ---------------------------------------------------------------------------
# geometry helpers


def agent_arrays(agents: list[AgentState]) -> dict[str, np.ndarray]:
    return {
        "x": np.array([a.x for a in agents]), "y": np.array([a.y for a in agents]),
        "c": np.array([math.cos(a.heading) for a in agents]), "s": np.array([math.sin(a.heading) for a in agents]),
        "hl": np.array([a.length / 2 for a in agents]), "hw": np.array([a.width / 2 for a in agents]),
        "v": np.array([a.speed for a in agents]),
    }


def rect_distance(points: np.ndarray, arr: dict[str, np.ndarray], dx=None, dy=None) -> np.ndarray:
    """(P, A) Euclidean distance from points to rectangles (0 inside)."""
    x = arr["x"] if dx is None else arr["x"] + dx
    y = arr["y"] if dy is None else arr["y"] + dy
    rx = points[:, 0:1] - x[None]
    ry = points[:, 1:2] - y[None]
    lx = np.abs(rx * arr["c"] + ry * arr["s"]) - arr["hl"]
    ly = np.abs(-rx * arr["s"] + ry * arr["c"]) - arr["hw"]
    return np.hypot(np.maximum(lx, 0.0), np.maximum(ly, 0.0))


def corners(a: AgentState) -> np.ndarray:
    c, s = math.cos(a.heading), math.sin(a.heading)
    fx, fy = c * a.length / 2, s * a.length / 2
    lx, ly = -s * a.width / 2, c * a.width / 2
    return np.array([[a.x + fx + lx, a.y + fy + ly], [a.x - fx + lx, a.y - fy + ly],
                     [a.x - fx - lx, a.y - fy - ly], [a.x + fx - lx, a.y + fy - ly]])


def rects_overlap(a: AgentState, b: AgentState) -> bool:
    """Separating-axis test for two oriented rectangles."""
    if math.hypot(a.x - b.x, a.y - b.y) > 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width)):
        return False
    ca, cb = corners(a), corners(b)
    for h in (a.heading, b.heading):
        for axis in ((math.cos(h), math.sin(h)), (-math.sin(h), math.cos(h))):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


# ---------------------------------------------------------------------------
# spawning


def spawn_scenario(kind: str, seed: int, template: str | None = None) -> WorldState:
    """Deterministic scenario for (kind, seed); template chosen by seed unless given."""
    if kind not in ("urban", "highway"):
        raise ValueError(f"unknown scenario kind {kind!r}")
    names = templates_for(kind)
    name = template or names[seed % len(names)]
    tpl = load_template(name)
    if tpl["kind"] != kind:
        raise ValueError(f"template {name} is not a {kind} template")
    w = WorldState(tpl, seed)
    if kind == "urban":
        _spawn_urban(w)
    else:
        _spawn_highway(w)
    return w


def _set_pose_from_route(w: WorldState, a: AgentState) -> None:
    r = w.route(a)
    p = r.point_at(a.s)
    a.x, a.y = float(p[0]), float(p[1])
    a.heading = float(r.heading_at(a.s))


def _spawn_urban(w: WorldState) -> None:
    tpl, rng, road = w.template, w.rng, w.road
    sp = tpl["spawn"]
    n_nodes = len(road.nodes)
    edges = [(a, b) for a in range(n_nodes) for b in road.neighbors[a]]
    a, b = edges[int(rng.integers(len(edges)))]
    ego = AgentState("ego", 0, 0.0, 0.0, 0.0, 0.0, *VEHICLE_SIZE,
                     route_nodes=road.random_walk(rng, a, b, tpl["route"]["edges"]), s=float(sp["ego_offset"]))
    w.ego = ego
    _set_pose_from_route(w, ego)
    placed = [(ego.x, ego.y)]
    n_veh = int(rng.integers(tpl["vehicles"][0], tpl["vehicles"][1] + 1))
    ident = 1
    tries = 0
    while ident <= n_veh and tries < 1000:
        tries += 1
        a, b = edges[int(rng.integers(len(edges)))]
        p0, p1 = road.edge_endpoints(a, b)
        length = float(np.hypot(*(p1 - p0)))
        s = float(rng.uniform(sp["edge_margin"], length - sp["edge_margin"]))
        pos = p0 + (p1 - p0) * (s / length)
        if min(math.hypot(pos[0] - x, pos[1] - y) for x, y in placed) < sp["min_gap"]:
            continue
        v = AgentState("vehicle", ident, 0.0, 0.0, 0.0, 0.0, *VEHICLE_SIZE,
                       route_nodes=road.random_walk(rng, a, b, tpl["route"]["edges"]), s=s,
                       desired_speed=float(rng.uniform(3.5, 5.5)))
        v.speed = v.desired_speed
        _set_pose_from_route(w, v)
        w.agents.append(v)
        placed.append((v.x, v.y))
        ident += 1
    # pedestrians go on crosswalks the ego will pass
    route = w.ego_route
    samples = route.point_at(np.arange(0.0, min(route.length, 700.0), 2.0))
    near = []
    for i, (c, axis, pid) in enumerate(w.crosswalks):
        if np.min(np.hypot(samples[:, 0] - c[0], samples[:, 1] - c[1])) < 3.0:
            near.append(i)
    n_ped = int(rng.integers(tpl["pedestrians"][0], tpl["pedestrians"][1] + 1))
    chosen = rng.permutation(near)[:n_ped] if near else []
    for cw in chosen:
        c, axis, _ = w.crosswalks[int(cw)]
        ped = AgentState("pedestrian", ident, 0.0, 0.0, 0.0, 0.0, *PEDESTRIAN_SIZE, crosswalk=int(cw),
                         direction=1 if rng.random() < 0.5 else -1, desired_speed=float(rng.uniform(1.1, 1.5)),
                         wait=float(rng.uniform(0.0, 8.0)))
        ped.u = -ped.direction * _crosswalk_half_span(w)
        _place_pedestrian(w, ped)
        w.agents.append(ped)
        ident += 1


def _spawn_highway(w: WorldState) -> None:
    tpl, rng, road = w.template, w.rng, w.road
    sp = tpl["spawn"]
    ego = AgentState("ego", 0, 0.0, 0.0, 0.0, 0.0, *VEHICLE_SIZE, lane=0, s=100.0)
    w.ego = ego
    _set_pose_from_route(w, ego)
    n_veh = int(rng.integers(tpl["vehicles"][0], tpl["vehicles"][1] + 1))
    taken = {0: [ego.s], 1: []}
    ident = 1
    tries = 0
    while ident <= n_veh and tries < 1000:
        tries += 1
        lane = int(rng.integers(road.n_lanes))
        lo, hi = sp["ahead"] if rng.random() < 0.7 else sp["behind"]
        s = 100.0 + float(rng.uniform(lo, hi))
        if any(abs(s - t) < sp["min_gap"] for t in taken.setdefault(lane, [])):
            continue
        v = AgentState("vehicle", ident, 0.0, 0.0, 0.0, 0.0, *VEHICLE_SIZE, lane=lane, s=s,
                       desired_speed=float(rng.uniform(*sp["speed"])))
        v.speed = v.desired_speed
        _set_pose_from_route(w, v)
        w.agents.append(v)
        taken[lane].append(s)
        ident += 1


# ---------------------------------------------------------------------------
# scripted agents


def _crosswalk_half_span(w: WorldState) -> float:
    return w.road.road_half_width + 1.5


def _place_pedestrian(w: WorldState, ped: AgentState) -> None:
    c, axis, _ = w.crosswalks[ped.crosswalk]
    ped.x = float(c[0] + axis[0] * ped.u)
    ped.y = float(c[1] + axis[1] * ped.u)
    ped.heading = float(math.atan2(axis[1] * ped.direction, axis[0] * ped.direction))


def _update_pedestrian(w: WorldState, ped: AgentState, vehicles: list[AgentState]) -> None:
    half = _crosswalk_half_span(w)
    if ped.crossing:
        ped.u += ped.direction * ped.speed * DT
        if ped.direction * ped.u >= half:
            ped.u = ped.direction * half
            ped.crossing = False
            ped.speed = 0.0
            ped.direction = -ped.direction
            ped.wait = float(w.rng.uniform(3.0, 10.0))
    else:
        ped.wait -= DT
        if ped.wait <= 0.0:
            c, _, _ = w.crosswalks[ped.crosswalk]
            clear = all(math.hypot(v.x - c[0], v.y - c[1]) > 7.0 + v.length / 2 for v in vehicles)
            if clear:
                ped.crossing = True
                ped.speed = ped.desired_speed
    _place_pedestrian(w, ped)


def stopping_distance(v: float) -> float:
    """Conservative ego stopping distance under the default PID at full brake."""
    return v * v / 12.0 + 0.5 * v + 1.0


def ego_committed(w: WorldState, pid: int) -> bool:
    ego = w.ego
    if w.road.in_plaza(pid, (ego.x, ego.y), margin=ego.length / 2):
        return True
    iv = w.ego_route.next_plaza(ego.s - ego.length / 2)
    if iv is None or iv[0] != pid:
        return False
    dist_front = iv[1] - (ego.s + ego.length / 2)
    return dist_front <= stopping_distance(ego.speed) or (ego.speed < 0.5 and dist_front <= 10.0)


def _update_vehicle(w: WorldState, a: AgentState, others: list[AgentState]) -> None:
    r = w.route(a)
    front = a.s + a.length / 2
    look = 4.0 + 2.0 * a.speed + 8.0
    samples = np.arange(0.0, look, 1.0)
    pts = r.point_at(front + samples)
    gap = math.inf
    if others:
        ahead = [o for o in others if (o.x - a.x) * math.cos(a.heading) + (o.y - a.y) * math.sin(a.heading) > 0]
        if ahead:
            arr = agent_arrays(ahead)
            dist = rect_distance(pts, arr)
            # crossing pedestrians are also checked one second ahead
            walking = np.array([o.kind == "pedestrian" and o.crossing for o in ahead])
            if walking.any():
                fut = rect_distance(pts, arr, arr["v"] * arr["c"], arr["v"] * arr["s"])
                dist = np.where(walking[None], np.minimum(dist, fut), dist)
            blocked = (dist < a.width / 2 + 0.4).any(axis=1)
            if blocked.any():
                gap = samples[int(np.argmax(blocked))]
    stop_at = math.inf
    if a.reserved >= 0:
        iv = next((iv for iv in r.plazas if iv[0] == a.reserved and iv[2] > a.s - a.length), None)
        if iv is None or a.s - a.length / 2 > iv[2]:
            if w.reservations.get(a.reserved) == a.ident:
                del w.reservations[a.reserved]
            a.reserved = -1
    if a.reserved < 0 and r.plazas:
        iv = r.next_plaza(a.s - a.length / 2)
        if iv is not None:
            dist_entry = iv[1] - front
            if dist_entry <= a.speed * a.speed / 6.0 + 3.0:
                holder = w.reservations.get(iv[0])
                if holder is None and not ego_committed(w, iv[0]):
                    w.reservations[iv[0]] = a.ident
                    a.reserved = iv[0]
                elif holder != a.ident:
                    stop_at = dist_entry
    d_stop = min(gap - 2.0, stop_at - 0.3)
    v_cmd = min(a.desired_speed, math.sqrt(max(0.0, 2.0 * 3.0 * d_stop)))
    a.speed = float(min(SPEED_CAP, max(0.0, a.speed + np.clip(v_cmd - a.speed, -A_BRAKE * DT, A_THROTTLE * DT))))
    a.s += a.speed * DT
    _set_pose_from_route(w, a)


# ---------------------------------------------------------------------------
# stepping


def step(w: WorldState, control: Control, dt: float = DT) -> WorldState:
    """Advance one frame in place: ego bicycle model, then scripted agents."""
    if abs(dt - DT) > 1e-12:
        raise ValueError("the simulator runs at a fixed 1/12 s step")
    c = control.clamped()
    ego = w.ego
    v = ego.speed
    ego.yaw_rate = v / WHEELBASE * math.tan(c.steer * MAX_WHEEL_ANGLE)
    ego.x += v * math.cos(ego.heading) * dt
    ego.y += v * math.sin(ego.heading) * dt
    ego.heading = float(wrap_angle(ego.heading + ego.yaw_rate * dt))
    acc = A_THROTTLE * c.throttle - A_BRAKE * c.brake - DRAG * v
    ego.speed = float(min(SPEED_CAP, max(0.0, v + acc * dt)))
    ego.s = w.ego_route.project((ego.x, ego.y), ego.s)

    vehicles = [a for a in w.agents if a.kind == "vehicle"]
    for a in w.agents:
        if a.kind == "pedestrian":
            _update_pedestrian(w, a, vehicles + [ego])
    everyone = w.agents + [ego]
    for a in vehicles:
        _update_vehicle(w, a, [o for o in everyone if o is not a])
    w.frame += 1
    return w


def collision_check(w: WorldState, record: bool = True) -> list[dict]:
    """One event per new ego contact; contacts re-arm after separation."""
    now = {a.ident for a in w.agents if rects_overlap(w.ego, a)}
    events = []
    if record:
        for ident in sorted(now - w.contacts):
            events.append({"type": "collision", "time": w.time, "agent": ident})
    w.contacts = now
    return events


def on_road(w: WorldState) -> bool:
    return bool(w.road.drivable(np.array([w.ego.x, w.ego.y])))


def intervention(w: WorldState, collided: bool) -> list[dict]:
    """Start/end the autopilot takeover; returns the resulting events."""
    st = w.intervention
    ego = w.ego
    if st.active:
        done = (w.time - st.start >= MIN_INTERVENTION_S - 1e-9 and not w.contacts
                and on_road(w) and ego.speed > 0.5)
        if done:
            st.active = False
            st.history = []
            st.offroad_frames = 0
            return [{"type": "intervention_end", "time": w.time, "reason": st.reason}]
        return []
    reason = None
    if collided:
        reason = "collision"
    else:
        st.offroad_frames = 0 if on_road(w) else st.offroad_frames + 1
        if st.offroad_frames * DT > OFFROAD_S:
            reason = "offroad"
        window = int(round(STUCK_WINDOW_S * FPS))
        st.history.append((ego.x, ego.y))
        if len(st.history) > window + 1:
            del st.history[0]
        if reason is None and len(st.history) == window + 1:
            x0, y0 = st.history[0]
            if math.hypot(ego.x - x0, ego.y - y0) < STUCK_DISTANCE:
                reason = "stuck"
    if reason is None:
        return []
    st.active = True
    st.start = w.time
    st.reason = reason
    st.history = []
    st.offroad_frames = 0
    reset(w.expert_pid)
    return [{"type": "intervention_start", "time": w.time, "reason": reason}]
