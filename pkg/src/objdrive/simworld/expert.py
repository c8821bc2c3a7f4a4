"""Scripted expert: pure-pursuit route following, corridor braking, plaza yielding.

The expert picks one of the nine discrete actions and executes it through
its own PID controller, so its executed control is exactly what the action
decodes to.
"""
from __future__ import annotations

import math

import numpy as np

from ..controller import Control, action_index, pid_step
from .roads import wrap_angle
from .world import DT, WorldState, agent_arrays, ego_committed, rect_distance

CORRIDOR_HALF_WIDTH = 1.0 + 0.4
CORRIDOR_STEP = 0.5
PREDICTION_TIMES = (0.0, 0.5, 1.0, 1.5)
LATERAL_TOLERANCE = 1.0
TURN_SLOWDOWN = 14.0
YIELD_RANGE = (0.3, 10.0)


def lookahead(speed: float) -> float:
    return float(np.clip(speed + 7.0, 9.0, 12.0))


def route_heading_error(w: WorldState) -> float:
    """Angle from the ego heading to the look-ahead point on its route (left positive)."""
    ego, route = w.ego, w.ego_route
    s = min(ego.s + lookahead(ego.speed), route.length)
    p = route.point_at(s)
    if math.hypot(p[0] - ego.x, p[1] - ego.y) < 1e-6:
        return 0.0
    return float(wrap_angle(math.atan2(p[1] - ego.y, p[0] - ego.x) - ego.heading))


def lateral_offset(w: WorldState) -> float:
    """Signed distance of the ego from its route, positive when left of it."""
    ego, route = w.ego, w.ego_route
    p = route.point_at(ego.s)
    h = float(route.heading_at(ego.s))
    return -(ego.x - p[0]) * math.sin(h) + (ego.y - p[1]) * math.cos(h)


def stop_distance(speed: float) -> float:
    """Distance ahead of the ego center within which an obstacle means stop."""
    return 2.25 + 1.5 * max(speed, 2.0) + 1.5


def corridor_clearance(w: WorldState, reach: float) -> float:
    """Route distance from the ego center to the first predicted obstruction (inf if none)."""
    ego, route = w.ego, w.ego_route
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    # agents already touching the ego are ignored so the autopilot can pull free after a crash
    relevant = [a for a in w.agents
                if a.ident not in w.contacts and math.hypot(a.x - ego.x, a.y - ego.y) < reach + 15.0
                and (a.kind == "pedestrian" or (a.x - ego.x) * c + (a.y - ego.y) * s > 0)]
    if not relevant:
        return math.inf
    ds = np.arange(0.0, reach + 1e-9, CORRIDOR_STEP)
    ds = ds[ego.s + ds <= route.length]
    if ds.size == 0:
        return math.inf
    pts = route.point_at(ego.s + ds)
    arr = agent_arrays(relevant)
    vx, vy = arr["v"] * arr["c"], arr["v"] * arr["s"]
    first = math.inf
    for t in PREDICTION_TIMES:
        hit = (rect_distance(pts, arr, vx * t, vy * t) < CORRIDOR_HALF_WIDTH).any(axis=1)
        # the ego's own footprint cannot be an obstruction for itself
        hit &= ds > 0.0
        if hit.any():
            first = min(first, float(ds[int(np.argmax(hit))]))
    return first


def _must_yield(w: WorldState) -> bool:
    ego = w.ego
    iv = w.ego_route.next_plaza(ego.s - ego.length / 2)
    if iv is None:
        return False
    holder = w.reservations.get(iv[0])
    if holder is None or ego_committed(w, iv[0]):
        return False
    d = iv[1] - (ego.s + ego.length / 2)
    return YIELD_RANGE[0] < d <= YIELD_RANGE[1]


def _near_turn(w: WorldState) -> bool:
    ego = w.ego
    for pid, s_in, s_out, turn in w.ego_route.plazas:
        if turn != 0 and s_in - TURN_SLOWDOWN <= ego.s <= s_out:
            return True
    return False


def expert_label(w: WorldState) -> int:
    """Discrete action 0..8 the expert wants this frame."""
    ego, route = w.ego, w.ego_route
    near = stop_distance(ego.speed)
    far = near + 8.0
    remaining = route.length - ego.s
    clear = corridor_clearance(w, far)
    if remaining < near or clear <= near or _must_yield(w):
        speed = "stop"
    elif clear <= far or _near_turn(w) or remaining < far + 10.0:
        speed = "slow"
    else:
        speed = "fast"
    steer = "straight"
    in_plaza = any(s_in <= ego.s <= s_out for _, s_in, s_out, _ in route.plazas)
    if not in_plaza:
        off = lateral_offset(w)
        if off < -LATERAL_TOLERANCE:
            steer = "left"
        elif off > LATERAL_TOLERANCE:
            steer = "right"
    return action_index(steer, speed)


def expert_control(w: WorldState) -> tuple[Control, int]:
    """Expert (Control, label); advances the expert's PID state."""
    label = expert_label(w)
    control = pid_step(w.expert_pid, label, w.ego.speed, route_heading_error(w), DT)
    return control, label
