import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objdrive.controller import Control, action_index, action_name
from objdrive.simworld import expert
from objdrive.simworld.render import (IMAGE_SIZE, NOISY_DETECTOR, PIXEL_FWD, PIXEL_LEFT, DetectorNoiseConfig,
                                      ground_truth_boxes, perturb_detections, perturb_detections_detail, render)
from objdrive.simworld.roads import load_template, templates_for, validate_template
from objdrive.simworld.world import (DT, MIN_INTERVENTION_S, SPEED_CAP, AgentState, WorldState, collision_check,
                                     intervention, spawn_scenario, step)
from objdrive.perception import BoundingBox

from conftest import empty_world


def vehicle_ahead(w, gap, speed=0.0, ident=99, lateral=0.0):
    """A vehicle whose rear bumper is ``gap`` metres in front of the ego's front bumper."""
    e = w.ego
    d = e.length / 2 + gap + 4.5 / 2
    c, s = math.cos(e.heading), math.sin(e.heading)
    return AgentState("vehicle", ident, e.x + d * c - lateral * s, e.y + d * s + lateral * c, e.heading,
                      speed, 4.5, 2.0)


# ---------------------------------------------------------------------------
# scenarios


def test_templates_load_and_validate():
    assert len(templates_for("urban")) >= 2 and len(templates_for("highway")) >= 2
    for name in templates_for("urban") + templates_for("highway"):
        assert validate_template(load_template(name))["name"] == name


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        spawn_scenario("offroad", 0)


def test_spawn_deterministic():
    assert spawn_scenario("urban", 3).serialize() == spawn_scenario("urban", 3).serialize()


def test_seed_changes_placement():
    a, b = spawn_scenario("urban", 3), spawn_scenario("urban", 4)
    assert [(x.x, x.y) for x in a.agents] != [(x.x, x.y) for x in b.agents]


@pytest.mark.parametrize("seed", range(5))
def test_highway_has_no_pedestrians(seed):
    assert all(a.kind == "vehicle" for a in spawn_scenario("highway", seed).agents)


def test_state_round_trip_continues_identically():
    w = spawn_scenario("urban", 2)
    for _ in range(30):
        step(w, expert.expert_control(w)[0])
    v = WorldState.deserialize(w.serialize())
    for _ in range(30):
        step(w, expert.expert_control(w)[0])
        step(v, expert.expert_control(v)[0])
    assert w.serialize() == v.serialize()


# ---------------------------------------------------------------------------
# dynamics


def test_zero_control_from_rest_keeps_pose():
    w = empty_world()
    pose = (w.ego.x, w.ego.y, w.ego.heading)
    for _ in range(24):
        step(w, Control())
    assert (w.ego.x, w.ego.y, w.ego.heading) == pose


def test_full_throttle_monotone_to_cap():
    w = empty_world()
    speeds = []
    for _ in range(12 * 8):
        step(w, Control(throttle=1.0))
        speeds.append(w.ego.speed)
    speeds = np.array(speeds)
    below = speeds < SPEED_CAP
    assert np.all(np.diff(speeds[below]) > 0)
    assert speeds.max() == pytest.approx(SPEED_CAP)
    assert np.all(speeds[np.argmax(~below):] == SPEED_CAP)


def test_twelve_steps_is_one_second():
    w = empty_world()
    t0 = w.time
    for _ in range(12):
        step(w, Control())
    assert abs(w.time - t0 - 1.0) < 1e-9


def test_step_rejects_other_dt():
    with pytest.raises(ValueError):
        step(empty_world(), Control(), dt=0.1)


# ---------------------------------------------------------------------------
# rendering and boxes


def test_empty_world_without_route_uses_road_channel_only():
    img = render(empty_world(), draw_route=False)
    assert img[0].any() and not img[1].any() and not img[2].any()


def test_route_overlay_in_pedestrian_channel():
    img = render(empty_world())
    assert img[2].any() and img[2].max() <= 0.9


def test_render_translation_invariant():
    w = spawn_scenario("urban", 1)
    v = w.translated(123.0, -47.5)
    np.testing.assert_allclose(render(v), render(w), atol=0)


@pytest.mark.parametrize("ahead", [10.0, 30.0])
def test_vehicle_ahead_lands_above_ego(ahead):
    # ego sits at the bottom centre, so a car d metres ahead is centred d / 0.5 rows up
    w = empty_world()
    w.agents = [vehicle_ahead(w, ahead - 4.5)]
    img = render(w)
    rows, cols = np.nonzero(img[1])
    assert abs(rows.mean() + 0.5 - (IMAGE_SIZE - ahead / 0.5)) <= 1
    assert abs(cols.mean() + 0.5 - IMAGE_SIZE / 2) <= 1
    assert (rows.max() < IMAGE_SIZE / 2) == (ahead > 26)


def test_boxes_empty_world():
    assert ground_truth_boxes(empty_world()) == []


def test_one_vehicle_one_box_matches_raster():
    w = empty_world()
    w.agents = [vehicle_ahead(w, 8.0, lateral=3.0)]
    w.agents[0].heading += 0.4
    boxes = ground_truth_boxes(w)
    assert len(boxes) == 1 and boxes[0].cls == "vehicle"
    # brute-force raster of the footprint polygon: pixel centres inside the rotated rectangle
    a = w.agents[0]
    e = w.ego
    c, s = math.cos(e.heading), math.sin(e.heading)
    wx = e.x + PIXEL_FWD * c - PIXEL_LEFT * s
    wy = e.y + PIXEL_FWD * s + PIXEL_LEFT * c
    ca, sa = math.cos(a.heading), math.sin(a.heading)
    rx, ry = wx - a.x, wy - a.y
    inside = (np.abs(rx * ca + ry * sa) <= a.length / 2) & (np.abs(-rx * sa + ry * ca) <= a.width / 2)
    rows, cols = np.nonzero(inside)
    b = boxes[0]
    assert abs(b.x_min - cols.min()) <= 1 and abs(b.x_max - (cols.max() + 1)) <= 1
    assert abs(b.y_min - rows.min()) <= 1 and abs(b.y_max - (rows.max() + 1)) <= 1


def test_zero_noise_is_identity():
    boxes = [BoundingBox("vehicle", 1, 2, 3, 4), BoundingBox("pedestrian", 5, 5, 6, 7)]
    assert perturb_detections(boxes, DetectorNoiseConfig(), np.random.default_rng(0)) == boxes


def test_drop_all_leaves_false_positives_only():
    boxes = [BoundingBox("vehicle", 1, 2, 30, 40)] * 3
    rng = np.random.default_rng(0)
    noise = DetectorNoiseConfig(jitter_px=2.0, drop_prob=1.0, false_positive_rate=0.5)
    n_fp = 0
    for _ in range(200):
        out, kept, fp = perturb_detections_detail(boxes, noise, rng)
        assert not kept.any() and len(out) == fp
        n_fp += fp
    assert 0 < n_fp < 200


def test_empirical_drop_rate():
    rng = np.random.default_rng(2024)
    boxes = [BoundingBox("vehicle", 10, 10, 30, 30)] * 4
    kept = 0
    for _ in range(10_000):
        kept += perturb_detections_detail(boxes, NOISY_DETECTOR, rng)[1].sum()
    assert abs(1 - kept / 40_000 - 0.1) <= 0.01


def test_noise_config_validation():
    with pytest.raises(ValueError):
        DetectorNoiseConfig(drop_prob=1.5)
    with pytest.raises(ValueError):
        DetectorNoiseConfig(jitter_px=-1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_perturbed_boxes_are_valid(seed, n):
    rng = np.random.default_rng(seed)
    boxes = [BoundingBox("vehicle", *sorted(rng.uniform(-10, 100, 2)), *sorted(rng.uniform(-10, 100, 2)))
             for _ in range(n)]
    boxes = [BoundingBox(b.cls, b.x_min, b.x_max, b.y_min, b.y_max) for b in boxes]
    for b in perturb_detections(boxes, NOISY_DETECTOR, rng):
        assert 0 <= b.x_min < b.x_max <= IMAGE_SIZE and 0 <= b.y_min < b.y_max <= IMAGE_SIZE


# ---------------------------------------------------------------------------
# expert


def test_expert_cruises_on_empty_road():
    w = empty_world()
    for _ in range(36):
        control, label = expert.expert_control(w)
        step(w, control)
    assert action_name(label) == ("straight", "fast")
    assert w.ego.speed <= SPEED_CAP


def test_expert_stops_for_stopped_vehicle():
    w = empty_world()
    w.ego.speed = 4.0
    w.agents = [vehicle_ahead(w, 3.0)]
    control, label = expert.expert_control(w)
    assert control.brake > 0
    assert action_name(label)[1] == "stop"


def _at_turn(turn):
    for seed in range(40):
        w = spawn_scenario("urban", seed)
        for pid, s_in, s_out, t in w.ego_route.plazas:
            if t == turn:
                w.agents = []
                r = w.ego_route
                w.ego.s = s_in - 2.0
                w.ego.x, w.ego.y = r.point_at(w.ego.s)
                w.ego.heading = float(r.heading_at(w.ego.s))
                w.ego.speed = 2.0
                return w
    raise AssertionError("no turning route found")


@pytest.mark.parametrize("turn, sign", [(1, 1.0), (-1, -1.0)])
def test_expert_steers_into_turn(turn, sign):
    w = _at_turn(turn)
    err = expert.route_heading_error(w)
    control, _ = expert.expert_control(w)
    assert np.sign(err) == sign
    assert np.sign(control.steer) == sign


def test_expert_stops_at_route_end():
    w = empty_world()
    w.ego.s = w.ego_route.length - 1.0
    w.ego.x, w.ego.y = w.ego_route.point_at(w.ego.s)
    assert action_name(expert.expert_label(w))[1] == "stop"


# ---------------------------------------------------------------------------
# collisions and interventions


def test_no_collision_when_apart():
    w = empty_world()
    w.agents = [vehicle_ahead(w, 20.0)]
    assert collision_check(w) == []


def test_overlap_is_one_event_until_separation():
    w = empty_world()
    w.agents = [vehicle_ahead(w, -1.0)]
    events = []
    for _ in range(10):
        events += collision_check(w)
    assert len(events) == 1 and events[0]["agent"] == 99
    w.agents[0].x += 100
    assert collision_check(w) == []
    w.agents[0].x -= 100
    assert len(collision_check(w)) == 1


def test_no_trigger_no_event():
    w = empty_world()
    w.ego.speed = 3.0
    pose = (w.ego.x, w.ego.y, w.ego.speed)
    assert intervention(w, False) == []
    assert not w.intervention.active and (w.ego.x, w.ego.y, w.ego.speed) == pose


def test_collision_intervention_lasts_fifteen_seconds():
    w = spawn_scenario("urban", 0)
    t0 = w.time
    start = intervention(w, True)
    assert start[0]["type"] == "intervention_start" and start[0]["reason"] == "collision"
    end = []
    for _ in range(12 * 40):
        step(w, expert.expert_control(w)[0])
        collision_check(w)
        end = intervention(w, False)
        if end:
            break
    assert end and end[0]["type"] == "intervention_end"
    assert end[0]["time"] >= t0 + MIN_INTERVENTION_S - 1e-9


def test_stuck_detector_triggers():
    w = empty_world()
    x0 = w.ego.x
    events = []
    for i in range(12 * 10 + 1):
        w.ego.x = x0 + (0.1 if i % 2 else -0.1)
        w.frame += 1
        events += intervention(w, False)
    assert [e["reason"] for e in events] == ["stuck"]


def test_moving_ego_not_stuck():
    w = empty_world()
    for _ in range(12 * 12):
        c, _ = expert.expert_control(w)
        step(w, c)
        assert intervention(w, False) == []


def test_autopilot_pulls_free_of_a_crashed_car():
    # a parked car on the ego's own lane, overlapping its front bumper
    w = empty_world("urban", 7)
    w.ego.speed = 3.0
    parked = vehicle_ahead(w, -0.5)
    parked.route_nodes = list(w.ego.route_nodes)
    parked.s = w.ego.s + w.ego.length / 2 - 0.5 + parked.length / 2
    w.agents = [parked]
    step(w, Control(brake=1.0))
    assert len(collision_check(w)) == 1
    intervention(w, True)
    for _ in range(12 * 40):
        step(w, expert.expert_control(w)[0])
        collision_check(w, record=False)
        if intervention(w, False):
            break
    assert not w.intervention.active
