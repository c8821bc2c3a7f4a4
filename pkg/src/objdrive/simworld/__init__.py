"""Desk-scale 2-D driving simulator."""
from .expert import expert_control, expert_label, route_heading_error
from .render import (IMAGE_SIZE, NOISY_DETECTOR, DetectorNoiseConfig, ground_truth_boxes, perturb_detections,
                     render)
from .world import (DT, FPS, SPEED_CAP, AgentState, WorldState, collision_check, intervention, on_road,
                    spawn_scenario, step)

__all__ = [
    "AgentState", "DT", "DetectorNoiseConfig", "FPS", "IMAGE_SIZE", "NOISY_DETECTOR", "SPEED_CAP", "WorldState",
    "collision_check", "expert_control", "expert_label", "ground_truth_boxes", "intervention", "on_road",
    "perturb_detections", "render", "route_heading_error", "spawn_scenario", "step",
]
