"""PID layer turning one of nine discrete actions into throttle/brake/steer."""
from __future__ import annotations

from dataclasses import dataclass, field

STEER_NAMES = ("left", "straight", "right")
SPEED_NAMES = ("fast", "slow", "stop")
N_ACTIONS = 9


@dataclass(frozen=True)
class Control:
    throttle: float = 0.0
    brake: float = 0.0
    steer: float = 0.0

    def clamped(self) -> "Control":
        return Control(_clip(self.throttle, 0.0, 1.0), _clip(self.brake, 0.0, 1.0), _clip(self.steer, -1.0, 1.0))


def _clip(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


@dataclass
class PidState:
    kp: float = 0.5
    ki: float = 0.1
    kd: float = 0.05
    ks: float = 1.0
    speed_targets: tuple[float, float, float] = (5.5, 2.0, 0.0)       # fast, slow, stop
    heading_offsets: tuple[float, float, float] = (0.35, 0.0, -0.35)  # left, straight, right
    integral_limit: float = 5.0
    integral: float = 0.0
    prev_error: float = 0.0
    last_target: float | None = field(default=None)

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd, self.ks) < 0:
            raise ValueError("PID gains must be nonnegative")


def action_index(steer: str, speed: str) -> int:
    return STEER_NAMES.index(steer) * 3 + SPEED_NAMES.index(speed)


def action_name(action: int) -> tuple[str, str]:
    return STEER_NAMES[action // 3], SPEED_NAMES[action % 3]


def decode(action: int, pid: PidState | None = None) -> tuple[float, float]:
    """(target speed m/s, heading offset rad) for an action 0..8."""
    if not (isinstance(action, (int,)) or hasattr(action, "__index__")) or not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"action must be in [0, 8], got {action!r}")
    pid = pid or PidState()
    a = int(action)
    return pid.speed_targets[a % 3], pid.heading_offsets[a // 3]


def reset(pid: PidState) -> PidState:
    pid.integral = 0.0
    pid.prev_error = 0.0
    pid.last_target = None
    return pid


def pid_step(pid: PidState, action: int, speed: float, route_heading_error: float, dt: float) -> Control:
    """Advance the controller one frame and return the clamped control.

    Anti-windup: the integral is clamped, frozen while the actuator is
    saturated in the direction of the error, and cleared whenever the
    commanded target speed changes.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    target, offset = decode(action, pid)
    if pid.last_target is not None and target != pid.last_target:
        pid.integral = 0.0
    pid.last_target = target
    err = target - speed
    deriv = (err - pid.prev_error) / dt
    pid.prev_error = err
    u = pid.kp * err + pid.ki * pid.integral + pid.kd * deriv
    saturated = (u >= 1.0 and err > 0) or (u <= -1.0 and err < 0)
    if not saturated:
        pid.integral = _clip(pid.integral + err * dt, -pid.integral_limit, pid.integral_limit)
    if u > 0:
        throttle, brake = _clip(u, 0.0, 1.0), 0.0
    else:
        throttle, brake = 0.0, _clip(-u, 0.0, 1.0)
    steer = _clip(pid.ks * (offset + route_heading_error), -1.0, 1.0)
    return Control(throttle, brake, steer)
