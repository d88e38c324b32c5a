"""PID controller for the cost Lagrange multiplier."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass
class LagrangeState:
    kp: float = 10.0
    ki: float = 0.1
    kd: float = 0.1
    lam: float = 1.0
    lam_max: float = 100.0
    integral: float = 0.0
    prev_cost: float | None = None
    ema: float | None = None
    ema_alpha: float = 0.95

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be non-negative")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must lie in (0, 1]")
        self.lam = min(max(self.lam, 0.0), self.lam_max)


def smooth_cost(state: LagrangeState, raw: float) -> float:
    """Exponential moving average of the constraint estimate.

    ``ema_alpha`` is the weight on the newest value; the first value seeds it.
    """
    if state.ema is None:
        state.ema = float(raw)
    else:
        state.ema = state.ema_alpha * float(raw) + (1.0 - state.ema_alpha) * state.ema
    return state.ema


def pid_lagrange_update(state: LagrangeState, j_c: float, d: float) -> float:
    """One PID step on the constraint error ``j_c - d``; returns the new multiplier."""
    delta = j_c - d
    state.integral = max(state.integral + delta, 0.0)
    deriv = 0.0 if state.prev_cost is None else j_c - state.prev_cost
    raw = state.kp * delta + state.ki * state.integral + state.kd * deriv
    state.lam = min(max(raw, 0.0), state.lam_max)
    state.prev_cost = j_c
    return state.lam
