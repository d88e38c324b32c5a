"""Nominal planners that ignore safety: receding-horizon MPC for the
navigation robot and a grid-sampling local planner for the race car.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs.race import (
    CarState,
    LocalPlan,
    RaceAction,
    Track,
    VehicleParams,
    eval_cubic,
    eval_cubic_d1,
    eval_cubic_d2,
    make_plan,
)

MPC_Q = np.diag([10.0, 10.0, 1.0, 1.0])
MPC_R = 0.02 * np.eye(2)


@dataclass
class MpcConfig:
    horizon: int = 10
    dt: float = 0.1
    Q: np.ndarray = field(default_factory=lambda: MPC_Q.copy())
    R: np.ndarray = field(default_factory=lambda: MPC_R.copy())
    a_max: float = 1.0
    iterations: int = 200
    step: float = 0.05

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for name, M in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise ValueError(f"{name} must be symmetric positive semi-definite")
        if self.Q.shape[0] != 2 * self.R.shape[0]:
            raise ValueError("Q must cover position and velocity of every action axis")


class MpcPlanner:
    """Double-integrator MPC solved by projected gradient descent.

    Costs are written in goal-centred coordinates ``e = s - s_goal``: stage
    cost ``e'Qe + a'Ra`` for k = 0..N-1. The initial-state term is constant
    and kept only for reporting. The solution is warm-started from the
    previous call shifted by one step.
    """

    def __init__(self, cfg: MpcConfig | None = None):
        self.cfg = cfg or MpcConfig()
        c = self.cfg
        d = c.R.shape[0]
        n = 2 * d
        N = c.horizon
        A = np.block([[np.eye(d), c.dt * np.eye(d)], [np.zeros((d, d)), np.eye(d)]])
        B = np.vstack([np.zeros((d, d)), c.dt * np.eye(d)])
        self.A, self.B = A, B
        # stacked e_1..e_N = Psi e_0 + Phi a
        Psi = np.zeros((N * n, n))
        Phi = np.zeros((N * n, N * d))
        Ak = np.eye(n)
        for k in range(N):
            Ak = A @ Ak
            Psi[k * n : (k + 1) * n] = Ak
            for j in range(k + 1):
                Phi[k * n : (k + 1) * n, j * d : (j + 1) * d] = np.linalg.matrix_power(A, k - j) @ B
        weights = np.ones(N)
        weights[-1] = 0.0  # e_N carries no stage cost
        Qbar = np.kron(np.diag(weights), c.Q)
        Rbar = np.kron(np.eye(N), c.R)
        self.Psi, self.Phi = Psi, Phi
        self.H = 2.0 * (Phi.T @ Qbar @ Phi + Rbar)
        self.F = 2.0 * Phi.T @ Qbar @ Psi
        self._Qbar, self._Rbar = Qbar, Rbar
        self.dim = d
        self.warm = np.zeros(N * d)

    def reset(self) -> None:
        self.warm = np.zeros_like(self.warm)

    def cost(self, e0, a_seq) -> float:
        e0 = np.asarray(e0, dtype=np.float64)
        a = np.asarray(a_seq, dtype=np.float64).reshape(-1)
        E = self.Psi @ e0 + self.Phi @ a
        return float(e0 @ self.cfg.Q @ e0 + E @ self._Qbar @ E + a @ self._Rbar @ a)

    def solve(self, state, goal, warm=None) -> np.ndarray:
        """Full optimised action sequence (N, d)."""
        state = np.asarray(state, dtype=np.float64)
        if not np.all(np.isfinite(state)):
            raise ValueError("non-finite state")
        d = self.dim
        goal_state = np.concatenate([np.asarray(goal, dtype=np.float64).reshape(d), np.zeros(d)])
        e0 = state - goal_state
        lin = self.F @ e0
        lim = self.cfg.a_max
        a = np.clip(self.warm if warm is None else np.asarray(warm, dtype=np.float64).reshape(-1), -lim, lim)
        best, best_cost = a, self.cost(e0, a)
        for _ in range(self.cfg.iterations):
            a = np.clip(a - self.cfg.step * (self.H @ a + lin), -lim, lim)
        c = self.cost(e0, a)
        if c <= best_cost:
            best, best_cost = a, c
        self.last_cost = best_cost
        return best.reshape(self.cfg.horizon, d)

    def plan(self, state, goal) -> np.ndarray:
        """First action of the optimised sequence; stores the shifted warm start."""
        seq = self.solve(state, goal)
        self.warm = np.concatenate([seq[1:].reshape(-1), np.zeros(self.dim)])
        return seq[0].copy()


def mpc_plan(planner: MpcPlanner, position, velocity, goal) -> np.ndarray:
    return planner.plan(np.concatenate([position, velocity]), goal)


# --- sampling planner for racing ---------------------------------------


@dataclass
class SamplerConfig:
    lateral_offsets: tuple = (-1.2, -0.6, 0.0, 0.6, 1.2)
    velocities: tuple = (2.0, 4.0, 6.0, 8.0)
    # arc length, max curvature, similarity, raceline error, collision, low speed, speed x curvature
    weights: tuple = (1.0, 1.0, 0.5, 1.0, 100.0, 2.0, 1.0)
    n_points: int = 10
    clearance: float = 0.5
    rollout_time: float = 1.5
    rollout_distance: float = 5.0

    def __post_init__(self):
        if len(self.weights) != 7 or min(self.weights) < 0:
            raise ValueError("need seven non-negative cost weights")
        if not self.lateral_offsets or not self.velocities:
            raise ValueError("sampling grids must be non-empty")


@dataclass
class SampledPlan:
    action: RaceAction
    cost: float
    all_collide: bool
    terms: np.ndarray


class SamplingPlanner:
    """Scores a grid of (lateral offset, target speed) spline plans; keeps the previous choice."""

    def __init__(self, track: Track, params: VehicleParams, cfg: SamplerConfig | None = None):
        self.track = track
        self.params = params
        self.cfg = cfg or SamplerConfig()
        self.previous: RaceAction | None = None

    def reset(self) -> None:
        self.previous = None

    def candidate_terms(self, car: CarState, opponents, action: RaceAction) -> np.ndarray:
        tr, p, cfg = self.track, self.params, self.cfg
        plan: LocalPlan = make_plan(car, action, tr, p)
        t = np.linspace(0.0, plan.length, cfg.n_points + 1)
        e = eval_cubic(plan.coeffs, t)
        xy = tr.to_cartesian(plan.s0 + t, e)
        arc = float(np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1)))
        de = eval_cubic_d1(plan.coeffs, t)
        dde = eval_cubic_d2(plan.coeffs, t)
        kappa = np.abs(dde) / np.power(1.0 + de**2, 1.5) + np.abs(tr.curvature(plan.s0 + t))
        kmax = float(np.max(kappa))
        prev = self.previous
        similarity = 0.0 if prev is None else abs(action.e_f - prev.e_f) + abs(action.v_f - prev.v_f) / p.v_max
        raceline = float(np.mean(np.abs(e)))
        # kinematic rollout: the spline, then holding e_f, at the mean of current and target speed
        v_mean = max(0.5 * (car.v + action.v_f), 0.5)
        extra = max(max(v_mean * cfg.rollout_time, cfg.rollout_distance) - plan.length, 0.0)
        t_ext = plan.length + np.linspace(0.0, extra, cfg.n_points + 1)[1:]
        path = np.vstack([xy, tr.to_cartesian(plan.s0 + t_ext, np.full(t_ext.shape, action.e_f))])
        times = np.cumsum(np.concatenate([[0.0], np.linalg.norm(np.diff(path, axis=0), axis=1)])) / v_mean
        hit = bool(np.any(np.abs(e) >= tr.half_width(plan.s0 + t) - p.half_width))
        for o in opponents:
            pred = o.position()[None, :] + times[:, None] * o.velocity()[None, :]
            if np.any(np.linalg.norm(path - pred, axis=1) <= p.diameter + cfg.clearance):
                hit = True
                break
        low_speed = (p.v_max - action.v_f) / p.v_max
        speed_curv = (action.v_f / p.v_max) ** 2 * kmax / 0.2
        return np.array([arc / plan.length, kmax / 0.2, similarity, raceline, float(hit), low_speed, speed_curv])

    def plan(self, car: CarState, opponents) -> SampledPlan:
        cfg = self.cfg
        w = np.asarray(cfg.weights)
        best = None
        any_free = False
        for e_f in cfg.lateral_offsets:
            for v_f in cfg.velocities:
                act = RaceAction(float(e_f), float(v_f))
                terms = self.candidate_terms(car, opponents, act)
                total = float(w @ terms)
                any_free |= terms[4] == 0.0
                key = (round(total, 12), abs(e_f))
                if best is None or key < best[0]:
                    best = (key, act, total, terms)
        _, act, total, terms = best
        self.previous = act
        return SampledPlan(act, total, not any_free, terms)


def sample_local_plans(planner: SamplingPlanner, car: CarState, opponents) -> SampledPlan:
    return planner.plan(car, opponents)
