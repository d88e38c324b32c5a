"""Multi-robot navigation with double-integrator agents.

Agent 0 is the ego robot; the others drive to their own goals with a PD law
plus a short-range repulsion whose radius ``D_s`` is drawn per agent and
hidden from the ego. The ego is protected by pairwise barriers evaluated
under a constant-velocity prediction of the other agents.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..cbf import BarrierSet, FilterResult, GammaSource, apply_gamma_source, filter_action

FRAME_FIELDS = 7  # rel x, rel y, rel vx, rel vy, goal x, goal y, present


@dataclass
class NavConfig:
    dt: float = 0.1
    episode_seconds: float = 15.0
    arena: float = 20.0
    a_max: float = 1.0
    v_cap: float = 2.0
    collision_radius: float = 0.5
    goal_radius: float = 0.5
    ego_safety_distance: float = 1.0
    k_obs: int = 6
    frame_stack: int = 5
    min_agents: int = 3
    max_agents: int = 7
    ds_choices: tuple = (0.0, 5.0, 6.0)
    ds_probs: tuple = (0.5, 0.25, 0.25)
    fixed_ds: float | None = None
    min_separation: float = 2.0
    kp: float = 4.0
    kd: float = 3.0
    kr: float = 3.0
    waypoint_bound: float = 1.0
    opponent_model: str = "goal"  # "goal" or "cvm"
    cvm_speed: float = 1.5
    max_placement_tries: int = 1000

    @property
    def horizon(self) -> int:
        return int(round(self.episode_seconds / self.dt))

    @property
    def frame_dim(self) -> int:
        return FRAME_FIELDS * self.k_obs + 8


@dataclass
class NavWorld:
    """Joint state; row 0 of every array is the ego robot."""

    pos: np.ndarray
    vel: np.ndarray
    goals: np.ndarray
    ds: np.ndarray
    dt: float
    a_max: float
    ego_ds: float
    horizon: int
    t: int = 0
    d0: float = 1.0

    @property
    def n_agents(self) -> int:
        return self.pos.shape[0]

    def copy(self) -> "NavWorld":
        return copy.deepcopy(self)


def clamp_accel(a, a_max: float) -> np.ndarray:
    return np.clip(a, -a_max, a_max)


def cap_speed(v: np.ndarray, v_cap: float) -> np.ndarray:
    speed = np.linalg.norm(v, axis=-1, keepdims=True)
    factor = np.where(speed > v_cap, v_cap / np.maximum(speed, 1e-300), 1.0)
    return v * factor


def nav_step(world: NavWorld, ego_accel, opp_accels, v_cap: float = np.inf) -> NavWorld:
    """Advance every agent one tick: ``p' = p + dt v``, ``v' = v + dt a``, then cap speed."""
    acc = np.vstack([np.reshape(ego_accel, (1, 2)), np.reshape(opp_accels, (-1, 2))])
    if acc.shape != world.pos.shape:
        raise ValueError("need one acceleration per agent")
    acc = clamp_accel(acc, world.a_max)
    nxt = world.copy()
    nxt.pos = world.pos + world.dt * world.vel
    nxt.vel = cap_speed(world.vel + world.dt * acc, v_cap)
    nxt.t = world.t + 1
    return nxt


def waypoint_controller(vel, waypoint, kp: float = 4.0, kd: float = 3.0, a_max: float = 1.0) -> np.ndarray:
    """PD law toward a waypoint given relative to the robot."""
    return clamp_accel(kp * np.asarray(waypoint, dtype=np.float64) - kd * np.asarray(vel, dtype=np.float64), a_max)


def opponent_policy(world: NavWorld, j: int, kp: float = 4.0, kd: float = 3.0, kr: float = 3.0) -> np.ndarray:
    """Goal-seeking PD plus linear repulsion from agents closer than ``D_s``."""
    p, v = world.pos[j], world.vel[j]
    a = kp * (world.goals[j] - p) - kd * v
    ds = world.ds[j]
    if ds > 0.0:
        diff = p - np.delete(world.pos, j, axis=0)
        dist = np.linalg.norm(diff, axis=1)
        near = (dist < ds) & (dist > 0.0)
        if np.any(near):
            push = kr * (ds - dist[near])[:, None] * diff[near] / dist[near][:, None]
            a = a + push.sum(axis=0)
    return clamp_accel(a, world.a_max)


def nav_barrier(dp, dv, ds: float, a_max: float):
    """Pairwise braking barrier ``dp'dv/|dp| + sqrt(a_max (|dp| - D_s))``.

    Inside the safety distance the root term is continued as
    ``-sqrt(a_max (D_s - |dp|))``. Works on stacked (..., 2) inputs.
    """
    dp = np.asarray(dp, dtype=np.float64)
    dv = np.asarray(dv, dtype=np.float64)
    dist = np.linalg.norm(dp, axis=-1)
    if np.any(dist <= 0.0):
        raise ValueError("coincident positions")
    gap = dist - ds
    root = np.sign(gap) * np.sqrt(a_max * np.abs(gap))
    return np.sum(dp * dv, axis=-1) / dist + root


def nav_reward(d_prev: float, d_next: float, d0: float, reached: bool = False) -> float:
    """Progress toward the goal normalised by the initial distance.

    On the goal-reaching step the remaining distance is paid out as well, so
    a completed episode sums to exactly 1.
    """
    if reached:
        return d_prev / d0
    return (d_prev - d_next) / d0


def nav_cost(world: NavWorld, radius: float) -> int:
    if world.n_agents < 2:
        return 0
    dist = np.linalg.norm(world.pos[1:] - world.pos[0], axis=1)
    return int(np.min(dist) <= radius)


def _sample_points(rng, n, arena, min_sep, tries, existing=None):
    pts = [] if existing is None else list(existing)
    start = len(pts)
    for _ in range(n):
        for _attempt in range(tries):
            c = rng.uniform(0.0, arena, size=2)
            if all(np.linalg.norm(c - q) >= min_sep for q in pts[start:]):
                pts.append(c)
                break
        else:
            raise RuntimeError("could not place agents with the requested separation")
    return np.array(pts[start:])


def sample_ds(rng, cfg: NavConfig, size: int) -> np.ndarray:
    if cfg.fixed_ds is not None:
        return np.full(size, float(cfg.fixed_ds))
    idx = rng.choice(len(cfg.ds_choices), size=size, p=np.asarray(cfg.ds_probs) / np.sum(cfg.ds_probs))
    return np.asarray(cfg.ds_choices, dtype=np.float64)[idx]


def nav_reset(rng: np.random.Generator, cfg: NavConfig) -> NavWorld:
    """Random agent count, start/goal layout and opponent safety distances."""
    n = int(rng.integers(cfg.min_agents, cfg.max_agents + 1))
    for _ in range(cfg.max_placement_tries):
        starts = _sample_points(rng, n, cfg.arena, cfg.min_separation, cfg.max_placement_tries)
        goals = _sample_points(rng, n, cfg.arena, cfg.min_separation, cfg.max_placement_tries)
        vel = np.zeros((n, 2))
        ds = np.concatenate([[cfg.ego_safety_distance], sample_ds(rng, cfg, n - 1)])
        if cfg.opponent_model == "cvm":
            ang = rng.uniform(0.0, 2 * np.pi, size=n - 1)
            spd = rng.uniform(0.0, cfg.cvm_speed, size=n - 1)
            vel[1:] = np.stack([np.cos(ang), np.sin(ang)], axis=1) * spd[:, None]
        d0 = float(np.linalg.norm(goals[0] - starts[0]))
        if d0 <= cfg.goal_radius:
            continue
        world = NavWorld(starts, vel, goals, ds, cfg.dt, cfg.a_max, cfg.ego_safety_distance, cfg.horizon, 0, d0)
        if cfg.opponent_model == "cvm" and np.any(ego_barrier_values(world) < 0.0):
            continue
        return world
    raise RuntimeError("could not sample a valid initial configuration")


def ego_barrier_values(world: NavWorld) -> np.ndarray:
    if world.n_agents < 2:
        return np.zeros(0)
    dp = world.pos[0] - world.pos[1:]
    dv = world.vel[0] - world.vel[1:]
    return nav_barrier(dp, dv, world.ego_ds, world.a_max)


def nearest_opponents(world: NavWorld, k: int) -> np.ndarray:
    if world.n_agents < 2:
        return np.zeros(0, dtype=int)
    dist = np.linalg.norm(world.pos[1:] - world.pos[0], axis=1)
    return 1 + np.argsort(dist, kind="stable")[:k]


def nav_barrier_set(world: NavWorld, v_cap: float, k: int | None = None) -> BarrierSet:
    """Ego-vs-opponent barriers with the ego action being its acceleration.

    Opponents are predicted with constant velocity; the ego prediction is the
    exact one-step integrator including the speed cap.
    """
    idx = nearest_opponents(world, world.n_agents - 1 if k is None else k)
    p0, v0 = world.pos[0], world.vel[0]
    opp_p = world.pos[idx]
    opp_v = world.vel[idx]
    dt = world.dt
    ds, a_max = world.ego_ds, world.a_max
    dp_next = (p0 + dt * v0) - (opp_p + dt * opp_v)  # action independent
    h_now = nav_barrier(p0 - opp_p, v0 - opp_v, ds, a_max) if len(idx) else np.zeros(0)

    def predict(actions):
        actions = np.atleast_2d(actions)
        v_next = cap_speed(v0[None, :] + dt * actions, v_cap)
        dv = v_next[:, None, :] - opp_v[None, :, :]
        return nav_barrier(np.broadcast_to(dp_next, dv.shape), dv, ds, a_max)

    speed = np.linalg.norm(v0)
    brake = -a_max * v0 / speed if speed > 0 else np.zeros(2)
    return BarrierSet([("pair", 0, int(j)) for j in idx], h_now, predict, brake)


@dataclass
class NavStep:
    obs: np.ndarray
    reward: float
    cost: int
    done: bool
    info: dict = field(default_factory=dict)


class NavEnv:
    """Stateful wrapper: frame stacking, safety filtering and episode bookkeeping.

    ``step`` takes the ego's nominal acceleration and a barrier coefficient
    (or a :class:`GammaSource`); ``waypoint_accel`` turns a policy waypoint
    into that nominal acceleration.
    """

    def __init__(self, cfg: NavConfig | None = None, seed: int | None = None, record: bool = False):
        self.cfg = cfg or NavConfig()
        self.rng = np.random.default_rng(seed)
        self.world: NavWorld | None = None
        self.frames: deque = deque(maxlen=self.cfg.frame_stack)
        self.record = record
        self.trace: list = []
        self.episode_return = 0.0
        self.episode_cost = 0
        self.last_filter: FilterResult | None = None

    @property
    def obs_dim(self) -> int:
        return self.cfg.frame_dim * self.cfg.frame_stack

    @property
    def accel_bounds(self):
        a = self.cfg.a_max
        return np.array([-a, -a]), np.array([a, a])

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        self.world = nav_reset(rng if rng is not None else self.rng, self.cfg)
        frame = self.frame()
        self.frames.clear()
        for _ in range(self.cfg.frame_stack):
            self.frames.append(frame)
        self.trace = []
        self.episode_return = 0.0
        self.episode_cost = 0
        return self.observation()

    def frame(self) -> np.ndarray:
        w, cfg = self.world, self.cfg
        out = np.zeros(cfg.frame_dim)
        idx = nearest_opponents(w, cfg.k_obs)
        p0, v0 = w.pos[0], w.vel[0]
        scale_p = cfg.arena / 2.0
        for slot, j in enumerate(idx):
            base = FRAME_FIELDS * slot
            out[base : base + 2] = (w.pos[j] - p0) / scale_p
            out[base + 2 : base + 4] = (w.vel[j] - v0) / cfg.v_cap
            out[base + 4 : base + 6] = (w.goals[j] - p0) / scale_p
            out[base + 6] = 1.0
        tail = FRAME_FIELDS * cfg.k_obs
        out[tail : tail + 2] = p0 / scale_p - 1.0
        out[tail + 2 : tail + 4] = v0 / cfg.v_cap
        out[tail + 4 : tail + 6] = w.goals[0] / scale_p - 1.0
        out[tail + 6 : tail + 8] = (w.goals[0] - p0) / scale_p
        return out

    def observation(self) -> np.ndarray:
        return np.concatenate(list(self.frames))

    def waypoint_accel(self, waypoint) -> np.ndarray:
        b = self.cfg.waypoint_bound
        wp = np.clip(np.asarray(waypoint, dtype=np.float64), -b, b)
        return waypoint_controller(self.world.vel[0], wp, self.cfg.kp, self.cfg.kd, self.cfg.a_max)

    def goal_accel(self) -> np.ndarray:
        """Waypoint controller aimed straight at the goal (scripted nominal)."""
        delta = self.world.goals[0] - self.world.pos[0]
        b = self.cfg.waypoint_bound
        return self.waypoint_accel(np.clip(delta, -b, b))

    def barrier_set(self) -> BarrierSet:
        return nav_barrier_set(self.world, self.cfg.v_cap, self.cfg.k_obs)

    def opponent_accels(self) -> np.ndarray:
        w, cfg = self.world, self.cfg
        if cfg.opponent_model == "cvm":
            return np.zeros((w.n_agents - 1, 2))
        return np.array([opponent_policy(w, j, cfg.kp, cfg.kd, cfg.kr) for j in range(1, w.n_agents)]).reshape(-1, 2)

    def step(self, nominal_accel, gamma=None) -> NavStep:
        """Filter ``nominal_accel`` (unless ``gamma`` is None) and advance the world."""
        w, cfg = self.world, self.cfg
        lo, hi = self.accel_bounds
        nominal = np.clip(np.asarray(nominal_accel, dtype=np.float64), lo, hi)
        barriers = self.barrier_set()
        if gamma is None:
            result = None
            accel = nominal
        else:
            source = gamma if isinstance(gamma, GammaSource) else None
            if source is None:
                result = filter_action(nominal, barriers, gamma, lo, hi)
            else:
                result = apply_gamma_source(source, nominal, barriers, lo, hi, state=w)
            accel = result.action
        self.last_filter = result
        h_before = barriers.h_now
        d_prev = float(np.linalg.norm(w.goals[0] - w.pos[0]))
        nxt = nav_step(w, accel, self.opponent_accels(), cfg.v_cap)
        self.world = nxt
        d_next = float(np.linalg.norm(nxt.goals[0] - nxt.pos[0]))
        collided = bool(nav_cost(nxt, cfg.collision_radius))
        reached = (not collided) and d_next <= cfg.goal_radius
        reward = nav_reward(d_prev, d_next, w.d0, reached)
        timeout = nxt.t >= nxt.horizon
        done = collided or reached or timeout
        self.frames.append(self.frame())
        self.episode_return += reward
        self.episode_cost = max(self.episode_cost, int(collided))
        h_after = ego_barrier_values(nxt) if nxt.n_agents > 1 else np.zeros(0)
        info = {
            "collision": collided,
            "success": reached,
            "timeout": timeout and not (collided or reached),
            "feasible": True if result is None else result.feasible,
            "h_before": h_before,
            "h_after": h_after,
            "accel": accel,
            "nominal": nominal,
            "t": nxt.t,
        }
        if self.record:
            self.trace.append({
                "t": int(nxt.t),
                "pos": nxt.pos.tolist(),
                "vel": nxt.vel.tolist(),
                "nominal": nominal.tolist(),
                "accel": np.asarray(accel).tolist(),
                "gamma": None if result is None or result.gammas is None else result.gammas.tolist(),
                "h": h_after.tolist(),
                "filter": None if result is None else result.to_dict(),
            })
        return NavStep(self.observation(), reward, int(collided), done, info)

