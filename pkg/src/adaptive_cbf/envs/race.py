"""Multi-car racing on a closed track with a kinematic bicycle model.

Cars are integrated with the Euler-discretised bicycle model in mixed
Cartesian/Frenet coordinates and re-projected onto the centerline after
every physics tick. The ego is protected by two wall barriers (one per side)
and braking barriers toward the nearest opponents; opponents follow the
centerline at a randomly scaled reference speed and ignore everyone else.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..cbf import BarrierSet, FilterResult, filter_action, optimal_decay_filter
from .track import Track


@dataclass
class VehicleParams:
    l_r: float = 0.17
    l_f: float = 0.17
    v_max: float = 8.0
    a_lim: float = 6.0
    delta_lim: float = 0.4
    a_brake: float = 6.0
    a_max: float = 6.0
    d_margin: float = 0.3
    safety_distance: float = 0.5
    diameter: float = 0.5
    l_min: float = 1.0
    l_max: float = 5.0
    l_scale: float = 8.0
    k_v: float = 2.0
    a_lat: float = 4.0

    @property
    def half_width(self) -> float:
        return 0.5 * self.diameter

    @property
    def beta_lim(self) -> float:
        return float(slip_from_steer(self.delta_lim, self))


@dataclass
class CarState:
    x: float
    y: float
    psi: float
    v: float
    e: float
    s: float
    beta: float = 0.0
    progress: float = 0.0  # unwrapped arc length
    crashed: bool = False

    def velocity(self) -> np.ndarray:
        return self.v * np.array([np.cos(self.psi + self.beta), np.sin(self.psi + self.beta)])

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class CarControl:
    a: float
    beta: float
    delta: float = 0.0


@dataclass
class RaceAction:
    e_f: float
    v_f: float


def slip_from_steer(delta, params: VehicleParams):
    return np.arctan(params.l_r / (params.l_f + params.l_r) * np.tan(delta))


def car_on_track(track: Track, s: float, e: float = 0.0, v: float = 0.0) -> CarState:
    s = float(track.wrap(s))
    x, y = track.to_cartesian(s, e)
    return CarState(float(x), float(y), float(track.heading(s)), v, e, s, 0.0, s)


def race_step(car: CarState, control: CarControl, track: Track, dt: float, params: VehicleParams,
              reproject: bool = True) -> CarState:
    """One Euler tick of the bicycle model, then Cartesian -> Frenet re-projection."""
    beta = float(control.beta)
    psi_c = float(track.heading(car.s))
    k_c = float(track.curvature(car.s))
    denom = 1.0 - car.e * k_c
    if denom <= 0.0:
        raise ValueError("car left the valid Frenet strip")
    chi = car.psi + beta
    x = car.x + car.v * np.cos(chi) * dt
    y = car.y + car.v * np.sin(chi) * dt
    psi = car.psi + car.v / params.l_r * np.sin(beta) * dt
    v = max(car.v + control.a * dt, 0.0)
    ds = car.v * np.cos(chi - psi_c) / denom * dt
    e = car.e + car.v * np.sin(chi - psi_c) * dt
    s_int = car.s + ds
    nxt = CarState(x, y, psi, v, e, float(track.wrap(s_int)), beta, car.progress + ds, car.crashed)
    if reproject:
        s_p, e_p = track.project(x, y, s_guess=s_int)
        shift = (s_p - nxt.s + track.length / 2) % track.length - track.length / 2
        nxt.s, nxt.e = s_p, e_p
        nxt.progress += shift
    return nxt


def lateral_rate(car: CarState, track: Track) -> float:
    return car.v * np.sin(car.psi + car.beta - float(track.heading(car.s)))


def wall_barrier(car: CarState, track: Track, side: int, params: VehicleParams) -> float:
    """``|e_wall - e| - e_dot^2 / a_brake - d_margin`` with ``e_wall`` on the given side (+1 left, -1 right)."""
    e_wall = side * float(track.half_width(car.s))
    e_dot = lateral_rate(car, track)
    return abs(e_wall - car.e) - e_dot**2 / params.a_brake - params.d_margin


def speed_dependent_braking(v, params: VehicleParams):
    return params.a_max * (1.0 - np.asarray(v) / params.v_max)


def opponent_barrier(ego: CarState, opp: CarState, params: VehicleParams) -> float:
    """Braking barrier toward one opponent with ``a_max(v) = a_max (1 - v / v_max)``."""
    dp = ego.position() - opp.position()
    dist = float(np.linalg.norm(dp))
    if dist <= 0.0:
        raise ValueError("coincident positions")
    dv = ego.velocity() - opp.velocity()
    gap = dist - params.safety_distance
    brake = max(float(speed_dependent_braking(ego.v, params)), 0.0)
    return float(dp @ dv / dist + np.sign(gap) * np.sqrt(brake * abs(gap)))


# --- local planning -----------------------------------------------------


def lookahead(v: float, params: VehicleParams) -> float:
    return params.l_min + v * (params.l_max - params.l_min) / params.l_scale


def cubic_coeffs(e0: float, m0: float, e1: float, m1: float, length: float) -> np.ndarray:
    """Coefficients of ``e(t) = c0 + c1 t + c2 t^2 + c3 t^3`` matching value and slope at both ends."""
    L = float(length)
    c2 = (3.0 * (e1 - e0) - (2.0 * m0 + m1) * L) / L**2
    c3 = (2.0 * (e0 - e1) + (m0 + m1) * L) / L**3
    return np.array([e0, m0, c2, c3])


def eval_cubic(c, t):
    t = np.asarray(t, dtype=np.float64)
    return c[0] + t * (c[1] + t * (c[2] + t * c[3]))


def eval_cubic_d1(c, t):
    t = np.asarray(t, dtype=np.float64)
    return c[1] + t * (2 * c[2] + 3 * c[3] * t)


def eval_cubic_d2(c, t):
    return 2 * c[2] + 6 * c[3] * np.asarray(t, dtype=np.float64)


@dataclass
class LocalPlan:
    s0: float
    length: float
    coeffs: np.ndarray
    v_f: float

    def points(self, track: Track, n: int = 10) -> np.ndarray:
        t = np.linspace(0.0, self.length, n + 1)
        return track.to_cartesian(self.s0 + t, eval_cubic(self.coeffs, t))


def make_plan(car: CarState, action: RaceAction, track: Track, params: VehicleParams) -> LocalPlan:
    length = lookahead(car.v, params)
    chi = np.clip(car.psi + car.beta - float(track.heading(car.s)), -1.2, 1.2)
    slope = float(np.tan(chi) * (1.0 - car.e * float(track.curvature(car.s))))
    coeffs = cubic_coeffs(car.e, slope, float(action.e_f), 0.0, length)
    return LocalPlan(car.s, length, coeffs, float(action.v_f))


def plan_to_control(car: CarState, action: RaceAction, track: Track, params: VehicleParams,
                    plan: LocalPlan | None = None) -> CarControl:
    """Pure pursuit on the spline plus a proportional speed loop."""
    if plan is None:
        plan = make_plan(car, action, track, params)
    t_pp = 0.5 * plan.length
    target = track.to_cartesian(plan.s0 + t_pp, float(eval_cubic(plan.coeffs, t_pp)))
    dx, dy = target[0] - car.x, target[1] - car.y
    c, s = np.cos(car.psi), np.sin(car.psi)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    dist = max(np.hypot(local_x, local_y), 1e-6)
    alpha = np.arctan2(local_y, local_x)
    wheelbase = params.l_f + params.l_r
    delta = float(np.clip(np.arctan(2.0 * wheelbase * np.sin(alpha) / dist), -params.delta_lim, params.delta_lim))
    a = float(np.clip(params.k_v * (action.v_f - car.v), -params.a_lim, params.a_lim))
    return CarControl(a, float(slip_from_steer(delta, params)), delta)


def reference_speed(track: Track, params: VehicleParams, window: float = 6.0) -> np.ndarray:
    """Curvature-limited speed profile on the track samples (min over a look-ahead window)."""
    k = np.abs(track.k_c)
    v = np.minimum(params.v_max, np.sqrt(params.a_lat / np.maximum(k, 1e-9)))
    n = v.size
    ds = track.length / n
    w = max(1, int(round(window / ds)))
    ext = np.concatenate([v, v[:w]])
    return np.array([ext[i : i + w + 1].min() for i in range(n)])


# --- rewards, costs, ranking --------------------------------------------


def race_reward(ego_progress: float, opp_progress, terminal: bool, scale: float = 5.0) -> float:
    """Sum over opponents of ``tanh(d_fr / 5)``; paid only at the end of the episode."""
    if not terminal:
        return 0.0
    d = ego_progress - np.asarray(opp_progress, dtype=np.float64)
    return float(np.sum(np.tanh(d / scale)))


def wall_hit(car: CarState, track: Track, params: VehicleParams) -> bool:
    return abs(car.e) >= float(track.half_width(car.s)) - params.half_width


def cars_collide(a: CarState, b: CarState, params: VehicleParams) -> bool:
    return float(np.hypot(a.x - b.x, a.y - b.y)) <= params.diameter


def race_cost(ego: CarState, opponents, track: Track, params: VehicleParams) -> int:
    if wall_hit(ego, track, params):
        return 1
    return int(any(cars_collide(ego, o, params) for o in opponents))


def ranks(progress, crashed) -> np.ndarray:
    """Race positions (1 = leader); crashed cars rank behind every running car."""
    progress = np.asarray(progress, dtype=np.float64)
    crashed = np.asarray(crashed, dtype=bool)
    order = np.lexsort((-progress, crashed))
    out = np.empty(progress.size, dtype=int)
    out[order] = np.arange(1, progress.size + 1)
    return out


# --- environment --------------------------------------------------------


@dataclass
class RaceConfig:
    dt: float = 0.02
    control_every: int = 5
    episode_seconds: float = 15.0
    n_opponents: int = 2
    opponent_gap: float = 3.0
    scale_mean: float = 0.60
    scale_std: float = 0.05
    scale_clip: tuple = (0.4, 0.8)
    k_barrier_opponents: int = 2
    frame_stack: int = 5
    n_waypoints: int = 10
    waypoint_spacing: float = 1.0
    lateral_margin: float = 0.3
    terminate_on_lap: bool = False
    per_step_reward: bool = False
    vehicle: VehicleParams = field(default_factory=VehicleParams)

    @property
    def control_dt(self) -> float:
        return self.dt * self.control_every

    @property
    def horizon(self) -> int:
        return int(round(self.episode_seconds / self.control_dt))

    @property
    def frame_dim(self) -> int:
        return 4 + 4 * self.k_barrier_opponents + 3 * self.n_waypoints


@dataclass
class RaceWorld:
    ego: CarState
    opponents: list
    scales: np.ndarray
    t: int = 0
    start_progress: float = 0.0

    def copy(self) -> "RaceWorld":
        return copy.deepcopy(self)


def race_reset(rng: np.random.Generator, cfg: RaceConfig, track: Track, start_s: float | None = None) -> RaceWorld:
    """Ego at a random point of the first half of the track, opponents lined up ahead."""
    s0 = float(rng.uniform(0.0, track.length / 2)) if start_s is None else float(start_s)
    ego = car_on_track(track, s0)
    opps = []
    for i in range(cfg.n_opponents):
        car = car_on_track(track, s0 + cfg.opponent_gap * (i + 1))
        car.progress = s0 + cfg.opponent_gap * (i + 1)
        opps.append(car)
    ego.progress = s0
    scales = np.clip(rng.normal(cfg.scale_mean, cfg.scale_std, size=cfg.n_opponents), *cfg.scale_clip)
    return RaceWorld(ego, opps, scales, 0, s0)


def _predict_ego(ego: CarState, a, beta, track: Track, params: VehicleParams, dt: float, n_sub: int):
    """Vectorised Euler rollout of the ego for a batch of held controls (no re-projection)."""
    a = np.asarray(a, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    m = a.shape[0]
    x = np.full(m, ego.x)
    y = np.full(m, ego.y)
    psi = np.full(m, ego.psi)
    v = np.full(m, ego.v)
    e = np.full(m, ego.e)
    s = np.full(m, ego.s)
    for _ in range(n_sub):
        psi_c = track.heading(s)
        k_c = track.curvature(s)
        chi = psi + beta
        x, y, psi, v, s, e = (
            x + v * np.cos(chi) * dt,
            y + v * np.sin(chi) * dt,
            psi + v / params.l_r * np.sin(beta) * dt,
            np.maximum(v + a * dt, 0.0),
            s + v * np.cos(chi - psi_c) / (1.0 - e * k_c) * dt,
            e + v * np.sin(chi - psi_c) * dt,
        )
    return x, y, psi, v, e, s


def race_barrier_set(world: RaceWorld, track: Track, cfg: RaceConfig) -> tuple[BarrierSet, np.ndarray]:
    """Wall barriers (left, right) and nearest-opponent barriers for the ego.

    The action is ``(a, beta)`` held over one control period. Returns the set
    and the group index of every barrier (0 = walls, 1 = opponents).
    """
    p = cfg.vehicle
    ego = world.ego
    T = cfg.control_dt
    opps = nearest_cars(ego, world.opponents, cfg.k_barrier_opponents)
    tags = [("wall", 1), ("wall", -1)] + [("opp", i) for i, _ in opps]
    h_now = [wall_barrier(ego, track, 1, p), wall_barrier(ego, track, -1, p)]
    h_now += [opponent_barrier(ego, o, p) for _, o in opps]
    opp_pos = np.array([o.position() + T * o.velocity() for _, o in opps]).reshape(-1, 2)
    opp_vel = np.array([o.velocity() for _, o in opps]).reshape(-1, 2)

    def predict(actions):
        actions = np.atleast_2d(actions)
        x, y, psi, v, e, s = _predict_ego(ego, actions[:, 0], actions[:, 1], track, p, cfg.dt, cfg.control_every)
        beta = actions[:, 1]
        chi = psi + beta
        e_dot = v * np.sin(chi - track.heading(s))
        hw = track.half_width(s)
        cols = [
            np.abs(hw - e) - e_dot**2 / p.a_brake - p.d_margin,
            np.abs(-hw - e) - e_dot**2 / p.a_brake - p.d_margin,
        ]
        if len(opps):
            vel = np.stack([v * np.cos(chi), v * np.sin(chi)], axis=1)
            dp = np.stack([x, y], axis=1)[:, None, :] - opp_pos[None, :, :]
            dv = vel[:, None, :] - opp_vel[None, :, :]
            dist = np.maximum(np.linalg.norm(dp, axis=-1), 1e-9)
            gap = dist - p.safety_distance
            brake = np.maximum(speed_dependent_braking(v, p), 0.0)[:, None]
            h_opp = np.sum(dp * dv, axis=-1) / dist + np.sign(gap) * np.sqrt(brake * np.abs(gap))
            cols += [h_opp[:, j] for j in range(h_opp.shape[1])]
        return np.stack(cols, axis=1)

    brake = np.array([-p.a_lim, 0.0])
    groups = np.array([0, 0] + [1] * len(opps))
    return BarrierSet(tags, np.array(h_now), predict, brake), groups


def nearest_cars(ego: CarState, others, k: int):
    d = [(float(np.hypot(o.x - ego.x, o.y - ego.y)), i, o) for i, o in enumerate(others)]
    d.sort(key=lambda t: (t[0], t[1]))
    return [(i, o) for _, i, o in d[:k]]


@dataclass
class RaceStep:
    obs: np.ndarray
    reward: float
    cost: int
    done: bool
    info: dict = field(default_factory=dict)


class RaceEnv:
    """Ego racing against centerline-tracking opponents; one step = one control period."""

    def __init__(self, cfg: RaceConfig | None = None, track: Track | None = None, seed: int | None = None,
                 record: bool = False):
        self.cfg = cfg or RaceConfig()
        self.track = track or Track.oval()
        self.rng = np.random.default_rng(seed)
        self.v_ref = reference_speed(self.track, self.cfg.vehicle)
        self.world: RaceWorld | None = None
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
    def control_bounds(self):
        p = self.cfg.vehicle
        return np.array([-p.a_lim, -p.beta_lim]), np.array([p.a_lim, p.beta_lim])

    @property
    def action_low(self) -> np.ndarray:
        hw = float(np.min(self.track.half_widths)) - self.cfg.lateral_margin
        return np.array([-hw, 0.0])

    @property
    def action_high(self) -> np.ndarray:
        hw = float(np.min(self.track.half_widths)) - self.cfg.lateral_margin
        return np.array([hw, self.cfg.vehicle.v_max])

    def reset(self, rng: np.random.Generator | None = None, start_s: float | None = None) -> np.ndarray:
        self.world = race_reset(rng if rng is not None else self.rng, self.cfg, self.track, start_s)
        f = self.frame()
        self.frames.clear()
        for _ in range(self.cfg.frame_stack):
            self.frames.append(f)
        self.trace = []
        self.episode_return = 0.0
        self.episode_cost = 0
        return self.observation()

    def ref_speed(self, s: float) -> float:
        return float(np.interp(self.track.wrap(s), self.track.s, self.v_ref, period=self.track.length))

    def frame(self) -> np.ndarray:
        w, cfg, tr = self.world, self.cfg, self.track
        p = cfg.vehicle
        ego = w.ego
        out = np.zeros(cfg.frame_dim)
        hw = float(tr.half_width(ego.s))
        out[0] = ego.v / p.v_max
        out[1] = ego.e / hw
        out[2] = np.angle(np.exp(1j * (ego.psi - float(tr.heading(ego.s)))))
        out[3] = ego.beta / p.beta_lim
        base = 4
        for slot, (_, o) in enumerate(nearest_cars(ego, w.opponents, cfg.k_barrier_opponents)):
            j = base + 4 * slot
            out[j] = np.tanh((o.progress - ego.progress) / 10.0)
            out[j + 1] = (o.e - ego.e) / hw
            out[j + 2] = o.v / p.v_max
            out[j + 3] = np.angle(np.exp(1j * (o.psi - ego.psi)))
        base += 4 * cfg.k_barrier_opponents
        c, s = np.cos(ego.psi), np.sin(ego.psi)
        ss = ego.s + cfg.waypoint_spacing * np.arange(1, cfg.n_waypoints + 1)
        pts = tr.position(ss) - np.array([ego.x, ego.y])
        out[base : base + 3 * cfg.n_waypoints : 3] = (c * pts[:, 0] + s * pts[:, 1]) / 10.0
        out[base + 1 : base + 3 * cfg.n_waypoints : 3] = (-s * pts[:, 0] + c * pts[:, 1]) / 10.0
        out[base + 2 : base + 3 * cfg.n_waypoints : 3] = tr.curvature(ss) * 5.0
        return out

    def observation(self) -> np.ndarray:
        return np.concatenate(list(self.frames))

    def plan_control(self, action) -> CarControl:
        a = np.clip(np.asarray(action, dtype=np.float64), self.action_low, self.action_high)
        return plan_to_control(self.world.ego, RaceAction(a[0], a[1]), self.track, self.cfg.vehicle)

    def opponent_control(self, i: int) -> CarControl:
        o = self.world.opponents[i]
        v_f = self.world.scales[i] * self.ref_speed(o.s)
        return plan_to_control(o, RaceAction(0.0, v_f), self.track, self.cfg.vehicle)

    def barrier_set(self):
        return race_barrier_set(self.world, self.track, self.cfg)

    def step(self, nominal_control, gammas=None, mode: str = "fixed") -> RaceStep:
        """Filter the nominal ``(a, beta)`` with per-group ``gammas`` and advance one control period.

        ``gammas`` is ``(gamma_wall, gamma_opp)``; ``None`` disables the filter.
        ``mode="optimal_decay"`` treats them as the nominal coefficients of the
        optimal-decay filter.
        """
        w, cfg, tr = self.world, self.cfg, self.track
        p = cfg.vehicle
        lo, hi = self.control_bounds
        nominal = np.clip(np.asarray(nominal_control, dtype=np.float64), lo, hi)
        barriers, groups = self.barrier_set()
        result = None
        if gammas is None:
            u = nominal
        else:
            g = np.asarray(gammas, dtype=np.float64).reshape(-1)
            per_barrier = g[groups] if g.size > 1 else np.full(groups.size, g[0])
            if mode == "optimal_decay":
                result = optimal_decay_filter(nominal, barriers, per_barrier, lo, hi)
            else:
                result = filter_action(nominal, barriers, per_barrier, lo, hi)
            u = result.action
        self.last_filter = result
        opp_controls = [self.opponent_control(i) for i in range(len(w.opponents))]
        ego_ctrl = CarControl(float(u[0]), float(u[1]))
        nxt = w.copy()
        collided = False
        for _ in range(cfg.control_every):
            nxt.ego = race_step(nxt.ego, ego_ctrl, tr, cfg.dt, p)
            for i, o in enumerate(nxt.opponents):
                if o.crashed:
                    continue
                nxt.opponents[i] = race_step(o, opp_controls[i], tr, cfg.dt, p)
            for i in range(len(nxt.opponents)):
                for j in range(i + 1, len(nxt.opponents)):
                    if cars_collide(nxt.opponents[i], nxt.opponents[j], p):
                        for k in (i, j):
                            nxt.opponents[k].crashed = True
                            nxt.opponents[k].v = 0.0
            if race_cost(nxt.ego, nxt.opponents, tr, p):
                collided = True
                nxt.ego.crashed = True
                break
        nxt.t = w.t + 1
        self.world = nxt
        lap = cfg.terminate_on_lap and nxt.ego.progress - nxt.start_progress >= tr.length
        timeout = nxt.t >= cfg.horizon
        done = collided or timeout or lap
        opp_prog = [o.progress for o in nxt.opponents]
        reward = race_reward(nxt.ego.progress, opp_prog, done)
        if cfg.per_step_reward and not done:
            reward = (race_reward(nxt.ego.progress, opp_prog, True) - race_reward(w.ego.progress, [o.progress for o in w.opponents], True)) / cfg.horizon
        self.frames.append(self.frame())
        self.episode_return += reward
        self.episode_cost = max(self.episode_cost, int(collided))
        info = {
            "collision": collided,
            "timeout": timeout and not collided,
            "lap": bool(lap),
            "feasible": True if result is None else result.feasible,
            "h_before": barriers.h_now,
            "control": np.asarray(u),
            "t": nxt.t,
        }
        if done:
            info["rank"] = int(self.ranks()[0])
        if self.record:
            self.trace.append({
                "t": int(nxt.t),
                "ego": [nxt.ego.x, nxt.ego.y, nxt.ego.psi, nxt.ego.v, nxt.ego.e, nxt.ego.s],
                "opponents": [[o.x, o.y, o.psi, o.v, o.e, o.s] for o in nxt.opponents],
                "control": np.asarray(u).tolist(),
                "gamma": None if result is None else result.gammas.tolist(),
                "h": barriers.h_now.tolist(),
                "filter": None if result is None else result.to_dict(),
            })
        return RaceStep(self.observation(), reward, int(collided), done, info)

    def ranks(self) -> np.ndarray:
        w = self.world
        prog = [w.ego.progress] + [o.progress for o in w.opponents]
        crashed = [w.ego.crashed] + [o.crashed for o in w.opponents]
        return ranks(prog, crashed)
