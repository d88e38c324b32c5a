"""Adapters between actor-critic outputs and environment steps.

A task owns one environment (and, in the planner-driven variant, the
nominal planner) and turns ``(raw action, gamma)`` into a filtered step.
"""

from __future__ import annotations

import numpy as np

from ..cbf import GammaSource
from ..controllers import MpcPlanner, SamplingPlanner, mpc_plan
from ..envs.nav import NavConfig, NavEnv
from ..envs.race import RaceAction, RaceConfig, RaceEnv, plan_to_control
from ..envs.track import Track


class NavTask:
    n_gamma = 1

    def __init__(self, cfg: NavConfig, ablate: bool = False, record: bool = False):
        self.env = NavEnv(cfg, record=record)
        self.ablate = ablate
        self.planner = MpcPlanner() if ablate else None
        self.act_dim = 0 if ablate else 2

    @property
    def obs_dim(self) -> int:
        return self.env.obs_dim

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        if self.planner is not None:
            self.planner.reset()
        return self.env.reset(rng)

    def nominal(self, action) -> np.ndarray:
        if self.ablate:
            w = self.env.world
            return mpc_plan(self.planner, w.pos[0], w.vel[0], w.goals[0])
        return self.env.waypoint_accel(action)

    def step(self, action, gamma, mode: str = "fixed"):
        g = float(np.reshape(gamma, -1)[0])
        if mode == "optimal_decay":
            return self.env.step(self.nominal(action), gamma=GammaSource("optimal_decay", g))
        return self.env.step(self.nominal(action), gamma=g)

    @staticmethod
    def outcome(info) -> dict:
        return {"success": bool(info.get("success", False)), "collision": bool(info["collision"])}


class RaceTask:
    n_gamma = 2

    def __init__(self, cfg: RaceConfig, track: Track | None = None, ablate: bool = False, record: bool = False):
        self.env = RaceEnv(cfg, track, record=record)
        self.ablate = ablate
        self.planner = SamplingPlanner(self.env.track, cfg.vehicle) if ablate else None
        self.act_dim = 0 if ablate else 2

    @property
    def obs_dim(self) -> int:
        return self.env.obs_dim

    def reset(self, rng: np.random.Generator, start_s: float | None = None) -> np.ndarray:
        if self.planner is not None:
            self.planner.reset()
        return self.env.reset(rng, start_s)

    def scale_action(self, action) -> np.ndarray:
        """Map a raw policy sample in roughly [-1, 1]^2 onto (e_f, v_f) bounds."""
        lo, hi = self.env.action_low, self.env.action_high
        u = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        return lo + 0.5 * (u + 1.0) * (hi - lo)

    def nominal(self, action) -> np.ndarray:
        env = self.env
        if self.ablate:
            plan = self.planner.plan(env.world.ego, env.world.opponents)
            ctrl = plan_to_control(env.world.ego, plan.action, env.track, env.cfg.vehicle)
        else:
            ef, vf = self.scale_action(action)
            ctrl = plan_to_control(env.world.ego, RaceAction(float(ef), float(vf)), env.track, env.cfg.vehicle)
        return np.array([ctrl.a, ctrl.beta])

    def step(self, action, gamma, mode: str = "fixed"):
        return self.env.step(self.nominal(action), gammas=np.reshape(gamma, -1), mode=mode)

    @staticmethod
    def outcome(info) -> dict:
        return {"success": not bool(info["collision"]), "collision": bool(info["collision"]),
                "rank": info.get("rank")}
