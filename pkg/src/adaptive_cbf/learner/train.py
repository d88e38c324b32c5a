"""Training loop: rollouts through the safety filter, PID multiplier, PPO update."""

from __future__ import annotations

import logging
import pickle
from collections import deque
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..envs.nav import NavConfig
from ..envs.race import RaceConfig
from ..numkit import Adam, linear_anneal
from .lagrange import LagrangeState, pid_lagrange_update, smooth_cost
from .model import ActorCritic, ModelSpec, logistic
from .ppo import PPOConfig, ppo_update
from .rollout import RolloutBuffer
from .tasks import NavTask, RaceTask

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "adaptive-cbf-checkpoint"
CHECKPOINT_VERSION = 1

METRIC_COLUMNS = (
    "iteration", "env_steps", "episodes", "mean_return", "ma_cost", "j_c", "lambda",
    "loss_pi", "loss_v", "L_R", "L_C", "entropy", "grad_norm", "approx_kl", "clip_frac",
    "mean_gamma", "aborted",
)


@dataclass
class TrainConfig:
    env: str = "nav"
    ablate: bool = False
    total_steps: int | None = None
    learning_rate: float = 3e-4
    discount: float = 0.99
    gae_lambda: float = 0.95
    n_minibatches: int = 32
    update_epochs: int = 10
    clip: float = 0.2
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    cost_limit: float = 0.25
    frame_stack: int | None = None
    n_envs: int | None = None
    n_steps: int = 2048
    pid_kp: float | None = None
    pid_ki: float = 0.1
    pid_kd: float = 0.1
    lambda_init: float = 1.0
    lambda_max: float = 100.0
    ema_alpha: float = 0.95
    eval_every: int = 10
    eval_episodes: int = 20
    norm_adv: bool = True
    norm_cost: bool = True
    clip_value: bool = True
    lambda_scaling: bool = False
    hidden: tuple = (64, 64)
    perturb_alpha: float | None = None
    init_log_std: float = -0.5
    ma_window: int = 100
    # environment knobs
    min_agents: int = 3
    max_agents: int = 7
    n_opponents: int = 2

    def resolved(self) -> "TrainConfig":
        """Copy with mode-dependent defaults filled in and values validated."""
        c = TrainConfig(**asdict(self))
        if c.env not in ("nav", "race"):
            raise ValueError(f"unknown environment {c.env!r}")
        if c.total_steps is None:
            c.total_steps = 200_000 if c.env == "nav" else 300_000
        if c.frame_stack is None:
            c.frame_stack = 1 if c.ablate else 5
        if c.n_envs is None:
            c.n_envs = 4 if c.env == "nav" else 2
        if c.pid_kp is None:
            c.pid_kp = 10.0 if c.env == "nav" else 1.0
        if c.perturb_alpha is None:
            c.perturb_alpha = 0.5 if c.ablate else 0.0
        c.hidden = tuple(int(h) for h in c.hidden)
        if not 0.0 <= c.cost_limit <= 1.0:
            raise ValueError("cost_limit must lie in [0, 1]")
        for name in ("learning_rate", "n_minibatches", "update_epochs", "clip", "n_steps", "n_envs",
                     "total_steps", "eval_every", "eval_episodes", "frame_stack", "ma_window", "lambda_max"):
            if getattr(c, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("discount", "gae_lambda"):
            if not 0.0 <= getattr(c, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if min(c.ent_coef, c.vf_coef, c.max_grad_norm, c.pid_kp, c.pid_ki, c.pid_kd, c.lambda_init) < 0:
            raise ValueError("coefficients and gains must be non-negative")
        if not 3 <= c.min_agents <= c.max_agents:
            raise ValueError("need 3 <= min_agents <= max_agents")
        if c.n_steps * c.n_envs < c.n_minibatches:
            raise ValueError("rollout smaller than the number of minibatches")
        return c

    @property
    def batch_size(self) -> int:
        return self.n_steps * self.n_envs

    @property
    def n_iterations(self) -> int:
        return max(1, int(np.ceil(self.total_steps / self.batch_size)))

    def ppo(self) -> PPOConfig:
        return PPOConfig(
            clip=self.clip, vf_coef=self.vf_coef, ent_coef=self.ent_coef, max_grad_norm=self.max_grad_norm,
            update_epochs=self.update_epochs, n_minibatches=self.n_minibatches, norm_adv=self.norm_adv,
            norm_cost=self.norm_cost, clip_value=self.clip_value, lambda_scaling=self.lambda_scaling,
        )

    def nav_config(self, **kw) -> NavConfig:
        base = dict(frame_stack=self.frame_stack, min_agents=self.min_agents, max_agents=self.max_agents)
        base.update(kw)
        return NavConfig(**base)

    def race_config(self, **kw) -> RaceConfig:
        base = dict(frame_stack=self.frame_stack, n_opponents=self.n_opponents)
        base.update(kw)
        return RaceConfig(**base)


def config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown training options: {sorted(unknown)}")
    return TrainConfig(**d)


def make_task(cfg: TrainConfig, record: bool = False, **env_kw):
    if cfg.env == "nav":
        return NavTask(cfg.nav_config(**env_kw), ablate=cfg.ablate, record=record)
    return RaceTask(cfg.race_config(**env_kw), ablate=cfg.ablate, record=record)


def build_model(cfg: TrainConfig, task, rng: np.random.Generator | None = None) -> ActorCritic:
    spec = ModelSpec(task.obs_dim, task.act_dim, task.n_gamma, cfg.hidden, cfg.perturb_alpha,
                     init_log_std=cfg.init_log_std)
    return ActorCritic(spec, rng)


def run_episode(task, policy, rng: np.random.Generator, max_steps: int | None = None, mode: str = "fixed",
                **reset_kw) -> dict:
    """Roll one episode; ``policy(obs) -> (raw action, gamma vector)``."""
    obs = task.reset(rng, **reset_kw)
    total, steps, gammas, infeasible = 0.0, 0, [], 0
    while True:
        action, gamma = policy(obs)
        st = task.step(action, gamma, mode)
        total += st.reward
        steps += 1
        gammas.append(np.reshape(gamma, -1))
        infeasible += int(not st.info["feasible"])
        obs = st.obs
        if st.done or (max_steps is not None and steps >= max_steps):
            break
    out = {"return": total, "steps": steps, "time": steps * task_dt(task), "cost": int(task.env.episode_cost),
           "mean_gamma": float(np.mean(gammas)), "infeasible_steps": infeasible}
    out.update(task.outcome(st.info))
    return out


def task_dt(task) -> float:
    cfg = task.env.cfg
    return cfg.dt if isinstance(task, NavTask) else cfg.control_dt


def model_policy(model: ActorCritic, deterministic: bool = True, rng: np.random.Generator | None = None):
    def policy(obs):
        out = model.act(obs[None, :], rng, deterministic=deterministic)
        return out.action[0], out.gamma[0]
    return policy


def summarize(episodes: list) -> dict:
    n = len(episodes)
    succ = [e for e in episodes if e["success"]]
    row = {
        "episodes": n,
        "mean_return": float(np.mean([e["return"] for e in episodes])),
        "success_rate": len(succ) / n,
        "collision_rate": float(np.mean([e["collision"] for e in episodes])),
        "mean_time": float(np.mean([e["time"] for e in succ])) if succ else float("nan"),
        "mean_gamma": float(np.mean([e["mean_gamma"] for e in episodes])),
    }
    ranks = [e["rank"] for e in episodes if e.get("rank") is not None]
    if ranks:
        row["mean_rank"] = float(np.mean(ranks))
    return row


def evaluate(model: ActorCritic, cfg: TrainConfig, n_episodes: int, seed: int, **env_kw) -> dict:
    """Deterministic-policy evaluation on a fixed, seed-determined episode set."""
    task = make_task(cfg, **env_kw)
    rngs = episode_rngs(seed, n_episodes)
    eps = [run_episode(task, model_policy(model), r) for r in rngs]
    return summarize(eps)


def episode_rngs(seed: int, n: int) -> list:
    """Independent generators for evaluation episode ``i`` of a seed."""
    return [np.random.default_rng([int(seed), 104729, i]) for i in range(n)]


class Trainer:
    def __init__(self, cfg: TrainConfig, seed: int = 0):
        cfg = cfg.resolved()
        self.cfg, self.seed = cfg, int(seed)
        ss = np.random.SeedSequence(self.seed)
        model_ss, train_ss, env_ss = ss.spawn(3)
        self.rng = np.random.default_rng(train_ss)
        self.tasks = [make_task(cfg) for _ in range(cfg.n_envs)]
        self.task_rngs = [np.random.default_rng(s) for s in env_ss.spawn(cfg.n_envs)]
        self.model = build_model(cfg, self.tasks[0], np.random.default_rng(model_ss))
        self.opt = Adam(self.model.n_params, lr=cfg.learning_rate)
        self.lagrange = LagrangeState(cfg.pid_kp, cfg.pid_ki, cfg.pid_kd, lam=cfg.lambda_init,
                                      lam_max=cfg.lambda_max, ema_alpha=cfg.ema_alpha)
        self.obs = np.stack([t.reset(r) for t, r in zip(self.tasks, self.task_rngs)])
        self.ep_return = np.zeros(cfg.n_envs)
        self.episodes: deque = deque(maxlen=cfg.ma_window)
        self.iteration = 0
        self.env_steps = 0

    # --- one iteration ------------------------------------------------

    def collect(self):
        cfg, model = self.cfg, self.model
        buf = RolloutBuffer(cfg.n_steps, cfg.n_envs, self.tasks[0].obs_dim, model.spec.act_dim, model.spec.n_gamma)
        gamma_sum = 0.0
        for _ in range(cfg.n_steps):
            out = model.act(self.obs, self.rng)
            if np.any(out.gamma < 0.0) or np.any(out.gamma > 1.0):
                raise FloatingPointError("safety head emitted gamma outside [0, 1]")
            gamma_sum += float(out.gamma.mean())
            rew = np.zeros(cfg.n_envs)
            cost = np.zeros(cfg.n_envs)
            done = np.zeros(cfg.n_envs)
            nxt = np.empty_like(self.obs)
            for i, task in enumerate(self.tasks):
                st = task.step(out.action[i], out.gamma[i])
                rew[i], cost[i], done[i] = st.reward, st.cost, float(st.done)
                self.ep_return[i] += st.reward
                if st.done:
                    self.episodes.append((self.ep_return[i], float(task.env.episode_cost > 0)))
                    self.ep_return[i] = 0.0
                    nxt[i] = task.reset(self.task_rngs[i])
                else:
                    nxt[i] = st.obs
            buf.add(self.obs, out, rew, cost, done)
            self.obs = nxt
        self.env_steps += cfg.batch_size
        v_r, v_c = model.values(self.obs)
        batch = buf.finish(v_r, v_c, cfg.discount, cfg.gae_lambda)
        return batch, gamma_sum / cfg.n_steps

    def moving_average(self):
        if not self.episodes:
            return 0.0, 0.0
        arr = np.array(self.episodes)
        return float(arr[:, 0].mean()), float(arr[:, 1].mean())

    def iterate(self) -> dict:
        cfg = self.cfg
        batch, mean_gamma = self.collect()
        mean_ret, ma_cost = self.moving_average()
        j_c = smooth_cost(self.lagrange, ma_cost)
        lam = pid_lagrange_update(self.lagrange, j_c, cfg.cost_limit)
        lr_scale = linear_anneal(self.iteration, cfg.n_iterations)
        stats = ppo_update(self.model, self.opt, batch, lam, cfg.ppo(), self.rng, lr_scale)
        self.iteration += 1
        return {
            "iteration": self.iteration, "env_steps": self.env_steps, "episodes": len(self.episodes),
            "mean_return": mean_ret, "ma_cost": ma_cost, "j_c": j_c, "lambda": lam,
            "loss_pi": stats.loss_pi, "loss_v": stats.loss_v, "L_R": stats.L_R, "L_C": stats.L_C,
            "entropy": stats.entropy, "grad_norm": stats.grad_norm, "approx_kl": stats.approx_kl,
            "clip_frac": stats.clip_frac, "mean_gamma": mean_gamma, "aborted": int(stats.aborted),
        }

    def evaluate(self, n_episodes: int | None = None, seed: int | None = None) -> dict:
        n = n_episodes or self.cfg.eval_episodes
        row = evaluate(self.model, self.cfg, n, self.seed + 1_000_003 if seed is None else seed)
        row["iteration"] = self.iteration
        row["env_steps"] = self.env_steps
        return row

    # --- checkpoints --------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "seed": self.seed,
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "params": self.model.params.copy(),
            "adam": {"m": self.opt.m.copy(), "v": self.opt.v.copy(), "step_count": self.opt.step_count},
            "lagrange": asdict(self.lagrange),
            "rng": self.rng.bit_generator.state,
            "task_rngs": [r.bit_generator.state for r in self.task_rngs],
            "tasks": self.tasks,
            "obs": self.obs.copy(),
            "ep_return": self.ep_return.copy(),
            "episodes": list(self.episodes),
        }

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            pickle.dump(self.state(), f, protocol=pickle.HIGHEST_PROTOCOL)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Trainer":
        state = read_checkpoint(path)
        tr = cls(config_from_dict(state["config"]), state["seed"])
        tr.iteration, tr.env_steps = state["iteration"], state["env_steps"]
        tr.model.load_params(state["params"])
        tr.opt.m[...], tr.opt.v[...] = state["adam"]["m"], state["adam"]["v"]
        tr.opt.step_count = state["adam"]["step_count"]
        tr.lagrange = LagrangeState(**state["lagrange"])
        tr.rng.bit_generator.state = state["rng"]
        for r, s in zip(tr.task_rngs, state["task_rngs"]):
            r.bit_generator.state = s
        tr.tasks = state["tasks"]
        tr.obs = state["obs"]
        tr.ep_return = state["ep_return"]
        tr.episodes = deque(state["episodes"], maxlen=tr.cfg.ma_window)
        return tr


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    with open(path, "rb") as f:
        state = pickle.load(f)
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a training checkpoint")
    if state["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {state['version']}")
    return state


def load_model(path) -> tuple[ActorCritic, TrainConfig]:
    """Model and resolved config from a checkpoint, for evaluation."""
    state = read_checkpoint(path)
    cfg = config_from_dict(state["config"]).resolved()
    model = build_model(cfg, make_task(cfg))
    model.load_params(state["params"])
    return model, cfg



__all__ = [
    "TrainConfig", "Trainer", "METRIC_COLUMNS", "evaluate", "run_episode", "summarize", "load_model",
    "make_task", "build_model", "model_policy", "episode_rngs", "logistic",
]
