"""Rollout storage and generalized advantage estimation."""

from __future__ import annotations

import numpy as np


def gae(rewards, values, dones, bootstrap, discount: float, lam: float):
    """Generalized advantage estimates and value targets.

    ``rewards``, ``values`` and ``dones`` are (T,) or (T, n_envs);
    ``dones[t]`` marks that the episode ended at step t, so ``values`` of the
    next row are not bootstrapped. ``bootstrap`` is the value of the state
    after the last row.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ValueError("rewards, values and dones must have the same shape")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    next_value = np.asarray(bootstrap, dtype=np.float64) * np.ones_like(rewards[0])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + discount * next_value * live - values[t]
        last = delta + discount * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


class RolloutBuffer:
    """Fixed-size (n_steps, n_envs) storage for one collection phase."""

    FIELDS = ("reward", "cost", "v_r", "v_c", "done", "log_prob")

    def __init__(self, n_steps: int, n_envs: int, obs_dim: int, act_dim: int, n_gamma: int):
        self.n_steps, self.n_envs = n_steps, n_envs
        shape = (n_steps, n_envs)
        self.obs = np.zeros(shape + (obs_dim,))
        self.action = np.zeros(shape + (act_dim,))
        self.g = np.zeros(shape + (n_gamma,))
        self.shift_a = np.zeros(shape + (act_dim,))
        self.shift_g = np.zeros(shape + (n_gamma,))
        for f in self.FIELDS:
            setattr(self, f, np.zeros(shape))
        self.ptr = 0
        self.bootstrap_r = np.zeros(n_envs)
        self.bootstrap_c = np.zeros(n_envs)

    @property
    def full(self) -> bool:
        return self.ptr == self.n_steps

    def add(self, obs, out, reward, cost, done) -> None:
        if self.full:
            raise IndexError("rollout buffer is full")
        t = self.ptr
        self.obs[t] = obs
        self.action[t] = out.action
        self.g[t] = out.g
        self.shift_a[t] = out.shift_a
        self.shift_g[t] = out.shift_g
        self.log_prob[t] = out.log_prob
        self.v_r[t] = out.v_r
        self.v_c[t] = out.v_c
        self.reward[t] = reward
        self.cost[t] = cost
        self.done[t] = done
        if not np.all(np.isfinite(out.log_prob)):
            raise FloatingPointError("non-finite log-probability in rollout")
        self.ptr += 1

    def finish(self, bootstrap_r, bootstrap_c, discount: float, lam: float) -> dict:
        """Compute both advantage streams and flatten to (n_steps * n_envs, ...)."""
        adv_r, ret_r = gae(self.reward, self.v_r, self.done, bootstrap_r, discount, lam)
        adv_c, ret_c = gae(self.cost, self.v_c, self.done, bootstrap_c, discount, lam)
        n = self.n_steps * self.n_envs
        flat = lambda a: a.reshape((n,) + a.shape[2:])  # noqa: E731
        return {
            "obs": flat(self.obs),
            "action": flat(self.action),
            "g": flat(self.g),
            "shift_a": flat(self.shift_a),
            "shift_g": flat(self.shift_g),
            "log_prob": flat(self.log_prob),
            "adv_r": flat(adv_r),
            "adv_c": flat(adv_c),
            "ret_r": flat(ret_r),
            "ret_c": flat(ret_c),
            "v_r": flat(self.v_r),
            "v_c": flat(self.v_c),
        }
