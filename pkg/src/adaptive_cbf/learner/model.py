"""Multi-head actor-critic on a shared tanh trunk.

The trunk encodes the stacked observation into ``z``. From ``z``:
a Gaussian policy head (waypoint / spline target), a safety head that
emits barrier coefficients as ``logistic(g)`` with ``g`` Gaussian, and
separate reward and cost value heads. In the planner-driven variant the
policy head is absent and only the safety head acts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numkit import DiagGaussian, Mlp, PerturbedGaussian, mlp_forward, mlp_param_count


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_logistic_jacobian(g):
    """``log d(logistic)/dg`` evaluated stably."""
    g = np.asarray(g, dtype=np.float64)
    return -np.logaddexp(0.0, g) - np.logaddexp(0.0, -g)


@dataclass
class ModelSpec:
    obs_dim: int
    act_dim: int
    n_gamma: int
    hidden: tuple = (64, 64)
    perturb_alpha: float = 0.0
    action_scale: float = 1.0
    init_log_std: float = 0.0
    init_gamma_log_std: float = 0.0


@dataclass
class ActOutput:
    action: np.ndarray  # raw policy sample, (B, act_dim)
    g: np.ndarray  # pre-squash safety sample, (B, n_gamma)
    gamma: np.ndarray
    log_prob: np.ndarray
    v_r: np.ndarray
    v_c: np.ndarray
    shift_a: np.ndarray
    shift_g: np.ndarray


class ActorCritic:
    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        h = list(spec.hidden)
        trunk_sizes = [spec.obs_dim] + h
        width = h[-1]
        blocks = [
            ("trunk", mlp_param_count(trunk_sizes)),
            ("pi", mlp_param_count([width, spec.act_dim]) if spec.act_dim else 0),
            ("gamma", mlp_param_count([width, spec.n_gamma])),
            ("v_r", mlp_param_count([width, 1])),
            ("v_c", mlp_param_count([width, 1])),
            ("log_std_pi", spec.act_dim),
            ("log_std_gamma", spec.n_gamma),
        ]
        self.params = np.zeros(sum(n for _, n in blocks))
        self.slices = {}
        off = 0
        for name, n in blocks:
            self.slices[name] = slice(off, off + n)
            off += n
        view = lambda name: self.params[self.slices[name]]  # noqa: E731
        self.trunk = Mlp(trunk_sizes, ["tanh"] * len(h), view("trunk"))
        self.pi_head = Mlp([width, spec.act_dim], ["linear"], view("pi")) if spec.act_dim else None
        self.gamma_head = Mlp([width, spec.n_gamma], ["linear"], view("gamma"))
        self.v_r_head = Mlp([width, 1], ["linear"], view("v_r"))
        self.v_c_head = Mlp([width, 1], ["linear"], view("v_c"))
        dist_cls = self._make_dist
        self.pi_dist = dist_cls(spec.act_dim, view("log_std_pi"), spec.action_scale) if spec.act_dim else None
        self.gamma_dist = dist_cls(spec.n_gamma, view("log_std_gamma"), 1.0)
        if rng is not None:
            self.initialize(rng)

    def _make_dist(self, dim, log_std, scale):
        if self.spec.perturb_alpha > 0.0:
            return PerturbedGaussian(dim, self.spec.perturb_alpha, scale, log_std)
        return DiagGaussian(dim, log_std)

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    @property
    def perturbed(self) -> bool:
        return self.spec.perturb_alpha > 0.0

    def initialize(self, rng: np.random.Generator) -> None:
        self.trunk.init_orthogonal(rng, [np.sqrt(2.0)] * len(self.trunk.weights))
        if self.pi_head is not None:
            self.pi_head.init_orthogonal(rng, [0.01])
        self.gamma_head.params[...] = 0.0
        self.v_r_head.init_orthogonal(rng, [1.0])
        self.v_c_head.init_orthogonal(rng, [1.0])
        self.params[self.slices["log_std_pi"]] = self.spec.init_log_std
        self.params[self.slices["log_std_gamma"]] = self.spec.init_gamma_log_std

    def heads(self, obs):
        """Forward pass returning every head output and the tapes for backprop."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        z, t_trunk = mlp_forward(self.trunk, obs)
        out = {"z": z, "tapes": {"trunk": t_trunk}}
        if self.pi_head is not None:
            out["mu"], out["tapes"]["pi"] = mlp_forward(self.pi_head, z)
        else:
            out["mu"] = np.zeros((obs.shape[0], 0))
        out["mg"], out["tapes"]["gamma"] = mlp_forward(self.gamma_head, z)
        vr, out["tapes"]["v_r"] = mlp_forward(self.v_r_head, z)
        vc, out["tapes"]["v_c"] = mlp_forward(self.v_c_head, z)
        out["v_r"], out["v_c"] = vr[:, 0], vc[:, 0]
        return out

    def values(self, obs):
        h = self.heads(obs)
        return h["v_r"], h["v_c"]

    def log_prob(self, action, g, mu, mg, shift_a=0.0, shift_g=0.0) -> np.ndarray:
        """Joint log-density of (action, gamma): the heads are independent given z.

        Includes the logistic change of variables so the value is a density
        over gamma itself; the term is parameter free and cancels in ratios.
        """
        lp = self._head_logp(self.gamma_dist, g, mg, shift_g)
        lp = lp - np.sum(log_logistic_jacobian(g), axis=-1)
        if self.pi_dist is not None:
            lp = lp + self._head_logp(self.pi_dist, action, mu, shift_a)
        return lp

    def _head_logp(self, dist, x, mean, shift):
        if isinstance(dist, PerturbedGaussian):
            return dist.log_prob(x, mean, shift)
        return dist.log_prob(x, mean)

    def entropy(self) -> float:
        ent = self.gamma_dist.entropy()
        if self.pi_dist is not None:
            ent += self.pi_dist.entropy()
        return ent

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False) -> ActOutput:
        h = self.heads(obs)
        mu, mg = h["mu"], h["mg"]
        B = mg.shape[0]
        shift_a = np.zeros_like(mu)
        shift_g = np.zeros_like(mg)
        if deterministic:
            action, g = mu.copy(), mg.copy()
        else:
            action, shift_a = self._sample(self.pi_dist, mu, rng) if self.pi_dist is not None else (mu.copy(), shift_a)
            g, shift_g = self._sample(self.gamma_dist, mg, rng)
        logp = self.log_prob(action, g, mu, mg, shift_a, shift_g)
        return ActOutput(action, g, logistic(g), logp.reshape(B), h["v_r"], h["v_c"], shift_a, shift_g)

    @staticmethod
    def _sample(dist, mean, rng):
        if isinstance(dist, PerturbedGaussian):
            return dist.sample(mean, rng, with_shift=True)
        return dist.sample(mean, rng), np.zeros_like(mean)

    def state_dict(self) -> dict:
        return {"params": self.params.copy(), "spec": self.spec}

    def load_params(self, params) -> None:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.params.shape:
            raise ValueError("parameter vector does not match the model")
        self.params[...] = params
