"""Discrete-time control barrier functions and the QP safety filter.

A barrier ``h`` is safe when ``h(s) >= 0``. The discrete condition with
coefficient ``gamma`` in [0, 1] reads ``h(s') + (gamma - 1) h(s) >= 0``;
gamma -> 1 lets the state approach the boundary quickly, gamma = 0 forbids
any decrease of ``h``.

The filter projects a nominal action onto the actions that satisfy every
barrier condition. Predicted next values ``h(s')`` are generally nonlinear
in the action, so constraints are linearized by central differences and the
projection is repeated a few times; the final answer is always checked with
the true predictions and replaced by a sampled best-effort action if it
still violates them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .qp import InfeasibleQP, project_box_polytope

FD_STEP = 1e-4
SLACK_WEIGHT = 1e6
SLACK_TOL = 1e-6
RESIDUAL_TOL = 1e-9
FALLBACK_SAMPLES = 64
OMEGA_WEIGHT = 1e4
OMEGA_MAX = 10.0


def cbf_residual(h_next, h_now, gamma):
    """``h_next + (gamma - 1) h_now``; the condition holds iff the result is >= 0."""
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g < 0.0) or np.any(g > 1.0) or not np.all(np.isfinite(g)):
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return _residual(h_next, h_now, g)


def _residual(h_next, h_now, gamma):
    return np.asarray(h_next) + (np.asarray(gamma) - 1.0) * np.asarray(h_now)


@dataclass
class Barrier:
    """One scalar barrier: ``h(state)`` and the predicted next value ``h(f(state, a))``.

    ``h_next`` takes a (M, m) array of candidate actions and returns M values.
    """

    tag: object
    h: Callable
    h_next: Callable


class BarrierSet:
    """A collection of barriers bound to one state.

    ``predict`` maps a (M, m) batch of actions to the (M, K) matrix of
    predicted next barrier values. ``brake_action`` is an optional
    emergency action that the fallback search always considers.
    """

    def __init__(self, tags, h_now, predict, brake_action=None):
        self.tags = list(tags)
        self.h_now = np.asarray(h_now, dtype=np.float64).reshape(-1)
        if len(self.tags) != self.h_now.shape[0]:
            raise ValueError("one tag per barrier value required")
        self.predict = predict
        self.brake_action = None if brake_action is None else np.asarray(brake_action, dtype=np.float64)

    @classmethod
    def from_barriers(cls, barriers: Sequence[Barrier], state, brake_action=None) -> "BarrierSet":
        h_now = np.array([b.h(state) for b in barriers], dtype=np.float64)

        def predict(actions):
            actions = np.atleast_2d(actions)
            cols = [np.asarray(b.h_next(state, actions), dtype=np.float64).reshape(-1) for b in barriers]
            if not cols:
                return np.zeros((actions.shape[0], 0))
            return np.stack(cols, axis=1)

        return cls([b.tag for b in barriers], h_now, predict, brake_action)

    def __len__(self) -> int:
        return self.h_now.shape[0]

    def predict_one(self, action) -> np.ndarray:
        return np.asarray(self.predict(np.asarray(action, dtype=np.float64)[None, :]))[0]


@dataclass
class GammaSource:
    """Where the barrier coefficients come from.

    ``mode`` is ``"fixed"`` (constant ``gamma``), ``"optimal_decay"``
    (``gamma`` is the nominal gamma_0, scaled per step by the filter) or
    ``"adaptive"`` (``fn(state)`` supplies the coefficients).
    """

    mode: str = "fixed"
    gamma: float = 0.5
    fn: Callable | None = None
    omega_weight: float = OMEGA_WEIGHT

    def __post_init__(self):
        if self.mode not in ("fixed", "optimal_decay", "adaptive"):
            raise ValueError(f"unknown gamma mode {self.mode!r}")
        if self.mode == "adaptive" and self.fn is None:
            raise ValueError("adaptive gamma needs a callback")
        if self.mode != "adaptive" and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.mode == "optimal_decay" and self.gamma <= 0.0:
            raise ValueError("optimal-decay needs gamma_0 > 0")

    def __call__(self, state=None):
        if self.mode == "adaptive":
            g = np.asarray(self.fn(state), dtype=np.float64)
            if np.any(g < 0.0) or np.any(g > 1.0):
                raise ValueError("adaptive gamma left [0, 1]")
            return g
        return self.gamma


@dataclass
class FilterResult:
    action: np.ndarray
    residuals: np.ndarray
    slacks: np.ndarray
    feasible: bool
    omegas: np.ndarray | None = None
    fallback: bool = False
    rounds: int = 0
    gammas: np.ndarray = field(default=None)

    def to_dict(self) -> dict:
        out = {
            "action": self.action.tolist(),
            "residuals": self.residuals.tolist(),
            "slacks": self.slacks.tolist(),
            "feasible": bool(self.feasible),
            "fallback": bool(self.fallback),
        }
        if self.omegas is not None:
            out["omegas"] = self.omegas.tolist()
        return out


def linearize(barriers: BarrierSet, action, step: float = FD_STEP):
    """Predicted barrier values at ``action`` and their central-difference Jacobian."""
    action = np.asarray(action, dtype=np.float64)
    m = action.shape[0]
    probes = np.repeat(action[None, :], 2 * m + 1, axis=0)
    for i in range(m):
        probes[1 + 2 * i, i] += step
        probes[2 + 2 * i, i] -= step
    values = np.asarray(barriers.predict(probes))
    jac = np.empty((values.shape[1], m))
    for i in range(m):
        jac[:, i] = (values[1 + 2 * i] - values[2 + 2 * i]) / (2.0 * step)
    return values[0], jac


def _gamma_vector(gammas, k: int) -> np.ndarray:
    g = np.broadcast_to(np.asarray(gammas, dtype=np.float64), (k,)).copy()
    if np.any(g < 0.0) or np.any(g > 1.0) or not np.all(np.isfinite(g)):
        raise ValueError("gamma must lie in [0, 1]")
    return g


def _solve_projection(nominal, jac, rhs, lower, upper, n_extra=0, extra_cols=None,
                      extra_target=None, extra_weight=None, extra_bounds=None):
    """Project onto the linearized constraints; fall back to penalized slacks if empty.

    Decision vector is ``[action, extra..., slack...]``; extra variables (the
    optimal-decay multipliers) enter with their own column block.
    """
    m = nominal.shape[0]
    k = jac.shape[0]
    A = jac if n_extra == 0 else np.hstack([jac, extra_cols])
    target = np.concatenate([nominal, extra_target]) if n_extra else nominal
    weights = np.concatenate([np.ones(m), extra_weight]) if n_extra else np.ones(m)
    lo = np.concatenate([lower, extra_bounds[0]]) if n_extra else lower
    hi = np.concatenate([upper, extra_bounds[1]]) if n_extra else upper
    try:
        sol = project_box_polytope(target, A, rhs, lo, hi, weights)
        return sol.x[:m], sol.x[m:], np.zeros(k)
    except InfeasibleQP:
        pass
    A_s = np.hstack([A, np.eye(k)])
    sol = project_box_polytope(
        np.concatenate([target, np.zeros(k)]),
        A_s,
        rhs,
        np.concatenate([lo, np.full(k, -np.inf)]),
        np.concatenate([hi, np.full(k, np.inf)]),
        np.concatenate([weights, np.full(k, SLACK_WEIGHT)]),
    )
    n = m + n_extra
    return sol.x[:m], sol.x[m:n], np.maximum(sol.x[n:], 0.0)


def _fallback(nominal, barriers, eff_gamma, lower, upper, extra_candidates, seed):
    rng = np.random.default_rng(seed)
    m = nominal.shape[0]
    cands = [rng.uniform(lower, upper, size=(FALLBACK_SAMPLES, m))]
    if barriers.brake_action is not None:
        cands.append(np.clip(barriers.brake_action, lower, upper)[None, :])
    cands.append(np.asarray(extra_candidates).reshape(-1, m))
    cands = np.vstack(cands)
    res = _residual(barriers.predict(cands), barriers.h_now[None, :], eff_gamma[None, :])
    violation = np.maximum(-res, 0.0).sum(axis=1)
    dist = np.sum((cands - nominal) ** 2, axis=1)
    order = np.lexsort((dist, np.round(violation, 12)))
    best = order[0]
    return cands[best], res[best]


def filter_action(nominal, barriers: BarrierSet, gammas, lower, upper, *,
                  rounds: int = 3, seed: int = 0) -> FilterResult:
    """Closest action to ``nominal`` satisfying every barrier condition.

    Never raises on infeasibility: the best-effort action is returned with
    ``feasible=False`` and the caller decides what to do.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    nominal = np.clip(np.asarray(nominal, dtype=np.float64), lower, upper)
    k = len(barriers)
    gam = _gamma_vector(gammas, k)
    if k == 0:
        return FilterResult(nominal.copy(), np.zeros(0), np.zeros(0), True, gammas=gam)
    h_now = barriers.h_now
    res = _residual(barriers.predict_one(nominal), h_now, gam)
    if np.all(res >= 0.0):
        return FilterResult(nominal.copy(), res, np.zeros(k), True, gammas=gam)

    x = nominal
    slacks = np.zeros(k)
    done = 0
    for done in range(1, rounds + 1):
        h0, jac = linearize(barriers, x)
        rhs = jac @ x - h0 + (1.0 - gam) * h_now
        x, _, slacks = _solve_projection(nominal, jac, rhs, lower, upper)
        x = np.clip(x, lower, upper)
        res = _residual(barriers.predict_one(x), h_now, gam)
        if np.all(res >= -RESIDUAL_TOL) or np.any(slacks > SLACK_TOL):
            break
    fallback = False
    if np.any(res < -SLACK_TOL):
        fallback = True
        x, res = _fallback(nominal, barriers, gam, lower, upper, np.vstack([x, nominal]), seed)
        slacks = np.maximum(-res, 0.0)
    feasible = bool(np.all(slacks <= SLACK_TOL) and np.all(res >= -RESIDUAL_TOL))
    return FilterResult(x, res, slacks, feasible, fallback=fallback, rounds=done, gammas=gam)


def optimal_decay_filter(nominal, barriers: BarrierSet, gamma0, lower, upper, *,
                         omega_weight: float = OMEGA_WEIGHT, omega_max: float = OMEGA_MAX,
                         rounds: int = 3, seed: int = 0) -> FilterResult:
    """Safety filter with one decay multiplier ``omega`` per barrier.

    Each condition becomes ``h(s') - (1 - omega * gamma0) h(s) >= 0`` and the
    objective gains ``omega_weight * (omega - 1)^2``; ``omega`` is kept in
    ``[0, omega_max]``.

    The multipliers only move when the nominal coefficients leave the QP
    infeasible: if the fixed-``gamma0`` filter succeeds its action is returned
    with ``omega = 1``, so both filters agree wherever ``gamma0`` works.
    """
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    nominal = np.clip(np.asarray(nominal, dtype=np.float64), lower, upper)
    k = len(barriers)
    g0 = _gamma_vector(gamma0, k)
    if np.any(g0 <= 0.0):
        raise ValueError("gamma0 must lie in (0, 1]")
    if k == 0:
        return FilterResult(nominal.copy(), np.zeros(0), np.zeros(0), True, omegas=np.zeros(0), gammas=g0)
    h_now = barriers.h_now
    fixed = filter_action(nominal, barriers, g0, lower, upper, rounds=rounds, seed=seed)
    if fixed.feasible:
        fixed.omegas = np.ones(k)
        return fixed

    x = nominal
    slacks = np.zeros(k)
    extra_cols = np.diag(g0 * h_now)
    done = 0
    for done in range(1, rounds + 1):
        h0, jac = linearize(barriers, x)
        rhs = jac @ x - h0 + h_now
        x, omega, slacks = _solve_projection(
            nominal, jac, rhs, lower, upper, n_extra=k, extra_cols=extra_cols,
            extra_target=np.ones(k), extra_weight=np.full(k, omega_weight),
            extra_bounds=(np.zeros(k), np.full(k, omega_max)),
        )
        x = np.clip(x, lower, upper)
        omega = np.clip(omega, 0.0, omega_max)
        res = _residual(barriers.predict_one(x), h_now, omega * g0)
        if np.all(res >= -RESIDUAL_TOL) or np.any(slacks > SLACK_TOL):
            break
    fallback = False
    if np.any(res < -SLACK_TOL):
        fallback = True
        omega = np.full(k, omega_max)
        x, res = _fallback(nominal, barriers, omega * g0, lower, upper, np.vstack([x, nominal]), seed)
        slacks = np.maximum(-res, 0.0)
    feasible = bool(np.all(slacks <= SLACK_TOL) and np.all(res >= -RESIDUAL_TOL))
    return FilterResult(x, res, slacks, feasible, omegas=omega, fallback=fallback, rounds=done,
                        gammas=np.clip(omega * g0, 0.0, None))


def apply_gamma_source(source: GammaSource, nominal, barriers: BarrierSet, lower, upper, state=None,
                       seed: int = 0) -> FilterResult:
    """Dispatch to the fixed/adaptive filter or the optimal-decay filter."""
    if source.mode == "optimal_decay":
        return optimal_decay_filter(nominal, barriers, source.gamma, lower, upper,
                                    omega_weight=source.omega_weight, seed=seed)
    return filter_action(nominal, barriers, source(state), lower, upper, seed=seed)


@dataclass
class InvarianceReport:
    ok: bool
    bounds: np.ndarray
    first_violation: int | None


def check_forward_invariance(h_trace, gamma_trace, tol: float = 1e-9) -> InvarianceReport:
    """Check ``h_t >= prod_{i<t} (1 - gamma_i) h_0`` along a trajectory."""
    h = np.asarray(h_trace, dtype=np.float64).reshape(-1)
    g = np.asarray(gamma_trace, dtype=np.float64).reshape(-1)
    if h.size == 0:
        raise ValueError("empty trace")
    if g.shape != h.shape:
        raise ValueError("barrier and gamma traces must have the same length")
    if h[0] < 0:
        raise ValueError("trajectory must start inside the safe set")
    factors = np.concatenate([[1.0], np.cumprod(1.0 - g[:-1])])
    bounds = factors * h[0]
    bad = np.nonzero(h < bounds - tol)[0]
    first = int(bad[0]) if bad.size else None
    return InvarianceReport(first is None, bounds, first)
