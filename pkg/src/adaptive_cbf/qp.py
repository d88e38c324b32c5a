"""Dense dual active-set solver for small strictly convex QPs.

Solves ``min 0.5 x'Gx + c'x  s.t.  C x >= d`` following Goldfarb & Idnani:
start from the unconstrained minimizer and add the most violated constraint
one at a time, dropping active constraints whose multipliers would turn
negative. Problems here have at most a dozen variables and constraints, so
the reduced matrices are rebuilt from scratch every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# Normals closer than this to the active span count as dependent. Constraint
# rows built by finite differences carry ~1e-8 relative noise, so exact
# parallelism is never observed.
DEPENDENCE_TOL = 1e-6


class InfeasibleQP(Exception):
    """The constraint set is empty (detected by the dual step)."""


@dataclass
class QPSolution:
    x: np.ndarray
    active: list
    multipliers: np.ndarray
    iterations: int


def solve_qp(G, c, C, d, tol: float = 1e-12, max_iter: int = 200) -> QPSolution:
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    c = np.asarray(c, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64).reshape(-1, c.shape[0])
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    n = c.shape[0]
    if G.shape != (n, n):
        raise ValueError("Hessian shape does not match the linear term")
    if C.shape[0] != d.shape[0]:
        raise ValueError("constraint matrix and bound vector disagree")
    Ginv = np.linalg.inv(G)
    x = -Ginv @ c
    active: list[int] = []
    u = np.zeros(0)
    scale = np.maximum(np.linalg.norm(C, axis=1), 1e-300)

    for it in range(max_iter):
        s = (C @ x - d) / scale
        if active:
            s[active] = np.inf
        if s.size == 0:
            return QPSolution(x, active, u, it)
        p = int(np.argmin(s))
        if s[p] >= -tol:
            return QPSolution(x, active, u, it)
        u_plus = np.append(u, 0.0)
        n_p = C[p]
        while True:
            if active:
                N = C[active].T
                GiN = Ginv @ N
                try:
                    Nstar = np.linalg.solve(N.T @ GiN, GiN.T)
                except np.linalg.LinAlgError:
                    Nstar = np.linalg.pinv(N.T @ GiN) @ GiN.T
                z = Ginv @ n_p - GiN @ (Nstar @ n_p)
                r = Nstar @ n_p
            else:
                z = Ginv @ n_p
                r = np.zeros(0)
            t1, k = np.inf, -1
            for j in range(r.shape[0]):
                if r[j] > tol:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, k = ratio, j
            zn = float(z @ n_p)
            # n_p (numerically) in the span of the active normals: no primal step.
            # Lengths are measured in the G metric (z'Gz == z'n_p), so heavily
            # weighted slack coordinates do not mask a real direction.
            dependent = zn <= DEPENDENCE_TOL ** 2 * float(n_p @ Ginv @ n_p)
            if dependent or zn <= 0.0:
                t2 = np.inf
            else:
                t2 = -(float(n_p @ x) - d[p]) / zn
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise InfeasibleQP("constraints are inconsistent")
            if not np.isfinite(t2):
                u_plus[:-1] -= t1 * r
                u_plus[-1] += t1
                active.pop(k)
                u_plus = np.delete(u_plus, k)
                continue
            t = min(t1, t2)
            x = x + t * z
            u_plus[:-1] -= t * r
            u_plus[-1] += t
            if t2 <= t1:
                active.append(p)
                u = u_plus
                break
            active.pop(k)
            u_plus = np.delete(u_plus, k)
    raise RuntimeError("active-set iteration limit reached")


def project_box_polytope(target, A, b, lower, upper, weights=None) -> QPSolution:
    """Weighted projection of ``target`` onto ``{A x >= b, lower <= x <= upper}``."""
    target = np.asarray(target, dtype=np.float64)
    n = target.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    G = np.diag(w)
    c = -w * target
    eye = np.eye(n)
    rows = [np.asarray(A, dtype=np.float64).reshape(-1, n)]
    rhs = [np.asarray(b, dtype=np.float64).reshape(-1)]
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    fin_lo = np.isfinite(lo)
    fin_hi = np.isfinite(hi)
    rows += [eye[fin_lo], -eye[fin_hi]]
    rhs += [lo[fin_lo], -hi[fin_hi]]
    return solve_qp(G, c, np.vstack(rows), np.concatenate(rhs))
