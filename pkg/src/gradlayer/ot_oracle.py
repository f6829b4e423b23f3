"""Exact optimal transport between equal-size uniform empirical measures.

With equal sizes and uniform weights the Kantorovich problem has an optimal
plan that is a permutation, so an assignment solver gives exact ``W_p``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .datasets import EmpiricalMeasure

MAX_POINTS = 2000
WARN_POINTS = 500
BRUTE_MAX = 8


@dataclass(frozen=True, eq=False)
class TransportPlan:
    permutation: np.ndarray  # source index i -> target index permutation[i]
    cost: float
    p: int


def _points(m):
    return m.points if isinstance(m, EmpiricalMeasure) else np.atleast_2d(np.asarray(m, dtype=np.float64))


def _check(p, X, Y):
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("empty measure")
    if X.shape != Y.shape:
        raise ValueError(f"measures differ in size or dimension: {X.shape} vs {Y.shape}")


def cost_matrix(p, X, Y) -> np.ndarray:
    D = cdist(X, Y)
    return D if p == 1 else D * D


def plan_cost(C, perm, p) -> float:
    n = len(perm)
    total = math.fsum(C[i, perm[i]] for i in range(n))
    return (total / n) ** (1.0 / p)


def wasserstein(p, mu, nu, max_points: int = MAX_POINTS) -> TransportPlan:
    X, Y = _points(mu), _points(nu)
    _check(p, X, Y)
    n = X.shape[0]
    if n > max_points:
        raise ValueError(f"{n} points exceeds the assignment cap of {max_points}")
    if n > WARN_POINTS:
        warnings.warn(f"exact assignment on {n} points (O(n^3))", RuntimeWarning, stacklevel=2)
    C = cost_matrix(p, X, Y)
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return TransportPlan(perm, plan_cost(C, perm, p), p)


def brute_force_wasserstein(p, mu, nu) -> TransportPlan:
    """Exhaustive minimum over all permutations; first minimum in lexicographic order wins."""
    X, Y = _points(mu), _points(nu)
    _check(p, X, Y)
    n = X.shape[0]
    if n > BRUTE_MAX:
        raise ValueError(f"brute force limited to n <= {BRUTE_MAX}, got {n}")
    C = cost_matrix(p, X, Y)
    best, best_total = None, math.inf
    for perm in itertools.permutations(range(n)):
        total = math.fsum(C[i, perm[i]] for i in range(n))
        if total < best_total:
            best, best_total = perm, total
    perm = np.array(best, dtype=np.int64)
    return TransportPlan(perm, plan_cost(C, perm, p), p)


def w1(mu, nu) -> float:
    return wasserstein(1, mu, nu).cost


def mccann_interpolate(mu, nu, plan: TransportPlan, t: float) -> EmpiricalMeasure:
    """Push ``mu`` through ``(1 - t) id + t psi`` where ``psi`` is the plan's map."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    X, Y = _points(mu), _points(nu)
    return EmpiricalMeasure((1.0 - t) * X + t * Y[plan.permutation])


def rk4_flow(v, X, duration: float, n_steps: int) -> np.ndarray:
    """Fixed-step RK4 for the autonomous ODE ``dx/dt = v(x)``, applied row-wise."""
    X = np.array(X, dtype=np.float64)
    if n_steps <= 0 or duration == 0:
        return X
    h = duration / n_steps
    for _ in range(n_steps):
        k1 = v(X)
        k2 = v(X + 0.5 * h * k1)
        k3 = v(X + 0.5 * h * k2)
        k4 = v(X + h * k3)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("non-finite trajectory in flow integration")
    return X


def discretization_error(v, mu0, t: float, delta: float, substeps: int = 64) -> float:
    """``W_2(nu_{t+delta}, (id + delta v)# nu_t) / delta`` along the flow of ``v``.

    ``nu_t`` is the flow of ``mu0`` integrated by RK4 with step ``delta/substeps``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    X0 = _points(mu0)
    h = delta / substeps
    n_t = int(round(t / h))
    Xt = rk4_flow(v, X0, t, n_t)
    Xtd = rk4_flow(v, Xt, delta, substeps)
    euler = Xt + delta * v(Xt)
    return wasserstein(2, Xtd, euler).cost / delta
