"""One step of a first-order method on a flat parameter vector.

``step`` is pure: it returns fresh parameters and a fresh state, so a run can
be replayed exactly from any saved state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class NonFiniteGradient(ValueError):
    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite gradient entry {value!r} at index {index}")
        self.index = index
        self.value = value


@dataclass(frozen=True)
class SGDMomentum:
    lr: float = 1e-3
    momentum: float = 0.9
    kind = "sgd_momentum"
    n_moments = 1


@dataclass(frozen=True)
class RMSProp:
    lr: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    kind = "rmsprop"
    n_moments = 1


@dataclass(frozen=True)
class Adam:
    alpha: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    kind = "adam"
    n_moments = 2


@dataclass(frozen=True, eq=False)
class OptimizerState:
    settings: SGDMomentum | RMSProp | Adam
    moments: tuple
    step_count: int = 0

    @property
    def kind(self) -> str:
        return self.settings.kind


def init_state(settings, n_params: int) -> OptimizerState:
    moments = tuple(np.zeros(n_params) for _ in range(settings.n_moments))
    return OptimizerState(settings, moments, 0)


def step(state: OptimizerState, params, grad):
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.moments[0].shape:
        raise ValueError(f"length mismatch: params {params.shape}, grad {grad.shape}, "
                         f"state {state.moments[0].shape}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NonFiniteGradient(int(bad[0]), float(grad[bad[0]]))

    s = state.settings
    t = state.step_count + 1
    if isinstance(s, Adam):
        m, v = state.moments
        m = s.beta1 * m + (1.0 - s.beta1) * grad
        v = s.beta2 * v + (1.0 - s.beta2) * grad * grad
        m_hat = m / (1.0 - s.beta1 ** t)
        v_hat = v / (1.0 - s.beta2 ** t)
        new = params - s.alpha * m_hat / (np.sqrt(v_hat) + s.eps)
        moments = (m, v)
    elif isinstance(s, RMSProp):
        (sq,) = state.moments
        sq = s.decay * sq + (1.0 - s.decay) * grad * grad
        new = params - s.lr * grad / (np.sqrt(sq) + s.eps)
        moments = (sq,)
    else:
        (vel,) = state.moments
        vel = s.momentum * vel + grad
        new = params - s.lr * vel
        moments = (vel,)
    return new, replace(state, moments=moments, step_count=t)


def make_settings(kind: str, **kw):
    kinds = {"adam": Adam, "rmsprop": RMSProp, "sgd_momentum": SGDMomentum}
    if kind not in kinds:
        raise ValueError(f"unknown optimizer {kind!r}")
    return kinds[kind](**kw)
