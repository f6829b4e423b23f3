"""Measurements that tie runs back to the convergence theory, plus CSV/SVG output."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import EmpiricalMeasure
from .gradient_layer import GradientLayer, apply
from .nn_core import Activation, DenseNet, NetSpec, backward_params, compose, forward, grad_input


@dataclass
class StepRecord:
    step: int
    objective: Optional[float]
    fgrad_norm_sq: float
    w1_to_data: Optional[float] = None
    wall_ms: float = 0.0


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)

    def add(self, step, objective, fgrad_norm_sq, w1_to_data=None, wall_ms=0.0):
        if self.records and step <= self.records[-1].step:
            raise ValueError("steps must be strictly increasing")
        if not self.records and step != 0:
            raise ValueError("steps start at 0")
        self.records.append(StepRecord(step, objective, fgrad_norm_sq, w1_to_data, wall_ms))

    def __len__(self):
        return len(self.records)

    def to_csv(self, path, with_wall=False):
        cols = ["step", "objective", "fgrad_norm_sq", "w1_to_data"] + (["wall_ms"] if with_wall else [])
        lines = [",".join(cols)]
        for r in self.records:
            vals = [str(r.step)]
            for v in (r.objective, r.fgrad_norm_sq, r.w1_to_data) + ((r.wall_ms,) if with_wall else ()):
                vals.append("" if v is None else repr(float(v)))
            lines.append(",".join(vals))
        Path(path).write_text("\n".join(lines) + "\n")


def functional_grad_norm_sq(field, particles) -> float:
    """Particle mean of ``|grad f(x)|^2``.

    ``field`` is a scalar-output ``DenseNet`` (its input gradient is used) or
    any callable mapping an ``(n, d)`` array to the gradient field.
    """
    X = particles.points if isinstance(particles, EmpiricalMeasure) else np.asarray(particles, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("no particles")
    G = grad_input(field, X) if isinstance(field, DenseNet) else np.asarray(field(X), dtype=np.float64)
    if not np.all(np.isfinite(G)):
        raise FloatingPointError("non-finite gradient")
    return float(np.mean(np.einsum("ij,ij->i", G, G)))


@dataclass
class BoundReport:
    lhs: float
    rhs: float
    satisfied: bool

    def __str__(self):
        return f"min_k |grad L(phi_k)|^2 = {self.lhs!r} <= 2/(eta T) (L0 - L*) = {self.rhs!r}: {self.satisfied}"


def theorem1_audit(metrics: RunMetrics, eta: float, T: int, floor: Optional[float]) -> BoundReport:
    """Check ``min_{k<T} |grad L(phi_k)|^2 <= 2 (L(phi_0) - L*) / (eta T)``."""
    if floor is None:
        raise ValueError("the objective floor L* is required")
    if T < 1 or len(metrics) < T:
        raise ValueError(f"need at least T={T} records, have {len(metrics)}")
    recs = metrics.records[:T]
    if recs[0].objective is None:
        raise ValueError("initial objective missing")
    lhs = min(r.fgrad_norm_sq for r in recs)
    rhs = 2.0 / (eta * T) * (recs[0].objective - floor)
    return BoundReport(lhs, rhs, lhs <= rhs)


def descent_audit(metrics: RunMetrics, eta: float, tol: float = 1e-9) -> list:
    """Per step, whether ``L_{k+1} <= L_k - (eta/2) |grad L_k|^2`` holds within ``tol``."""
    recs = metrics.records
    out = []
    for a, b in zip(recs, recs[1:]):
        out.append(b.objective <= a.objective - 0.5 * eta * a.fgrad_norm_sq + tol)
    return out


@dataclass
class EscapeReport:
    eta: float
    param_grad_norm: float
    displacement: np.ndarray
    objective_before: float
    objective_after: float
    param_grad_norm_after: float

    @property
    def improvement(self) -> float:
        return self.objective_before - self.objective_after


def escape_fixture(w: float = 0.3):
    """Lower map ``g2(z; w) = (w, 0)`` and critic ``f(x) = x_2`` as networks.

    ``w`` is the first bias of ``g2``; its weights are zero so ``z`` is ignored.
    Only ``w`` is a model parameter; the other entries are fixed plumbing.
    """
    ident = Activation("identity")
    g2 = DenseNet(NetSpec((1, 2), ident, ident), np.array([0.0, 0.0, w, 0.0]))
    f = DenseNet(NetSpec((2, 1), ident, ident), np.array([0.0, 1.0, 0.0]))
    return g2, f


W_INDEX = 2  # position of w in g2's flat parameters (W is 2x1, then b)


def escape_demo(eta: float = 0.1, w: float = 0.3, n: int = 16) -> EscapeReport:
    """The lower parameter is stationary yet a gradient layer still moves its output.

    Objective is ``E[-f(g2(z))]``; ``g2`` is the finite model below the layer.
    """
    g2, f = escape_fixture(w)
    z = np.linspace(-1.0, 1.0, n)[:, None]
    up = np.full((n, 1), -1.0 / n)
    chain = compose(f, g2)
    _, grad_g2 = chain.backward_params(z, up)
    x = forward(g2, z)
    layer = GradientLayer(f, eta)
    moved = apply(layer, x)
    disp = moved - x
    before = -float(np.mean(forward(f, x)))
    after = -float(np.mean(forward(f, moved)))
    # gradient of E[-f(G(g2(z)))] w.r.t. g2's params, through J_G = I (G is a translation here)
    vjp = grad_input(f, moved) * (-1.0 / n)
    grad_after = backward_params(g2, z, vjp)
    return EscapeReport(eta, abs(float(grad_g2[W_INDEX])), disp[0], before, after,
                        abs(float(grad_after[W_INDEX])))


# --- SVG -------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
VIEW = 1.2
SIZE = 400


def to_pixel(x: float, y: float) -> tuple:
    """Map ``[-VIEW, VIEW]^2`` onto the ``SIZE`` square canvas, y axis up."""
    px = (x + VIEW) / (2 * VIEW) * SIZE
    py = (VIEW - y) / (2 * VIEW) * SIZE
    return px, py


def scatter_svg(measures) -> str:
    """``measures`` is a list of ``(name, EmpiricalMeasure or (n,2) array)``."""
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" '
           f'viewBox="0 0 {SIZE} {SIZE}">',
           f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>']
    c = SIZE / 2
    out.append(f'<line x1="0" y1="{c:.3f}" x2="{SIZE}" y2="{c:.3f}" stroke="#cccccc" stroke-width="1"/>')
    out.append(f'<line x1="{c:.3f}" y1="0" x2="{c:.3f}" y2="{SIZE}" stroke="#cccccc" stroke-width="1"/>')
    for i, (name, m) in enumerate(measures):
        pts = m.points if isinstance(m, EmpiricalMeasure) else np.asarray(m, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"measure {name!r} is not 2-D")
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<g id="{name}" fill="{color}" fill-opacity="0.6">')
        for x, y in pts:
            px, py = to_pixel(float(x), float(y))
            out.append(f'<circle cx="{px:.3f}" cy="{py:.3f}" r="2"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_scatter_svg(measures, path) -> None:
    Path(path).write_text(scatter_svg(measures))
