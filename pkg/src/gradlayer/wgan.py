"""WGAN-GP critic training, finetuning by stacked gradient layers, assist mode,
and functional gradient descent over particles.

The finetune loop *is* functional gradient descent with a learned oracle:
each outer step trains the critic on samples pushed through the current
stack, appends the trained critic as a new layer, and moves the evaluation
particles by ``eta`` times the new layer's field. ``finetune`` and
``fgd(LearnedOracle(...))`` therefore share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import seeding
from .datasets import EmpiricalMeasure
from .gradient_layer import GradientLayerStack, critic_field
from .nn_core import (Activation, Composite, DenseNet, PENALTY_KINDS, ShapeError,
                      forward, penalty_and_grad,
                      value_and_grad_params)
from .optim import Adam, NonFiniteGradient, init_state, step as optim_step
from .ot_oracle import w1

METRICS_HEADER = ("outer_step", "critic_loss", "penalty_mean", "fgrad_norm_sq", "w1_to_data")


class TrainingError(RuntimeError):
    def __init__(self, message, outer=None, inner=None):
        where = []
        if outer is not None:
            where.append(f"outer step {outer}")
        if inner is not None:
            where.append(f"inner step {inner}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.outer = outer
        self.inner = inner


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 50
    T: int = 100
    T0: int = 50
    lam: float = 10.0
    eta: float = 0.1
    penalty: str = "one_sided"
    optimizer: object = field(default_factory=Adam)
    seed: int = 0
    assist_layers: int = 0

    def __post_init__(self):
        if self.batch < 1 or self.T0 < 1:
            raise ValueError("batch and T0 must be positive")
        if self.T < 0 or self.assist_layers < 0:
            raise ValueError("T and assist_layers must be nonnegative")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.penalty not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.penalty!r}")


@dataclass(frozen=True)
class GaussianSampler:
    """Isotropic centered Gaussian; ``g = id`` base measure of the toys."""

    dim: int
    std: float

    def __call__(self, n, rng):
        return self.std * rng.standard_normal((int(n), self.dim))


# --- critic objective ------------------------------------------------------

@dataclass
class CriticLoss:
    loss: float
    grad: np.ndarray
    penalty_mean: float
    degenerate: int = 0

    def __iter__(self):
        return iter((self.loss, self.grad))


def critic_loss_and_grad(critic: DenseNet, real, fake, lam: float, kind: str, eps) -> CriticLoss:
    """``mean f(fake) - mean f(real) + lam * mean R(eps*real + (1-eps)*fake)``."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64).ravel()
    b = real.shape[0]
    if fake.shape != real.shape or eps.shape != (b,):
        raise ShapeError(f"batch sizes differ: real {real.shape}, fake {fake.shape}, eps {eps.shape}")
    if real.ndim != 2 or real.shape[1] != critic.spec.input_dim:
        raise ShapeError(f"samples have shape {real.shape}, critic expects dim {critic.spec.input_dim}")
    # fake then real, pulled back separately so identical batches cancel exactly
    up = np.full((b, 1), 1.0 / b)
    out_fake, g_fake = value_and_grad_params(critic, fake, up)
    out_real, g_real = value_and_grad_params(critic, real, up)
    gap = float(out_fake[:, 0].mean() - out_real[:, 0].mean())
    grad = g_fake - g_real
    pen_val, degenerate = 0.0, 0
    if lam > 0:
        x_tilde = eps[:, None] * real + (1.0 - eps[:, None]) * fake
        pr = penalty_and_grad(critic, x_tilde, kind)
        pen_val, degenerate = pr.penalty, pr.degenerate
        grad = grad + lam * pr.grad_params
    loss = gap + lam * pen_val
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite critic loss {loss}")
    return CriticLoss(loss, grad, pen_val, degenerate)


class CriticTrainer:
    """Inner loop shared by finetune and assist: the critic warm-starts each call."""

    def __init__(self, critic: DenseNet, config: TrainConfig, data: EmpiricalMeasure):
        self.critic = critic
        self.config = config
        self.data = data
        self.opt = init_state(config.optimizer, critic.spec.n_params)
        self.idx_rng = seeding.stream(config.seed, seeding.REAL_INDEX)
        self.eps_rng = seeding.stream(config.seed, seeding.EPSILON)

    def train(self, make_fake: Callable[[int], np.ndarray], outer=None):
        """Run ``T0`` steps; ``make_fake(b)`` returns a fresh fake minibatch."""
        cfg = self.config
        b = cfg.batch
        losses, pens = [], []
        for inner in range(cfg.T0):
            try:
                fake = make_fake(b)
                real = self.data.points[self.idx_rng.integers(0, len(self.data), size=b)]
                eps = self.eps_rng.uniform(0.0, 1.0, size=b)
                res = critic_loss_and_grad(self.critic, real, fake, cfg.lam, cfg.penalty, eps)
                params, self.opt = optim_step(self.opt, self.critic.params, res.grad)
            except (FloatingPointError, NonFiniteGradient) as exc:
                raise TrainingError(str(exc), outer, inner) from exc
            self.critic = self.critic.with_params(params)
            losses.append(res.loss)
            pens.append(res.penalty_mean)
        return math.fsum(losses) / len(losses), math.fsum(pens) / len(pens)


# --- oracles and functional gradient descent --------------------------------

@dataclass(frozen=True)
class ExactOracle:
    """Closed-form problem ``L(phi) = E V(phi(z))`` whose maximal critic is ``-V``.

    ``field`` is ``grad f* = -grad V``; ``floor`` is ``inf L``.
    """

    name: str
    potential: Callable[[np.ndarray], np.ndarray]
    grad_potential: Callable[[np.ndarray], np.ndarray]
    floor: float = 0.0
    smoothness: Optional[float] = None

    def critic(self, x):
        return -self.potential(np.asarray(x, dtype=np.float64))

    def field(self, x, k=None):
        return -self.grad_potential(np.asarray(x, dtype=np.float64))

    def objective(self, x) -> float:
        return float(np.mean(self.potential(np.asarray(x, dtype=np.float64))))


def quadratic_oracle(center) -> ExactOracle:
    """``V(x) = |x - c|^2 / 2``: critic ``-|x - c|^2/2``, ``L = 1``."""
    c = np.asarray(center, dtype=np.float64)
    return ExactOracle(
        "quadratic",
        lambda x: 0.5 * np.sum((x - c) ** 2, axis=-1),
        lambda x: x - c,
        floor=0.0, smoothness=1.0)


def two_well_oracle() -> ExactOracle:
    """``V(x) = (x1^2 - 1)^2 / 4 + x2^2 / 2`` in 2-D, minima at ``(+-1, 0)``."""
    def V(x):
        return 0.25 * (x[..., 0] ** 2 - 1.0) ** 2 + 0.5 * x[..., 1] ** 2

    def dV(x):
        g = np.empty_like(x)
        g[..., 0] = x[..., 0] * (x[..., 0] ** 2 - 1.0)
        g[..., 1] = x[..., 1]
        return g
    return ExactOracle("two_well", V, dV, floor=0.0)


def constant_oracle(dim: int = 2) -> ExactOracle:
    return ExactOracle("constant", lambda x: np.zeros(x.shape[:-1]),
                       lambda x: np.zeros_like(x), floor=0.0, smoothness=0.0)


EXACT_ORACLES = {"quadratic": lambda: quadratic_oracle([0.5, -0.25]),
                 "two-well": two_well_oracle}


class LearnedOracle:
    """Approximate maximal critic obtained by the inner WGAN-GP loop.

    Each ``field`` call is one outer iteration of finetuning: the critic is
    trained on base samples pushed through the current stack, then stacked.
    """

    def __init__(self, config: TrainConfig, data: EmpiricalMeasure, base_sampler,
                 critic_init: DenseNet, squash: Activation = Activation("identity")):
        if base_sampler.dim != data.dim:
            raise ShapeError("base sampler and data dimensions differ")
        self.trainer = CriticTrainer(critic_init, config, data)
        self.stack = GradientLayerStack(config.eta, critic_init.spec, (), squash)
        self.base_sampler = base_sampler
        self.base_rng = seeding.stream(config.seed, seeding.BASE)
        self.last = (math.nan, math.nan)

    def _fake(self, b):
        return self.stack.output(self.base_sampler(b, self.base_rng))

    def field(self, x, k=None):
        self.last = self.trainer.train(self._fake, outer=k)
        self.stack = self.stack.append(self.trainer.critic)
        upper = None if self.stack.squash.kind == "identity" else self.stack.squash
        return critic_field(self.trainer.critic, x, upper)

    objective = None


@dataclass
class FGDResult:
    trajectory: list
    grad_norm_sq: list
    objectives: list  # None entries in learned mode


def fgd(oracle, particles, eta: float, T: int, observer=None) -> FGDResult:
    """Functional gradient descent: ``x <- x + eta * grad f*(x)`` for every particle.

    ``observer(k, x, g)`` is called before each update (and with ``g=None``
    after the last one); it exists so finetuning can log alongside.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    X = particles.points if isinstance(particles, EmpiricalMeasure) else np.asarray(particles, dtype=np.float64)
    exact = getattr(oracle, "objective", None) is not None
    traj, norms, objs = [X], [], []
    for k in range(T):
        g = oracle.field(X, k)
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(g), axis=1))[0])
            raise TrainingError(f"non-finite field value at particle {bad}", outer=k)
        norms.append(float(np.mean(np.einsum("ij,ij->i", g, g))))
        objs.append(oracle.objective(X) if exact else None)
        if observer is not None:
            observer(k, X, g)
        X = X + eta * g
        traj.append(X)
    if exact:
        g = oracle.field(X, T)
        norms.append(float(np.mean(np.einsum("ij,ij->i", g, g))))
        objs.append(oracle.objective(X))
    if observer is not None:
        observer(T, X, None)
    return FGDResult(traj, norms, objs)


def fgd_metrics(result: FGDResult):
    from .diagnostics import RunMetrics
    m = RunMetrics()
    for k, (obj, g) in enumerate(zip(result.objectives, result.grad_norm_sq)):
        m.add(k, obj, g)
    return m


# --- finetune (stacked gradient layers) -------------------------------------

@dataclass
class FinetuneResult:
    stack: GradientLayerStack
    metrics: list          # one dict per outer step, keys METRICS_HEADER
    final_w1: Optional[float]
    particles: np.ndarray  # evaluation seeds pushed through the whole stack (pre-squash)
    initial_w1: Optional[float] = None


def eval_seeds(config: TrainConfig, base_sampler, n: int) -> np.ndarray:
    return base_sampler(n, seeding.stream(config.seed, seeding.EVAL))


def finetune(config: TrainConfig, data: EmpiricalMeasure, base_sampler, critic_init: DenseNet,
             squash: Activation = Activation("identity"), w1_every: int = 0,
             snapshots=(), on_snapshot=None, n_eval: Optional[int] = None) -> FinetuneResult:
    """Stack ``config.T`` gradient layers, training the critic before each.

    The evaluation particles are ``n_eval`` (default: data size) seeds from the
    EVAL stream; ``w1_every > 0`` logs their W1 to the data every that many
    outer steps (and at the end). ``on_snapshot(k, samples)`` receives the
    squashed particles at each step listed in ``snapshots``.
    """
    n_eval = len(data) if n_eval is None else n_eval
    oracle = LearnedOracle(config, data, base_sampler, critic_init, squash)
    rows = []
    w1_log = {}
    snaps = set(int(s) for s in snapshots)

    def observe(k, X, g):
        samples = squash(X)
        if w1_every and (k % w1_every == 0 or k == config.T):
            w1_log[k] = w1(samples, data.points)
        if k in snaps and on_snapshot is not None:
            on_snapshot(k, samples)
        if g is None:
            return
        loss, pen = oracle.last
        rows.append({"outer_step": k, "critic_loss": loss, "penalty_mean": pen,
                     "fgrad_norm_sq": float(np.mean(np.einsum("ij,ij->i", g, g))),
                     "w1_to_data": w1_log.get(k)})

    res = fgd(oracle, eval_seeds(config, base_sampler, n_eval), config.eta, config.T, observe)
    return FinetuneResult(oracle.stack, rows, w1_log.get(config.T), res.trajectory[-1],
                          w1_log.get(0))


def generate(stack: GradientLayerStack, n: int, base_sampler, seed) -> EmpiricalMeasure:
    if n < 1:
        raise ValueError("n must be at least 1")
    z = base_sampler(n, np.random.default_rng(seed))
    return EmpiricalMeasure(stack.output(z))


def format_metrics_csv(rows) -> str:
    lines = [",".join(METRICS_HEADER)]
    for r in rows:
        vals = []
        for key in METRICS_HEADER:
            v = r.get(key)
            vals.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# --- assist mode -----------------------------------------------------------

def assist_layers_apply(critic: DenseNet, generator: DenseNet, eta: float, l: int, z) -> np.ndarray:
    """Apply ``z <- z + eta * grad_z f(g(z))`` ``l`` times in noise space."""
    z = np.asarray(z, dtype=np.float64)
    for _ in range(l):
        z = z + eta * critic_field(critic, z, generator)
    return z


def assist_sample(critic, generator, eta, l, z) -> np.ndarray:
    return forward(generator, assist_layers_apply(critic, generator, eta, l, z))


@dataclass
class AssistResult:
    critic: DenseNet
    generator: DenseNet
    metrics: list


def assist_train(config: TrainConfig, data: EmpiricalMeasure, noise_sampler, critic_init: DenseNet,
                 generator_init: DenseNet, l: Optional[int] = None) -> AssistResult:
    """Alternate ``T0`` critic steps and one generator step, ``T`` times.

    Layers always use the latest parameters; in the generator step their
    outputs are constants (no differentiation through the layer construction).
    """
    l = config.assist_layers if l is None else l
    if l < 0:
        raise ValueError("layer count must be nonnegative")
    if generator_init.spec.input_dim != noise_sampler.dim:
        raise ShapeError("noise dimension does not match the generator input")
    if generator_init.spec.output_dim != critic_init.spec.input_dim:
        raise ShapeError("generator output does not feed the critic")
    trainer = CriticTrainer(critic_init, config, data)
    gen = generator_init
    gen_opt = init_state(config.optimizer, gen.spec.n_params)
    noise_rng = seeding.stream(config.seed, seeding.BASE)
    gen_rng = seeding.stream(config.seed, seeding.GENERATOR_NOISE)
    b = config.batch
    rows = []
    for k in range(config.T):
        crit_k = trainer.critic
        loss, pen = trainer.train(
            lambda n: assist_sample(crit_k, gen, config.eta, l, noise_sampler(n, noise_rng)), outer=k)
        critic = trainer.critic
        z = assist_layers_apply(critic, gen, config.eta, l, noise_sampler(b, gen_rng))
        fgrad = critic_field(critic, z, gen)
        _, g_gen = Composite(critic, gen).backward_params(z, np.full((b, 1), -1.0 / b))
        try:
            params, gen_opt = optim_step(gen_opt, gen.params, g_gen)
        except NonFiniteGradient as exc:
            raise TrainingError(str(exc), outer=k) from exc
        gen = gen.with_params(params)
        rows.append({"outer_step": k, "critic_loss": loss, "penalty_mean": pen,
                     "fgrad_norm_sq": float(np.mean(np.einsum("ij,ij->i", fgrad, fgrad))),
                     "w1_to_data": None})
    return AssistResult(trainer.critic, gen, rows)


def generate_assist(critic, generator, eta, l, n, noise_sampler, seed) -> EmpiricalMeasure:
    if n < 1:
        raise ValueError("n must be at least 1")
    if l < 0:
        raise ValueError("layer count must be nonnegative")
    z = noise_sampler(n, np.random.default_rng(seed))
    return EmpiricalMeasure(assist_sample(critic, generator, eta, l, z))
