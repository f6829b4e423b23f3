import numpy as np
import pytest

from gradlayer import gradient_layer as gl
from gradlayer import seeding, wgan
from gradlayer.datasets import EmpiricalMeasure, eight_gaussians
from gradlayer.gradient_layer import GradientLayerStack
from gradlayer.nn_core import (Activation, Composite, DenseNet, NetSpec, backward_params, forward,
                               grad_input, init_net)
from gradlayer.optim import Adam, init_state, step as optim_step
from gradlayer.wgan import (GaussianSampler, LearnedOracle, TrainConfig, TrainingError,
                            critic_loss_and_grad, fgd)

from helpers import central_diff, random_net, rel_err

IDENT = Activation("identity")
SMALL = NetSpec((2, 8, 8, 1), Activation("leaky_relu", 0.2))
QUICK = TrainConfig(batch=16, T=4, T0=3, optimizer=Adam(alpha=1e-3))


def linear_critic(a, b=0.0):
    a = np.asarray(a, dtype=float)
    return DenseNet(NetSpec((a.size, 1), IDENT, IDENT), np.r_[a, b])


def small_run(config=QUICK, seed=0, squash=IDENT, **kw):
    cfg = TrainConfig(**{**config.__dict__, "seed": seed})
    data = eight_gaussians(64, seeding.stream(seed, seeding.DATA))
    critic = init_net(SMALL, seeding.stream(seed, seeding.CRITIC_INIT))
    return wgan.finetune(cfg, data, GaussianSampler(2, 0.5), critic, squash=squash, **kw), data, critic


# --- critic loss ---------------------------------------------------------------

def test_critic_loss_linear_by_hand():
    res = critic_loss_and_grad(linear_critic([1.0, 1.0]), [[1.0, 0.0]], [[0.0, 0.0]], 0.0,
                               "one_sided", [0.5])
    assert res.loss == -1.0
    np.testing.assert_array_equal(res.grad, [-1.0, 0.0, 0.0])


def test_critic_loss_symmetric_batches(rng):
    X = rng.standard_normal((5, 2))
    res = critic_loss_and_grad(random_net(rng, dims=(2, 4, 1)), X, X, 0.0, "two_sided", rng.uniform(size=5))
    assert res.loss == 0.0
    assert np.all(res.grad == 0.0)


@pytest.mark.parametrize("kind", ["one_sided", "two_sided"])
def test_critic_loss_vs_finite_differences(rng, kind):
    for _ in range(5):
        net = random_net(rng, dims=(2, 6, 6, 1), hidden="tanh", scale=2.0)
        real, fake = rng.standard_normal((6, 2)), rng.standard_normal((6, 2)) + 1.0
        eps = rng.uniform(size=6)
        res = critic_loss_and_grad(net, real, fake, 10.0, kind, eps)

        def loss(p):
            return critic_loss_and_grad(net.with_params(p), real, fake, 10.0, kind, eps).loss
        assert rel_err(res.grad, central_diff(loss, net.params)) <= 1e-4


def test_critic_loss_shape_errors(rng):
    net = random_net(rng, dims=(2, 3, 1))
    with pytest.raises(ValueError):
        critic_loss_and_grad(net, np.zeros((3, 2)), np.zeros((2, 2)), 1.0, "one_sided", np.zeros(3))
    with pytest.raises(ValueError):
        critic_loss_and_grad(net, np.zeros((3, 3)), np.zeros((3, 3)), 1.0, "one_sided", np.zeros(3))


def test_config_validation():
    for bad in ({"batch": 0}, {"T0": 0}, {"T": -1}, {"lam": -1.0}, {"eta": 0.0}, {"penalty": "clip"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- finetune ---------------------------------------------------------------------

def test_finetune_zero_steps_is_base_sampling():
    cfg = TrainConfig(batch=8, T=0, T0=1)
    res, _, _ = small_run(cfg)
    assert len(res.stack) == 0 and res.metrics == []
    eval_z = wgan.eval_seeds(cfg, GaussianSampler(2, 0.5), 64)
    assert np.array_equal(res.particles, eval_z)
    gen = wgan.generate(res.stack, 10, GaussianSampler(2, 0.5), 7)
    assert np.array_equal(gen.points, GaussianSampler(2, 0.5)(10, np.random.default_rng(7)))


def test_finetune_records_and_stack_length():
    res, _, _ = small_run(w1_every=2)
    assert len(res.stack) == QUICK.T
    assert [r["outer_step"] for r in res.metrics] == list(range(QUICK.T))
    assert [r["w1_to_data"] is not None for r in res.metrics] == [True, False, True, False]
    assert res.final_w1 is not None and res.initial_w1 == res.metrics[0]["w1_to_data"]


def test_finetune_deterministic(tmp_path):
    a, _, _ = small_run(seed=5)
    b, _, _ = small_run(seed=5)
    c, _, _ = small_run(seed=6)
    assert gl.stack_to_bytes(a.stack) == gl.stack_to_bytes(b.stack)
    assert wgan.format_metrics_csv(a.metrics) == wgan.format_metrics_csv(b.metrics)
    assert gl.stack_to_bytes(a.stack) != gl.stack_to_bytes(c.stack)


@pytest.mark.parametrize("squash", [IDENT, Activation("tanh")], ids=["id", "tanh"])
def test_finetune_particles_equal_stack_push(squash):
    res, data, _ = small_run(squash=squash)
    z = wgan.eval_seeds(QUICK, GaussianSampler(2, 0.5), len(data))
    assert res.particles.tobytes() == res.stack.push(z).tobytes()


def test_finetune_equals_fgd_with_learned_oracle():
    res, data, critic = small_run()
    sampler = GaussianSampler(2, 0.5)
    oracle = LearnedOracle(QUICK, data, sampler, critic)
    out = fgd(oracle, wgan.eval_seeds(QUICK, sampler, len(data)), QUICK.eta, QUICK.T)
    assert out.trajectory[-1].tobytes() == res.particles.tobytes()
    assert gl.stack_to_bytes(oracle.stack) == gl.stack_to_bytes(res.stack)
    np.testing.assert_array_equal(out.grad_norm_sq, [r["fgrad_norm_sq"] for r in res.metrics])


def test_fake_batches_are_pushed_through_current_stack():
    _, data, critic = small_run()
    sampler = GaussianSampler(2, 0.5)
    oracle = LearnedOracle(QUICK, data, sampler, critic)
    seen = []
    orig = oracle.trainer.train

    def spy(make_fake, outer=None):
        stack = oracle.stack
        rng_copy = np.random.Generator(type(oracle.base_rng.bit_generator)())
        rng_copy.bit_generator.state = oracle.base_rng.bit_generator.state
        expected = stack.output(sampler(QUICK.batch, rng_copy))
        first = make_fake(QUICK.batch)
        seen.append((len(stack), np.array_equal(first, expected)))
        return orig(make_fake, outer)
    oracle.trainer.train = spy
    fgd(oracle, np.zeros((4, 2)), QUICK.eta, 3)
    assert seen == [(0, True), (1, True), (2, True)]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_error_carries_step_index():
    cfg = TrainConfig(batch=4, T=2, T0=2)
    data = EmpiricalMeasure(np.full((4, 2), np.inf))
    critic = init_net(SMALL, np.random.default_rng(0))
    with pytest.raises(TrainingError) as err:
        wgan.finetune(cfg, data, GaussianSampler(2, 0.5), critic)
    assert err.value.outer == 0 and err.value.inner == 0


def test_format_metrics_csv():
    text = wgan.format_metrics_csv([{"outer_step": 0, "critic_loss": -0.5, "penalty_mean": 0.0,
                                     "fgrad_norm_sq": 1.25, "w1_to_data": None}])
    assert text == "outer_step,critic_loss,penalty_mean,fgrad_norm_sq,w1_to_data\n0,-0.5,0.0,1.25,\n"


# --- generate ------------------------------------------------------------------

def test_generate_linear_layer_and_determinism():
    stack = GradientLayerStack(0.1, NetSpec((2, 1), IDENT, IDENT)).append(linear_critic([2.0, -1.0]))
    sampler = GaussianSampler(2, 0.5)
    a = wgan.generate(stack, 20, sampler, 3)
    base = sampler(20, np.random.default_rng(3))
    np.testing.assert_allclose(a.points - base, np.tile([0.2, -0.1], (20, 1)), rtol=0, atol=1e-15)
    assert np.array_equal(a.points, wgan.generate(stack, 20, sampler, 3).points)
    with pytest.raises(ValueError):
        wgan.generate(stack, 0, sampler, 3)


# --- exact oracles and functional gradient descent --------------------------------

@pytest.mark.parametrize("make", [lambda: wgan.quadratic_oracle([0.3, -0.2]), wgan.two_well_oracle])
def test_exact_oracle_field_matches_fd(rng, make):
    oracle = make()
    for x in rng.standard_normal((20, 2)):
        fd = central_diff(lambda v: float(oracle.critic(v[None])[0]), x)
        assert rel_err(oracle.field(x[None])[0], fd) <= 1e-5


def test_fgd_quadratic_contraction(rng):
    c = np.array([0.5, -0.25])
    X0 = rng.standard_normal((30, 2))
    eta = 0.1
    res = fgd(wgan.quadratic_oracle(c), X0, eta, 40)
    for k, X in enumerate(res.trajectory):
        np.testing.assert_allclose(X - c, (1 - eta) ** k * (X0 - c), rtol=0, atol=1e-12)


def test_fgd_constant_oracle_freezes(rng):
    X0 = rng.standard_normal((10, 2))
    res = fgd(wgan.constant_oracle(), X0, 0.5, 5)
    assert all(np.array_equal(X, X0) for X in res.trajectory)
    assert res.grad_norm_sq == [0.0] * 6


def test_fgd_convergence_bound(rng):
    eta, T = 0.1, 50
    oracle = wgan.quadratic_oracle([0.5, -0.25])
    X0 = rng.standard_normal((100, 2))
    res = fgd(oracle, X0, eta, T)
    lhs = min(res.grad_norm_sq[:T])
    assert lhs <= 2 / (eta * T) * (oracle.objective(X0) - oracle.floor)


def test_fgd_rejects_bad_field():
    class Bad:
        objective = None

        def field(self, x, k=None):
            out = np.zeros_like(x)
            out[1, 0] = np.nan
            return out
    with pytest.raises(TrainingError, match="particle 1"):
        fgd(Bad(), np.zeros((3, 2)), 0.1, 2)
    with pytest.raises(ValueError):
        fgd(wgan.constant_oracle(), np.zeros((3, 2)), 0.0, 2)


# --- assist mode -------------------------------------------------------------

GEN_SPEC = NetSpec((2, 8, 2), Activation("tanh"), Activation("tanh"))
ASSIST = TrainConfig(batch=8, T=3, T0=2, optimizer=Adam(alpha=1e-3), seed=4)


def assist_setup(config=ASSIST):
    data = eight_gaussians(40, seeding.stream(config.seed, seeding.DATA))
    critic = init_net(SMALL, seeding.stream(config.seed, seeding.CRITIC_INIT))
    gen = init_net(GEN_SPEC, seeding.stream(config.seed, seeding.GENERATOR_INIT))
    return data, critic, gen


def reference_wgan_gp(config, data, noise, critic, gen):
    """Plain alternating WGAN-GP with no layer code at all."""
    trainer = wgan.CriticTrainer(critic, config, data)
    opt = init_state(config.optimizer, gen.spec.n_params)
    noise_rng = seeding.stream(config.seed, seeding.BASE)
    gen_rng = seeding.stream(config.seed, seeding.GENERATOR_NOISE)
    b = config.batch
    for k in range(config.T):
        g_now = gen
        trainer.train(lambda n: forward(g_now, noise(n, noise_rng)), outer=k)
        z = noise(b, gen_rng)
        # d/dtheta of -mean f(g(z)): upstream of f is -1/b, pulled back through g
        up = -grad_input(trainer.critic, forward(gen, z)) / b
        p, opt = optim_step(opt, gen.params, backward_params(gen, z, up))
        gen = gen.with_params(p)
    return trainer.critic, gen


def test_assist_zero_layers_is_plain_wgan_gp():
    data, critic, gen = assist_setup()
    noise = GaussianSampler(2, 1.0)
    res = wgan.assist_train(ASSIST, data, noise, critic, gen, l=0)
    ref_c, ref_g = reference_wgan_gp(ASSIST, data, noise, critic, gen)
    np.testing.assert_allclose(res.generator.params, ref_g.params, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(res.critic.params, ref_c.params, rtol=1e-13, atol=1e-15)


def test_assist_tiny_eta_continuity():
    data, critic, gen = assist_setup()
    noise = GaussianSampler(2, 1.0)
    base = wgan.assist_train(ASSIST, data, noise, critic, gen, l=0)
    tiny = TrainConfig(**{**ASSIST.__dict__, "eta": 1e-12})
    res = wgan.assist_train(tiny, data, noise, critic, gen, l=1)
    assert np.max(np.abs(res.generator.params - base.generator.params)) <= 1e-6
    assert np.max(np.abs(res.critic.params - base.critic.params)) <= 1e-6


def test_assist_deterministic():
    data, critic, gen = assist_setup()
    noise = GaussianSampler(2, 1.0)
    a = wgan.assist_train(ASSIST, data, noise, critic, gen, l=2)
    b = wgan.assist_train(ASSIST, data, noise, critic, gen, l=2)
    assert a.generator.params.tobytes() == b.generator.params.tobytes()
    assert a.critic.params.tobytes() == b.critic.params.tobytes()
    assert len(a.metrics) == ASSIST.T


def test_assist_shape_checks():
    data, critic, gen = assist_setup()
    with pytest.raises(ValueError):
        wgan.assist_train(ASSIST, data, GaussianSampler(3, 1.0), critic, gen, l=1)
    with pytest.raises(ValueError):
        wgan.assist_train(ASSIST, data, GaussianSampler(2, 1.0), critic, gen, l=-1)


def test_generate_assist_zero_layers(rng):
    data, critic, gen = assist_setup()
    noise = GaussianSampler(2, 1.0)
    out = wgan.generate_assist(critic, gen, 0.1, 0, 12, noise, 9)
    assert np.array_equal(out.points, forward(gen, noise(12, np.random.default_rng(9))))


def test_generate_assist_linear_composite_constant_shift():
    W = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]])
    gen = DenseNet(NetSpec((2, 3), IDENT, IDENT), np.r_[W.ravel(), 0.1, 0.2, 0.3])
    a = np.array([0.5, -1.0, 2.0])
    critic = linear_critic(a)
    w = W.T @ a
    z = np.random.default_rng(0).standard_normal((5, 2))
    for l in (1, 2, 5):
        zl = wgan.assist_layers_apply(critic, gen, 0.1, l, z)
        np.testing.assert_allclose(zl, z + l * 0.1 * w, rtol=0, atol=1e-13)


def test_generate_assist_matches_internal_sample_path():
    data, critic, gen = assist_setup()
    noise = GaussianSampler(2, 1.0)
    res = wgan.assist_train(ASSIST, data, noise, critic, gen, l=2)
    z = noise(30, np.random.default_rng(11))
    internal = wgan.assist_sample(res.critic, res.generator, ASSIST.eta, 2, z)
    public = wgan.generate_assist(res.critic, res.generator, ASSIST.eta, 2, 30, noise, 11)
    assert internal.tobytes() == public.points.tobytes()


def test_assist_generator_step_is_stop_gradient():
    # the generator gradient treats pushed noise as constant inputs
    rng = np.random.default_rng(3)
    critic = random_net(rng, dims=(2, 5, 1), hidden="tanh")
    gen = random_net(rng, dims=(2, 5, 2), hidden="tanh", output="tanh")
    z = wgan.assist_layers_apply(critic, gen, 0.1, 2, rng.standard_normal((6, 2)))
    _, g = Composite(critic, gen).backward_params(z, np.full((6, 1), -1 / 6))
    fd = central_diff(lambda p: -float(np.mean(forward(critic, forward(gen.with_params(p), z)))), gen.params)
    assert rel_err(g, fd) <= 1e-5
