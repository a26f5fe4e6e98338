import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eslab import tensor as T
from eslab.data import SoftDataset
from eslab.errors import DomainError
from eslab.models import build_generator, build_model, generate, one_hot
from eslab.synthesis import (
    DirichletSpec,
    DnnSynthesizer,
    SynthesisConfig,
    augment,
    dnn_syn_epoch,
    dnn_syn_step,
    draw_alpha,
    mode_seeking_loss,
    opt_syn_epoch,
    opt_syn_sample,
    per_sample_ce,
    sample_dirichlet,
)
from eslab.tensor import AdamState

from conftest import numeric_grad, rel_error


@pytest.fixture
def f_s():
    return build_model("mlp-small", (6,), 4, seed=5)


def snapshot(net):
    return {k: p.data.copy() for k, p in net.params.items()}


def assert_unchanged(net, before):
    assert all(before[k].tobytes() == p.data.tobytes() for k, p in net.params.items())


# -- Dirichlet -----------------------------------------------------------------


def test_dirichlet_degenerate():
    assert sample_dirichlet(np.array([0.3]), 0).tolist() == [1.0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-3, 50.0), min_size=2, max_size=12), st.integers(0, 2**31))
def test_dirichlet_on_simplex(alpha, seed):
    y = sample_dirichlet(np.array(alpha), seed)
    assert abs(y.sum() - 1) < 1e-9
    assert (y > 0).all()


def test_dirichlet_tiny_concentrations_stay_valid():
    y = sample_dirichlet(np.full(10, 1e-3), 3)
    assert abs(y.sum() - 1) < 1e-9 and (y > 0).all()


def test_dirichlet_high_concentration():
    draws = np.array([sample_dirichlet(np.full(10, 1000.0), s) for s in range(2000)])
    inside = (np.abs(draws - 0.1) <= 0.02).all(axis=1).mean()
    assert inside >= 0.99


def test_dirichlet_spec_validation():
    with pytest.raises(DomainError):
        DirichletSpec(np.array([1.0, 0.0]))
    assert DirichletSpec([1, 2, 3]).k == 3


def test_alpha_positive_deterministic_and_half_normal_mean():
    a = draw_alpha(10, 4)
    assert (a > 0).all() and a.tobytes() == draw_alpha(10, 4).tobytes()
    mean = draw_alpha(10_000, 0).mean()
    assert abs(mean - math.sqrt(2 / math.pi)) < 0.02


# -- OPT-SYN -------------------------------------------------------------------


def test_opt_syn_zero_steps_returns_start(f_s):
    y = np.full(4, 0.25)
    x = opt_syn_sample(f_s, y, 0, 0.01, seed=9)
    np.testing.assert_array_equal(x, np.random.default_rng(9).standard_normal(6))


def test_opt_syn_stationary_target(f_s):
    x0 = np.random.default_rng(9).standard_normal(6)
    y = f_s.predict_proba(x0[None])[0]
    x = opt_syn_sample(f_s, y, 20, 0.01, seed=9)
    ce = per_sample_ce(f_s(x[None]).data, y[None])[0]
    ce0 = per_sample_ce(f_s(x0[None]).data, y[None])[0]
    assert abs(ce - ce0) < 1e-6


def test_opt_syn_linear_two_class():
    net = build_model("linear", (2,), 2, seed=0)
    net.params["0.weight"].data[:] = [[1.0, -1.0], [0.5, 0.5]]
    net.params["0.bias"].data[:] = [0.0, 0.0]
    y = np.array([1.0, 0.0])
    x = opt_syn_sample(net, y, 50, 0.1, seed=1)
    # z0 - z1 = 2 * x0, so CE = log(1 + exp(-2 * x0))
    z = x @ net.params["0.weight"].data
    assert math.log1p(math.exp(-(z[0] - z[1]))) < 0.05
    assert per_sample_ce(net(x[None]).data, y[None])[0] < 0.05


def test_opt_syn_never_increases_loss(f_s):
    before = snapshot(f_s)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        y = sample_dirichlet(draw_alpha(4, rng), rng)
        x0 = np.random.default_rng(seed).standard_normal(6)
        x = opt_syn_sample(f_s, y, 30, 0.05, seed=seed)
        assert per_sample_ce(f_s(x[None]).data, y[None]) <= per_sample_ce(f_s(x0[None]).data, y[None]) + 1e-12
    assert_unchanged(f_s, before)


def test_opt_syn_epoch_distinct_deterministic_and_lower_ce(f_s):
    a = opt_syn_epoch(f_s, 64, 30, 0.01, seed=3, epoch_tag=2)
    b = opt_syn_epoch(f_s, 64, 30, 0.01, seed=3, epoch_tag=2)
    assert isinstance(a, SoftDataset) and a.epoch_tag == 2 and len(a) == 64
    assert a.inputs.tobytes() == b.inputs.tobytes()
    small = opt_syn_epoch(f_s, 3, 5, 0.01, seed=1)
    d = np.linalg.norm(small.inputs[:, None] - small.inputs[None], axis=-1)
    assert (d[np.triu_indices(3, 1)] > 0).all()


def test_opt_syn_moves_substitute_prediction_toward_targets(f_s):
    from eslab.synthesis import _sample_plan

    targets, starts = _sample_plan(f_s, 64, 3)
    out = opt_syn_epoch(f_s, 64, 30, 0.01, seed=3)
    assert per_sample_ce(f_s(out.inputs).data, targets).mean() < per_sample_ce(f_s(starts).data, targets).mean()


def test_opt_syn_epoch_rejects_empty(f_s):
    with pytest.raises(DomainError):
        opt_syn_epoch(f_s, 0, 1, 0.01, seed=0)


# -- DNN-SYN -------------------------------------------------------------------


def test_mode_seeking_equal_latents_is_zero(rng):
    g = build_generator(4, 3, (6,), seed=0)
    z = rng.standard_normal((5, 4))
    labels = one_hot(np.arange(5) % 3, 3)
    assert mode_seeking_loss(g, z, z.copy(), labels).item() == 0.0


def test_mode_seeking_constant_generator_clamps(rng):
    g = build_generator(4, 3, (6,), seed=0)
    for name, p in g.net.params.items():
        if name.endswith("weight"):
            p.data[:] = 0
    z1, z2 = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    labels = one_hot(np.array([0, 1]), 3)
    expected = np.linalg.norm(z1 - z2, axis=1).sum() / 1e-8
    assert mode_seeking_loss(g, z1, z2, labels).item() == pytest.approx(expected)


def test_mode_seeking_gradient(rng):
    g = build_generator(3, 2, (4,), seed=1, hidden=8)
    z1, z2 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    labels = one_hot(np.array([0, 1, 1]), 2)
    mode_seeking_loss(g, z1, z2, labels).backward()
    for p in g.parameters():
        grad = p.grad.copy()

        def f():
            with T.no_grad():
                return mode_seeking_loss(g, z1, z2, labels).item()

        assert rel_error(grad, numeric_grad(f, p.data)) < 1e-3


def test_dnn_step_lambda_zero_is_image_loss(f_s, rng):
    g = build_generator(4, 4, (6,), seed=2)
    z1, z2 = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    labels = one_hot(np.arange(8) % 4, 4)
    with T.no_grad():
        expected = T.softmax_cross_entropy(f_s(generate(g, z1, labels)), labels).item()
    before = snapshot(f_s)
    assert dnn_syn_step(g, f_s, z1, z2, labels, 0.0, AdamState(lr=1e-3)) == pytest.approx(expected)
    assert_unchanged(f_s, before)


def test_dnn_step_decreases_loss_on_fixed_batch(f_s, rng):
    g = build_generator(4, 4, (6,), seed=2, hidden=32)
    z1, z2 = rng.standard_normal((16, 4)), rng.standard_normal((16, 4))
    labels = one_hot(np.arange(16) % 4, 4)
    state = AdamState(lr=1e-2)
    losses = [dnn_syn_step(g, f_s, z1, z2, labels, 1.0, state) for _ in range(200)]
    assert losses[-1] < losses[0]


def test_dnn_epoch_shape_and_persistence(f_s):
    cfg = SynthesisConfig(samples_per_epoch=10, opt_iterations=3, mode="dnn_syn", generator_hidden=16)
    synth = DnnSynthesizer(cfg, 4, (6,), seed=0)
    g0 = synth.generator
    out = dnn_syn_epoch(synth, f_s, 10, seed=1, epoch_tag=1)
    assert out.inputs.shape == (10, 6) and np.abs(out.inputs).max() < 1
    assert synth.generator is g0 and synth.state.step_count == 3


# -- augmentation ----------------------------------------------------------------


def test_augment_deterministic(rng):
    x = rng.standard_normal((4, 1, 5, 5))
    assert augment(x, 3).tobytes() == augment(x, 3).tobytes()


def test_augment_double_flip_is_identity(rng):
    x = rng.standard_normal((3, 1, 4, 4))
    once = augment(x, 0, flip_prob=1.0, max_shift=0, noise_std=0.0)
    np.testing.assert_array_equal(once, x[..., ::-1])
    np.testing.assert_array_equal(augment(once, 1, flip_prob=1.0, max_shift=0, noise_std=0.0), x)


def test_augment_shift_zero_fills():
    x = np.ones((50, 1, 3, 6))
    out = augment(x, 2, flip_prob=0.0, max_shift=2, noise_std=0.0)
    zero_cols = (out == 0).all(axis=(1, 2)).sum(axis=1)
    assert set(zero_cols) <= {0, 1, 2} and zero_cols.max() > 0


def test_augment_vector_noise_scale(rng):
    x = rng.standard_normal((10_000, 3))
    delta = np.abs(augment(x, 5) - x)
    assert abs(delta.mean() / (0.05 * math.sqrt(2 / math.pi)) - 1) < 0.05


def test_synthesis_config_validation():
    with pytest.raises(DomainError):
        SynthesisConfig(mode="gan")
    with pytest.raises(DomainError):
        SynthesisConfig(samples_per_epoch=0)
