import numpy as np
import pytest

from tidm.diffusion.sampler import run_ddim
from tidm.diffusion.schedule import (
    TERMINAL,
    add_noise,
    ddim_step,
    ddim_timesteps,
    make_linear_schedule,
    strength_to_start,
)
from tidm.errors import InputError, ShapeError
from tidm.numerics import Rng


def test_linear_schedule_defaults(schedule):
    assert schedule.T == 1000
    assert schedule.betas[0] == pytest.approx(1e-4)
    assert schedule.betas[-1] == pytest.approx(0.02)
    assert (np.diff(schedule.alpha_bars) < 0).all()
    assert 0 < schedule.alpha_bars[-1] < 1e-3
    np.testing.assert_array_equal(schedule.loss_weights, np.ones(1000))
    assert schedule.alpha_bar(TERMINAL) == 1.0


def test_schedule_validation():
    with pytest.raises(InputError):
        make_linear_schedule(T=1)
    with pytest.raises(InputError):
        make_linear_schedule(beta_start=0.03, beta_end=0.02)
    with pytest.raises(InputError):
        make_linear_schedule(T=4, loss_weights=[1.0, 1.0, 0.0, 1.0])
    with pytest.raises(InputError):
        make_linear_schedule(beta_start=0.01, beta_end=1.0)


def test_two_step_schedule_products():
    schedule = make_linear_schedule(T=2, beta_start=0.5, beta_end=0.5)
    np.testing.assert_allclose(schedule.alphas, [0.5, 0.5])
    np.testing.assert_allclose(schedule.alpha_bars, [0.5, 0.25])


def test_add_noise_per_sample_timesteps(schedule):
    rng = Rng(0)
    x0 = rng.standard_normal((2, 1, 2, 2))
    eps = rng.standard_normal((2, 1, 2, 2))
    out = add_noise(schedule, x0, eps, np.array([0, 999]))
    for i, t in enumerate((0, 999)):
        a = schedule.alpha_bars[t]
        np.testing.assert_allclose(out[i], np.sqrt(a) * x0[i] + np.sqrt(1 - a) * eps[i], rtol=1e-5, atol=1e-6)
    with pytest.raises(InputError):
        add_noise(schedule, x0, eps, 1000)
    with pytest.raises(ShapeError):
        add_noise(schedule, x0, eps[:1], 3)


def test_ddim_step_with_true_noise_lands_on_the_forward_marginal(schedule):
    rng = Rng(1)
    x0 = rng.standard_normal((1, 4, 3, 3)).astype(np.float64)
    eps = rng.standard_normal((1, 4, 3, 3)).astype(np.float64)
    z_t = add_noise(schedule, x0, eps, 700)
    z_prev, x0_hat = ddim_step(schedule, z_t, eps, 700, 300)
    np.testing.assert_allclose(x0_hat, x0, atol=1e-9)
    np.testing.assert_allclose(z_prev, add_noise(schedule, x0, eps, 300), atol=1e-9)
    z_end, _ = ddim_step(schedule, z_t, eps, 700, TERMINAL)
    np.testing.assert_allclose(z_end, x0, atol=1e-9)


def test_ddim_step_rejects_bad_order(schedule):
    z = np.zeros((1, 1, 2, 2))
    with pytest.raises(InputError):
        ddim_step(schedule, z, z, 10, 10)
    with pytest.raises(InputError):
        ddim_step(schedule, z, z, 1000, 5)


def test_ddim_timesteps(schedule):
    steps = ddim_timesteps(schedule, 50)
    assert len(steps) == 50
    assert steps[0] == 980 and steps[-1] == 0
    assert set(np.diff(steps).tolist()) == {-20}
    assert ddim_timesteps(schedule, 1) == [0]
    with pytest.raises(InputError):
        ddim_timesteps(schedule, 0)
    with pytest.raises(InputError):
        ddim_timesteps(schedule, 1001)


def test_strength_to_start(schedule):
    assert strength_to_start(schedule, 0.0, 50) == (None, [])
    t_start, steps = strength_to_start(schedule, 1.0, 50)
    assert t_start == 980 and len(steps) == 50
    t_start, steps = strength_to_start(schedule, 0.5, 50)
    assert t_start == 480 and len(steps) == 25 and steps[-1] == 0
    t_start, steps = strength_to_start(schedule, 0.75, 50)
    assert len(steps) == 37
    with pytest.raises(InputError):
        strength_to_start(schedule, 1.5, 50)


def test_strength_count_survives_float_rounding(schedule):
    assert 0.29 * 100 < 29
    _, steps = strength_to_start(schedule, 0.29, 100)
    assert len(steps) == 29
    _, steps = strength_to_start(schedule, 0.57, 100)
    assert len(steps) == 57


def test_strength_schedules_are_nested_suffixes(schedule):
    full = ddim_timesteps(schedule, 50)
    previous = []
    for strength in np.linspace(0.0, 1.0, 21):
        _, steps = strength_to_start(schedule, float(strength), 50)
        assert steps == full[len(full) - len(steps) :]
        assert steps[len(steps) - len(previous) :] == previous
        previous = steps


def test_run_ddim_with_oracle_noise_recovers_clean_latent(schedule):
    rng = Rng(2)
    x0 = rng.standard_normal((1, 4, 3, 3)).astype(np.float64)
    eps = rng.standard_normal((1, 4, 3, 3)).astype(np.float64)
    timesteps = ddim_timesteps(schedule, 50)
    assert len(timesteps) == 50
    z = add_noise(schedule, x0, eps, timesteps[0])
    out = run_ddim(schedule, z, timesteps, lambda z_t, t: eps)
    np.testing.assert_allclose(out, x0, atol=1e-8)
