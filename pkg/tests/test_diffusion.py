import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from recongen.diffusion import (ScheduleFamily, forward_sample, make_inference_schedule, make_linear_schedule,
                                read_schedule, reverse_step, sample_training_level, solve_beta_end,
                                standard_normal_like, training_schedule, write_schedule)


def test_training_schedule_endpoints():
    s = training_schedule()
    assert s.num_steps == 2000
    assert s.beta(1) == 1e-6 and s.beta(2000) == 0.01
    assert s.gamma(0) == 1.0


def test_one_step_schedule():
    s = make_linear_schedule(1, 0.3, 0.3)
    assert s.beta(1) == 0.3 and s.gamma(1) == pytest.approx(0.7, abs=1e-16)


def test_final_gamma_matches_exact_product():
    s = training_schedule()
    exact = Fraction(1)
    for b in s.betas:
        exact *= 1 - Fraction(float(b))
    assert abs(s.gamma(2000) - float(exact)) <= 1e-12 * float(exact)
    # sum of betas is about 10.001, so gamma_T is near exp(-10.001)
    assert s.betas.sum() == pytest.approx(10.001, rel=1e-12)


@pytest.mark.parametrize("T,bs,be", [(0, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.2, 0.1), (5, 0.1, 1.0),
                                     (5, float("nan"), 0.1), (5, 0.1, float("inf")), (2.5, 0.1, 0.2)])
def test_schedule_validation(T, bs, be):
    with pytest.raises(ValueError):
        make_linear_schedule(T, bs, be)


@given(st.integers(1, 3000), st.floats(1e-7, 0.5), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_schedule_invariants(T, bs, frac):
    be = bs + frac * (0.99 - bs)
    try:
        s = make_linear_schedule(T, bs, be)
    except ValueError:
        # only rejected when the running product underflows
        assert np.sum(np.log1p(-np.linspace(bs, be, T))) < -700
        return
    assert np.all((s.betas > 0) & (s.betas < 1))
    g = np.concatenate([[1.0], s.gammas])
    assert np.all(np.diff(g) < 0) and np.all(g > 0)
    ratio = s.gammas[1:] / s.gammas[:-1]
    ok = s.gammas[:-1] > 1e-300
    assert np.allclose(ratio[ok], s.alphas[1:][ok], rtol=4e-16, atol=0)


def test_inference_schedule_examples():
    s = make_inference_schedule(500, 1e-6, 0.01)
    assert np.all(np.diff(s.gammas) < 0)
    assert make_inference_schedule(1, 0.2, 0.2).num_steps == 1
    assert make_inference_schedule(100, 1e-4, 0.05).gamma(100) < make_inference_schedule(100, 1e-4, 0.02).gamma(100)


def test_schedule_manifest_round_trip(tmp_path):
    s = make_linear_schedule(37, 1.5e-5, 0.031)
    write_schedule(tmp_path / "s.txt", s)
    back = read_schedule(tmp_path / "s.txt")
    assert back == s and np.array_equal(back.gammas, s.gammas)
    assert "betas" not in (tmp_path / "s.txt").read_text()


def test_sample_level_single_step_and_determinism():
    s = make_linear_schedule(1, 0.1, 0.1)
    assert sample_training_level(s, np.random.default_rng(0)) == (1, s.gamma(1))
    s = training_schedule()
    a = sample_training_level(s, np.random.default_rng(4), size=20)
    b = sample_training_level(s, np.random.default_rng(4), size=20)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_level_uniform():
    s = training_schedule()
    t, g = sample_training_level(s, np.random.default_rng(0), size=100_000)
    counts = np.bincount(t, minlength=2001)[1:]
    assert counts.sum() == 100_000 and t.min() >= 1 and t.max() <= 2000
    e = 100_000 / 2000
    chi2 = ((counts - e) ** 2 / e).sum()
    dof = 1999
    assert abs(chi2 - dof) < 3 * math.sqrt(2 * dof)
    assert np.array_equal(g, s.gammas[t - 1])


def test_continuous_levels_stay_in_interval():
    s = make_linear_schedule(50, 1e-3, 0.05)
    t, g = sample_training_level(s, np.random.default_rng(0), size=1000, continuous=True)
    prev = np.where(t > 1, s.gammas[np.maximum(t - 2, 0)], 1.0)
    assert np.all((g >= s.gammas[t - 1]) & (g <= prev))


def test_forward_sample_endpoints():
    rng = np.random.default_rng(0)
    d0, eps = rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 4, 3))
    assert np.array_equal(forward_sample(d0, 1.0, eps), d0)
    assert np.array_equal(forward_sample(np.zeros_like(d0), 0.5, eps), math.sqrt(0.5) * eps)
    with pytest.raises(ValueError):
        forward_sample(d0, 0.5, eps[:2])
    with pytest.raises(ValueError):
        forward_sample(d0, 0.0, eps)


def test_forward_sample_moments():
    n = 100_000
    eps = np.random.default_rng(1).standard_normal(n)
    out = forward_sample(np.ones(n), 0.36, eps)
    se_mean = math.sqrt(0.64 / n)
    se_var = 0.64 * math.sqrt(2 / (n - 1))
    assert abs(out.mean() - 0.6) < 5 * se_mean
    assert abs(out.var(ddof=1) - 0.64) < 5 * se_var


def test_forward_sample_torch_batch_gamma():
    d0 = torch.randn(3, 2, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(d0)
    g = torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
    out = forward_sample(d0, g[:, None, None, None], eps)
    for i in range(3):
        ref = math.sqrt(g[i]) * d0[i] + math.sqrt(1 - g[i]) * eps[i]
        assert torch.allclose(out[i], ref, rtol=0, atol=1e-15)


def test_reverse_step_identity_when_beta_vanishes():
    # beta below float64 resolution: alpha rounds to 1 and the update is the identity
    s = make_linear_schedule(3, 1e-300, 1e-300)
    d = np.random.default_rng(0).standard_normal((5, 5))
    out = reverse_step(d, np.ones_like(d), s, 2)
    assert np.array_equal(out, d)


def test_reverse_step_formula_and_noise():
    s = make_linear_schedule(10, 1e-3, 0.2)
    rng = np.random.default_rng(0)
    d, e, z = rng.standard_normal((3, 6, 6))
    t = 7
    ref = (d - s.beta(t) / math.sqrt(1 - s.gamma(t)) * e) / math.sqrt(s.alpha(t)) + math.sqrt(s.beta(t)) * z
    assert np.allclose(reverse_step(d, e, s, t, noise=z), ref, rtol=0, atol=1e-14)
    assert np.array_equal(reverse_step(d, e, s, 1, noise=z), reverse_step(d, e, s, 1))
    assert not np.array_equal(reverse_step(d, e, s, 1, noise=z, final_step_noiseless=False),
                              reverse_step(d, e, s, 1))
    for bad in (0, 11):
        with pytest.raises(ValueError):
            reverse_step(d, e, s, bad)
    with pytest.raises(ValueError):
        reverse_step(d, e[:3], s, 3)


def _oracle_replay(schedule, d0, seed):
    """Forward-noise d0 to t=T, then reverse with the d0-aware noise oracle."""
    eps = np.random.default_rng(seed).standard_normal(d0.shape)
    d = forward_sample(d0, schedule.gamma(schedule.num_steps), eps)
    for t in range(schedule.num_steps, 0, -1):
        g = schedule.gamma(t)
        eps_hat = (d - math.sqrt(g) * d0) / math.sqrt(1 - g)
        d = reverse_step(d, eps_hat, schedule, t)
    return d


@pytest.mark.parametrize("T", [1, 10, 100, 2000])
def test_oracle_replay_recovers_d0(T):
    s = make_linear_schedule(T, 1e-4, 0.05) if T < 2000 else training_schedule()
    d0 = 0.1 * np.random.default_rng(0).standard_normal((16, 16, 3))
    assert np.abs(_oracle_replay(s, d0, seed=1) - d0).max() < 1e-6


def test_chains_bit_identical_with_same_seed():
    s = make_linear_schedule(20, 1e-4, 0.1)

    def chain(seed):
        rng = np.random.default_rng(seed)
        d = rng.standard_normal((8, 8))
        for t in range(20, 0, -1):
            d = reverse_step(d, math.sqrt(1 - s.gamma(t)) * d, s, t, rng=rng)
        return d

    assert np.array_equal(chain(3), chain(3))


def test_per_item_generators_match_individual_streams():
    x = torch.zeros(3, 2, 4, 4)
    z = standard_normal_like(x, [np.random.default_rng(i) for i in range(3)])
    for i in range(3):
        ref = np.random.default_rng(i).standard_normal((2, 4, 4)).astype(np.float32)
        assert np.array_equal(z[i].numpy(), ref)


def test_solve_beta_end_hits_target():
    for n in (10, 50, 100):
        be = solve_beta_end(n, 1e-4, 1e-3)
        assert make_linear_schedule(n, 1e-4, be).gamma(n) == pytest.approx(1e-3, rel=1e-9)


def test_family_text_round_trip():
    fam = ScheduleFamily.matched(1e-3)
    back = ScheduleFamily.from_text(fam.to_text())
    assert back == fam
    assert fam.schedule(30).gamma(30) == pytest.approx(1e-3, rel=1e-9)
    assert ScheduleFamily().schedule(7).key() == (7, 1e-6, 0.01)
