"""
Reverse chains on a Gaussian toy prior
======================================

For a prior d0 ~ N(mu, s^2) the ideal noise predictor has a closed form,
so the ancestral sampler can be run without any network.  With a unit
prior, 10^4 chains started from unit noise land on its mean and variance.
A narrower prior shows the small variance excess that comes from adding
noise of variance beta_t at every step.

Run:  python demos/gaussian_sampler.py
"""

import math

import numpy as np

from recongen import make_linear_schedule, forward_sample, reverse_step

schedule = make_linear_schedule(100, 1e-4, 0.2)
print(f"100 steps, gamma at the start of sampling: {schedule.gamma(100):.2e}")


def ideal_eps(d, gamma, mu, s):
    # E[eps | d_t] for a Gaussian prior
    return math.sqrt(1 - gamma) * (d - math.sqrt(gamma) * mu) / (gamma * s**2 + 1 - gamma)


rng = np.random.default_rng(0)
for mu, s in ((0.0, 1.0), (0.5, 0.3)):
    d = rng.standard_normal(10_000)
    for t in range(schedule.num_steps, 0, -1):
        d = reverse_step(d, ideal_eps(d, schedule.gamma(t), mu, s), schedule, t, rng=rng)
    print(f"prior N({mu}, {s**2:.2f}):  sample mean {d.mean():.4f}  var {d.var():.4f}")

# %%
# Replay: noise a known d0 forward, then undo it with a predictor that knows
# d0.  Without added noise every step is exact up to rounding.

d0 = 0.1 * rng.standard_normal((16, 16, 3))
eps = rng.standard_normal(d0.shape)
d = forward_sample(d0, schedule.gamma(100), eps)
for t in range(100, 0, -1):
    g = schedule.gamma(t)
    d = reverse_step(d, (d - math.sqrt(g) * d0) / math.sqrt(1 - g), schedule, t)
print(f"replay max error {np.abs(d - d0).max():.2e}")
