"""Noise schedules and the forward/reverse diffusion updates on residuals.

Arrays may be numpy arrays or torch tensors; schedule arithmetic is kept
in double precision and only the final elementwise updates touch the
caller's dtype.  Time steps are 1-based: ``t`` runs over ``1..T`` and
``gamma(0) == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    num_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    gammas: np.ndarray = field(repr=False)
    # 1 - gamma_t evaluated without cancellation near gamma ~ 1
    one_minus_gammas: np.ndarray = field(repr=False)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def gamma(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.gammas[t - 1])

    def key(self) -> tuple:
        return (self.num_steps, self.beta_start, self.beta_end)

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


def _check_endpoints(T, beta_start, beta_end):
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ValueError(f"number of steps must be a positive integer, got {T!r}")
    for v in (beta_start, beta_end):
        if not math.isfinite(v):
            raise ValueError("schedule endpoints must be finite")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    _check_endpoints(T, beta_start, beta_end)
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    gammas = np.cumprod(alphas)
    omg = -np.expm1(np.cumsum(np.log1p(-betas)))
    # subnormal gammas lose the strict decrease
    if gammas[-1] < np.finfo(np.float64).tiny:
        raise ValueError("schedule drives gamma to zero (underflow); use fewer or smaller betas")
    for a in (betas, alphas, gammas, omg):
        a.flags.writeable = False
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas, gammas, omg)


def make_inference_schedule(num_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """A fresh ``num_steps`` linear schedule, unrelated to the training grid."""
    return make_linear_schedule(num_steps, beta_start, beta_end)


def training_schedule() -> NoiseSchedule:
    return make_linear_schedule(2000, 1e-6, 0.01)


def sample_training_level(schedule: NoiseSchedule, rng: np.random.Generator, size=None,
                          continuous: bool = False):
    """Draw ``t`` uniformly on ``1..T`` and return ``(t, gamma)``.

    With ``continuous=True`` gamma is drawn uniformly between
    ``gamma(t)`` and ``gamma(t - 1)`` instead of taking ``gamma(t)``.
    """
    t = rng.integers(1, schedule.num_steps + 1, size=size)
    g = schedule.gammas[t - 1]
    if continuous:
        prev = np.where(t > 1, schedule.gammas[np.maximum(t - 2, 0)], 1.0)
        g = rng.uniform(g, prev)
    if size is None:
        return int(t), float(g)
    return t, np.asarray(g, dtype=np.float64)


def _as_like(v, ref):
    if isinstance(ref, torch.Tensor):
        if not isinstance(v, torch.Tensor):
            v = torch.as_tensor(np.asarray(v))
        return v.to(dtype=ref.dtype, device=ref.device)
    return np.asarray(v, dtype=np.float64)


def _check_gamma(gamma):
    g = np.asarray(gamma.detach().cpu() if isinstance(gamma, torch.Tensor) else gamma, dtype=np.float64)
    if not np.all(np.isfinite(g)) or np.any(g <= 0) or np.any(g > 1):
        raise ValueError("gamma must lie in (0, 1]")


def forward_sample(d0, gamma, epsilon):
    """``sqrt(gamma) * d0 + sqrt(1 - gamma) * epsilon``.

    ``gamma`` is a scalar or an array broadcastable against ``d0`` (e.g.
    shaped ``(N, 1, 1, 1)`` for a batch).
    """
    if tuple(d0.shape) != tuple(epsilon.shape):
        raise ValueError(f"shape mismatch: {tuple(d0.shape)} vs {tuple(epsilon.shape)}")
    _check_gamma(gamma)
    if np.isscalar(gamma) or (isinstance(gamma, np.ndarray) and gamma.ndim == 0):
        g = float(gamma)
        return math.sqrt(g) * d0 + math.sqrt(1.0 - g) * epsilon
    g = _as_like(gamma, d0)
    lib = torch if isinstance(d0, torch.Tensor) else np
    return lib.sqrt(g) * d0 + lib.sqrt(1.0 - g) * epsilon


def standard_normal_like(x, rng):
    """Unit Gaussian noise shaped like ``x``.

    ``rng`` is a numpy Generator, or a sequence of Generators giving one
    independent stream per leading-axis item.
    """
    if isinstance(rng, np.random.Generator):
        z = rng.standard_normal(tuple(x.shape))
    else:
        if len(rng) != x.shape[0]:
            raise ValueError("need one generator per batch item")
        z = np.stack([g.standard_normal(tuple(x.shape[1:])) for g in rng])
    return _as_like(z, x)


def reverse_step(d_t, eps_hat, schedule: NoiseSchedule, t: int, rng=None,
                 final_step_noiseless: bool = True, noise=None):
    """One ancestral update ``d_t -> d_{t-1}``.

    ``(d_t - beta_t / sqrt(1 - gamma_t) * eps_hat) / sqrt(alpha_t)`` plus
    ``sqrt(beta_t)`` times fresh unit noise.  The noise comes from
    ``noise`` if given, otherwise from ``rng``; with neither the update is
    the deterministic mean.  At ``t == 1`` the noise is dropped when
    ``final_step_noiseless`` is set.
    """
    if not 1 <= t <= schedule.num_steps:
        raise ValueError(f"t={t} outside 1..{schedule.num_steps}")
    if tuple(d_t.shape) != tuple(eps_hat.shape):
        raise ValueError(f"shape mismatch: {tuple(d_t.shape)} vs {tuple(eps_hat.shape)}")
    beta = float(schedule.betas[t - 1])
    coef = beta / math.sqrt(float(schedule.one_minus_gammas[t - 1]))
    out = (d_t - coef * eps_hat) / math.sqrt(float(schedule.alphas[t - 1]))
    if t == 1 and final_step_noiseless:
        return out
    if noise is None and rng is not None:
        noise = standard_normal_like(d_t, rng)
    if noise is not None:
        out = out + math.sqrt(beta) * noise
    return out


# --- inference schedule families ---------------------------------------------

def solve_beta_end(num_steps: int, beta_start: float, final_gamma: float) -> float:
    """Largest-step beta so that the linear schedule ends at ``final_gamma``.

    Clamped to 0.999 when even that cannot reach the target.
    """
    def end_gamma(be):
        return make_linear_schedule(num_steps, beta_start, be).gamma(num_steps)

    lo, hi = beta_start, 0.999
    if end_gamma(lo) <= final_gamma:
        return lo
    if end_gamma(hi) > final_gamma:
        return hi
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if end_gamma(mid) > final_gamma:
            lo = mid
        else:
            hi = mid
    return hi


@dataclass
class ScheduleFamily:
    """Inference schedules indexed by step count.

    Step counts listed in ``endpoints`` use their own ``(beta_start,
    beta_end)``; any other count uses ``default``.
    """

    default: tuple = (1e-6, 0.01)
    endpoints: dict = field(default_factory=dict)

    def schedule(self, num_steps: int) -> NoiseSchedule:
        bs, be = self.endpoints.get(int(num_steps), self.default)
        return make_inference_schedule(int(num_steps), bs, be)

    @classmethod
    def matched(cls, final_gamma: float, beta_start: float = 1e-4,
                steps: Sequence[int] = range(10, 101, 10)) -> "ScheduleFamily":
        """Per step count, pick ``beta_end`` so every schedule ends at ``final_gamma``."""
        eps = {int(n): (beta_start, solve_beta_end(int(n), beta_start, final_gamma)) for n in steps}
        return cls(default=eps[max(eps)], endpoints=eps)

    def to_text(self) -> str:
        lines = [f"default = {self.default[0]!r} {self.default[1]!r}"]
        lines += [f"{n} = {bs!r} {be!r}" for n, (bs, be) in sorted(self.endpoints.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ScheduleFamily":
        default, eps = (1e-6, 0.01), {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, val = (s.strip() for s in line.split("=", 1))
            bs, be = (float(v) for v in val.split())
            if key == "default":
                default = (bs, be)
            else:
                eps[int(key)] = (bs, be)
        return cls(default, eps)


def write_schedule(path, schedule: NoiseSchedule) -> None:
    """Plain-text manifest; betas are regenerated on load, never stored."""
    Path(path).write_text(
        f"num_steps = {schedule.num_steps}\n"
        f"beta_start = {schedule.beta_start!r}\n"
        f"beta_end = {schedule.beta_end!r}\n"
    )


def read_schedule(path) -> NoiseSchedule:
    vals = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            vals[k] = v
    try:
        return make_linear_schedule(int(vals["num_steps"]), float(vals["beta_start"]),
                                    float(vals["beta_end"]))
    except KeyError as exc:
        raise ValueError(f"{path}: schedule manifest missing {exc}") from None


def schedule_grid_search(candidates, val_pairs, models, metric, seed: int = 0,
                         return_scores: bool = False):
    """Pick the inference schedule with the lowest mean perceptual distance.

    ``candidates`` holds ``(num_steps, (beta_start, beta_end))`` tuples and
    ``models`` is a :class:`~recongen.pipeline.PipelineBundle`.  Every
    candidate is scored on the full reconstruct-plus-generate output for
    all ``val_pairs``; ties go to the candidate with fewer steps.
    """
    from .pipeline import denoise_batch

    candidates = list(candidates)
    if not candidates:
        raise ValueError("no schedule candidates")
    if len(val_pairs) == 0:
        raise ValueError("empty validation set")
    xs = np.stack([p[0] for p in val_pairs])
    ys = np.stack([p[1] for p in val_pairs])
    scores = []
    for n, (bs, be) in candidates:
        sched = make_inference_schedule(n, bs, be)
        out = denoise_batch(models, xs, n, seeds=[(seed, i) for i in range(len(xs))], schedule=sched)
        scores.append(float(np.mean(metric.batch(np.clip(out, 0, 1), ys))))
    order = sorted(range(len(candidates)), key=lambda i: (scores[i], candidates[i][0]))
    n, (bs, be) = candidates[order[0]]
    best = make_inference_schedule(n, bs, be)
    return (best, scores) if return_scores else best
