"""Losses, AdamW, EMA and the training loops.

The default schedule is two-stage: fit the reconstructor with a pixel
loss, freeze it, then fit the noise predictor on the residuals it leaves
behind.  ``train_ablation_mode`` also provides end-to-end alternatives for
comparison.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .diffusion import NoiseSchedule, forward_sample, sample_training_level
from .metrics import RandomFilterProxy, psnr
from .networks import EpsNetConfig, ParamSet, ReconNetConfig, new_params

log = logging.getLogger(__name__)

STAGES = ("reconstructive", "generative", "joint", "intermediate_supervision", "two_stage")


@dataclass
class TrainConfig:
    stage: str = "reconstructive"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    ema_warmup: bool = True
    batch_size: int = 16
    max_steps: int = 2000
    patch_size: int = 48
    recon_loss_p: int = 2
    gen_loss_p: int = 1
    grad_clip: float = 1.0
    eval_every: int = 250
    plateau_window: int = 5
    plateau_tol: float = 0.01
    continuous_gamma: bool = False
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.recon_loss_p not in (1, 2) or self.gen_loss_p not in (1, 2):
            raise ValueError("loss exponents must be 1 or 2")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Full-scale settings: batch 256 of 128px crops, lr 1e-4, EMA 0.9999."""
        base = dict(learning_rate=1e-4, ema_decay=0.9999, batch_size=256, patch_size=128,
                    max_steps=1_000_000)
        base.update(kw)
        return cls(**base)


def _coerce(cls, values: dict):
    out = {}
    types = {f.name: f.type for f in fields(cls)}
    for k, v in values.items():
        if k not in types:
            raise KeyError(f"unknown {cls.__name__} key {k!r}")
        t = types[k]
        if t in ("bool", bool):
            out[k] = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes", "on")
        elif t in ("int", int):
            out[k] = int(v)
        elif t in ("float", float):
            out[k] = float(v)
        else:
            out[k] = v
    return out


def config_from_dict(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    return replace(base, **_coerce(TrainConfig, values))


def write_config(path, sections: dict) -> None:
    """Write ``{section: {key: value}}`` as a flat ``key = value`` INI file."""
    cp = configparser.ConfigParser()
    for name, vals in sections.items():
        cp[name] = {k: str(v) for k, v in (asdict(vals) if hasattr(vals, "__dataclass_fields__") else vals).items()}
    with open(path, "w") as fh:
        cp.write(fh)


def read_config(path) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return {s: dict(cp[s]) for s in cp.sections()}


# --- losses -----------------------------------------------------------------------

def _pnorm_mean(a, b, p):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    diff = (a - b).abs() if torch.is_tensor(a) else np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))
    val = (diff**p).mean()
    return val if torch.is_tensor(val) else float(val)


def loss_reconstructive(pred, y, p: int = 2):
    """Mean ``|y - pred|^p`` over all elements."""
    return _pnorm_mean(pred, y, p)


def loss_generative(eps_hat, eps, p: int = 1):
    """Mean ``|eps - eps_hat|^p`` over all elements."""
    return _pnorm_mean(eps_hat, eps, p)


# --- optimiser and EMA --------------------------------------------------------------

def optimizer_step(params: dict, grads: dict, state: dict, lr: float, weight_decay: float = 0.0,
                   betas=(0.9, 0.999), eps: float = 1e-8):
    """In-place AdamW update of the tensors in ``params``.

    Weight decay shrinks each parameter by ``lr * weight_decay`` separately
    from the gradient-based step.  Raises ``FloatingPointError`` (before
    touching anything) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    b1, b2 = betas
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = state.setdefault(name, {"step": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)})
            st["step"] += 1
            st["m"].mul_(b1).add_(g, alpha=1 - b1)
            st["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
            mhat = st["m"] / (1 - b1 ** st["step"])
            vhat = st["v"] / (1 - b2 ** st["step"])
            p.mul_(1 - lr * weight_decay)
            p.sub_(lr * mhat / (vhat.sqrt() + eps))
    return params, state


class AdamW:
    """Stateful wrapper around :func:`optimizer_step` for a set of modules."""

    def __init__(self, modules, lr: float, weight_decay: float = 0.0):
        self.params = {}
        for i, m in enumerate(modules):
            for n, p in m.named_parameters():
                if p.requires_grad:
                    self.params[f"{i}.{n}"] = p
        self.lr = lr
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {n: p.grad for n, p in self.params.items()}
        optimizer_step(self.params, grads, self.state, self.lr, self.weight_decay)


def ema_update(ema, live, decay: float):
    """``ema <- decay * ema + (1 - decay) * live`` over all floating state.

    Accepts ParamSets, modules or dicts of tensors.  Integer buffers are
    copied from ``live``.
    """
    if not 0 <= decay < 1:
        raise ValueError("decay must lie in [0, 1)")
    if isinstance(ema, ParamSet):
        ema, live = ema.ema, live.net
    e = ema.state_dict() if hasattr(ema, "state_dict") else ema
    l = live.state_dict() if hasattr(live, "state_dict") else live
    with torch.no_grad():
        for k, v in e.items():
            src = l[k]
            if v.shape != src.shape:
                raise ValueError(f"EMA shape mismatch for {k}")
            if v.dtype.is_floating_point:
                v.mul_(decay).add_(src, alpha=1 - decay)
            else:
                v.copy_(src)
    return ema


def _update_ema(params: ParamSet, cfg: TrainConfig):
    params.steps += 1
    n = params.steps
    decay = min(cfg.ema_decay, (1 + n) / (10 + n)) if cfg.ema_warmup else cfg.ema_decay
    ema_update(params.ema, params.net, decay)


# --- logging ------------------------------------------------------------------------

class MetricsLog:
    """Append-only delimited rows of ``step, loss, psnr, perceptual``."""

    header = ("step", "loss", "psnr", "perceptual")

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list = []
        if self.path is not None and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, delimiter="\t").writerow(self.header)

    def append(self, step, loss, psnr_db=float("nan"), perceptual=float("nan")):
        row = (int(step), float(loss), float(psnr_db), float(perceptual))
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, delimiter="\t").writerow([row[0], *map(repr, row[1:])])


def _t(a):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(a).transpose(0, 3, 1, 2), dtype=np.float32))


def _check_dataset(dataset):
    xs, ys = dataset
    if len(xs) == 0:
        raise ValueError("empty dataset")
    if np.shape(xs) != np.shape(ys):
        raise ValueError("noisy and clean stacks differ in shape")
    return np.asarray(xs), np.asarray(ys)


def _finite(loss, step):
    value = loss.item() if torch.is_tensor(loss) else float(loss)
    if not math.isfinite(value):
        raise FloatingPointError(f"training diverged: loss={value} at step {step}")


def evaluate_recon(params: ParamSet, val, metric=None, batch: int = 64):
    xs, ys = val
    preds = np.concatenate([_recon_numpy(params, xs[i:i + batch]) for i in range(0, len(xs), batch)])
    preds = np.clip(preds, 0, 1)
    p = float(np.mean([psnr(a, b) for a, b in zip(preds, ys)]))
    d = float(np.mean(metric.batch(preds, ys))) if metric is not None else float("nan")
    return p, d


def _recon_numpy(params, xs):
    with torch.no_grad():
        return params.ema(_t(xs)).numpy().transpose(0, 2, 3, 1).astype(np.float64)


def plateaued(history, window: int, tol: float) -> bool:
    """True when the best of the last ``window`` evaluations beats the
    earlier best by less than ``tol`` dB."""
    if len(history) <= window:
        return False
    return max(history[-window:]) - max(history[:-window]) < tol


def train_reconstructive(dataset, config: TrainConfig, params: ParamSet | None = None,
                         recon_config: ReconNetConfig | None = None, val=None, log_path=None,
                         metric=None) -> ParamSet:
    """Fit the reconstructor with the pixel loss.

    Stops after ``max_steps`` or, when ``val`` is given, once validation
    PSNR has plateaued.
    """
    xs, ys = _check_dataset(dataset)
    if params is None:
        recon_config = recon_config or ReconNetConfig(in_channels=xs.shape[-1], out_channels=xs.shape[-1])
        params = new_params("recon", recon_config, seed=config.seed)
    opt = AdamW([params.net], config.learning_rate, config.weight_decay)
    logbook = MetricsLog(log_path)
    history = []
    params.net.train()
    for step in range(config.max_steps):
        bx, by = data_mod.sample_batch(xs, ys, config.batch_size, min(config.patch_size, xs.shape[1]),
                                       config.seed, step, config.augment)
        pred = params.net(_t(bx))
        loss = loss_reconstructive(pred, _t(by), config.recon_loss_p)
        _finite(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        _update_ema(params, config)
        if val is not None and ((step + 1) % config.eval_every == 0 or step + 1 == config.max_steps):
            p, d = evaluate_recon(params, val, metric)
            history.append(p)
            logbook.append(step + 1, loss.item(), p, d)
            log.info("recon step %d loss %.5f val psnr %.3f", step + 1, loss.item(), p)
            if plateaued(history, config.plateau_window, config.plateau_tol):
                log.info("validation PSNR plateaued at step %d", step + 1)
                break
        elif (step + 1) % config.eval_every == 0:
            logbook.append(step + 1, loss.item())
    params.net.eval()
    params.log = logbook.rows
    return params


def _residual_batch(xs, ys, rs, cfg, step):
    """Crop and augment noisy, clean and reconstruction stacks together."""
    stacked = np.concatenate([xs, rs], axis=-1)
    bxr, by = data_mod.sample_batch(stacked, ys, cfg.batch_size, min(cfg.patch_size, xs.shape[1]),
                                    cfg.seed, step, cfg.augment)
    c = xs.shape[-1]
    return bxr[..., :c], by, bxr[..., c:]


def _noise_batch(schedule, cfg, step, shape):
    rng = np.random.default_rng([cfg.seed, step, 0x6E0])
    _, g = sample_training_level(schedule, rng, size=shape[0], continuous=cfg.continuous_gamma)
    eps = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
    return torch.from_numpy(g.astype(np.float32)), eps


def residual_scale_of(residuals) -> float:
    """Standard deviation of a residual stack, rounded to 4 significant digits."""
    std = float(np.std(residuals))
    if not std > 0:
        return 1.0
    return float(f"{std:.4g}")


def _set_residual_scale(params: ParamSet, scale: float) -> float:
    if params.config.residual_scale > 0:
        return params.config.residual_scale
    cfg = replace(params.config, residual_scale=scale)
    params.config = params.net.config = params.ema.config = cfg
    log.info("residual scale %.4g", scale)
    return scale


def train_generative(dataset, recon_params: ParamSet, schedule: NoiseSchedule, config: TrainConfig,
                     params: ParamSet | None = None, eps_config: EpsNetConfig | None = None,
                     log_path=None) -> ParamSet:
    """Fit the noise predictor on residuals of the frozen reconstructor.

    Residual targets come from the reconstructor's EMA weights, evaluated
    once on the full training images.  The diffusion runs on
    ``residual / residual_scale``; an unset scale is taken from the
    standard deviation of the training residuals.
    """
    xs, ys = _check_dataset(dataset)
    if params is None:
        c = xs.shape[-1]
        eps_config = eps_config or EpsNetConfig(in_channels=c, condition_channels=c)
        params = new_params("eps", eps_config, seed=config.seed + 1)
    cond_kind = getattr(params.config, "condition", "noisy")
    rs = np.concatenate([_recon_numpy(recon_params, xs[i:i + 64]) for i in range(0, len(xs), 64)])
    scale = _set_residual_scale(params, residual_scale_of(ys - rs))
    opt = AdamW([params.net], config.learning_rate, config.weight_decay)
    logbook = MetricsLog(log_path)
    params.net.train()
    for step in range(config.max_steps):
        bx, by, br = _residual_batch(xs, ys, rs, config, step)
        d0 = (_t(by) - _t(br)) / scale
        gamma, eps = _noise_batch(schedule, config, step, tuple(d0.shape))
        d_t = forward_sample(d0, gamma[:, None, None, None], eps)
        cond = _t(bx) if cond_kind == "noisy" else _t(br)
        eps_hat = params.net(d_t, cond, gamma)
        loss = loss_generative(eps_hat, eps, config.gen_loss_p)
        _finite(loss, step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params.net.parameters(), config.grad_clip)
        opt.step()
        _update_ema(params, config)
        if (step + 1) % config.eval_every == 0 or step + 1 == config.max_steps:
            logbook.append(step + 1, loss.item())
            log.info("diffusion step %d loss %.5f", step + 1, loss.item())
    params.net.eval()
    params.log = logbook.rows
    return params


ABLATION_MODES = ("two_stage", "joint", "intermediate_supervision")


def train_ablation_mode(mode: str, dataset, schedule: NoiseSchedule, config: TrainConfig,
                        recon_steps: int, gen_steps: int, condition: str = "noisy",
                        recon_config: ReconNetConfig | None = None,
                        eps_config: EpsNetConfig | None = None, val=None):
    """Train a reconstructor/noise-predictor pair under one training strategy.

    ``two_stage`` runs :func:`train_reconstructive` for ``recon_steps`` and
    then :func:`train_generative` for ``gen_steps``.  The single-run modes
    optimise both networks together for ``max(recon_steps, gen_steps)``
    iterations, so neither network gets fewer updates than it would in
    the two-stage run:

    * ``joint``: pixel loss on the final output ``r(x) + d0_hat`` (the
      one-step residual estimate) plus the noise-prediction loss;
    * ``intermediate_supervision``: pixel loss on ``r(x)`` itself plus the
      noise-prediction loss, with residual targets left attached to the
      reconstructor.

    The single-run modes fix an unset residual scale from ``y - x`` since
    their reconstructor moves during training.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    if condition not in ("noisy", "initial_estimate"):
        raise ValueError(f"unknown condition {condition!r}")
    xs, ys = _check_dataset(dataset)
    c = xs.shape[-1]
    recon_config = recon_config or ReconNetConfig(in_channels=c, out_channels=c)
    eps_config = eps_config or EpsNetConfig(in_channels=c, condition_channels=c)
    eps_config = replace(eps_config)
    eps_config.condition = condition
    recon = new_params("recon", recon_config, seed=config.seed)
    gen = new_params("eps", eps_config, seed=config.seed + 1)
    if mode == "two_stage":
        recon = train_reconstructive((xs, ys), replace(config, max_steps=recon_steps), params=recon)
        gen = train_generative((xs, ys), recon, schedule, replace(config, max_steps=gen_steps), params=gen)
        return recon, gen

    scale = _set_residual_scale(gen, residual_scale_of(ys - xs))
    opt = AdamW([recon.net, gen.net], config.learning_rate, config.weight_decay)
    recon.net.train()
    gen.net.train()
    for step in range(max(recon_steps, gen_steps)):
        bx, by = data_mod.sample_batch(xs, ys, config.batch_size, min(config.patch_size, xs.shape[1]),
                                       config.seed, step, config.augment)
        tx, ty = _t(bx), _t(by)
        r = recon.net(tx)
        d0 = (ty - r) / scale
        gamma, eps = _noise_batch(schedule, config, step, tuple(d0.shape))
        g4 = gamma[:, None, None, None]
        d_t = forward_sample(d0, g4, eps)
        eps_hat = gen.net(d_t, tx if condition == "noisy" else r, gamma)
        loss = loss_generative(eps_hat, eps, config.gen_loss_p)
        if mode == "joint":
            d0_hat = ((d_t - torch.sqrt(1 - g4) * eps_hat) / torch.sqrt(g4) * scale).clamp(-1, 1)
            loss = loss + loss_reconstructive(r + d0_hat, ty, config.recon_loss_p)
        else:
            loss = loss + loss_reconstructive(r, ty, config.recon_loss_p)
        _finite(loss, step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(gen.net.parameters(), config.grad_clip)
        opt.step()
        _update_ema(recon, config)
        _update_ema(gen, config)
    recon.net.eval()
    gen.net.eval()
    return recon, gen
