"""Per-patch step budgets: label collection, classifier training, prediction.

Labels come from an exhaustive sweep: every patch is run through the
pipeline at each step count in ``{0, 10, ..., 100}`` and the step with the
lowest perceptual distance wins (ties go to the smaller step).
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .networks import ControllerNetConfig, ParamSet, controller_logits, new_params

log = logging.getLogger(__name__)

STEP_GRID = tuple(range(0, 101, 10))


@dataclass(frozen=True)
class StepLabel:
    class_index: int

    def __post_init__(self):
        if not 0 <= int(self.class_index) < len(STEP_GRID):
            raise ValueError(f"class index {self.class_index} outside 0..{len(STEP_GRID) - 1}")

    @property
    def value(self) -> int:
        return 10 * int(self.class_index)

    @classmethod
    def from_steps(cls, steps: int) -> "StepLabel":
        if steps not in STEP_GRID:
            raise ValueError(f"{steps} is not on the step grid {STEP_GRID}")
        return cls(steps // 10)

    def __int__(self):
        return self.value


@dataclass
class StepDatasetEntry:
    x_patch: np.ndarray
    label: StepLabel
    scores: np.ndarray  # one perceptual distance per grid step
    patch_id: str = ""


def best_step(scores) -> StepLabel:
    """Arg-min over grid scores; ``np.argmin`` already picks the first minimum."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(STEP_GRID),):
        raise ValueError(f"need {len(STEP_GRID)} scores, got shape {scores.shape}")
    return StepLabel(int(np.argmin(scores)))


def collect_step_dataset(patch_pairs, bundle, metric, seed: int = 0, batch: int = 64,
                         steps=STEP_GRID) -> list[StepDatasetEntry]:
    """Score each ``(x, y)`` patch at every step and label it with the best.

    Sampling noise for patch ``k`` at step ``s`` comes from the stream
    ``(seed, k, s)`` under the bundle's master seed, so labels do not
    depend on batching.
    """
    from .pipeline import denoise_batch, reconstruct

    if len(patch_pairs) == 0:
        raise ValueError("no patches to label")
    if tuple(steps) != STEP_GRID:
        raise ValueError("labels are defined over the full step grid")
    xs = np.stack([np.asarray(p[0], dtype=np.float64) for p in patch_pairs])
    ys = np.stack([np.asarray(p[1], dtype=np.float64) for p in patch_pairs])
    scores = np.zeros((len(xs), len(STEP_GRID)))
    for lo in range(0, len(xs), batch):
        bx, by = xs[lo:lo + batch], ys[lo:lo + batch]
        rs = reconstruct(bundle, bx)
        for j, s in enumerate(STEP_GRID):
            out = denoise_batch(bundle, bx, s, [(seed, lo + k, s) for k in range(len(bx))], rs=rs)
            scores[lo:lo + batch, j] = metric.batch(np.clip(out, 0, 1), by)
        log.info("labelled %d/%d patches", min(lo + batch, len(xs)), len(xs))
    return [StepDatasetEntry(xs[k], best_step(scores[k]), scores[k], f"p{k:06d}") for k in range(len(xs))]


# --- persistence ------------------------------------------------------------------

INDEX_FIELDS = ["id", "label"] + [f"score_{s}" for s in STEP_GRID]


def save_step_dataset(entries, out_dir) -> Path:
    """Patch files plus ``index.tsv`` (id, label steps, 11 scores)."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    with open(out / "index.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(INDEX_FIELDS)
        for k, e in enumerate(entries):
            pid = e.patch_id or f"p{k:06d}"
            data_mod.write_float_image(out / "patches" / f"{pid}.rgnf", e.x_patch)
            w.writerow([pid, e.label.value, *(repr(float(v)) for v in e.scores)])
    return out / "index.tsv"


def load_step_dataset(out_dir) -> list[StepDatasetEntry]:
    out = Path(out_dir)
    if not (out / "index.tsv").exists():
        raise FileNotFoundError(f"no step dataset index in {out}")
    entries = []
    with open(out / "index.tsv", newline="") as fh:
        r = csv.reader(fh, delimiter="\t")
        if next(r) != INDEX_FIELDS:
            raise ValueError(f"{out / 'index.tsv'}: unexpected header")
        for row in r:
            x = data_mod.read_float_image(out / "patches" / f"{row[0]}.rgnf")
            entries.append(StepDatasetEntry(x, StepLabel.from_steps(int(row[1])),
                                            np.array([float(v) for v in row[2:]]), row[0]))
    return entries


# --- training ---------------------------------------------------------------------

@dataclass
class ControllerTrainConfig:
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    holdout: float = 0.2
    channels: int = 8
    augment: bool = True
    class_weighting: bool = False
    seed: int = 0


@dataclass
class ControllerReport:
    accuracy: float
    majority_baseline: float
    confusion: np.ndarray = field(repr=False)
    train_size: int = 0
    holdout_size: int = 0
    constant: bool = False


def _split(n, holdout, seed):
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    k = int(round(n * holdout)) if n > 1 else 0
    return perm[k:], perm[:k]


def _constant_predictor(cfg: ControllerNetConfig, cls: int, seed: int) -> ParamSet:
    params = new_params("controller", cfg, seed=seed)
    for mod in (params.net, params.ema):
        with torch.no_grad():
            mod.fc.weight.zero_()
            mod.fc.bias.fill_(-1.0)
            mod.fc.bias[cls] = 1.0
        mod.eval()
    return params


def train_controller(entries, config: ControllerTrainConfig | None = None) -> ParamSet:
    """Cross-entropy classifier over the step grid.

    The learning rate follows a cosine decay to zero over the run.  With
    ``class_weighting`` the loss weights classes by inverse frequency.  A
    held-out fraction of the entries is kept aside; the returned ParamSet
    carries a :class:`ControllerReport` as ``.report``.  The evaluation
    copy holds the final weights (BatchNorm statistics included).
    """
    from .training import AdamW

    cfg = config or ControllerTrainConfig()
    entries = list(entries)
    if not entries:
        raise ValueError("empty step dataset")
    xs = np.stack([e.x_patch for e in entries]).astype(np.float32)
    labels = np.array([e.label.class_index for e in entries])
    size, channels = xs.shape[1], xs.shape[-1]
    if xs.shape[1] != xs.shape[2]:
        raise ValueError("controller patches must be square")
    net_cfg = ControllerNetConfig(num_classes=len(STEP_GRID), input_size=size, channels=cfg.channels,
                                  in_channels=channels)
    tr, ho = _split(len(entries), cfg.holdout, cfg.seed)
    if len(tr) == 0:
        tr = ho
    present = np.unique(labels[tr])
    if len(present) < 2:
        warnings.warn(f"step dataset has a single class ({STEP_GRID[present[0]]}); "
                      "emitting a constant predictor", RuntimeWarning, stacklevel=2)
        params = _constant_predictor(net_cfg, int(present[0]), cfg.seed)
        params.report = _report(params, xs[ho], labels[ho], labels[tr], len(tr), constant=True)
        return params

    params = new_params("controller", net_cfg, seed=cfg.seed)
    counts = np.bincount(labels[tr], minlength=len(STEP_GRID)).astype(np.float64)
    weights = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / len(present), 0.0)
    if not cfg.class_weighting:
        weights = (counts > 0).astype(np.float64)
    loss_fn = torch.nn.CrossEntropyLoss(weight=torch.tensor(weights, dtype=torch.float32))
    opt = AdamW([params.net], cfg.learning_rate, cfg.weight_decay)
    params.net.train()
    step, total = 0, cfg.epochs * -(-len(tr) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch, 0xC7])
        order = rng.permutation(tr)
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if len(idx) < 2:
                continue
            bx = xs[idx]
            if cfg.augment:
                ks = rng.integers(0, 8, size=len(idx))
                bx = np.stack([data_mod._dihedral(b, int(k)) for b, k in zip(bx, ks)])
            logits = params.net(torch.from_numpy(np.ascontiguousarray(bx.transpose(0, 3, 1, 2))))
            loss = loss_fn(logits, torch.from_numpy(labels[idx]))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"controller training diverged at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.lr = cfg.learning_rate * 0.5 * (1 + math.cos(math.pi * step / total))
            opt.step()
            step += 1
        log.debug("controller epoch %d loss %.4f", epoch, loss.item())
    params.net.eval()
    params.ema.load_state_dict(params.net.state_dict())
    params.steps = step
    params.report = _report(params, xs[ho], labels[ho], labels[tr], len(tr))
    log.info("controller held-out accuracy %.3f (majority %.3f)",
             params.report.accuracy, params.report.majority_baseline)
    return params


def _report(params, xs, labels, train_labels, n_train, constant=False) -> ControllerReport:
    k = len(STEP_GRID)
    conf = np.zeros((k, k), dtype=int)
    if len(xs) == 0:
        return ControllerReport(float("nan"), float("nan"), conf, n_train, 0, constant)
    pred = predict_steps(params, xs) // 10
    np.add.at(conf, (labels, pred), 1)
    majority = np.bincount(train_labels, minlength=k).argmax()
    return ControllerReport(float(np.mean(pred == labels)), float(np.mean(labels == majority)),
                            conf, n_train, len(xs), constant)


# --- prediction -------------------------------------------------------------------

def predict_steps(params: ParamSet, patches, batch: int = 256) -> np.ndarray:
    """Step values for a stack ``(N, H, W, C)`` of noisy patches.

    Arg-max with ties resolved to the smallest class index.
    """
    patches = np.asarray(patches)
    out = []
    for lo in range(0, len(patches), batch):
        with torch.no_grad():
            logits = controller_logits(params, patches[lo:lo + batch])
        out.append(np.argmax(logits, axis=-1) if not torch.is_tensor(logits)
                   else logits.argmax(-1).numpy())
    return 10 * np.concatenate(out).astype(int)


def predict_step(params: ParamSet, x_patch) -> StepLabel:
    x = np.asarray(x_patch)
    if x.ndim != 3:
        raise ValueError("expected a single (H, W, C) patch")
    return StepLabel(int(predict_steps(params, x[None])[0]) // 10)
