"""End-to-end inference: reconstruct, pick per-tile step budgets, generate
residual detail on each tile, stitch, and add back."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import NoiseSchedule, ScheduleFamily, reverse_step, standard_normal_like
from .networks import ParamSet, load_checkpoint, recon_forward, run_padded, save_checkpoint, snap
from .tiling import plan_tiles, stitch

STEP_GRID = tuple(range(0, 101, 10))


@dataclass
class PipelineBundle:
    recon: ParamSet
    gen: ParamSet
    controller: ParamSet | None = None
    family: ScheduleFamily = field(default_factory=lambda: ScheduleFamily.matched(1e-3))
    tile: int = 256
    overlap: int = 32
    blend: int = 8
    seed: int = 0
    final_step_noiseless: bool = True
    batch_size: int = 128

    def __post_init__(self):
        c = self.recon.config.out_channels
        if self.gen.config.in_channels != c or self.gen.config.condition_channels != c:
            raise ValueError("noise predictor channels disagree with the reconstructor")
        if self.controller is not None and self.controller.config.in_channels != self.recon.config.in_channels:
            raise ValueError("controller channels disagree with the reconstructor")

    def save(self, path) -> None:
        path = Path(path)
        save_checkpoint(self.recon, path / "recon")
        save_checkpoint(self.gen, path / "gen")
        if self.controller is not None:
            save_checkpoint(self.controller, path / "controller")
        (path / "schedules.txt").write_text(self.family.to_text())
        (path / "bundle.txt").write_text(
            f"tile = {self.tile}\noverlap = {self.overlap}\nblend = {self.blend}\nseed = {self.seed}\n"
            f"final_step_noiseless = {int(self.final_step_noiseless)}\n")

    @classmethod
    def load(cls, path, **overrides) -> "PipelineBundle":
        path = Path(path)
        for part in ("recon", "gen"):
            if not (path / part / "manifest.txt").exists():
                raise FileNotFoundError(f"bundle {path} is missing the {part} checkpoint")
        vals = {}
        if (path / "bundle.txt").exists():
            for line in (path / "bundle.txt").read_text().splitlines():
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = int(v)
        vals["final_step_noiseless"] = bool(vals.get("final_step_noiseless", 1))
        family = (ScheduleFamily.from_text((path / "schedules.txt").read_text())
                  if (path / "schedules.txt").exists() else ScheduleFamily())
        ctrl = load_checkpoint(path / "controller") if (path / "controller" / "manifest.txt").exists() else None
        vals.update(overrides)
        return cls(load_checkpoint(path / "recon"), load_checkpoint(path / "gen"), ctrl, family, **vals)


def _nchw(a):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(a).transpose(0, 3, 1, 2), dtype=np.float32))


def _rngs(bundle, seeds):
    return [np.random.default_rng([bundle.seed, *np.atleast_1d(s).tolist()]) for s in seeds]


def sample_residual(bundle: PipelineBundle, xs, rs, schedule: NoiseSchedule, rngs) -> np.ndarray:
    """Run the reverse chain from unit noise for a batch of patches.

    ``rngs`` supplies one generator per patch so a patch's sample does not
    depend on what it is batched with.
    """
    net = bundle.gen.ema
    cond = _nchw(xs if bundle.gen.config.condition == "noisy" else rs)
    d = standard_normal_like(torch.empty(cond.shape[0], net.config.in_channels, *cond.shape[-2:]), rngs)
    with torch.no_grad():
        for t in range(schedule.num_steps, 0, -1):
            g = torch.full((d.shape[0],), schedule.gamma(t), dtype=torch.float32)
            eps_hat = run_padded(net, d, cond, g)
            d = reverse_step(d, eps_hat, schedule, t, rng=rngs,
                             final_step_noiseless=bundle.final_step_noiseless)
    scale = bundle.gen.config.residual_scale or 1.0
    return snap(scale * d.numpy().transpose(0, 2, 3, 1))


def reconstruct(bundle: PipelineBundle, xs) -> np.ndarray:
    """Reconstructor (EMA weights) output for one image or a stack."""
    xs = np.asarray(xs)
    if xs.ndim == 3:
        return recon_forward(bundle.recon, xs)
    n = bundle.batch_size
    return np.concatenate([recon_forward(bundle.recon, xs[i:i + n]) for i in range(0, len(xs), n)])


def denoise_batch(bundle: PipelineBundle, xs, step: int, seeds, schedule: NoiseSchedule | None = None,
                  rs=None, return_residual: bool = False):
    """Fixed-step outputs for a stack of patches ``(N, H, W, C)``.

    ``seeds[i]`` keys the sampling stream of patch ``i``.  Step 0 returns
    the reconstruction unchanged.
    """
    xs = np.asarray(xs, dtype=np.float64)
    rs = reconstruct(bundle, xs) if rs is None else rs
    if step == 0:
        d = np.zeros_like(rs)
    else:
        schedule = schedule or bundle.family.schedule(step)
        rngs = _rngs(bundle, seeds)
        n = bundle.batch_size
        d = np.concatenate([sample_residual(bundle, xs[i:i + n], rs[i:i + n], schedule, rngs[i:i + n])
                            for i in range(0, len(xs), n)])
    out = rs + d
    return (out, d) if return_residual else out


def denoise_patch(bundle: PipelineBundle, x_patch, step: int, seed=(0, 0),
                  schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Reconstruction plus a ``step``-step generated residual for one patch."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return denoise_batch(bundle, np.asarray(x_patch)[None], step, [seed], schedule)[0]


@dataclass
class DenoiseResult:
    image: np.ndarray
    step_map: np.ndarray
    mean_steps: float
    recon: np.ndarray
    residual: np.ndarray
    residual_tiles: list
    sampler_calls: int = 0


def _fit_controller(bundle, tiles):
    # tiles of images smaller than the controller input are mirror-padded
    size = bundle.controller.config.input_size
    h, w = tiles.shape[1:3]
    if h > size or w > size:
        raise ValueError(f"tiles of {h}x{w} exceed the controller input size {size}")
    if (h, w) == (size, size):
        return tiles
    return np.pad(tiles, ((0, 0), (0, size - h), (0, size - w), (0, 0)), mode="symmetric")


def denoise_image(bundle: PipelineBundle, x, fixed_step: int | None = None) -> DenoiseResult:
    """Tile-wise reconstruct-and-generate for a full image.

    The reconstruction runs once on the whole image.  Each tile gets a
    step budget from the controller (or ``fixed_step``), a residual
    sampled from a stream keyed by its grid position, and the stitched
    residual field is added to the reconstruction.
    """
    from .controller import predict_steps

    x = np.asarray(x, dtype=np.float64)
    if fixed_step is None and bundle.controller is None:
        raise ValueError("no controller in the bundle; pass fixed_step")
    r = reconstruct(bundle, x)
    layout = plan_tiles(x.shape[0], x.shape[1], bundle.tile, bundle.overlap, bundle.blend)
    xt, rt = layout.cut(x), layout.cut(r)
    positions = [ij for _, ij, _ in layout.tiles()]
    if fixed_step is None:
        steps = predict_steps(bundle.controller, _fit_controller(bundle, np.stack(xt)))
    else:
        steps = np.full(len(xt), int(fixed_step))
    tiles: list = [None] * len(xt)
    calls = 0
    for s in sorted(set(int(v) for v in steps)):
        idx = [k for k in range(len(xt)) if steps[k] == s]
        if s == 0:
            for k in idx:
                tiles[k] = np.zeros_like(rt[k])
            continue
        _, d = denoise_batch(bundle, np.stack([xt[k] for k in idx]), s, [positions[k] for k in idx],
                             rs=np.stack([rt[k] for k in idx]), return_residual=True)
        calls += s * len(idx)
        for k, dk in zip(idx, d):
            tiles[k] = dk
    # blend weights are 1, 1/2 or 1/4, so the stitched field stays on a
    # fine dyadic grid and r + residual is exact
    residual = stitch(tiles, layout)
    step_map = np.asarray(steps, dtype=int).reshape(layout.grid)
    return DenoiseResult(r + residual, step_map, float(np.mean(steps)), r, residual, tiles, calls)


def write_step_map(path, step_map) -> None:
    np.savetxt(path, np.asarray(step_map, dtype=int), fmt="%d")
