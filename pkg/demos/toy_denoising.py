"""
Reconstruct, then generate: a toy run on one CPU core
=====================================================

Trains a small reconstructor and a residual noise predictor on synthetic
textures with sigma = 25/255 noise, then sweeps the number of sampling
steps.  Step 0 is the reconstruction alone.  More steps add sampled detail
and the perceptual proxy improves.  PSNR can go either way: with a budget
this small the reconstructor underfits, and the residual model puts some of
the missing signal back.  Short budgets (1000 steps or fewer) leave the
residual model too weak to help.

About eight minutes with the default budget.  Pass a number to change it:

    python demos/toy_denoising.py 1000
"""

import sys
import time

import numpy as np
import torch

from recongen import (EpsNetConfig, PipelineBundle, RandomFilterProxy, ReconNetConfig, ScheduleFamily,
                      TrainConfig, denoise_batch, psnr, train_generative, train_reconstructive,
                      training_schedule)
from recongen.data import toy_pairs

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000

train = toy_pairs(400, 64, seed=1)
vx, vy = toy_pairs(60, 64, seed=2)
cfg = TrainConfig(max_steps=steps, batch_size=16, patch_size=48)

t0 = time.time()
recon = train_reconstructive(train, cfg, recon_config=ReconNetConfig(depth=2, base_channels=8))
gen = train_generative(train, recon, training_schedule(), cfg,
                       eps_config=EpsNetConfig(depth=2, base_channels=8))
print(f"trained both stages ({steps} steps each) in {time.time() - t0:.0f}s")
print(f"residual scale learned from y - r(x): {gen.config.residual_scale}")

# %%
# Every step count uses its own linear schedule ending at gamma = 1e-3.

bundle = PipelineBundle(recon=recon, gen=gen, family=ScheduleFamily.matched(1e-3, 1e-4))
metric = RandomFilterProxy()
seeds = [(0, k) for k in range(len(vx))]
base = None
print(f"{'steps':>5} {'PSNR':>7} {'proxy':>7} {'wins':>5}")
for s in (0, 10, 20, 50, 100):
    out = np.clip(denoise_batch(bundle, vx, s, seeds), 0, 1)
    scores = np.asarray(metric.batch(out, vy))
    base = scores if base is None else base
    p = np.mean([psnr(o, y) for o, y in zip(out, vy)])
    print(f"{s:5d} {p:7.2f} {scores.mean():7.4f} {np.mean(scores < base):5.2f}")

# %%
# The full chain, with a learned step controller and tiling, is
# `python -m recongen demo --out runs/demo`.
