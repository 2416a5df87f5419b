"""Reconstruct-and-generate denoising: a regression denoiser followed by a
residual diffusion sampler whose step budget is chosen per tile."""

from .controller import StepDatasetEntry, StepLabel, collect_step_dataset, predict_step, train_controller
from .diffusion import (NoiseSchedule, ScheduleFamily, forward_sample, make_inference_schedule,
                        make_linear_schedule, reverse_step, schedule_grid_search, training_schedule)
from .metrics import MetricReport, RandomFilterProxy, pd_report, perceptual_distance, psnr, ssim
from .networks import (ControllerNetConfig, EpsNetConfig, ParamSet, ReconNetConfig, controller_forward,
                       eps_forward, load_checkpoint, new_params, recon_forward, save_checkpoint)
from .pipeline import DenoiseResult, PipelineBundle, denoise_batch, denoise_image, denoise_patch
from .tiling import TileLayout, plan_tiles, stitch
from .training import TrainConfig, train_ablation_mode, train_generative, train_reconstructive

__all__ = [name for name in dir() if not name.startswith("_")]
