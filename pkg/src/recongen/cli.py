"""Command-line runs: ``python -m recongen <command>``.

Settings resolve as defaults < ``--config`` INI file < command-line
flags, and the resolved settings are written as ``config.ini`` into every
output directory.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

log = logging.getLogger("recongen")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_PREREQ = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class PrerequisiteError(Exception):
    pass


DEFAULTS = {
    "run": {"seed": 0, "device_hint": "cpu"},
    "data": {"n": 100, "size": 64, "recipe": "mixed", "sigma255": 25.0, "channels": 3,
             "fractions": "0.8 0.1 0.1"},
    "nets": {"recon_depth": 2, "recon_channels": 16, "eps_depth": 2, "eps_channels": 16,
             "block_kind": "plain_conv", "condition": "noisy", "controller_channels": 8},
    "recon": {"max_steps": 2000, "learning_rate": 1e-3, "batch_size": 16, "patch_size": 48},
    "diffusion": {"max_steps": 2000, "learning_rate": 1e-3, "batch_size": 16, "patch_size": 48,
                  "num_steps": 2000, "beta_start": 1e-6, "beta_end": 0.01},
    "controller": {"patch_size": 32, "patches_per_image": 4, "epochs": 30, "learning_rate": 2e-3,
                   "batch_size": 64, "holdout": 0.2},
    "ablation": {"mode": "two_stage", "recon_steps": 1000, "gen_steps": 1000},
    "inference": {"tile": 256, "overlap": 32, "blend": 8, "beta_start": 1e-4, "beta_end": 0.0,
                  "final_gamma": 1e-3,
                  "final_step_noiseless": 1, "split": "test"},
    "sweep": {"steps": "0 10 20 30 40 50 60 70 80 90 100", "schedules": "", "split": "val",
              "metric_seed": 0},
}


# --- config -----------------------------------------------------------------------

def _typed(default, raw, key):
    try:
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return str(raw)


def resolve_config(path=None, overrides=None) -> dict:
    """Merge built-in defaults, an optional INI file and ``section.key`` overrides."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    layers = []
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            if not cp.read(path):
                raise ConfigError(f"cannot read config file {path}")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        layers.append({s: dict(cp[s]) for s in cp.sections()})
    if overrides:
        layer: dict = {}
        for dotted, v in overrides.items():
            s, _, k = dotted.partition(".")
            layer.setdefault(s, {})[k] = v
        layers.append(layer)
    for layer in layers:
        for s, vals in layer.items():
            if s not in cfg:
                raise ConfigError(f"unknown config section [{s}]")
            for k, v in vals.items():
                if k not in cfg[s]:
                    raise ConfigError(f"unknown config key {s}.{k}")
                cfg[s][k] = _typed(DEFAULTS[s][k], v, f"{s}.{k}")
    return cfg


def write_resolved(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser()
    for s, vals in cfg.items():
        cp[s] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in vals.items()}
    with open(out / "config.ini", "w") as fh:
        cp.write(fh)
    return out / "config.ini"


def _ints(text):
    try:
        return [int(v) for v in str(text).replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"expected integers, got {text!r}") from None


# --- builders ---------------------------------------------------------------------

def _train_config(cfg, section, stage):
    from .training import TrainConfig, config_from_dict

    keys = {f.name for f in fields(TrainConfig)}
    vals = {k: v for k, v in cfg[section].items() if k in keys}
    try:
        return config_from_dict(dict(vals, stage=stage, seed=cfg["run"]["seed"]))
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def _net_configs(cfg, channels):
    from .networks import EpsNetConfig, ReconNetConfig

    n = cfg["nets"]
    try:
        rc = ReconNetConfig(depth=n["recon_depth"], base_channels=n["recon_channels"],
                            block_kind=n["block_kind"], in_channels=channels, out_channels=channels)
        ec = EpsNetConfig(depth=n["eps_depth"], base_channels=n["eps_channels"], block_kind=n["block_kind"],
                          in_channels=channels, condition_channels=channels, condition=n["condition"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return rc, ec


def _family(cfg):
    from .diffusion import ScheduleFamily

    inf = cfg["inference"]
    if inf["beta_end"] > 0:
        return ScheduleFamily(default=(inf["beta_start"], inf["beta_end"]))
    return ScheduleFamily.matched(inf["final_gamma"], inf["beta_start"])


def _manifest(path):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.tsv"
    if not p.exists():
        raise PrerequisiteError(f"dataset manifest not found: {p}")
    return p


def _require(path, what):
    if not (Path(path) / "manifest.txt").exists():
        raise PrerequisiteError(f"missing {what} checkpoint at {path}")


def _load_bundle(cfg, bundle_dir, need_controller=False):
    from .pipeline import PipelineBundle

    _require(Path(bundle_dir) / "recon", "reconstructor")
    _require(Path(bundle_dir) / "gen", "diffusion")
    if need_controller:
        _require(Path(bundle_dir) / "controller", "controller")
    inf = cfg["inference"]
    bundle = PipelineBundle.load(bundle_dir, tile=inf["tile"], overlap=inf["overlap"], blend=inf["blend"],
                                 seed=cfg["run"]["seed"],
                                 final_step_noiseless=bool(inf["final_step_noiseless"]))
    if not (Path(bundle_dir) / "schedules.txt").exists():
        bundle.family = _family(cfg)
    return bundle


def _controller_patches(xs, ys, size, per_image, seed):
    rng = np.random.default_rng([seed, 0xC0])
    px, py = [], []
    for x, y in zip(xs, ys):
        for _ in range(per_image):
            i = rng.integers(0, x.shape[0] - size + 1)
            j = rng.integers(0, x.shape[1] - size + 1)
            px.append(x[i:i + size, j:j + size])
            py.append(y[i:i + size, j:j + size])
    return list(zip(px, py))


# --- commands ---------------------------------------------------------------------

def cmd_gen_data(cfg, out):
    from .data import NoiseModel, generate_dataset

    d = cfg["data"]
    fr = [float(v) for v in str(d["fractions"]).split()]
    if len(fr) != 3 or abs(sum(fr) - 1) > 1e-9:
        raise ConfigError("data.fractions needs three numbers summing to 1")
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = generate_dataset(out, d["n"], d["size"], d["recipe"], cfg["run"]["seed"],
                                NoiseModel.from_255(d["sigma255"]), tuple(fr), d["channels"])
    except PermissionError as exc:
        raise PrerequisiteError(f"output path not writable: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_resolved(cfg, out)
    print(path)
    return path


def cmd_train(cfg, out, stage, data, recon_dir=None, step_data=None):
    from .data import load_split
    from .diffusion import make_linear_schedule
    from .metrics import RandomFilterProxy
    from .networks import load_checkpoint, save_checkpoint
    from .training import train_ablation_mode, train_generative, train_reconstructive

    if data is None:
        raise ConfigError("--data is required for training")
    xs, ys = load_split(_manifest(data), "train")
    rc, ec = _net_configs(cfg, xs.shape[-1])
    dcfg = cfg["diffusion"]
    schedule = make_linear_schedule(dcfg["num_steps"], dcfg["beta_start"], dcfg["beta_end"])
    out.mkdir(parents=True, exist_ok=True)

    if stage == "recon":
        params = train_reconstructive((xs, ys), _train_config(cfg, "recon", "reconstructive"),
                                      recon_config=rc, log_path=out / "recon_log.tsv")
        save_checkpoint(params, out / "recon")
    elif stage == "diffusion":
        rdir = Path(recon_dir) if recon_dir else out / "recon"
        _require(rdir, "reconstructor")
        recon = load_checkpoint(rdir)
        params = train_generative((xs, ys), recon, schedule, _train_config(cfg, "diffusion", "generative"),
                                  eps_config=ec, log_path=out / "diffusion_log.tsv")
        if rdir != out / "recon":
            save_checkpoint(recon, out / "recon")
        save_checkpoint(params, out / "gen")
        (out / "schedules.txt").write_text(_family(cfg).to_text())
    elif stage == "controller":
        from .controller import (ControllerTrainConfig, collect_step_dataset, load_step_dataset,
                                 save_step_dataset, train_controller)

        bundle = _load_bundle(cfg, out)
        sdir = Path(step_data) if step_data else out / "step_dataset"
        c = cfg["controller"]
        if (sdir / "index.tsv").exists():
            entries = load_step_dataset(sdir)
        else:
            log.info("no step dataset at %s; collecting one", sdir)
            pairs = _controller_patches(xs, ys, c["patch_size"], c["patches_per_image"], cfg["run"]["seed"])
            entries = collect_step_dataset(pairs, bundle, RandomFilterProxy(), seed=cfg["run"]["seed"])
            save_step_dataset(entries, sdir)
        tc = ControllerTrainConfig(learning_rate=c["learning_rate"], batch_size=c["batch_size"],
                                   epochs=c["epochs"], holdout=c["holdout"],
                                   channels=cfg["nets"]["controller_channels"], seed=cfg["run"]["seed"])
        params = train_controller(entries, tc)
        save_checkpoint(params, out / "controller")
        rep = params.report
        np.savetxt(out / "controller_confusion.txt", rep.confusion, fmt="%d")
        (out / "controller_report.txt").write_text(
            f"accuracy = {rep.accuracy!r}\nmajority_baseline = {rep.majority_baseline!r}\n"
            f"train_size = {rep.train_size}\nholdout_size = {rep.holdout_size}\nconstant = {int(rep.constant)}\n")
        print(f"held-out accuracy {rep.accuracy:.3f} (majority baseline {rep.majority_baseline:.3f})")
    else:
        a = cfg["ablation"]
        tcfg = _train_config(cfg, "recon", stage)
        recon, gen = train_ablation_mode(stage, (xs, ys), schedule, tcfg, a["recon_steps"], a["gen_steps"],
                                         condition=cfg["nets"]["condition"], recon_config=rc, eps_config=ec)
        save_checkpoint(recon, out / "recon")
        save_checkpoint(gen, out / "gen")
        (out / "schedules.txt").write_text(_family(cfg).to_text())
    write_resolved(cfg, out)
    return out


def _inputs(cfg, data, inputs, split):
    """``(ids, xs, ys-or-None)`` from a manifest split or float-image files."""
    from .data import load_pair, read_float_image, read_manifest, read_png

    if data is not None:
        man = _manifest(data)
        rows = [e for e in read_manifest(man) if split is None or e.split == split]
        if not rows:
            raise ConfigError(f"no {split!r} entries in {man}")
        pairs = [load_pair(man.parent / e.clean, man.parent / e.noisy, e.shape) for e in rows]
        return [Path(e.noisy).stem for e in rows], [p[0] for p in pairs], [p[1] for p in pairs]
    if not inputs:
        raise ConfigError("give --data or one or more --input files")
    xs = []
    for p in inputs:
        if not Path(p).exists():
            raise PrerequisiteError(f"input not found: {p}")
        try:
            xs.append(read_png(p) if str(p).endswith(".png") else read_float_image(p).astype(np.float64))
        except (ValueError, OSError) as exc:
            raise PrerequisiteError(f"unreadable input {p}: {exc}") from None
    return [Path(p).stem for p in inputs], xs, None


def cmd_denoise(cfg, out, bundle_dir, data=None, inputs=None, fixed_step=None, no_controller=False):
    from .data import write_png
    from .metrics import RandomFilterProxy, pd_report
    from .pipeline import denoise_image, write_step_map

    if no_controller and fixed_step is None:
        fixed_step = max(_ints(cfg["sweep"]["steps"]))
    bundle = _load_bundle(cfg, bundle_dir, need_controller=fixed_step is None)
    ids, xs, ys = _inputs(cfg, data, inputs, cfg["inference"]["split"])
    out.mkdir(parents=True, exist_ok=True)
    outputs, means = [], []
    for i, x in zip(ids, xs):
        res = denoise_image(bundle, x, fixed_step=fixed_step)
        write_png(out / f"{i}.png", res.image)
        write_step_map(out / f"{i}_steps.txt", res.step_map)
        outputs.append(res.image)
        means.append(res.mean_steps)
    if ys is not None:
        rep = pd_report(list(zip(outputs, ys)), RandomFilterProxy(seed=cfg["sweep"]["metric_seed"]), ids)
        rep.write(out / "metrics.tsv")
        print(f"psnr {rep.mean_psnr:.3f} ssim {rep.mean_ssim:.4f} perceptual {rep.mean_perceptual:.5f} "
              f"mean steps {np.mean(means):.1f}")
    (out / "steps.tsv").write_text("id\tmean_steps\n" + "".join(f"{i}\t{m!r}\n" for i, m in zip(ids, means)))
    write_resolved(cfg, out)
    return outputs


def cmd_sweep(cfg, out, bundle_dir, data):
    from .diffusion import make_inference_schedule
    from .metrics import RandomFilterProxy, pd_report
    from .pipeline import denoise_batch

    bundle = _load_bundle(cfg, bundle_dir)
    s = cfg["sweep"]
    _, xs, ys = _inputs(cfg, data, None, s["split"])
    if ys is None:
        raise ConfigError("sweep needs reference images")
    xs, ys = np.stack(xs), np.stack(ys)
    steps = _ints(s["steps"])
    if any(v < 0 for v in steps):
        raise ConfigError("sweep steps must be non-negative")
    scheds = [None]
    if s["schedules"]:
        try:
            scheds = [tuple(float(v) for v in part.split(":")) for part in s["schedules"].split()]
        except ValueError:
            raise ConfigError(f"bad sweep.schedules {s['schedules']!r}") from None
    metric = RandomFilterProxy(seed=s["metric_seed"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n in steps:
        for ends in (scheds if n > 0 else [None]):
            sched = None if ends is None or n == 0 else make_inference_schedule(n, *ends)
            pred = denoise_batch(bundle, xs, n, [(cfg["run"]["seed"], k) for k in range(len(xs))], sched)
            rep = pd_report(list(zip(pred, ys)), metric)
            sched = sched or (bundle.family.schedule(n) if n else None)
            bs, be = (sched.beta_start, sched.beta_end) if sched else (float("nan"), float("nan"))
            rows.append((n, bs, be, rep.mean_psnr, rep.mean_ssim, rep.mean_perceptual))
    with open(out / "sweep.tsv", "w") as fh:
        fh.write("steps\tbeta_start\tbeta_end\tpsnr\tssim\tperceptual\n")
        for r in rows:
            fh.write("\t".join([str(r[0])] + [repr(float(v)) for v in r[1:]]) + "\n")
    np.savetxt(out / "pd_scatter.txt", np.array([[r[5], r[3]] for r in rows]), header="perceptual psnr")
    best = min(rows, key=lambda r: (r[5], r[0]))
    (out / "best.txt").write_text(f"steps = {best[0]}\nbeta_start = {best[1]!r}\nbeta_end = {best[2]!r}\n")
    write_resolved(cfg, out)
    print(f"best: {best[0]} steps, perceptual {best[5]:.5f}, psnr {best[3]:.3f}")
    return rows


DEMO = {
    "data": {"n": 40, "size": 32},
    "nets": {"recon_channels": 8, "eps_channels": 8, "controller_channels": 4},
    "recon": {"max_steps": 60, "batch_size": 8, "patch_size": 32},
    "diffusion": {"max_steps": 60, "batch_size": 8, "patch_size": 32},
    "controller": {"patch_size": 16, "patches_per_image": 2, "epochs": 3},
    "inference": {"tile": 16, "overlap": 4, "blend": 2},
    "sweep": {"steps": "0 10 20"},
}


def cmd_demo(cfg, out, explicit=()):
    """Chain every stage at minimal scale."""
    for s, vals in DEMO.items():
        for k, v in vals.items():
            if f"{s}.{k}" not in explicit:
                cfg[s][k] = v
    cfg["inference"]["tile"] = cfg["controller"]["patch_size"]
    out.mkdir(parents=True, exist_ok=True)
    cmd_gen_data(cfg, out / "data")
    cmd_train(cfg, out / "bundle", "recon", out / "data")
    cmd_train(cfg, out / "bundle", "diffusion", out / "data")
    cmd_train(cfg, out / "bundle", "controller", out / "data")
    cmd_denoise(cfg, out / "denoised", out / "bundle", data=out / "data")
    cmd_sweep(cfg, out / "sweep", out / "bundle", out / "data")
    write_resolved(cfg, out)


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with per-stage sections")
    common.add_argument("--seed", type=int, help="master seed (falls back to $RNG_SEED)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--device-hint", default=None, help="informational; computation runs on CPU")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="recongen", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train one stage into a bundle directory")
    t.add_argument("--stage", required=True,
                   choices=["recon", "diffusion", "controller", "two_stage", "joint", "intermediate_supervision"])
    t.add_argument("--data", help="dataset directory or manifest")
    t.add_argument("--recon", help="reconstructor checkpoint (default: OUT/recon)")
    t.add_argument("--step-data", help="collected step dataset (default: OUT/step_dataset)")
    d = sub.add_parser("denoise", parents=[common], help="denoise images with a trained bundle")
    d.add_argument("--bundle", required=True)
    d.add_argument("--data", help="dataset directory; uses the inference.split entries")
    d.add_argument("--input", action="append", help="noisy .png or float image")
    d.add_argument("--fixed-step", type=int, help="bypass the controller with this step count")
    d.add_argument("--no-controller", action="store_true", help="use the largest sweep step everywhere")
    s = sub.add_parser("sweep", parents=[common], help="perception-distortion sweep over steps")
    s.add_argument("--bundle", required=True)
    s.add_argument("--data", required=True)
    sub.add_parser("demo", parents=[common], help="minimal end-to-end run")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        seed = args.seed
        if seed is None and os.environ.get("RNG_SEED"):
            seed = _typed(0, os.environ["RNG_SEED"], "RNG_SEED")
        if seed is not None:
            overrides["run.seed"] = seed
        if args.device_hint:
            overrides["run.device_hint"] = args.device_hint
        cfg = resolve_config(args.config, overrides)
        if getattr(args, "fixed_step", None) is not None and args.fixed_step < 0:
            raise ConfigError("--fixed-step must be non-negative")
        out = Path(args.out)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, out, args.stage, args.data, args.recon, args.step_data)
        elif args.command == "denoise":
            cmd_denoise(cfg, out, args.bundle, args.data, args.input, args.fixed_step, args.no_controller)
        elif args.command == "sweep":
            cmd_sweep(cfg, out, args.bundle, args.data)
        elif args.command == "demo":
            cmd_demo(cfg, out, explicit=set(overrides))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, FileNotFoundError) as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
