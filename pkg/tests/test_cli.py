import configparser
import subprocess
import sys

import numpy as np
import pytest

from recongen.cli import EXIT_CONFIG, EXIT_OK, EXIT_PREREQ, main, resolve_config
from recongen.data import load_split, read_manifest, read_png
from recongen.diffusion import make_inference_schedule, schedule_grid_search
from recongen.metrics import RandomFilterProxy, read_report
from recongen.pipeline import PipelineBundle, reconstruct


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert main(["demo", "--out", str(out), "--seed", "2"]) == EXIT_OK
    return out


def test_demo_chain_artifacts(demo):
    for rel in ("data/manifest.tsv", "bundle/recon/manifest.txt", "bundle/gen/manifest.txt",
                "bundle/controller/manifest.txt", "bundle/step_dataset/index.tsv",
                "bundle/controller_report.txt", "denoised/metrics.tsv", "denoised/steps.tsv",
                "sweep/sweep.tsv", "sweep/pd_scatter.txt", "sweep/best.txt"):
        assert (demo / rel).exists(), rel
    for d in ("", "data", "bundle", "denoised", "sweep"):
        cp = configparser.ConfigParser()
        cp.read(demo / d / "config.ini")
        assert cp["run"]["seed"] == "2"


def test_sweep_has_one_row_per_step_and_matches_recomputation(demo):
    lines = (demo / "sweep" / "sweep.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:4] == ["steps", "beta_start", "beta_end", "psnr"]
    rows = [l.split("\t") for l in lines[1:]]
    assert [int(r[0]) for r in rows] == [0, 10, 20]
    bundle = PipelineBundle.load(demo / "bundle")
    xs, ys = load_split(demo / "data" / "manifest.tsv", "val")
    r = np.clip(reconstruct(bundle, xs), 0, 1)
    from recongen.metrics import psnr
    assert float(rows[0][3]) == pytest.approx(np.mean([psnr(a, b) for a, b in zip(r, ys)]), rel=1e-12)


def test_fixed_step_zero_equals_reconstruction(demo, tmp_path):
    out = tmp_path / "zero"
    assert main(["denoise", "--out", str(out), "--bundle", str(demo / "bundle"), "--data", str(demo / "data"),
                 "--fixed-step", "0", "--config", str(demo / "config.ini")]) == EXIT_OK
    bundle = PipelineBundle.load(demo / "bundle")
    man = demo / "data" / "manifest.tsv"
    entries = [e for e in read_manifest(man) if e.split == "test"]
    xs, _ = load_split(man, "test")
    for e, x in zip(entries, xs):
        img = read_png(out / f"{e.noisy.rsplit('/', 1)[-1].rsplit('.', 1)[0]}.png")
        ref = np.round(np.clip(reconstruct(bundle, x), 0, 1) * 255) / 255
        assert np.array_equal(img, ref)
        assert set(np.loadtxt(out / f"{e.noisy.rsplit('/', 1)[-1].rsplit('.', 1)[0]}_steps.txt").ravel()) == {0}


def test_denoise_rerun_is_identical(demo, tmp_path):
    args = ["denoise", "--bundle", str(demo / "bundle"), "--data", str(demo / "data"),
            "--config", str(demo / "config.ini")]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_controller_and_fixed_max_reports(demo, tmp_path):
    base = ["denoise", "--bundle", str(demo / "bundle"), "--data", str(demo / "data"),
            "--config", str(demo / "config.ini")]
    assert main(base + ["--out", str(tmp_path / "max"), "--no-controller"]) == EXIT_OK
    a = read_report(demo / "denoised" / "metrics.tsv")
    b = read_report(tmp_path / "max" / "metrics.tsv")
    assert len(a.psnr) == len(b.psnr) > 0
    steps = (tmp_path / "max" / "steps.tsv").read_text().splitlines()[1:]
    assert all(float(l.split("\t")[1]) == 20 for l in steps)


def test_sweep_grid_zero_is_recon_only(demo, tmp_path):
    out = tmp_path / "s0"
    assert main(["sweep", "--out", str(out), "--bundle", str(demo / "bundle"), "--data", str(demo / "data"),
                 "--config", str(demo / "config.ini"), "--set", "sweep.steps=0"]) == EXIT_OK
    ref = (demo / "sweep" / "sweep.tsv").read_text().splitlines()[1]
    assert (out / "sweep.tsv").read_text().splitlines()[1:] == [ref]


def test_sweep_and_grid_search_agree(demo, tmp_path):
    out = tmp_path / "sched"
    cands = "1e-4:0.3 1e-3:0.05"
    assert main(["sweep", "--out", str(out), "--bundle", str(demo / "bundle"), "--data", str(demo / "data"),
                 "--config", str(demo / "config.ini"), "--set", "sweep.steps=5 10",
                 "--set", f"sweep.schedules={cands}"]) == EXIT_OK
    rows = [l.split("\t") for l in (out / "sweep.tsv").read_text().splitlines()[1:]]
    assert len(rows) == 4
    best = dict(l.split(" = ") for l in (out / "best.txt").read_text().splitlines())
    xs, ys = load_split(demo / "data" / "manifest.tsv", "val")
    pick = schedule_grid_search([(n, (bs, be)) for n in (5, 10) for bs, be in ((1e-4, 0.3), (1e-3, 0.05))],
                                list(zip(xs, ys)), PipelineBundle.load(demo / "bundle", seed=2), RandomFilterProxy(),
                                seed=2)
    assert pick == make_inference_schedule(int(best["steps"]), float(best["beta_start"]), float(best["beta_end"]))


def test_gen_data_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / d), "--seed", "5", "--set", "data.n=10",
                     "--set", "data.size=16"]) == EXIT_OK
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()
    entries = read_manifest(tmp_path / "a" / "manifest.tsv")
    assert len(entries) == 10 and {e.split for e in entries} == {"train", "val", "test"}


def test_rng_seed_environment_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("RNG_SEED", "5")
    assert main(["gen-data", "--out", str(tmp_path / "env"), "--set", "data.n=10", "--set", "data.size=16"]) == 0
    monkeypatch.delenv("RNG_SEED")
    assert main(["gen-data", "--out", str(tmp_path / "flag"), "--seed", "5", "--set", "data.n=10",
                 "--set", "data.size=16"]) == 0
    assert (tmp_path / "env" / "manifest.tsv").read_bytes() == (tmp_path / "flag" / "manifest.tsv").read_bytes()


def test_diffusion_without_recon_is_prerequisite_error(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--set", "data.n=10", "--set", "data.size=16"]) == 0
    code = main(["train", "--stage", "diffusion", "--out", str(tmp_path / "b"), "--data", str(tmp_path / "d")])
    assert code == EXIT_PREREQ
    assert "reconstructor" in capsys.readouterr().err


def test_denoise_without_bundle_is_prerequisite_error(tmp_path):
    assert main(["denoise", "--out", str(tmp_path / "o"), "--bundle", str(tmp_path / "none"),
                 "--input", "x.png", "--fixed-step", "0"]) == EXIT_PREREQ


@pytest.mark.parametrize("args", [
    ["gen-data", "--set", "bogus.key=1"],
    ["gen-data", "--set", "data.nope=1"],
    ["gen-data", "--set", "data.n=many"],
    ["gen-data", "--set", "data.fractions=0.5 0.5 0.5"],
    ["denoise", "--bundle", "b", "--fixed-step", "-1"],
    ["train", "--stage", "magic"],
])
def test_config_errors(tmp_path, args):
    assert main(args + ["--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_config_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[data]\nn = 7\nsize = 20\n")
    cfg = resolve_config(str(ini), {"data.size": "24"})
    assert cfg["data"]["n"] == 7 and cfg["data"]["size"] == 24 and cfg["data"]["recipe"] == "mixed"


def test_joint_mode_emits_both_checkpoints(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--set", "data.n=10", "--set", "data.size=16"]) == 0
    args = ["train", "--stage", "joint", "--out", str(tmp_path / "j"), "--data", str(tmp_path / "d"),
            "--set", "ablation.recon_steps=2", "--set", "ablation.gen_steps=1", "--set", "recon.patch_size=16",
            "--set", "nets.recon_channels=4", "--set", "nets.eps_channels=4"]
    assert main(args) == EXIT_OK
    for part in ("recon", "gen"):
        assert (tmp_path / "j" / part / "manifest.txt").exists()
    assert (tmp_path / "j" / "config.ini").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "recongen", "gen-data", "--out", str(tmp_path / "m"),
                           "--set", "data.n=4", "--set", "data.size=8"], capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "m" / "manifest.tsv").exists()
    assert subprocess.run([sys.executable, "-m", "recongen"], capture_output=True).returncode == EXIT_CONFIG
