import os
import sys

import numpy as np
import pytest

sys.path.append(os.getcwd())

from src.gaussians import save_gaussians
from src.harness import build_scene
from src.main import EXIT_FAILED, EXIT_OK, EXIT_USAGE, run
from src.rasterizer import read_raw

SMALL_TOML = """
[scene]
n_objects = 2
n_timesteps = 4

[rig]
n_cameras = 1
width = 32
height = 24
focal = 24.0

[bank]
warmup_frames = 1

[distill]
n_samples = 4

[benchmark]
seeds = [0]
timestep = 1
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("RIGSPLAT_SEED", raising=False)
    monkeypatch.delenv("RIGSPLAT_CONFIG", raising=False)
    (tmp_path / "small.toml").write_text(SMALL_TOML)
    return tmp_path


def test_render_writes_png_and_raw(workdir, capsys):
    code = run(["--config", "small.toml", "render", "--seed", "0", "--delta-pitch", "5", "--output-dir", "out"])
    assert code == EXIT_OK
    assert (workdir / "out" / "cam0.png").exists()
    raw = read_raw(str(workdir / "out" / "cam0.raw"))
    assert raw.shape == (24, 32, 5)
    assert "Wrote 1 renders" in capsys.readouterr().out


def test_render_against_itself_reports_psnr(workdir, capsys):
    assert run(["--config", "small.toml", "render", "--seed", "1", "--output-dir", "ref", "--reference"]) == EXIT_OK
    code = run(["--config", "small.toml", "render", "--seed", "1", "--output-dir", "again", "--reference", "--against", "ref"])
    assert code == EXIT_OK
    assert "PSNR against reference renders" in capsys.readouterr().out


def test_reference_render_is_deterministic(workdir):
    for name in ("a", "b"):
        assert run(["--config", "small.toml", "render", "--seed", "7", "--reference", "--output-dir", name]) == EXIT_OK
    assert (workdir / "a" / "cam0.raw").read_bytes() == (workdir / "b" / "cam0.raw").read_bytes()
    assert (workdir / "a" / "cam0.png").read_bytes() == (workdir / "b" / "cam0.png").read_bytes()


def test_render_serialized_scene(workdir):
    save_gaussians(build_scene(0, n_objects=1).gaussians_at(0), "scene.bin")
    code = run(["--config", "small.toml", "render", "--scene", "scene.bin", "--output-dir", "out"])
    assert code == EXIT_OK
    raw = read_raw(str(workdir / "out" / "cam0.raw"))
    assert np.all(np.isfinite(raw))


def test_missing_scene_file_is_a_usage_error(workdir, capsys):
    code = run(["--config", "small.toml", "render", "--scene", "absent.bin"])
    assert code == EXIT_USAGE
    assert "absent.bin" in capsys.readouterr().out


def test_gradcheck_exit_codes(workdir):
    assert run(["gradcheck", "--scene-size", "4", "--image-size", "12"]) == EXIT_OK
    assert run(["gradcheck", "--scene-size", "4", "--image-size", "12", "--perturb-analytic", "0.01"]) == EXIT_FAILED


def test_bench_with_bad_config_key(workdir, capsys):
    (workdir / "bad.toml").write_text("[losses]\nbogus = 1.0\n")
    assert run(["--config", "bad.toml", "bench"]) == EXIT_USAGE
    assert "losses.bogus" in capsys.readouterr().out


def test_bench_writes_report(workdir):
    code = run(["--config", "small.toml", "bench", "--output-dir", "bench"])
    assert code == EXIT_OK
    assert (workdir / "bench" / "report.csv").exists()
    assert (workdir / "bench" / "summary.txt").exists()


def test_seed_from_environment_must_be_an_integer(workdir, monkeypatch):
    monkeypatch.setenv("RIGSPLAT_SEED", "seven")
    assert run(["--config", "small.toml", "bench"]) == EXIT_USAGE


def test_usage_errors(workdir):
    assert run([]) == EXIT_USAGE
    assert run(["render", "--seed", "0", "--scene", "x.bin"]) == EXIT_USAGE
    assert run(["bench", "--rigs", "tiny"]) == EXIT_USAGE
