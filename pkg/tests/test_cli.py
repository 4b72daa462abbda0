import json
import subprocess
import sys

import numpy as np
import pytest

from focalfield.image_io import read_float_image

# mirrors tests/conftest.py TINY, but trimmed so the whole CLI round trip runs in seconds
TINY_CONFIG = """\
global_steps: 60
focal_steps_per_block: 20
batch_rays: 128
step_scale: 2.0
initial_depth: 2
max_depth: 3
refine_every: 30
base_resolution: 4
max_resolution: 16
levels: 4
log2_table_size: 11
hidden_density: 16
hidden_color: 16
error_map_refresh: 10
"""


def cli(*args, check=True):
    out = subprocess.run([sys.executable, "-m", "focalfield.cli", *map(str, args)], capture_output=True, text=True)
    if check and out.returncode != 0:
        raise AssertionError(out.stderr)
    return out


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY_CONFIG)
    cli("gen-scene", "--out", root / "data", "--blobs-per-district", 3, "--train-cameras", 6, "--test-per-district", 1,
        "--boundary-cameras", 1, "--size", 16, "--steps-per-ray", 256, "--seed", 2)
    return root


def run_all(root, run, *extra):
    data = root / "data"
    cfg = root / "tiny.yaml"
    cli("train-global", "--data", data, "--run", run, "--config", cfg, *extra)
    cli("train-focal", "--data", data, "--run", run, "--all", *extra)
    return cli("eval", "--data", data, "--run", run, *extra)


def test_full_cli_round_trip(tiny_data):
    run = tiny_data / "run"
    out = run_all(tiny_data, run)
    assert "mean PSNR" in out.stdout
    for f in ("octree.bin", "encoder_global.bin", "decoder.bin", "encoder_focal_0.bin", "encoder_focal_1.bin",
              "blocks.json", "config.json", "metrics.json"):
        assert (run / f).exists(), f
    metrics = json.loads((run / "metrics.json").read_text())
    assert metrics["label"] == "focal" and metrics["count"] == 3 and "config_hash" in metrics
    assert json.loads((run / "config.json").read_text())["global_steps"] == 60

    cli("render", "--data", tiny_data / "data", "--run", run, "--camera", 0)
    rgb = read_float_image(run / "render_000.f32")
    assert rgb.shape == (16, 16, 3) and (run / "render_000.png").exists() and (run / "render_000_depth.f32").exists()
    cli("render", "--data", tiny_data / "data", "--run", run, "--camera", 0, "--global-only", "--out", run / "g")
    assert (run / "g.png").exists()

    cli("error-maps", "--data", tiny_data / "data", "--run", run, "--block", 1)
    maps = sorted((run / "error_maps_1").glob("*.f32"))
    assert len(maps) == 3 and all(np.all(read_float_image(m) >= 0) for m in maps)

    cli("eval", "--data", tiny_data / "data", "--run", run, "--global-only", "--dump")
    assert json.loads((run / "metrics.json").read_text())["label"] == "global"
    assert len(list((run / "eval").glob("???.f32"))) == 3


def test_cli_errors_are_reported(tiny_data, tmp_path):
    out = cli("eval", "--data", tiny_data / "data", "--run", tmp_path / "nope", check=False)
    assert out.returncode != 0 and "error" in out.stderr
    run = tmp_path / "half"
    cli("train-global", "--data", tiny_data / "data", "--run", run, "--config", tiny_data / "tiny.yaml")
    out = cli("eval", "--data", tiny_data / "data", "--run", run, check=False)
    assert out.returncode == 1 and "block 0" in out.stderr
    out = cli("render", "--data", tiny_data / "data", "--run", run, "--camera", 99, check=False)
    assert out.returncode != 0
