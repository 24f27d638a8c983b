import json
import subprocess
import sys

import numpy as np
import pytest

from noderf.cli import default_config, execute
from noderf.synth import read_dataset, read_ppm

SCENE = ["--set", "scene.n_frames=10", "--set", "scene.image_size=12", "--set", "scene.focal=18.0"]
TINY = {
    "train.ray_batch": 24, "train.frames_per_batch": 2, "train.extrap_frames": 2, "train.probe_every": 2,
    "train.probe_rays": 16, "train.warmup.initial": 2, "train.warmup.period": 0, "train.warmup.length": 0,
    "train.model.latent_dim": 6, "train.model.dyn_dim": 3, "train.model.enc_hidden": 6,
    "train.model.ode_hidden": 8, "train.model.ode_depth": 2, "train.model.dec_hidden": 8,
    "train.model.dec_depth": 2, "train.nerf.hidden": 8, "train.nerf.depth": 2, "train.nerf.pos_freqs": 2,
    "train.nerf.dir_freqs": 1, "train.render.n_coarse": 4, "train.render.n_fine": 4, "train.solver.step": 0.25,
}


def sets(d):
    out = []
    for k, v in d.items():
        out += ["--set", f"{k}={json.dumps(v)}"]
    return out


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert execute(["gen-data", "--scene", "pendulum", "--out", str(root / "gen")] + SCENE) == 0
    data = root / "gen" / "data"
    assert execute(["train", "--data", str(data), "--out", str(root / "train"), "--iterations", "4",
                    "--seed", "5"] + sets(TINY)) == 0
    return root, data, root / "train" / "checkpoint.ckpt"


def test_gen_data_writes_dataset(run_dirs):
    root, data, _ = run_dirs
    ds = read_dataset(data)
    assert ds.scene.n_frames == 10 and ds.sequences[0].frames.shape == (10, 1, 12, 12, 3)
    cfg = json.loads((root / "gen" / "run.json").read_text())
    assert cfg["command"] == "gen-data" and cfg["scene.image_size"] == 12


def test_run_json_reproduces_training(run_dirs):
    root, _, ckpt = run_dirs
    out = root / "again"
    assert execute(["train", "--config", str(root / "train" / "run.json"), "--out", str(out)]) == 0
    assert (out / "checkpoint.ckpt").read_bytes() == ckpt.read_bytes()
    assert (out / "metrics.csv").read_text() == (root / "train" / "metrics.csv").read_text()


def test_seed_precedence(run_dirs, monkeypatch):
    root, data, _ = run_dirs
    monkeypatch.setenv("NODERF_SEED", "11")
    assert execute(["gen-data", "--out", str(root / "s1")] + SCENE[:2]) == 0
    assert json.loads((root / "s1" / "run.json").read_text())["seed"] == 11
    assert execute(["gen-data", "--out", str(root / "s2"), "--seed", "12"] + SCENE[:2]) == 0
    assert json.loads((root / "s2" / "run.json").read_text())["seed"] == 12


def test_render_threads_are_bit_identical(run_dirs):
    root, data, ckpt = run_dirs
    a, b = root / "r1", root / "r3"
    base = ["render", "--checkpoint", str(ckpt), "--time", "0.5"]
    assert execute(base + ["--out", str(a), "--threads", "1"]) == 0
    assert execute(base + ["--out", str(b), "--threads", "3"]) == 0
    fa, fb = sorted(a.glob("*.ppm")), sorted(b.glob("*.ppm"))
    assert len(fa) == 1 and fa[0].read_bytes() == fb[0].read_bytes()
    assert read_ppm(fa[0]).shape == (12, 12, 3)


def test_extrapolate_evaluate_analyze(run_dirs):
    root, data, ckpt = run_dirs
    out = root / "x"
    assert execute(["extrapolate", "--checkpoint", str(ckpt), "--out", str(out), "--t-end", "1.5",
                    "--frames", "4"]) == 0
    assert len(list((out / "frames").glob("*.ppm"))) == 4
    times = np.loadtxt(out / "times.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(times, [0.0, 0.5, 1.0, 1.5])
    ev = root / "ev"
    assert execute(["evaluate", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(ev)]) == 0
    summary = json.loads((ev / "metrics_summary.json").read_text())
    assert summary["frames"] == 10 and "groups" in summary
    an = root / "an"
    assert execute(["analyze-latent", "--checkpoint", str(ckpt), "--out", str(an), "--horizon", "2.0",
                    "--set", "analysis.n_initials=4", "--set", "analysis.grid=3"]) == 0
    info = json.loads((an / "analysis_summary.json").read_text())
    assert info["n_clusters"] >= 1 and (an / "sinks.csv").exists() and (an / "divergence.ppm").exists()


def test_exit_codes(run_dirs, tmp_path, capsys):
    root, data, ckpt = run_dirs
    assert execute(["train", "--data", str(data), "--out", str(tmp_path / "a"), "--set", "train.bogus=1"]) == 2
    assert execute(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "b")]) == 2
    assert execute(["render", "--checkpoint", str(ckpt)]) == 2
    assert execute(["train", "--data", str(data), "--out", str(tmp_path / "c"), "--set",
                    "train.ray_batch=0"]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert execute(["render", "--checkpoint", str(bad), "--out", str(tmp_path / "d")]) == 1
    assert "error" in capsys.readouterr().err.lower()
    with pytest.raises(SystemExit) as exc:
        execute(["fly"])
    assert exc.value.code == 2


def test_defaults_are_json_serialisable():
    cfg = default_config()
    assert json.loads(json.dumps(cfg)) == cfg


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "noderf.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "analyze-latent" in res.stdout
