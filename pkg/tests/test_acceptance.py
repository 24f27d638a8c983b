"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Trained models for the desk-scale criteria are cached in ``tests/.artifacts``
under a hash of their configuration; delete that directory to retrain.
"""
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import noderf
from noderf import analysis, autograd as ag, cli, metrics, nn, pipelines, synth
from noderf.ode import OdeFunc, SolverConfig, ode_solve
from noderf.radiance import Camera, FieldConfig, RenderConfig, generate_rays, look_at, nerf_loss, render_rays
from noderf.radiance import volume_render

ARTIFACTS = Path(__file__).parent / ".artifacts"
GRAD_TOL = 1e-4


def max_rel_error(f, params, h=1e-5, floor=1e-7):
    """Largest elementwise |analytic - numeric| / max(|analytic|, |numeric|, floor)."""
    ag.reset_graph()
    grads = ag.backward(f(), params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        num = np.zeros(flat.size)
        with ag.no_grad():
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = float(f().data)
                flat[k] = orig - h
                fm = float(f().data)
                flat[k] = orig
                num[k] = (fp - fm) / (2 * h)
        ana = grads[p].data.reshape(-1)
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst = max(worst, float(rel.max()))
    return worst


def cached_training(name: str, dataset, cfg: pipelines.TrainConfig) -> tuple[Path, float]:
    """Checkpoint path for ``cfg`` on ``dataset`` and the wall time its training took.

    Training only happens when no cached copy exists; the time is stored next to it.
    """
    key = json.dumps({"config": cfg.to_flat(), "scene": dataset.scene.to_dict(),
                      "initials": [s.q0 for s in dataset.sequences], "splits": dataset.splits,
                      "version": noderf.__version__}, sort_keys=True, default=float)
    digest = hashlib.sha256(key.encode()).hexdigest()[:12]
    out = ARTIFACTS / f"{name}-{digest}"
    ckpt = out / "checkpoint.ckpt"
    seconds = out / "train_seconds.txt"
    if not ckpt.exists():
        t0 = time.time()
        pipelines.train(dataset, cfg, out_dir=out)
        seconds.write_text(f"{time.time() - t0:.1f}\n")
    return ckpt, float(seconds.read_text())


# ---------------------------------------------------------------- desk-scale configurations


def single_desk_config() -> pipelines.TrainConfig:
    return pipelines.TrainConfig(
        mode="single", iterations=6000, lr=2e-3, ray_batch=256,
        warmup=pipelines.WarmupSchedule(300, 2000, 100),
        nerf=FieldConfig(hidden=64, depth=3, pos_freqs=6, dir_freqs=2),
        render=RenderConfig(16, 16), probe_every=100)


def multi_desk_config() -> pipelines.TrainConfig:
    flat = pipelines.TrainConfig(mode="multi").to_flat()
    flat.update({"iterations": 6000, "lr": 2e-3, "ray_batch": 256,
                 "warmup.initial": 300, "warmup.period": 2000, "warmup.length": 100,
                 "nerf.hidden": 64, "nerf.depth": 3, "nerf.pos_freqs": 6, "nerf.dir_freqs": 2,
                 "render.n_coarse": 16, "render.n_fine": 16,
                 "model.time_input": False, "model.dec_hidden": 256, "model.raw_pose_targets": True,
                 "weights.pose": 1.0, "weights.vel": 1.0, "motion_fraction": 0.5})
    return pipelines.TrainConfig.from_flat(flat)


@pytest.fixture(scope="module")
def pendulum_data():
    return synth.generate_dataset(synth.SceneSpec(kind="pendulum", n_frames=50))


@pytest.fixture(scope="module")
def hill_data():
    return synth.generate_dataset(synth.SceneSpec(kind="bifurcating-hill"))


@pytest.fixture(scope="module")
def single_model(pendulum_data):
    ckpt, train_time = cached_training("single", pendulum_data, single_desk_config())
    model, cfg, meta = pipelines.load_model(ckpt)
    return model, cfg, meta, train_time


@pytest.fixture(scope="module")
def multi_model(hill_data):
    ckpt, train_time = cached_training("multi", hill_data, multi_desk_config())
    model, cfg, meta = pipelines.load_model(ckpt)
    return model, cfg, meta, train_time


# ---------------------------------------------------------------- 1. gradients


def test_criterion_01_gradients(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(101)
    checks = {}

    mlp = nn.MLP(nn.MlpConfig([3, 5, 2], hidden_activation="tanh"), rng)
    x = ag.parameter(rng.normal(size=(4, 3)))
    e = max_rel_error(lambda: ag.sum(ag.square(mlp(x))), mlp.parameters() + [x])
    checks["mlp"] = (e < GRAD_TOL, f"{e:.1e}")

    cell = nn.GRUCell(3, 4, rng)
    h = ag.parameter(rng.normal(size=4))
    xi = ag.parameter(rng.normal(size=3))
    e = max_rel_error(lambda: ag.sum(ag.square(cell(h, xi))), cell.parameters() + [h, xi])
    checks["gru"] = (e < GRAD_TOL, f"{e:.1e}")

    f = OdeFunc(3, 6, rng, depth=2)
    h0 = ag.parameter(rng.normal(size=3))
    solver = SolverConfig("euler", step=0.1)
    e = max_rel_error(lambda: ag.sum(ag.square(ode_solve(f, h0, [0.0, 1.0], solver).states[-1])),
                      f.parameters() + [h0])
    checks["euler10"] = (e < GRAD_TOL, f"{e:.1e}")

    depths = np.sort(rng.uniform(2.0, 6.0, size=(4, 8)), axis=1)
    sig = ag.parameter(rng.exponential(0.5, size=(4, 8)))
    col = ag.parameter(rng.random((4, 8, 3)))
    tgt = rng.random((4, 3))
    e = max_rel_error(lambda: nerf_loss([volume_render(depths, sig, col, 6.0)], tgt), [sig, col])
    checks["render4x8"] = (e < GRAD_TOL, f"{e:.1e}")

    cfg = pipelines.TrainConfig.from_flat({
        **pipelines.TrainConfig().to_flat(),
        "model.latent_dim": 3, "model.dyn_dim": 2, "model.enc_hidden": 3, "model.ode_hidden": 4,
        "model.ode_depth": 2, "model.dec_hidden": 4, "model.dec_depth": 2,
        "nerf.hidden": 6, "nerf.depth": 2, "nerf.pos_freqs": 2, "nerf.dir_freqs": 1,
        "render.n_coarse": 4, "render.n_fine": 0, "solver.step": 0.25})
    model = pipelines.model_from_config(cfg, 7)
    model.t1 = 0.5
    cam = Camera(look_at([0, 0, 4.0], [0, 0, 0]), 6.0, 4, 4, 2.0, 6.0)
    rays = generate_rays(cam, [(r, c) for r in range(4) for c in range(4)])
    frames = rng.random((2, 16, 3))
    eps = rng.standard_normal(2)

    def seq_loss():
        z0 = pipelines.encode_initial_state(model, eps=eps)
        lat = pipelines.rollout_single(model, z0, [0.0, 0.5], cfg.solver)
        r0 = render_rays(model.nerf, rays, lat, np.zeros(16, dtype=np.intp), cfg.render, None)
        r1 = render_rays(model.nerf, rays, lat, np.ones(16, dtype=np.intp), cfg.render, None)
        return ag.add(nerf_loss(r0, frames[0]), nerf_loss(r1, frames[1]))

    e = max_rel_error(seq_loss, model.parameters())
    checks["single_seq_loss"] = (e < GRAD_TOL, f"{e:.1e}")
    dt = time.time() - t0
    checks["runtime"] = (dt < 120, f"{dt:.1f}s")
    assert acceptance(1, "analytic vs central-difference gradients", checks)


# ---------------------------------------------------------------- 2. solvers


def test_criterion_02_solvers(acceptance):
    decay = lambda h, t: ag.scale(h, -1.0)  # noqa: E731
    euler = ode_solve(decay, ag.Tensor(np.array([1.0])), [0.0, 1.0], SolverConfig("euler", step=0.05))
    e_val = euler.states[-1].item()
    dop = ode_solve(decay, ag.Tensor(np.array([1.0])), [0.0, 1.0], SolverConfig("dopri5", atol=1e-3, rtol=1e-4))
    d_val = dop.states[-1].item()
    errs = []
    for step in (0.1, 0.05, 0.025):
        v = ode_solve(decay, ag.Tensor(np.array([1.0])), [0.0, 1.0], SolverConfig("euler", step=step)).states[-1]
        errs.append(abs(v.item() - np.exp(-1.0)))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    checks = {
        "euler": (abs(e_val - 0.95 ** 20) < 1e-9, f"{e_val:.9f} vs {0.95 ** 20:.9f}"),
        "dopri5": (abs(d_val - np.exp(-1.0)) < 5e-4, f"|err|={abs(d_val - np.exp(-1.0)):.1e}"),
        "order": (all(1.7 <= r <= 2.3 for r in ratios), "ratios " + ", ".join(f"{r:.3f}" for r in ratios)),
    }
    assert acceptance(2, "solver accuracy", checks)


# ---------------------------------------------------------------- 3. renderer


def quadrature_oracle(depths, sigma, rgb, far, n_sub):
    """Midpoint-rule integral of T(s) sigma(s) c(s) over [depths[0], far] with n_sub sub-samples."""
    edges = np.append(depths, far)
    s = np.linspace(edges[0], far, n_sub + 1)
    mid = 0.5 * (s[1:] + s[:-1])
    ds = np.diff(s)
    k = np.clip(np.searchsorted(edges, mid, side="right") - 1, 0, len(depths) - 1)
    sg = sigma[k]
    tau_before = np.concatenate([[0.0], np.cumsum(sg * ds)[:-1]])
    T = np.exp(-(tau_before + 0.5 * sg * ds))
    return np.sum((T * sg * ds)[:, None] * rgb[k], axis=0)


def test_criterion_03_renderer(acceptance):
    t0 = time.time()
    rng = np.random.default_rng(303)
    R, S, far = 1000, 16, 6.0
    depths = np.sort(rng.uniform(2.0, far, size=(R, S)), axis=1)
    sigma = rng.exponential(1.0, size=(R, S))
    rgb = rng.random((R, S, 3))
    out = volume_render(depths, sigma, rgb, far)
    w = out.weights.data
    delta = np.diff(np.concatenate([depths, np.full((R, 1), far)], axis=1), axis=1)
    t_final = np.exp(-np.sum(sigma * delta, axis=1))
    cons = float(np.max(np.abs(w.sum(1) + t_final - 1.0)))
    worst = 0.0
    for i in range(50):
        ref = quadrature_oracle(depths[i], sigma[i], rgb[i], far, 10_000)
        worst = max(worst, float(np.max(np.abs(out.rgb.data[i] - ref))))
    dt = time.time() - t0
    checks = {
        "weights>=0": (bool(np.all(w >= 0)), f"min {w.min():.1e}"),
        "conservation": (cons <= 1e-9, f"{cons:.1e}"),
        "oracle": (worst < 1e-3, f"max channel gap {worst:.1e} over 50 rays"),
        "runtime": (dt < 60, f"{dt:.1f}s"),
    }
    assert acceptance(3, "renderer conservation and quadrature oracle", checks)


# ---------------------------------------------------------------- 4. Lipschitz


def test_criterion_04_lipschitz(acceptance):
    rng = np.random.default_rng(404)
    layers = [nn.LipschitzLinear(3, 3, rng) for _ in range(3)]
    for layer in layers:
        layer.c.data[...] = 0.0
    loss = nn.lipschitz_loss(layers).item()
    worst = -np.inf
    for _ in range(1000):
        W = rng.normal(scale=rng.uniform(0.1, 5.0), size=(rng.integers(1, 8), rng.integers(1, 8)))
        c = rng.normal(scale=3.0)
        Wn = nn.lipschitz_normalize(W, c).data
        bound = float(np.max(np.abs(Wn).sum(axis=1)))  # operator norm induced by the max-norm
        worst = max(worst, bound - float(ag.softplus_np(np.array(c))))
    checks = {
        "product": (abs(loss - np.log(2.0) ** 3) <= 1e-9, f"{loss:.9f}"),
        "bound": (worst <= 1e-12, f"max(norm - softplus(c)) = {worst:.1e}"),
    }
    assert acceptance(4, "Lipschitz loss and bound", checks)


# ---------------------------------------------------------------- 5. single-sequence desk training


def test_criterion_05_single_sequence(acceptance, single_model, pendulum_data):
    model, cfg, meta, train_time = single_model
    _, summary, _ = cli.evaluate_single(model, cfg, meta, pendulum_data, metrics.EvalConfig(), 1)
    g = summary["groups"]
    tr, ip = g["train"]["psnr"], g["interp"]["psnr"]
    ip_dyn, ex_dyn = g["interp"]["dynamic_psnr"], g["extrap"]["dynamic_psnr"]
    checks = {
        "train>=25": (tr >= 25.0, f"{tr:.2f} dB"),
        "interp within 3": (ip >= tr - 3.0, f"{ip:.2f} dB"),
        "extrap dyn within 6 of interp dyn": (ex_dyn >= ip_dyn - 6.0, f"{ex_dyn:.2f} vs {ip_dyn:.2f} dB"),
        "budget": (cfg.iterations <= 20000 and train_time < 7200, f"{cfg.iterations} it, {train_time:.0f}s"),
    }
    assert acceptance(5, "single-sequence pendulum reconstruction", checks)


# ---------------------------------------------------------------- 6. multi-sequence generalization


def test_criterion_06_multi_sequence(acceptance, multi_model, hill_data):
    model, cfg, meta, train_time = multi_model
    _, summary, _ = cli.evaluate_multi(model, cfg, hill_data, metrics.EvalConfig(alpha=0.5), 1)
    iou = summary["iou_mean"]
    spec = hill_data.scene
    sides = []
    for x0 in (-0.16, 0.16):  # held-out starts, 0.16 from the crest
        motion = synth.simulate_scene(spec, x0, 0.0)
        p = motion.poses
        out = pipelines.multi_predict(model, p[0], p[1] - p[0], np.linspace(0.0, 1.0, 90), cfg.solver)
        sides.append(bool(np.sign(out["pose"][-1][0]) == np.sign(p[-1][0])))
    checks = {
        "iou>=0.3": (iou >= 0.3, f"{iou:.3f}"),
        "terminal well": (all(sides), f"{sum(sides)}/{len(sides)} correct"),
        "budget": (cfg.iterations <= 50000 and train_time < 8 * 3600, f"{cfg.iterations} it, {train_time:.0f}s"),
    }
    assert acceptance(6, "bifurcating-hill held-out generalization", checks)


# ---------------------------------------------------------------- 7. long horizon


def test_criterion_07_long_horizon(acceptance, single_model, pendulum_data):
    model, cfg, meta, _ = single_model
    train_t = np.asarray(meta["split"]["train"]) / meta["split"]["t_scale"]
    long_t = np.linspace(0.0, 4.0, 81)
    tr_dyn = pipelines.single_dynamic_states(model, train_t, cfg.solver)
    lg_dyn = pipelines.single_dynamic_states(model, long_t, cfg.solver)
    tr_lat = pipelines.single_latents(model, train_t, cfg.solver)
    lg_lat = pipelines.single_latents(model, long_t, cfg.solver)
    r_dyn = np.linalg.norm(lg_dyn, axis=1).max() / np.linalg.norm(tr_dyn, axis=1).max()
    r_lat = np.linalg.norm(lg_lat, axis=1).max() / np.linalg.norm(tr_lat, axis=1).max()
    frames, opacity = pipelines.render_latents(model, pendulum_data.cameras[0], lg_lat[[40, 60, 80]], cfg.render,
                                               return_opacity=True)
    checks = {
        "state norm": (r_dyn <= 10.0, f"{r_dyn:.2f}x"),
        "field latent norm": (r_lat <= 10.0, f"{r_lat:.2f}x"),
        "pixel range": (bool(np.all((frames >= 0) & (frames <= 1))), f"[{frames.min():.3f}, {frames.max():.3f}]"),
        "opacity<=1": (bool(np.all(opacity <= 1.0)), f"max {opacity.max():.6f}"),
    }
    assert acceptance(7, "4x horizon stability", checks)


# ---------------------------------------------------------------- 8. latent analysis


def test_criterion_08_latent_analysis(acceptance, multi_model):
    rng = np.random.default_rng(808)
    worst = 0.0
    for _ in range(5):
        f = OdeFunc(6, 16, rng, depth=3)
        z = rng.normal(size=6)
        ex = analysis.latent_divergence(f, z, 0.3)
        fd = analysis.latent_divergence(f, z, 0.3, mode="fd")
        worst = max(worst, abs(ex - fd) / max(abs(ex), 1e-12))
    model, cfg, meta, _ = multi_model
    ccfg = cli.default_config()
    init, _ = cli.latent_initials(model, cfg, ccfg, meta)
    rep = analysis.find_sinks(model.f, init, float(ccfg["analysis.horizon"]), cfg.solver,
                              float(ccfg["analysis.tau_frac"]))
    checks = {
        "exact vs fd": (worst < 1e-5, f"{worst:.1e}"),
        "two sinks": (rep.n_clusters == 2, f"{rep.n_clusters} clusters"),
        "negative divergence": (bool(rep.n_clusters > 0 and np.all(rep.divergence < 0)),
                                "[" + ", ".join(f"{d:.2f}" for d in rep.divergence) + "]"),
    }
    assert acceptance(8, "latent divergence and sinks", checks)


# ---------------------------------------------------------------- 9. dataset physics


def test_criterion_09_physics(acceptance):
    worst_e = 0.0
    for kind, q0 in (("pendulum", 0.9), ("bifurcating-hill", -0.3), ("oscillating-ball", [0.3, -0.2])):
        spec = synth.SceneSpec(kind, damping=0.0)
        m = synth.simulate_scene(spec, q0)
        e = synth.energy(spec, m.q, m.qdot)
        worst_e = max(worst_e, float(np.ptp(e) / abs(e[0])))
    hill = synth.SceneSpec("bifurcating-hill")
    worst_sym = 0.0
    for x0, v0 in ((0.2, 0.0), (0.06, -0.2), (0.3, 0.1)):
        a = synth.simulate_scene(hill, x0, v0).poses
        b = synth.simulate_scene(hill, -x0, -v0).poses
        worst_sym = max(worst_sym, float(np.max(np.abs(a[:, 0] + b[:, 0]))), float(np.max(np.abs(a[:, 1] - b[:, 1]))))
    vel_ok = True
    for kind in ("pendulum", "bifurcating-hill"):
        ds = synth.generate_dataset(synth.SceneSpec(kind, n_frames=20, image_size=16, focal=24.0))
        for seq in ds.sequences:
            vel_ok &= bool(np.array_equal(seq.velocities, seq.poses[1:] - seq.poses[:-1]))
            for sub in synth.make_subsequences(seq, 5):
                vel_ok &= bool(np.array_equal(sub.velocities, sub.poses[1:] - sub.poses[:-1]))
    checks = {
        "energy": (worst_e < 1e-6, f"{worst_e:.1e} relative"),
        "mirror": (worst_sym < 1e-12, f"{worst_sym:.1e}"),
        "velocity": (vel_ok, "exact" if vel_ok else "mismatch"),
    }
    assert acceptance(9, "dataset physics", checks)


# ---------------------------------------------------------------- 10. determinism


def test_criterion_10_determinism(acceptance, tmp_path):
    data = tmp_path / "gen"
    base = [sys.executable, "-m", "noderf.cli"]
    tiny = ["--set", "scene.n_frames=12", "--set", "scene.image_size=16", "--set", "scene.focal=24.0"]
    subprocess.run(base + ["gen-data", "--scene", "pendulum", "--out", str(data)] + tiny, check=True,
                   capture_output=True)
    train = base + ["train", "--data", str(data / "data"), "--iterations", "30", "--seed", "3",
                    "--set", "train.ray_batch=64", "--set", "train.extrap_frames=2",
                    "--set", "train.warmup.initial=10", "--set", "train.warmup.period=10",
                    "--set", "train.warmup.length=3", "--set", "train.render.n_coarse=8",
                    "--set", "train.render.n_fine=8", "--set", "train.nerf.hidden=16",
                    "--set", "train.checkpoint_every=10"]
    runs = []
    for name, threads in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / name
        subprocess.run(train + ["--out", str(out), "--threads", str(threads)], check=True, capture_output=True)
        runs.append(out)
    files = ["checkpoint.ckpt", "checkpoint_000010.ckpt", "checkpoint_000030.ckpt", "metrics.csv"]
    same = {f: all((r / f).read_bytes() == (runs[0] / f).read_bytes() for r in runs[1:]) for f in files}
    checks = {f: (ok, "identical" if ok else "differs") for f, ok in same.items()}
    assert acceptance(10, "bit-identical reruns (threads 1 and 4)", checks)
