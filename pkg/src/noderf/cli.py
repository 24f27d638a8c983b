"""Command-line entry point: ``noderf <command> [options]``.

Every run resolves one flat dictionary of dotted keys (defaults, then
``--config`` JSON, then ``NODERF_SEED``, then explicit flags and ``--set``)
and writes it to ``<out>/run.json`` before doing any work.  Feeding that file
back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, metrics, pipelines, synth
from . import autograd as ag
from .metrics import EvalConfig
from .ode import ode_solve
from .pipelines import TrainConfig

COMMANDS = ("gen-data", "train", "render", "extrapolate", "evaluate", "analyze-latent")
SCENE_ALPHA = {"oscillating-ball": 0.3, "bifurcating-hill": 0.5, "pendulum": 0.5}


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    cfg = {"command": "", "data": "", "out": "", "checkpoint": "", "seed": 0, "threads": 1}
    scene = synth.SceneSpec().to_dict()
    scene["n_frames"] = None
    scene["frame_dt"] = None
    scene["damping"] = None
    cfg.update({f"scene.{k}": v for k, v in scene.items()})
    cfg["gen.n_eval"] = None
    train = TrainConfig().to_flat()
    train.pop("seed")
    cfg.update({f"train.{k}": v for k, v in train.items()})
    cfg.update({f"eval.{k}": v for k, v in dataclasses.asdict(EvalConfig()).items()})
    cfg["eval.alpha"] = None  # scene default when unset
    cfg.update({"render.time": 0.0, "render.camera": 0, "render.sequence": "",
                "extrapolate.t_start": 0.0, "extrapolate.t_end": None, "extrapolate.frames": 0,
                "analysis.horizon": 4.0, "analysis.tau_frac": 0.05, "analysis.grid": 15,
                "analysis.n_initials": 24, "analysis.spread": 0.5})
    return cfg


def _coerce(key: str, raw: str, template):
    if isinstance(template, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"--set {key}: expected a boolean, got {raw!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(template, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(template, int) and not isinstance(template, bool) and isinstance(value, float) and value.is_integer():
        value = int(value)
    if isinstance(template, str) and not isinstance(value, str):
        value = raw
    return value


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot load config ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object of dotted keys")
        for k, v in loaded.items():
            if k not in cfg:
                raise ConfigError(f"{path}: unknown config key {k!r}")
            cfg[k] = v
    if os.environ.get("NODERF_SEED"):
        try:
            cfg["seed"] = int(os.environ["NODERF_SEED"])
        except ValueError as exc:
            raise ConfigError(f"NODERF_SEED: expected an integer, got {os.environ['NODERF_SEED']!r}") from exc
    cfg["command"] = args.command
    flag_map = {"data": "data", "out": "out", "checkpoint": "checkpoint", "seed": "seed", "threads": "threads",
                "scene": "scene.kind", "mode": "train.mode", "iterations": "train.iterations",
                "time": "render.time", "camera": "render.camera", "sequence": "render.sequence",
                "t_start": "extrapolate.t_start", "t_end": "extrapolate.t_end", "frames": "extrapolate.frames",
                "alpha": "eval.alpha", "horizon": "analysis.horizon"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = v
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key=value")
        if key not in cfg:
            raise ConfigError(f"--set: unknown config key {key!r}")
        cfg[key] = _coerce(key, raw, cfg[key])
    if not cfg["out"]:
        raise ConfigError("missing output directory (--out)")
    if int(cfg["threads"]) < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def train_config(cfg: dict) -> TrainConfig:
    flat = section(cfg, "train")
    flat["seed"] = int(cfg["seed"])
    try:
        return TrainConfig.from_flat(flat)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"train config: {exc}") from exc


def scene_spec(cfg: dict) -> synth.SceneSpec:
    try:
        return synth.SceneSpec.from_dict(section(cfg, "scene"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scene config: {exc}") from exc


def eval_config(cfg: dict, kind: str) -> EvalConfig:
    d = section(cfg, "eval")
    if d.get("alpha") is None:
        d["alpha"] = SCENE_ALPHA.get(kind, 0.5)
    try:
        return EvalConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"eval config: {exc}") from exc


def _need(cfg: dict, key: str) -> Path:
    if not cfg[key]:
        raise ConfigError(f"missing --{key}")
    p = Path(cfg[key])
    if not p.exists():
        raise ConfigError(f"{p}: does not exist (--{key})")
    return p


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict, out: Path) -> None:
    spec = scene_spec(cfg)
    manifest = synth.generate_dataset(spec, n_eval=cfg["gen.n_eval"])
    synth.write_dataset(manifest, out / "data")
    print(f"wrote {len(manifest.sequences)} sequences to {out / 'data'}")


def cmd_train(cfg: dict, out: Path) -> None:
    data = synth.read_dataset(_need(cfg, "data"))
    tc = train_config(cfg)
    pipelines.train(data, tc, seed=tc.seed, out_dir=out)
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")


def _load(cfg: dict):
    return pipelines.load_model(_need(cfg, "checkpoint"))


def _cameras(meta: dict, cfg: dict) -> list:
    if cfg["data"]:
        return synth.read_dataset(_need(cfg, "data")).cameras
    if not meta.get("scene"):
        raise ConfigError("checkpoint has no scene description; pass --data")
    return synth.scene_cameras(synth.SceneSpec.from_dict(meta["scene"]))


def _initial_condition(cfg: dict, meta: dict):
    """(p0, v0, sequence) for multi-mode rendering: named sequence or the first eval sequence."""
    data = synth.read_dataset(_need(cfg, "data"))
    name = cfg["render.sequence"]
    pool = data.split("eval") or data.sequences
    if name:
        pool = [s for s in data.sequences if s.name == name]
        if not pool:
            raise ConfigError(f"--sequence {name!r} not in dataset")
    seq = pool[0]
    return seq.p0, seq.v0, seq


def _latents(model, tc: TrainConfig, cfg: dict, meta: dict, times):
    if tc.mode == "single":
        return pipelines.single_latents(model, times, tc.solver)
    p0, v0, _ = _initial_condition(cfg, meta)
    return pipelines.multi_predict(model, p0, v0, times, tc.solver)["latents"]


def cmd_render(cfg: dict, out: Path) -> None:
    model, tc, meta = _load(cfg)
    cams = _cameras(meta, cfg)
    cam = cams[int(cfg["render.camera"])]
    t = float(cfg["render.time"])
    lat = _latents(model, tc, cfg, meta, [t])
    img = pipelines.render_latents(model, cam, lat, tc.render, int(cfg["threads"]))[0]
    path = out / f"render_t{t:.4f}.ppm"
    synth.write_ppm(path, img)
    print(f"wrote {path}")


def cmd_extrapolate(cfg: dict, out: Path) -> None:
    model, tc, meta = _load(cfg)
    cams = _cameras(meta, cfg)
    cam = cams[int(cfg["render.camera"])]
    t0 = float(cfg["extrapolate.t_start"])
    t1 = cfg["extrapolate.t_end"]
    t1 = 4.0 if t1 is None else float(t1)  # training window is [0, 1]
    n = int(cfg["extrapolate.frames"]) or 4 * 10
    times = np.linspace(t0, t1, n)
    lat = _latents(model, tc, cfg, meta, times)
    imgs = pipelines.render_latents(model, cam, lat, tc.render, int(cfg["threads"]))
    (out / "frames").mkdir(exist_ok=True)
    for i, (t, img) in enumerate(zip(times, imgs)):
        synth.write_ppm(out / "frames" / f"frame_{i:04d}.ppm", img)
    np.savetxt(out / "times.csv", times[:, None], delimiter=",", header="t", comments="", fmt="%.17g")
    print(f"wrote {n} frames over t in [{t0}, {t1}]")


def evaluate_single(model, tc, meta, data, ecfg, threads):
    split = {k: np.asarray(v) for k, v in meta["split"].items() if k != "t_scale"}
    t_scale = meta["split"]["t_scale"]
    seq = (data.split("train") or data.sequences)[tc.sequence]
    cam = data.cameras[0]
    ids = np.concatenate([split["train"], split["interp"], split["extrap"]]).astype(int)
    ids.sort()
    lat = pipelines.single_latents(model, ids / t_scale, tc.solver)
    pred = pipelines.render_latents(model, cam, lat, tc.render, threads)
    gt = np.stack([seq.frame(i, 0) for i in ids])
    rows, summary = metrics.evaluate_video(pred, gt, data.scene.ball_color, ecfg)
    static = seq.static_image(0)
    groups = {}
    for name in ("train", "interp", "extrap"):
        sel = np.isin(ids, split[name])
        groups[name] = {
            "psnr": float(np.mean([rows[i]["psnr"] for i in np.flatnonzero(sel)])) if sel.any() else None,
            "dynamic_psnr": float(np.mean([
                metrics.masked_psnr(pred[i], gt[i], pipelines.dynamic_mask(gt[i], static)
                                    | pipelines.dynamic_mask(pred[i], static))
                for i in np.flatnonzero(sel)])) if sel.any() else None,
        }
    for r, i in zip(rows, ids):
        r["frame"] = int(i)
    summary["groups"] = groups
    return rows, summary, pred


def evaluate_multi(model, tc, data, ecfg, threads):
    seqs = data.split("eval")
    if not seqs:
        raise ConfigError("dataset has no eval split to evaluate on")
    all_rows, per_seq, preds = [], {}, {}
    cam = data.cameras[0]
    for seq in seqs:
        times = np.arange(seq.n_frames) / (seq.n_frames - 1)
        out = pipelines.multi_predict(model, seq.p0, seq.v0, times, tc.solver)
        pred = pipelines.render_latents(model, cam, out["latents"], tc.render, threads)
        gt = np.stack([seq.frame(i, 0) for i in range(seq.n_frames)])
        rows, summary = metrics.evaluate_video(pred, gt, data.scene.ball_color, ecfg)
        summary["terminal_pose_pred"] = out["pose"][-1].tolist()
        summary["terminal_pose_true"] = seq.poses[-1].tolist()
        summary["terminal_side_correct"] = bool(np.sign(out["pose"][-1][0]) == np.sign(seq.poses[-1][0]))
        for r in rows:
            r["frame"] = f"{seq.name}:{r['frame']}"
        all_rows += rows
        per_seq[seq.name] = summary
        preds[seq.name] = pred
    summary = {"sequences": per_seq,
               "iou_mean": float(np.nanmean([s["iou_mean"] for s in per_seq.values()])),
               "config": dataclasses.asdict(ecfg)}
    return all_rows, summary, preds


def cmd_evaluate(cfg: dict, out: Path) -> None:
    model, tc, meta = _load(cfg)
    data = synth.read_dataset(_need(cfg, "data"))
    ecfg = eval_config(cfg, data.scene.kind)
    threads = int(cfg["threads"])
    if tc.mode == "single":
        rows, summary, _ = evaluate_single(model, tc, meta, data, ecfg, threads)
    else:
        rows, summary, _ = evaluate_multi(model, tc, data, ecfg, threads)
    metrics.write_metrics(out, rows, summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, indent=2, default=str))


def latent_initials(model, tc: TrainConfig, cfg: dict, meta: dict) -> tuple[np.ndarray, np.ndarray]:
    """Initial dynamic latents for the analysis: a spread of initial poses (multi mode)
    or perturbations of the recognized initial state (single mode)."""
    n = int(cfg["analysis.n_initials"])
    rng = np.random.default_rng(int(cfg["seed"]))
    with ag.no_grad():
        if tc.mode == "multi":
            spec = synth.SceneSpec.from_dict(meta["scene"])
            spread = float(cfg["analysis.spread"])
            xs = np.concatenate([np.linspace(-spread, -0.05, n // 2), np.linspace(0.05, spread, n - n // 2)])
            init = []
            for x in xs:
                p = synth.poses_from_q(spec, np.array([x]))[0]
                init.append(pipelines.build_initial_latent(model, p, np.zeros_like(p)).data)
            return np.array(init), xs
        z0 = pipelines.encode_initial_state(model).data
        return z0 + 0.1 * rng.standard_normal((n, z0.shape[0])), np.arange(n, dtype=np.float64)


def cmd_analyze_latent(cfg: dict, out: Path) -> None:
    model, tc, meta = _load(cfg)
    init, labels = latent_initials(model, tc, cfg, meta)
    horizon = float(cfg["analysis.horizon"])
    report = analysis.find_sinks(model.f, init, horizon, tc.solver, float(cfg["analysis.tau_frac"]))
    times = np.linspace(0.0, horizon, 41)
    with ag.no_grad():
        trajs = [np.stack([s.data for s in ode_solve(model.f, z, times, tc.solver).states]) for z in init]
    proj = analysis.project_trajectories(trajs)
    grid = analysis.divergence_grid(model.f, proj, horizon, int(cfg["analysis.grid"]))
    analysis.write_analysis(out, proj, report, grid, times)
    summary = {"n_clusters": report.n_clusters, "divergence": report.divergence.tolist(),
               "members": report.members, "tau": report.tau, "failures": report.failures,
               "explained_variance": proj.explained.tolist(), "initial_labels": labels.tolist(),
               "note": "divergence is exact at sampled latent points; the grid is a slice through the PCA plane"}
    (out / "analysis_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("n_clusters", "divergence")}))


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "render": cmd_render,
            "extrapolate": cmd_extrapolate, "evaluate": cmd_evaluate, "analyze-latent": cmd_analyze_latent}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noderf", description="Latent-ODE radiance fields at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--config", help="JSON file of dotted config keys (e.g. a previous run.json)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="worker threads for rendering (1 = reference)")
        return sp

    g = common(sub.add_parser("gen-data", help="simulate and render a dataset"))
    g.add_argument("--scene", choices=list(synth.KINDS))
    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--data")
    t.add_argument("--mode", choices=["single", "multi"])
    t.add_argument("--iterations", type=int)
    r = common(sub.add_parser("render", help="render one frame at a time value"))
    r.add_argument("--checkpoint")
    r.add_argument("--data")
    r.add_argument("--time", type=float)
    r.add_argument("--camera", type=int)
    r.add_argument("--sequence")
    x = common(sub.add_parser("extrapolate", help="render a frame series over a time range"))
    x.add_argument("--checkpoint")
    x.add_argument("--data")
    x.add_argument("--t-start", dest="t_start", type=float)
    x.add_argument("--t-end", dest="t_end", type=float)
    x.add_argument("--frames", type=int)
    x.add_argument("--camera", type=int)
    x.add_argument("--sequence")
    e = common(sub.add_parser("evaluate", help="metrics against ground truth"))
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--alpha", type=float)
    a = common(sub.add_parser("analyze-latent", help="divergence, projection and sinks of the latent field"))
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--horizon", type=float)
    return p


def execute(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"noderf {args.command}: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1):
            HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"noderf {args.command}: {exc}", file=sys.stderr)
        return 2
    except (synth.DatasetError, pipelines.TrainingError, ValueError, OSError, RuntimeError) as exc:
        print(f"noderf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(execute())


if __name__ == "__main__":
    main()
