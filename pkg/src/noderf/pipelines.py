"""Training procedures coupling the radiance field with latent ODE dynamics.

Single-sequence mode learns two warm-up latents, encodes them with an
ODE-RNN into an initial dynamic state, integrates it with ``f_theta`` and
decodes every state into a radiance-field latent.  Multi-sequence mode builds
the initial dynamic state from a canonical latent, an encoded initial pose and
the raw initial velocity; three decoders map dynamic states to a field latent
(offset from a static-background latent), an encoded pose, and a velocity.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Adam, GRUCell, Linear, Module, init_latent, lipschitz_loss, make_mlp, positional_encode
from .ode import OdeFunc, SolverConfig, ode_solve
from .radiance import (Camera, FieldConfig, NerfModel, RenderConfig, Rays, nerf_loss,
                       render_image, render_rays)
from .synth import DatasetManifest, SceneSpec

LOG_HEADER = ["iter", "loss", "l_nerf", "l_p", "l_v", "l_lip", "probe_psnr"]


class TrainingError(RuntimeError):
    """Training cannot continue (non-finite loss, dataset/mode mismatch)."""


# ---------------------------------------------------------------- configuration


@dataclass
class LossWeights:
    nerf: float = 1.0
    pose: float = 1e-2
    vel: float = 1e-2
    lip: float = 1e-22
    kl: float = 0.0

    def __post_init__(self):
        if self.nerf <= 0:
            raise ValueError("LossWeights: the reconstruction weight must be positive")
        if min(self.pose, self.vel, self.lip, self.kl) < 0:
            raise ValueError("LossWeights: weights must be non-negative")


@dataclass
class WarmupSchedule:
    """Dynamics frozen for ``[0, initial)`` and for ``length`` iterations starting at
    ``initial + k * period`` (k >= 1).  ``period = 0`` disables recurrence."""

    initial: int = 5000
    period: int = 4000
    length: int = 200

    def __post_init__(self):
        if self.initial < 0 or self.period < 0 or self.length < 0:
            raise ValueError("WarmupSchedule: values must be non-negative")
        if self.period and self.length > self.period:
            raise ValueError("WarmupSchedule: length must not exceed period")

    def in_warmup(self, it: int) -> bool:
        if it < self.initial:
            return True
        if self.period <= 0 or self.length <= 0:
            return False
        k, r = divmod(it - self.initial, self.period)
        return k >= 1 and r < self.length


@dataclass
class ModelConfig:
    latent_dim: int = 64  # radiance-field latent (512 at full scale)
    dyn_dim: int = 16  # single mode: dynamic latent
    latent_std: float = 0.1
    enc_hidden: int = 32
    ode_hidden: int = 64
    ode_depth: int = 3
    time_input: bool = True
    dec_hidden: int = 64
    dec_depth: int = 3
    # multi mode
    canon_dim: int = 16
    pose_code_dim: int = 16
    pose_enc_hidden: int = 256
    pose_enc_depth: int = 8
    pose_freqs: int = 10
    raw_pose_targets: bool = False
    lipschitz_field: bool = True  # multi mode: Lipschitz-normalized radiance field
    use_static: bool = False  # single mode: add a static latent to decoded latents


@dataclass
class TrainConfig:
    mode: str = "single"
    iterations: int = 20000
    lr: float = 5e-4
    ray_batch: int = 512
    frames_per_batch: int = 4
    dynamic_fraction: float = 0.5
    motion_fraction: float = 0.0  # share of the dynamic rays drawn from the motion region
    n_frames: int = 0  # single mode: truncate the sequence (0 keeps all)
    train_stride: int = 2
    extrap_frames: int = 5
    sequence: int = 0
    subsequences: int = 25
    probe_every: int = 100
    probe_rays: int = 256
    checkpoint_every: int = 0
    seed: int = 0
    warmup: WarmupSchedule = field(default_factory=WarmupSchedule)
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    nerf: FieldConfig = field(default_factory=FieldConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ValueError(f"TrainConfig: mode must be single or multi, got {self.mode!r}")
        if self.iterations < 0 or self.ray_batch < 1 or self.frames_per_batch < 1:
            raise ValueError("TrainConfig: iterations >= 0, ray_batch >= 1, frames_per_batch >= 1")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValueError("TrainConfig: dynamic_fraction must lie in [0, 1]")
        if not 0.0 <= self.motion_fraction <= 1.0:
            raise ValueError("TrainConfig: motion_fraction must lie in [0, 1]")
        self.nerf.latent_dim = self.model.latent_dim

    def to_flat(self) -> dict:
        return flatten_config(self)

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        return unflatten_config(cls, flat)


def flatten_config(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten_config(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def unflatten_config(cls, flat: dict):
    """Rebuild a (nested) config dataclass from dotted keys; unknown keys raise KeyError."""
    nested: dict = {}
    for key, value in flat.items():
        head, _, rest = key.partition(".")
        nested.setdefault(head, {} if rest else value)
        if rest:
            if not isinstance(nested[head], dict):
                raise KeyError(key)
            nested[head][rest] = value
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for name, value in nested.items():
        if name not in fields:
            raise KeyError(name)
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise KeyError(name)
            kwargs[name] = unflatten_config(type(default), value)
        else:
            if isinstance(default, tuple) or (fields[name].default is not dataclasses.MISSING
                                              and isinstance(fields[name].default, tuple)):
                value = tuple(value)
            kwargs[name] = value
    return cls(**kwargs)


# ---------------------------------------------------------------- models


def _stack(states: list) -> Tensor:
    """Stack equal-length 1-d tensors into a (K, D) tensor."""
    d = states[0].shape[-1]
    return ag.reshape(ag.concat(states), (len(states), d))


class SingleSeqModel(Module):
    def __init__(self, cfg: ModelConfig, field_cfg: FieldConfig, rng: np.random.Generator):
        self.cfg = cfg
        Z, Dd, Hr = cfg.latent_dim, cfg.dyn_dim, cfg.enc_hidden
        self.z_t0 = init_latent(rng, Z, cfg.latent_std, "z_t0")
        self.z_t1 = init_latent(rng, Z, cfg.latent_std, "z_t1")
        self.gru = GRUCell(Z, Hr, rng)
        self.enc_ode = OdeFunc(Hr, Hr, rng, depth=2)
        self.enc_head = Linear(Hr, 2 * Dd, rng)
        # start with a narrow recognition distribution: softplus(-3) ~ 0.05
        self.enc_head.b.data[Dd:] = -3.0
        self.f = OdeFunc(Dd, cfg.ode_hidden, rng, depth=cfg.ode_depth, time_input=cfg.time_input)
        self.decoder = make_mlp(Dd, cfg.dec_hidden, cfg.dec_depth, Z, rng)
        self.z_static = init_latent(rng, Z, cfg.latent_std, "z_static") if cfg.use_static else None
        self.nerf = NerfModel(field_cfg, rng)
        self.t1 = 1.0  # time of the second warm-up frame, set from data

    def warmup_params(self) -> list:
        return [self.z_t0, self.z_t1] + self.nerf.parameters()

    def joint_params(self) -> list:
        warm = {id(p) for p in (self.z_t0, self.z_t1)}
        return [p for p in self.parameters() if id(p) not in warm]


class MultiSeqModel(Module):
    def __init__(self, cfg: ModelConfig, field_cfg: FieldConfig, rng: np.random.Generator, pose_dim: int):
        self.cfg = cfg
        self.pose_dim = pose_dim
        Z = cfg.latent_dim
        pe_dim = 2 * cfg.pose_freqs * pose_dim
        self.z_static = init_latent(rng, Z, cfg.latent_std, "z_static")
        self.z_can = init_latent(rng, cfg.canon_dim, cfg.latent_std, "z_can")
        self.encoder = make_mlp(pe_dim, cfg.pose_enc_hidden, cfg.pose_enc_depth, cfg.pose_code_dim, rng)
        Dd = self.dyn_dim
        self.f = OdeFunc(Dd, cfg.ode_hidden, rng, depth=cfg.ode_depth, time_input=cfg.time_input)
        self.dec_nerf = make_mlp(Dd, cfg.dec_hidden, cfg.dec_depth, Z, rng)
        pose_out = pose_dim if cfg.raw_pose_targets else pe_dim
        self.dec_pose = make_mlp(Dd, cfg.dec_hidden, cfg.dec_depth, pose_out, rng)
        self.dec_vel = make_mlp(Dd, cfg.dec_hidden, cfg.dec_depth, pose_dim, rng)
        self.nerf = NerfModel(dataclasses.replace(field_cfg, lipschitz=cfg.lipschitz_field), rng)

    @property
    def dyn_dim(self) -> int:
        return self.cfg.canon_dim + self.cfg.pose_code_dim + self.pose_dim

    def warmup_params(self) -> list:
        return [self.z_static] + self.nerf.parameters()

    def joint_params(self) -> list:
        return self.parameters()

    def pose_target(self, poses: np.ndarray) -> np.ndarray:
        if self.cfg.raw_pose_targets:
            return np.asarray(poses, dtype=np.float64)
        return positional_encode(np.asarray(poses, dtype=np.float64), self.cfg.pose_freqs)

    def decode_pose(self, pred: np.ndarray) -> np.ndarray:
        """World pose from a pose-decoder output (lowest-frequency sin/cos pair per axis)."""
        pred = np.atleast_2d(pred)
        if self.cfg.raw_pose_targets:
            return pred
        L = self.cfg.pose_freqs
        out = []
        for d in range(self.pose_dim):
            s, c = pred[:, 2 * L * d], pred[:, 2 * L * d + 1]
            out.append(np.arctan2(s, c) / np.pi)
        return np.stack(out, axis=1)


def model_from_config(cfg: TrainConfig, seed: int, pose_dim: int = 3) -> Module:
    rng = np.random.default_rng(seed)
    if cfg.mode == "single":
        return SingleSeqModel(cfg.model, cfg.nerf, rng)
    return MultiSeqModel(cfg.model, cfg.nerf, rng, pose_dim)


# ---------------------------------------------------------------- forward pieces


def encode_initial_state(model: SingleSeqModel, z_t0=None, z_t1=None, rng: np.random.Generator | None = None,
                         eps: np.ndarray | None = None) -> Tensor:
    """ODE-RNN recognition in reverse time, then a reparameterized sample.

    GRU update with ``z_t1``, evolve the hidden state over ``t1 - t0``, GRU
    update with ``z_t0``; the head yields ``(mu, s_enc)`` and the sample is
    ``mu + s_enc * eps``.  Without ``rng`` and ``eps`` the mean is returned.
    """
    z_t0 = model.z_t0 if z_t0 is None else z_t0
    z_t1 = model.z_t1 if z_t1 is None else z_t1
    Dd = model.cfg.dyn_dim
    h = model.gru(Tensor(np.zeros(model.cfg.enc_hidden)), z_t1)
    h = ode_solve(model.enc_ode, h, [0.0, model.t1], SolverConfig("euler", step=model.t1 / 2)).states[-1]
    h = model.gru(h, z_t0)
    out = model.enc_head(h)
    mu = ag.slice_last(out, 0, Dd)
    s = ag.softplus(ag.slice_last(out, Dd, 2 * Dd))
    if eps is None:
        if rng is None:
            return mu
        eps = rng.standard_normal(Dd)
    return ag.add(mu, ag.mul(s, np.asarray(eps, dtype=np.float64)))


def encoder_scale(model: SingleSeqModel) -> np.ndarray:
    with ag.no_grad():
        h = model.gru(Tensor(np.zeros(model.cfg.enc_hidden)), model.z_t1)
        h = ode_solve(model.enc_ode, h, [0.0, model.t1], SolverConfig("euler", step=model.t1 / 2)).states[-1]
        out = model.enc_head(model.gru(h, model.z_t0))
    return ag.softplus_np(out.data[model.cfg.dyn_dim:])


def _solve_states(model, z0, times, solver: SolverConfig) -> tuple[list, np.ndarray]:
    """States at ``times`` (any order, duplicates allowed), integrated from t = 0."""
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    uniq = np.unique(times)
    if uniq[0] < 0:
        raise ValueError("rollout: times must be >= 0")
    grid = uniq if uniq[0] == 0.0 else np.concatenate([[0.0], uniq])
    traj = ode_solve(model.f, z0, grid, solver)
    lookup = {float(t): s for t, s in zip(grid, traj.states)}
    return [lookup[float(t)] for t in times], grid


def rollout_single(model: SingleSeqModel, z0_dyn, times, solver: SolverConfig | None = None) -> Tensor:
    """Field latents ``(K, Z)`` at ``times``: integrate, decode, add the static latent if any."""
    states, _ = _solve_states(model, ag._as_tensor(z0_dyn), times, solver or SolverConfig())
    lat = model.decoder(_stack(states))
    if model.z_static is not None:
        lat = ag.add(lat, model.z_static)
    return lat


def build_initial_latent(model: MultiSeqModel, p0, v0) -> Tensor:
    p0 = np.asarray(p0, dtype=np.float64).reshape(-1)
    v0 = np.asarray(v0, dtype=np.float64).reshape(-1)
    if p0.shape[0] != model.pose_dim or v0.shape[0] != model.pose_dim:
        raise ag.ShapeError(f"build_initial_latent: pose/velocity must have {model.pose_dim} entries, "
                            f"got {p0.shape[0]} and {v0.shape[0]}")
    code = model.encoder(Tensor(positional_encode(p0, model.cfg.pose_freqs)))
    return ag.concat([model.z_can, code, Tensor(v0)])


def rollout_multi(model: MultiSeqModel, p0, v0, times, solver: SolverConfig | None = None):
    """Returns ``(field latents (K, Z), pose predictions, velocity predictions)``."""
    z0 = build_initial_latent(model, p0, v0)
    states, _ = _solve_states(model, z0, times, solver or SolverConfig())
    S = _stack(states)
    lat = ag.add(model.dec_nerf(S), model.z_static)
    return lat, model.dec_pose(S), model.dec_vel(S)


def auxiliary_losses(p_hat, v_hat, p, v) -> tuple[Tensor, Tensor]:
    """Mean absolute pose and velocity errors."""
    p_hat, v_hat = ag._as_tensor(p_hat), ag._as_tensor(v_hat)
    p, v = np.asarray(p, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if p_hat.shape != p.shape or v_hat.shape != v.shape:
        raise ag.ShapeError(f"auxiliary_losses: predictions {p_hat.shape}/{v_hat.shape} vs targets {p.shape}/{v.shape}")
    return ag.mean(ag.abs(ag.sub(p_hat, p))), ag.mean(ag.abs(ag.sub(v_hat, v)))


def total_loss(parts: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of ``nerf``, ``pose``, ``vel``, ``lip`` (and optional ``kl``) parts."""
    total = None
    for key in ("nerf", "pose", "vel", "lip", "kl"):
        part = parts.get(key)
        if part is None:
            continue
        part = ag._as_tensor(part)
        if not np.all(np.isfinite(part.data)):
            raise TrainingError(f"total_loss: non-finite {key} loss ({part.data}); aborting")
        w = getattr(weights, key)
        if w == 0.0:
            continue
        term = ag.scale(part, w)
        total = term if total is None else ag.add(total, term)
    return total if total is not None else Tensor(np.zeros(()))


# ---------------------------------------------------------------- training data


def single_split(n_frames: int, stride: int = 2, n_extrap: int = 5) -> dict:
    """Training frames every ``stride`` up to ``n_frames - n_extrap``; the skipped frames
    interpolate, the last ``n_extrap`` extrapolate."""
    window = n_frames - n_extrap
    if window < 2 or stride < 1:
        raise ValueError(f"single_split: {n_frames} frames cannot hold {n_extrap} extrapolation frames")
    train = np.arange(0, window, stride)
    if len(train) < 2:
        raise ValueError("single_split: need at least two training frames")
    interp = np.array([i for i in range(train[-1]) if i % stride])
    extrap = np.arange(train[-1] + 1, n_frames)
    return {"train": train, "interp": interp, "extrap": extrap, "t_scale": float(train[-1])}


def dynamic_mask(frame: np.ndarray, static: np.ndarray, thresh: float = 0.1) -> np.ndarray:
    """Pixels differing from the static background, dilated by one pixel."""
    m = np.max(np.abs(frame - static), axis=-1) > thresh
    d = m.copy()
    d[1:] |= m[:-1]
    d[:-1] |= m[1:]
    d[:, 1:] |= m[:, :-1]
    d[:, :-1] |= m[:, 1:]
    return d


@dataclass
class Clip:
    frames: np.ndarray  # (T, C, H, W, 3) float in [0, 1]
    times: np.ndarray  # (T,)
    poses: np.ndarray  # (T, P)
    velocities: np.ndarray  # (T, P); rows without a successor are NaN
    static: np.ndarray  # (C, H, W, 3)
    dyn: list  # dyn[t][c] -> flat pixel indices
    name: str = ""
    motion: list | None = None  # motion[c] -> union of dynamic pixels over all training frames

    @property
    def p0(self):
        return self.poses[0]

    @property
    def v0(self):
        return self.velocities[0]


def _clip(frames_u8, poses, vels, static_u8, times, name) -> Clip:
    frames = frames_u8.astype(np.float64) / 255.0
    static = static_u8.astype(np.float64) / 255.0
    T = len(frames)
    v = np.full((T, poses.shape[1]), np.nan)
    n = min(T, len(vels))
    v[:n] = vels[:n]
    dyn = [[np.flatnonzero(dynamic_mask(frames[t, c], static[c])) for c in range(frames.shape[1])]
           for t in range(T)]
    return Clip(frames, np.asarray(times, dtype=np.float64), np.asarray(poses, dtype=np.float64), v, static, dyn, name)


def prepare_single(dataset: DatasetManifest, cfg: TrainConfig) -> tuple[Clip, dict]:
    train = dataset.split("train") or dataset.sequences
    if not train:
        raise TrainingError("single-sequence training needs one sequence; dataset is empty")
    if cfg.sequence >= len(train):
        raise TrainingError(f"single-sequence training: sequence {cfg.sequence} not in the {len(train)}-sequence train split")
    seq = train[cfg.sequence]
    n = cfg.n_frames or seq.n_frames
    if n > seq.n_frames:
        raise TrainingError(f"single-sequence training: asked for {n} frames, sequence has {seq.n_frames}")
    split = single_split(n, cfg.train_stride, cfg.extrap_frames)
    ids = split["train"]
    clip = _clip(seq.frames[ids], seq.poses[ids], seq.velocities[ids], seq.static, ids / split["t_scale"], seq.name)
    attach_motion_region([clip])
    return clip, split


def prepare_multi(dataset: DatasetManifest, cfg: TrainConfig) -> list[Clip]:
    train = dataset.split("train")
    if not train:
        raise TrainingError("multi-sequence training needs a non-empty train split")
    clips = []
    for seq in train:
        if seq.n_frames < 2:
            raise TrainingError(f"multi-sequence training: {seq.name} has fewer than 2 frames")
        t_scale = float(seq.n_frames - 1)
        base = _clip(seq.frames, seq.poses, seq.velocities, seq.static, np.arange(seq.n_frames) / t_scale, seq.name)
        k = min(cfg.subsequences, seq.n_frames - 1)
        for j in range(k):
            T = seq.n_frames - j
            clips.append(Clip(base.frames[j:], np.arange(T) / t_scale, base.poses[j:], base.velocities[j:],
                              base.static, base.dyn[j:], f"{seq.name}/{j}"))
    attach_motion_region(clips)
    return clips


def attach_motion_region(clips: list[Clip]) -> None:
    """Give every clip the per-camera union of moving-object pixels across all clips.

    Rays from this region penalise an object drawn where it is absent in the
    current frame but present in others.
    """
    C = clips[0].frames.shape[1]
    union = [set() for _ in range(C)]
    for clip in clips:
        for per_cam in clip.dyn:
            for c in range(C):
                union[c].update(per_cam[c].tolist())
    motion = [np.array(sorted(u), dtype=np.intp) for u in union]
    for clip in clips:
        clip.motion = motion


class RayTable:
    """Precomputed rays for every pixel of every camera."""

    def __init__(self, cameras: list[Camera]):
        self.cameras = cameras
        self.origins, self.dirs = [], []
        for cam in cameras:
            o, d = cam.rays_grid(0.5, 0.5)
            self.origins.append(o.reshape(-1, 3))
            self.dirs.append(d.reshape(-1, 3))
        self.n_pixels = cameras[0].width * cameras[0].height

    def gather(self, cams: np.ndarray, pix: np.ndarray) -> Rays:
        o = np.stack([self.origins[c][p] for c, p in zip(cams, pix)])
        d = np.stack([self.dirs[c][p] for c, p in zip(cams, pix)])
        W = self.cameras[0].width
        return Rays(o, d, np.stack([pix // W, pix % W], axis=1), self.cameras[0].near, self.cameras[0].far)


def sample_rays(rng: np.random.Generator, clip: Clip, frame_ids: np.ndarray, n_rays: int, table: RayTable,
                dynamic_fraction: float, use_static: bool = False, motion_fraction: float = 0.0):
    """Ray batch over ``frame_ids`` (roughly equal share per frame); a ``dynamic_fraction``
    share of each frame's rays is drawn from its moving-object pixels when there are any.
    Of those, a ``motion_fraction`` share comes from the clip's motion region instead."""
    C = clip.frames.shape[1]
    per = np.full(len(frame_ids), n_rays // len(frame_ids))
    per[: n_rays - per.sum()] += 1
    cams, pix, index, targets = [], [], [], []
    for k, (t, m) in enumerate(zip(frame_ids, per)):
        c = rng.integers(0, C, size=m)
        p = rng.integers(0, table.n_pixels, size=m)
        if dynamic_fraction > 0 and not use_static:
            n_dyn = int(round(dynamic_fraction * m))
            n_mot = int(round(motion_fraction * n_dyn)) if clip.motion is not None else 0
            for i in range(n_dyn):
                cand = clip.motion[c[i]] if i < n_mot else clip.dyn[t][c[i]]
                if len(cand):
                    p[i] = cand[rng.integers(0, len(cand))]
        img = clip.static if use_static else clip.frames[t]
        flat = img.reshape(C, -1, 3)
        targets.append(flat[c, p])
        cams.append(c)
        pix.append(p)
        index.append(np.full(m, k, dtype=np.intp))
    cams, pix = np.concatenate(cams), np.concatenate(pix)
    return table.gather(cams, pix), np.concatenate(index), np.concatenate(targets)


# ---------------------------------------------------------------- steps


def psnr_value(mse: float) -> float:
    return 99.0 if mse < 1e-12 else float(-10.0 * np.log10(mse))


def _warmup_latents_single(model: SingleSeqModel) -> Tensor:
    return ag.reshape(ag.concat([model.z_t0, model.z_t1]), (2, model.cfg.latent_dim))


def step_single(model: SingleSeqModel, clip: Clip, table: RayTable, cfg: TrainConfig, rng, warm: bool):
    if warm:
        frames = np.array([0, 1])
        rays, idx, target = sample_rays(rng, clip, frames, cfg.ray_batch, table, cfg.dynamic_fraction,
                                      motion_fraction=cfg.motion_fraction)
        latents = _warmup_latents_single(model)
    else:
        frames = np.sort(rng.choice(len(clip.times), size=min(cfg.frames_per_batch, len(clip.times)), replace=False))
        rays, idx, target = sample_rays(rng, clip, frames, cfg.ray_batch, table, cfg.dynamic_fraction,
                                      motion_fraction=cfg.motion_fraction)
        z0 = encode_initial_state(model, rng=rng)
        latents = rollout_single(model, z0, clip.times[frames], cfg.solver)
    outs = render_rays(model.nerf, rays, latents, idx, cfg.render, rng)
    parts = {"nerf": nerf_loss(outs, target)}
    return parts, outs[-1].rgb.data, target


def step_multi(model: MultiSeqModel, clips: list, table: RayTable, cfg: TrainConfig, rng, warm: bool):
    clip = clips[rng.integers(0, len(clips))]
    if warm:
        rays, idx, target = sample_rays(rng, clip, np.array([0]), cfg.ray_batch, table, 0.0, use_static=True)
        latents = ag.reshape(model.z_static, (1, model.cfg.latent_dim))
        outs = render_rays(model.nerf, rays, latents, idx, cfg.render, rng)
        return {"nerf": nerf_loss(outs, target)}, outs[-1].rgb.data, target
    T = len(clip.times)
    frames = np.sort(rng.choice(T, size=min(cfg.frames_per_batch, T), replace=False))
    rays, idx, target = sample_rays(rng, clip, frames, cfg.ray_batch, table, cfg.dynamic_fraction,
                                    motion_fraction=cfg.motion_fraction)
    latents, p_hat, v_hat = rollout_multi(model, clip.p0, clip.v0, clip.times[frames], cfg.solver)
    outs = render_rays(model.nerf, rays, latents, idx, cfg.render, rng)
    parts = {"nerf": nerf_loss(outs, target)}
    p_t = model.pose_target(clip.poses[frames])
    has_v = np.all(np.isfinite(clip.velocities[frames]), axis=1)
    l_p = ag.mean(ag.abs(ag.sub(p_hat, p_t)))
    if has_v.any():
        v_sel = ag.take(v_hat, np.flatnonzero(has_v))
        l_v = ag.mean(ag.abs(ag.sub(v_sel, clip.velocities[frames][has_v])))
    else:
        l_v = Tensor(np.zeros(()))
    parts["pose"], parts["vel"] = l_p, l_v
    lip_layers = model.nerf.lipschitz_layers()
    if lip_layers:
        parts["lip"] = lipschitz_loss(lip_layers)
    return parts, outs[-1].rgb.data, target


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: Module
    config: TrainConfig
    iterations: int
    log: list
    meta: dict


def _meta(cfg: TrainConfig, model, it: int, seed: int, scene: SceneSpec | None, extra: dict) -> dict:
    return {"config": cfg.to_flat(), "iteration": it, "seed": int(seed), "mode": cfg.mode,
            "weights": dataclasses.asdict(cfg.weights),
            "scene": scene.to_dict() if scene is not None else None,
            "pose_dim": getattr(model, "pose_dim", None), "t1": getattr(model, "t1", None), **extra}


def model_arrays(model: Module) -> dict:
    return {k: v.data for k, v in model.named_parameters().items()}


def save_model(path, model: Module, meta: dict) -> None:
    save_checkpoint(path, model_arrays(model), meta)


def load_model(path) -> tuple[Module, TrainConfig, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_flat(meta["config"])
    model = model_from_config(cfg, meta["seed"], meta.get("pose_dim") or 3)
    params = model.named_parameters()
    missing = set(params) - set(arrays)
    if missing:
        raise TrainingError(f"{path}: checkpoint lacks parameters {sorted(missing)[:5]}")
    for k, p in params.items():
        if arrays[k].shape != p.shape:
            raise TrainingError(f"{path}: parameter {k} has shape {arrays[k].shape}, model expects {p.shape}")
        p.data[...] = arrays[k]
    if meta.get("t1") is not None:
        model.t1 = meta["t1"]
    return model, cfg, meta


def _probe(model, cfg: TrainConfig, probe) -> float:
    rays, target, latent_fn = probe
    with ag.no_grad():
        outs = render_rays(model.nerf, rays, latent_fn(), None, cfg.render, None)
    return psnr_value(float(np.mean((outs[-1].rgb.data - target) ** 2)))


def train(dataset: DatasetManifest, config: TrainConfig, seed: int | None = None, out_dir=None,
          log_stream=None, progress=None) -> TrainResult:
    """Run warm-up and joint phases for ``config.iterations`` iterations.

    With ``out_dir`` the metrics log goes to ``metrics.csv`` and checkpoints to
    ``checkpoint.ckpt`` (plus ``checkpoint_<iter>.ckpt`` every
    ``checkpoint_every`` iterations).  Returns the trained model and log rows.
    """
    cfg = config
    seed = cfg.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    table = RayTable(dataset.cameras)
    extra = {}
    if cfg.mode == "single":
        clip, split = prepare_single(dataset, cfg)
        model = model_from_config(cfg, seed)
        model.t1 = float(clip.times[1])
        extra["split"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in split.items()}
        step = lambda warm: step_single(model, clip, table, cfg, rng, warm)  # noqa: E731
        probe_clip = clip

        def probe_latent():
            return rollout_single(model, encode_initial_state(model), [0.0], cfg.solver)
    else:
        clips = prepare_multi(dataset, cfg)
        model = model_from_config(cfg, seed, clips[0].poses.shape[1])
        step = lambda warm: step_multi(model, clips, table, cfg, rng, warm)  # noqa: E731
        probe_clip = clips[0]

        def probe_latent():
            return rollout_multi(model, probe_clip.p0, probe_clip.v0, [0.0], cfg.solver)[0]

    prng = np.random.default_rng(seed + 1)
    n_probe = min(cfg.probe_rays, table.n_pixels)
    pix = prng.choice(table.n_pixels, size=n_probe, replace=False)
    probe = (table.gather(np.zeros(n_probe, dtype=np.intp), pix), probe_clip.frames[0, 0].reshape(-1, 3)[pix],
             probe_latent)

    opt = Adam(model.parameters(), lr=cfg.lr)
    warm_set, joint_set = model.warmup_params(), model.joint_params()
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.csv", "w", newline="")
        log_fh.write(buf.getvalue())
    try:
        for it in range(cfg.iterations):
            warm = cfg.warmup.in_warmup(it)
            ag.reset_graph()
            parts, _, _ = step(warm)
            loss = total_loss(parts, cfg.weights)
            active = warm_set if warm else joint_set
            grads = ag.backward(loss, active)
            opt.step(grads, only=active)
            probe_psnr = ""
            if cfg.probe_every and (it % cfg.probe_every == 0 or it == cfg.iterations - 1):
                probe_psnr = _probe(model, cfg, probe)
            row = [it, float(loss.data)] + [float(parts[k].data) if k in parts else 0.0
                                            for k in ("nerf", "pose", "vel", "lip")] + [probe_psnr]
            rows.append(row)
            line = ",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n"
            if log_fh is not None:
                log_fh.write(line)
            if log_stream is not None:
                log_stream.write(line)
            if progress is not None:
                progress(it, row)
            if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_model(out_dir / f"checkpoint_{it + 1:06d}.ckpt", model,
                           _meta(cfg, model, it + 1, seed, dataset.scene, extra))
    finally:
        if log_fh is not None:
            log_fh.close()
    meta = _meta(cfg, model, cfg.iterations, seed, dataset.scene, extra)
    if out_dir is not None:
        save_model(out_dir / "checkpoint.ckpt", model, meta)
    return TrainResult(model, cfg, cfg.iterations, rows, meta)


# ---------------------------------------------------------------- inference


def single_latents(model: SingleSeqModel, times, solver: SolverConfig | None = None) -> np.ndarray:
    """Deterministic field latents (recognition mean, no noise) at ``times``."""
    with ag.no_grad():
        return rollout_single(model, encode_initial_state(model), times, solver).data


def single_dynamic_states(model: SingleSeqModel, times, solver: SolverConfig | None = None) -> np.ndarray:
    with ag.no_grad():
        states, _ = _solve_states(model, encode_initial_state(model), times, solver or SolverConfig())
    return np.stack([s.data for s in states])


def multi_predict(model: MultiSeqModel, p0, v0, times, solver: SolverConfig | None = None) -> dict:
    with ag.no_grad():
        lat, p_hat, v_hat = rollout_multi(model, p0, v0, times, solver)
    return {"latents": lat.data, "pose_code": p_hat.data, "pose": model.decode_pose(p_hat.data),
            "velocity": v_hat.data}


def render_latents(model, camera: Camera, latents: np.ndarray, render: RenderConfig, threads: int = 1,
                   return_opacity: bool = False) -> np.ndarray:
    """Render one frame per latent row; returns ``(K, H, W, 3)`` (and opacities)."""
    imgs, ops = [], []
    for z in np.atleast_2d(latents):
        out = render_image(model.nerf, camera, z, render, threads, return_opacity=return_opacity)
        if return_opacity:
            imgs.append(out[0])
            ops.append(out[1])
        else:
            imgs.append(out)
    if return_opacity:
        return np.stack(imgs), np.stack(ops)
    return np.stack(imgs)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_flat(), sort_keys=True, indent=2)
