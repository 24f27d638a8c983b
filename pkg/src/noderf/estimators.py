"""Estimator wrappers around the training pipelines (scikit-learn conventions).

``fit`` takes a :class:`~noderf.synth.DatasetManifest`; ``predict`` renders
frames at normalized times (single) or for new initial conditions (multi).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics, pipelines
from .pipelines import TrainConfig
from .synth import DatasetManifest, SequenceRecord


def check_times(times) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    if t.size == 0 or not np.all(np.isfinite(t)) or np.any(t < 0):
        raise ValueError("times must be a non-empty list of finite, non-negative values")
    return t


def check_manifest(X) -> DatasetManifest:
    if isinstance(X, SequenceRecord):
        raise TypeError("pass a DatasetManifest (see noderf.synth.generate_dataset), not a single record")
    if not isinstance(X, DatasetManifest):
        raise TypeError(f"expected a DatasetManifest, got {type(X).__name__}")
    return X


DESK_DEFAULTS = {
    "warmup.initial": 300, "warmup.period": 2000, "warmup.length": 100,
    "nerf.hidden": 64, "nerf.depth": 3, "nerf.pos_freqs": 6, "nerf.dir_freqs": 2,
    "render.n_coarse": 16, "render.n_fine": 16,
}
MULTI_DEFAULTS = {
    "model.time_input": False, "model.dec_hidden": 256, "model.raw_pose_targets": True,
    "weights.pose": 1.0, "weights.vel": 1.0, "motion_fraction": 0.5,
}


class _NodeRFBase(BaseEstimator):
    """Shared fit logic; ``overrides`` takes dotted training keys on top of desk-scale defaults."""

    _mode = "single"

    def __init__(self, iterations: int = 4000, lr: float = 2e-3, ray_batch: int = 256, latent_dim: int = 64,
                 seed: int = 0, overrides: dict | None = None):
        self.iterations = iterations
        self.lr = lr
        self.ray_batch = ray_batch
        self.latent_dim = latent_dim
        self.seed = seed
        self.overrides = overrides

    def _config(self) -> TrainConfig:
        flat = TrainConfig(mode=self._mode).to_flat()
        flat.update(DESK_DEFAULTS)
        if self._mode == "multi":
            flat.update(MULTI_DEFAULTS)
        flat.update({"iterations": self.iterations, "lr": self.lr, "ray_batch": self.ray_batch,
                     "model.latent_dim": self.latent_dim, "seed": self.seed})
        for k, v in (self.overrides or {}).items():
            if k not in flat:
                raise ValueError(f"unknown config key {k!r}")
            flat[k] = v
        return TrainConfig.from_flat(flat)

    def fit(self, X, y=None):
        X = check_manifest(X)
        res = pipelines.train(X, self._config(), seed=self.seed)
        self.model_ = res.model
        self.config_ = res.config
        self.meta_ = res.meta
        self.log_ = res.log
        self.cameras_ = X.cameras
        return self

    def _render(self, latents, camera: int = 0) -> np.ndarray:
        return pipelines.render_latents(self.model_, self.cameras_[camera], latents, self.config_.render)


class SingleSequenceNodeRF(_NodeRFBase):
    """One sequence: warm-up latents, ODE-RNN recognition, latent ODE, decoder, radiance field."""

    _mode = "single"

    def latents(self, times) -> np.ndarray:
        check_is_fitted(self, "model_")
        return pipelines.single_latents(self.model_, check_times(times), self.config_.solver)

    def predict(self, times, camera: int = 0) -> np.ndarray:
        """Rendered frames ``(K, H, W, 3)`` at normalized times (1.0 = last training frame)."""
        return self._render(self.latents(times), camera)

    def score(self, X, y=None) -> float:
        """Mean PSNR over the training frames of the fitted sequence in ``X``."""
        check_is_fitted(self, "model_")
        X = check_manifest(X)
        seq = (X.split("train") or X.sequences)[self.config_.sequence]
        split = self.meta_["split"]
        ids = np.asarray(split["train"], dtype=int)
        pred = self.predict(ids / split["t_scale"])
        return float(np.mean([metrics.psnr(p, seq.frame(i)) for p, i in zip(pred, ids)]))


class MultiSequenceNodeRF(_NodeRFBase):
    """Many sequences: canonical latent + pose encoder, latent ODE, three decoders."""

    _mode = "multi"

    def predict_latents(self, p0, v0, times) -> dict:
        check_is_fitted(self, "model_")
        return pipelines.multi_predict(self.model_, p0, v0, check_times(times), self.config_.solver)

    def predict(self, p0, v0, times, camera: int = 0) -> np.ndarray:
        return self._render(self.predict_latents(p0, v0, times)["latents"], camera)

    def predict_poses(self, p0, v0, times) -> np.ndarray:
        return self.predict_latents(p0, v0, times)["pose"]

    def score(self, X, y=None) -> float:
        """Mean flow-mask IoU over the eval sequences of ``X``."""
        check_is_fitted(self, "model_")
        X = check_manifest(X)
        cfg = metrics.EvalConfig(alpha=0.5 if X.scene.kind == "bifurcating-hill" else 0.3)
        scores = []
        for seq in X.split("eval"):
            times = np.arange(seq.n_frames) / (seq.n_frames - 1)
            pred = self.predict(seq.p0, seq.v0, times)
            gt = np.stack([seq.frame(i) for i in range(seq.n_frames)])
            scores.append(metrics.flow_mask_iou(pred, gt, cfg.alpha, cfg)[1])
        valid = [s for s in scores if np.isfinite(s)]
        return float(np.mean(valid)) if valid else float("nan")
