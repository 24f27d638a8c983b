"""Dynamical-system views of a learned latent vector field.

Divergence is the exact Jacobian trace: the field is evaluated on ``D`` copies
of the point and one reverse pass over ``sum_i f_i(row i)`` yields every
diagonal entry at once.  Sinks are found by integrating far past the training
window and single-linkage clustering the terminal states.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autograd as ag
from .autograd import Tensor
from .ode import SolverConfig, SolverError, ode_solve
from .synth import write_ppm


def latent_divergence(f, z, t: float = 0.0, mode: str = "exact", h: float = 1e-5) -> float:
    """Divergence ``trace(df/dz)`` of ``f(z, t)`` at a single point ``z``."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    D = z.shape[0]
    if mode == "fd":
        total = 0.0
        with ag.no_grad():
            for i in range(D):
                e = np.zeros(D)
                e[i] = h
                fp = f(Tensor((z + e)[None]), t).data[0, i]
                fm = f(Tensor((z - e)[None]), t).data[0, i]
                total += (fp - fm) / (2 * h)
        return float(total)
    if mode != "exact":
        raise ValueError(f"latent_divergence: unknown mode {mode!r}")
    ag.reset_graph()
    Zb = ag.parameter(np.tile(z, (D, 1)))
    out = f(Zb, t)
    if out.shape != (D, D):
        ag.reset_graph()
        raise ag.ShapeError(f"latent_divergence: field maps width {D} to {out.shape[-1]}")
    diag = ag.sum(ag.mul(out, np.eye(D)))
    g = ag.backward(diag, [Zb])[Zb].data
    return float(np.trace(g))


class LatentPCA(TransformerMixin, BaseEstimator):
    """Top-k principal directions with a deterministic sign (largest-|component| positive)."""

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        _, s, vt = np.linalg.svd(Xc, full_matrices=False)
        var = s ** 2
        total = var.sum()
        if total <= 0:
            raise ValueError("LatentPCA: all points are identical (degenerate projection)")
        k = min(self.n_components, vt.shape[0])
        comps = vt[:k].copy()
        for i in range(k):
            j = np.argmax(np.abs(comps[i]))
            if comps[i, j] < 0:
                comps[i] = -comps[i]
        self.components_ = comps
        self.explained_variance_ratio_ = var[:k] / total
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Y):
        check_is_fitted(self, "components_")
        return np.asarray(Y, dtype=np.float64) @ self.components_ + self.mean_


@dataclass
class Projection:
    mean: np.ndarray
    directions: np.ndarray
    explained: np.ndarray
    paths: list


def project_trajectories(trajectories) -> Projection:
    """Fit the top-2 plane over all states and map each trajectory ``(T_i, D)`` into it."""
    trajs = [np.atleast_2d(np.asarray(t, dtype=np.float64)) for t in trajectories]
    pts = np.concatenate(trajs)
    if len(pts) < 2:
        raise ValueError("project_trajectories: need at least two points")
    pca = LatentPCA(2).fit(pts)
    return Projection(pca.mean_, pca.components_, pca.explained_variance_ratio_,
                      [pca.transform(t) for t in trajs])


@dataclass
class SinkReport:
    centers: np.ndarray  # (K, D)
    divergence: np.ndarray  # (K,)
    members: list  # per cluster: trajectory ids
    labels: np.ndarray  # (N,) cluster per trajectory, -1 when integration failed
    terminal: np.ndarray  # (N, D), NaN rows for failures
    failures: dict = field(default_factory=dict)
    tau: float = 0.0

    @property
    def n_clusters(self) -> int:
        return len(self.centers)


def cluster_terminal(points: np.ndarray, tau_frac: float = 0.05, tau_min: float = 1e-6) -> tuple[np.ndarray, float]:
    """Single-linkage labels (0-based, ordered by first appearance) and the threshold used.

    The threshold is ``tau_frac`` of the point-cloud diameter, floored at
    ``tau_min`` so that states which all collapsed onto one sink stay together.
    """
    points = np.atleast_2d(points)
    if len(points) == 1:
        return np.zeros(1, dtype=int), 0.0
    diam = float(pdist(points).max())
    tau = max(tau_frac * diam, tau_min)
    if diam <= tau:
        return np.zeros(len(points), dtype=int), tau
    raw = fcluster(linkage(points, method="single"), t=tau, criterion="distance")
    remap, out = {}, []
    for r in raw:
        remap.setdefault(r, len(remap))
        out.append(remap[r])
    return np.array(out), tau


def find_sinks(f, initial_latents, horizon: float, solver: SolverConfig | None = None,
               tau_frac: float = 0.05, t0: float = 0.0) -> SinkReport:
    """Integrate each initial latent to ``horizon``, cluster terminal states, score each cluster."""
    solver = solver or SolverConfig()
    init = np.atleast_2d(np.asarray(initial_latents, dtype=np.float64))
    N, D = init.shape
    terminal = np.full((N, D), np.nan)
    failures = {}
    with ag.no_grad():
        for i, z0 in enumerate(init):
            try:
                terminal[i] = ode_solve(f, Tensor(z0), [t0, horizon], solver).states[-1].data
                if not np.all(np.isfinite(terminal[i])):
                    raise SolverError("non-finite terminal state")
            except SolverError as exc:
                terminal[i] = np.nan
                failures[i] = str(exc)
    ok = np.flatnonzero(np.all(np.isfinite(terminal), axis=1))
    labels = np.full(N, -1)
    if ok.size == 0:
        return SinkReport(np.zeros((0, D)), np.zeros(0), [], labels, terminal, failures)
    lab, tau = cluster_terminal(terminal[ok], tau_frac)
    labels[ok] = lab
    K = lab.max() + 1
    centers = np.stack([terminal[ok][lab == k].mean(axis=0) for k in range(K)])
    div = np.array([latent_divergence(f, c, horizon) for c in centers])
    members = [ok[lab == k].tolist() for k in range(K)]
    return SinkReport(centers, div, members, labels, terminal, failures, tau)


def divergence_grid(f, projection: Projection, t: float = 0.0, n: int = 21, margin: float = 0.2) -> tuple:
    """Divergence on an ``n x n`` grid spanning the projected paths, back-projected into latent space.

    Values are exact at the back-projected points only; off-plane structure is not represented.
    """
    pts = np.concatenate(projection.paths)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-9)
    a = np.linspace(lo[0] - pad[0], hi[0] + pad[0], n)
    b = np.linspace(lo[1] - pad[1], hi[1] + pad[1], n)
    grid = np.zeros((n, n))
    for i, y in enumerate(b):
        for j, x in enumerate(a):
            z = projection.mean + x * projection.directions[0] + y * projection.directions[1]
            grid[i, j] = latent_divergence(f, z, t)
    return a, b, grid


def heatmap(grid: np.ndarray) -> np.ndarray:
    """Blue (negative) / white (zero) / red (positive) image, symmetric in |value|."""
    m = float(np.max(np.abs(grid))) or 1.0
    x = np.clip(grid / m, -1.0, 1.0)[..., None]
    white = np.ones(3)
    red, blue = np.array([0.8, 0.1, 0.1]), np.array([0.1, 0.2, 0.8])
    img = np.where(x >= 0, white + x * (red - white), white - x * (blue - white))
    return np.round(img[::-1] * 255).astype(np.uint8)  # first grid row at the bottom


def write_analysis(out_dir, projection: Projection, report: SinkReport, grid_axes=None,
                   times=None, upscale: int = 8) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    p = out_dir / "trajectories.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj", "step", "t", "pc1", "pc2"])
        for k, path in enumerate(projection.paths):
            for s, (x, y) in enumerate(path):
                t = "" if times is None else repr(float(times[s]))
                w.writerow([k, s, t, repr(float(x)), repr(float(y))])
    paths["trajectories"] = p
    p = out_dir / "sinks.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "pc1", "pc2", "mean_divergence", "n_members", "members"])
        for k, c in enumerate(report.centers):
            xy = (c - projection.mean) @ projection.directions.T
            w.writerow([k, repr(float(xy[0])), repr(float(xy[1])), repr(float(report.divergence[k])),
                        len(report.members[k]), " ".join(map(str, report.members[k]))])
    paths["sinks"] = p
    if grid_axes is not None:
        a, b, grid = grid_axes
        p = out_dir / "divergence_grid.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pc1", "pc2", "divergence"])
            for i, y in enumerate(b):
                for j, x in enumerate(a):
                    w.writerow([repr(float(x)), repr(float(y)), repr(float(grid[i, j]))])
        paths["divergence_grid"] = p
        img = np.kron(heatmap(grid), np.ones((upscale, upscale, 1), dtype=np.uint8))
        p = out_dir / "divergence.ppm"
        write_ppm(p, img)
        paths["heatmap"] = p
    return paths
