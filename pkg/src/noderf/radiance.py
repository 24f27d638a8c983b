"""Latent-conditioned radiance field and differentiable volume rendering.

Rays come from a pinhole camera looking along its local -z axis.  Each level
(coarse, fine) owns a separate field network; both read the same per-time
latent code.  Compositing follows the usual alpha discretization:
``alpha_i = 1 - exp(-sigma_i * delta_i)``, ``T_i = prod_{j<i}(1 - alpha_j)``,
``w_i = T_i * alpha_i`` and ``C = sum_i w_i c_i + T_final * background``.
"""
from __future__ import annotations

import functools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, LipschitzLinear, Module, positional_encode


class RenderError(ValueError):
    pass


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """3x4 world-from-camera transform with the camera's -z axis facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    z = -fwd
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.concatenate([np.stack([x, y, z], axis=1), eye[:, None]], axis=1)


@dataclass
class Camera:
    pose: np.ndarray  # 3x4 world-from-camera
    focal: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (3, 4):
            raise RenderError(f"Camera: pose must be 3x4, got {self.pose.shape}")
        R = self.pose[:, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise RenderError("Camera: rotation part must be orthonormal with det +1")
        if not (0 < self.near < self.far):
            raise RenderError(f"Camera: need 0 < near < far, got {self.near}, {self.far}")

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:, 3]

    def directions(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit world directions through continuous pixel coordinates (u right, v down)."""
        dc = np.stack([(u - self.width / 2.0) / self.focal,
                       -(v - self.height / 2.0) / self.focal,
                       -np.ones_like(u, dtype=np.float64)], axis=-1)
        d = dc @ self.pose[:, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def rays_grid(self, ox: float = 0.5, oy: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.meshgrid(np.arange(self.height) + oy, np.arange(self.width) + ox, indexing="ij")
        d = self.directions(u, v)
        o = np.broadcast_to(self.origin, d.shape)
        return o, d


@dataclass
class Rays:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3)
    pixels: np.ndarray  # (R, 2) as (row, col)
    near: float
    far: float

    def __len__(self):
        return len(self.origins)


def generate_rays(camera: Camera, pixels) -> Rays:
    """One ray per ``(row, col)`` pixel through the pixel center."""
    pix = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if pix.size and (pix.min() < 0 or np.any(pix[:, 0] >= camera.height) or np.any(pix[:, 1] >= camera.width)):
        raise RenderError(f"generate_rays: pixel outside {camera.height}x{camera.width} image")
    d = camera.directions(pix[:, 1] + 0.5, pix[:, 0] + 0.5)
    o = np.broadcast_to(camera.origin, d.shape).copy()
    return Rays(o, d, pix, camera.near, camera.far)


def all_pixels(camera: Camera) -> np.ndarray:
    r, c = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([r.ravel(), c.ravel()], axis=1)


# ---------------------------------------------------------------- sampling


def bin_edges(near: float, far: float, n: int) -> np.ndarray:
    return np.linspace(near, far, n + 1)


def stratified_depths(near: float, far: float, n_samples: int, n_rays: int = 1,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """One uniform draw in each of ``n_samples`` equal bins of [near, far].

    ``rng=None`` pins every draw to its bin midpoint.  Returns ``(n_rays, n_samples)``.
    """
    if n_samples < 2:
        raise RenderError("stratified_depths: need at least 2 samples")
    edges = bin_edges(near, far, n_samples)
    lo, width = edges[:-1], np.diff(edges)
    u = np.full((n_rays, n_samples), 0.5) if rng is None else rng.random((n_rays, n_samples))
    return lo + u * width


def importance_depths(edges: np.ndarray, weights: np.ndarray, n_fine: int,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Inverse-CDF samples from the piecewise-constant density ``weights + 1e-5`` over ``edges``.

    ``edges`` is ``(n + 1,)`` or ``(R, n + 1)``; ``weights`` is ``(R, n)``.
    ``rng=None`` uses evenly spaced quantiles.  Output ``(R, n_fine)``, sorted.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise RenderError("importance_depths: weights must be non-negative")
    R, n = w.shape
    edges = np.broadcast_to(np.asarray(edges, dtype=np.float64), (R, n + 1))
    w = w + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (R, n_fine))
    else:
        u = np.sort(rng.random((R, n_fine)), axis=1)
    out = np.empty((R, n_fine))
    for r in range(R):
        idx = np.clip(np.searchsorted(cdf[r], u[r], side="right") - 1, 0, n - 1)
        frac = (u[r] - cdf[r, idx]) / np.maximum(cdf[r, idx + 1] - cdf[r, idx], 1e-300)
        out[r] = edges[r, idx] + np.clip(frac, 0.0, 1.0) * (edges[r, idx + 1] - edges[r, idx])
    return np.sort(out, axis=1)


def _importance_depths_vec(edges_1d: np.ndarray, weights: np.ndarray, n_fine: int,
                           rng: np.random.Generator | None) -> np.ndarray:
    # vectorized form for shared edges; identical math to importance_depths
    R, n = weights.shape
    w = weights + 1e-5
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (R, n_fine)).copy()
    else:
        u = np.sort(rng.random((R, n_fine)), axis=1)
    # bin index: count of cdf entries <= u, minus one
    idx = np.clip((cdf[:, None, :] <= u[:, :, None]).sum(axis=2) - 1, 0, n - 1)
    c0 = np.take_along_axis(cdf, idx, axis=1)
    c1 = np.take_along_axis(cdf, idx + 1, axis=1)
    frac = np.clip((u - c0) / np.maximum(c1 - c0, 1e-300), 0.0, 1.0)
    lo = edges_1d[idx]
    return np.sort(lo + frac * (edges_1d[idx + 1] - lo), axis=1)


# ---------------------------------------------------------------- field


@dataclass
class FieldConfig:
    latent_dim: int = 64
    hidden: int = 64
    depth: int = 3
    pos_freqs: int = 10
    dir_freqs: int = 4
    lipschitz: bool = False
    lipschitz_headroom: float = 1.0
    use_viewdirs: bool = True


class RadianceField(Module):
    """``F(x, d, z) -> (rgb, sigma)`` for one sampling level.

    The latent enters the first layer; its contribution ``z @ W_z.T`` is
    computed once per distinct latent and gathered per sample.
    """

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        self.config = config
        if config.lipschitz:
            L = functools.partial(LipschitzLinear, headroom=config.lipschitz_headroom)
        else:
            L = Linear
        in_x = 6 * config.pos_freqs
        in_d = 6 * config.dir_freqs if config.use_viewdirs else 0
        H = config.hidden
        self.trunk = [L(in_x + config.latent_dim, H, rng)] + [L(H, H, rng) for _ in range(config.depth - 1)]
        self.sigma_head = L(H, 1, rng)
        self.feature = L(H, H, rng)
        self.color_hidden = L(H + in_d, H // 2, rng)
        self.color_out = L(H // 2, 3, rng)

    @property
    def in_x(self) -> int:
        return 6 * self.config.pos_freqs

    def lipschitz_layers(self) -> list:
        return [l for l in [*self.trunk, self.sigma_head, self.feature, self.color_hidden, self.color_out]
                if isinstance(l, LipschitzLinear)]

    def __call__(self, x_enc: np.ndarray, d_enc: np.ndarray | None, latents: Tensor, index: np.ndarray):
        """Evaluate ``P`` samples; ``latents`` is ``(T, Z)`` and ``index`` maps samples to rows."""
        latents = ag._as_tensor(latents)
        if latents.ndim == 1:
            latents = ag.reshape(latents, (1, latents.shape[0]))
        if latents.shape[-1] != self.config.latent_dim:
            raise ag.ShapeError(
                f"RadianceField: latent dim {latents.shape[-1]} != configured {self.config.latent_dim}")
        first = self.trunk[0]
        W = first.weight()
        Wx = ag.slice_last(W, 0, self.in_x)
        Wz = ag.slice_last(W, self.in_x, W.shape[1])
        zterm = ag.add(ag.matmul(latents, ag.transpose(Wz)), first.b)
        h = ag.add(ag.matmul(Tensor(x_enc), ag.transpose(Wx)), ag.take(zterm, index))
        h = ag.relu(h)
        for layer in self.trunk[1:]:
            h = ag.relu(layer(h))
        sigma = ag.softplus(ag.reshape(self.sigma_head(h), (h.shape[0],)))
        feat = self.feature(h)
        if self.config.use_viewdirs:
            feat = ag.concat([feat, Tensor(d_enc)])
        rgb = ag.sigmoid(self.color_out(ag.relu(self.color_hidden(feat))))
        return rgb, sigma


def field_query(field: RadianceField, x, d, z) -> tuple[Tensor, Tensor]:
    """Evaluate one level at a single point; returns ``(rgb (3,), sigma ())``."""
    cfg = field.config
    x_enc = positional_encode(np.asarray(x, dtype=np.float64).reshape(1, 3), cfg.pos_freqs)
    d_enc = positional_encode(np.asarray(d, dtype=np.float64).reshape(1, 3), cfg.dir_freqs)
    rgb, sigma = field(x_enc, d_enc, z, np.zeros(1, dtype=np.intp))
    return ag.reshape(rgb, (3,)), ag.reshape(sigma, ())


# ---------------------------------------------------------------- compositing


@dataclass
class RenderOutput:
    rgb: Tensor  # (R, 3)
    weights: Tensor  # (R, S)
    transmittance: np.ndarray  # (R, S)
    opacity: np.ndarray  # (R,)
    depths: np.ndarray  # (R, S)


def volume_render(depths: np.ndarray, sigma, rgb, far: float, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Alpha-composite ``(R, S)`` densities and ``(R, S, 3)`` colors along each ray."""
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim == 1:
        depths = depths[None]
    if np.any(np.diff(depths, axis=-1) < 0):
        raise RenderError("volume_render: depths must be ascending along each ray")
    sigma, rgb = ag._as_tensor(sigma), ag._as_tensor(rgb)
    R, S = depths.shape
    if sigma.shape != (R, S) or rgb.shape != (R, S, 3):
        raise ag.ShapeError(f"volume_render: sigma {sigma.shape} / rgb {rgb.shape} do not match depths {depths.shape}")
    delta = np.concatenate([np.diff(depths, axis=-1), far - depths[:, -1:]], axis=-1)
    delta = np.maximum(delta, 0.0)
    sd = ag.mul(sigma, delta)
    trans = ag.exp(ag.scale(ag.cumsum(sd, exclusive=True), -1.0))
    alpha = ag.sub(1.0, ag.exp(ag.scale(sd, -1.0)))
    w = ag.mul(trans, alpha)
    color = ag.sum(ag.mul(ag.expand_last(w, 3), rgb), axis=1)
    t_final = ag.exp(ag.scale(ag.sum(sd, axis=1), -1.0))
    bg = np.asarray(background, dtype=np.float64)
    if np.any(bg != 0):
        color = ag.add(color, ag.mul(ag.expand_last(t_final, 3), bg))
    # closed form of sum(w); a summed telescoping series can overshoot 1 by an ulp
    opacity = -np.expm1(-sd.data.sum(axis=1))
    return RenderOutput(color, w, trans.data, opacity, depths)


def nerf_loss(renders, target) -> Tensor:
    """Sum over levels of the mean squared RGB error over the ray batch."""
    target = np.asarray(target, dtype=np.float64)
    total = None
    for r in renders:
        rgb = r.rgb if isinstance(r, RenderOutput) else ag._as_tensor(r)
        if rgb.shape != target.shape:
            raise ag.ShapeError(f"nerf_loss: render {rgb.shape} vs target {target.shape}")
        term = ag.mean(ag.square(ag.sub(rgb, target)))
        total = term if total is None else ag.add(total, term)
    return total


# ---------------------------------------------------------------- two-level renderer


@dataclass
class RenderConfig:
    n_coarse: int = 32
    n_fine: int = 32
    background: tuple = (0.0, 0.0, 0.0)
    ray_batch: int = 512
    chunk: int = 2048

    def __post_init__(self):
        if self.n_coarse < 2 or self.n_fine < 0:
            raise ValueError("RenderConfig: need n_coarse >= 2 and n_fine >= 0")


class NerfModel(Module):
    """Coarse and fine radiance fields sharing the latent input."""

    def __init__(self, config: FieldConfig, rng: np.random.Generator, fine: bool = True):
        self.config = config
        self.coarse = RadianceField(config, rng)
        self.fine = RadianceField(config, rng) if fine else None

    def lipschitz_layers(self) -> list:
        out = self.coarse.lipschitz_layers()
        if self.fine is not None:
            out += self.fine.lipschitz_layers()
        return out

    def levels(self) -> list:
        return [self.coarse] if self.fine is None else [self.coarse, self.fine]


def _eval_level(field: RadianceField, rays: Rays, depths: np.ndarray, latents: Tensor,
                ray_index: np.ndarray, background) -> RenderOutput:
    R, S = depths.shape
    pts = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    x_enc = positional_encode(pts.reshape(-1, 3), field.config.pos_freqs)
    d_enc = None
    if field.config.use_viewdirs:
        d_enc = np.repeat(positional_encode(rays.directions, field.config.dir_freqs), S, axis=0)
    rgb, sigma = field(x_enc, d_enc, latents, np.repeat(ray_index, S))
    return volume_render(depths, ag.reshape(sigma, (R, S)), ag.reshape(rgb, (R, S, 3)), rays.far, background)


def render_rays(model: NerfModel, rays: Rays, latents, ray_index=None, config: RenderConfig | None = None,
                rng: np.random.Generator | None = None) -> list[RenderOutput]:
    """Hierarchical render; returns one :class:`RenderOutput` per level (coarse first)."""
    config = config or RenderConfig()
    latents = ag._as_tensor(latents)
    if ray_index is None:
        ray_index = np.zeros(len(rays), dtype=np.intp)
    coarse_d = stratified_depths(rays.near, rays.far, config.n_coarse, len(rays), rng)
    out = [_eval_level(model.coarse, rays, coarse_d, latents, ray_index, config.background)]
    if model.fine is not None and config.n_fine > 0:
        edges = bin_edges(rays.near, rays.far, config.n_coarse)
        fine_d = _importance_depths_vec(edges, out[0].weights.data, config.n_fine, rng)
        merged = np.sort(np.concatenate([coarse_d, fine_d], axis=1), axis=1)
        out.append(_eval_level(model.fine, rays, merged, latents, ray_index, config.background))
    return out


def render_image(model: NerfModel, camera: Camera, latent, config: RenderConfig | None = None,
                 threads: int = 1, return_opacity: bool = False):
    """Deterministic full-frame render (bin midpoints, evenly spaced quantiles)."""
    config = config or RenderConfig()
    pix = all_pixels(camera)
    lat = ag.Tensor(np.asarray(latent.data if isinstance(latent, Tensor) else latent, dtype=np.float64))
    chunks = [pix[i:i + config.chunk] for i in range(0, len(pix), config.chunk)]

    def work(chunk):
        with ag.no_grad():
            outs = render_rays(model, generate_rays(camera, chunk), lat, None, config, None)
        return outs[-1].rgb.data, outs[-1].opacity

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    img = np.concatenate([r[0] for r in results]).reshape(camera.height, camera.width, 3)
    if return_opacity:
        return img, np.concatenate([r[1] for r in results]).reshape(camera.height, camera.width)
    return img
