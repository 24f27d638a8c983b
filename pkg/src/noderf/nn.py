"""Neural building blocks on top of :mod:`noderf.autograd`.

Layers keep weights as ``[out, in]`` matrices and compute ``x @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ACTIVATIONS = {
    "relu": ag.relu,
    "tanh": ag.tanh,
    "sigmoid": ag.sigmoid,
    "softplus": ag.softplus,
    "none": lambda x: x,
}


def positional_encode(x, n_freqs: int):
    """Map ``(..., dim)`` coordinates to ``(..., 2 * n_freqs * dim)`` sin/cos features.

    For each coordinate and each ``k < n_freqs`` the pair
    ``(sin(2**k * pi * x), cos(2**k * pi * x))`` is emitted, coordinate-major.
    Accepts numpy arrays (returns an array) or Tensors (returns a tracked Tensor).
    """
    if n_freqs < 0:
        raise ValueError("positional_encode: n_freqs must be >= 0")
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    if isinstance(x, Tensor):
        dim = x.shape[-1]
        parts = []
        for d in range(dim):
            xd = ag.slice_last(x, d, d + 1)
            scaled = ag.mul(ag.expand_last(ag.reshape(xd, xd.shape[:-1]), n_freqs), freqs)
            s, c = ag.sin(scaled), ag.cos(scaled)
            # interleave (sin_k, cos_k)
            for k in range(n_freqs):
                parts.append(ag.slice_last(s, k, k + 1))
                parts.append(ag.slice_last(c, k, k + 1))
        if not parts:
            return Tensor(np.zeros(x.shape[:-1] + (0,)))
        return ag.concat(parts)
    x = np.asarray(x, dtype=np.float64)
    scaled = x[..., :, None] * freqs  # (..., dim, L)
    out = np.stack([np.sin(scaled), np.cos(scaled)], axis=-1)  # (..., dim, L, 2)
    return out.reshape(x.shape[:-1] + (2 * n_freqs * x.shape[-1],))


def inverse_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


class Module:
    """Minimal parameter container: subclasses list their tensors and children."""

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for value in vars(self).values():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append(item)
        return out

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out


def uniform_fan_in(rng: np.random.Generator, out_dim: int, in_dim: int) -> tuple[np.ndarray, np.ndarray]:
    if out_dim <= 0 or in_dim <= 0:
        raise ValueError(f"layer widths must be positive, got out={out_dim}, in={in_dim}")
    bound = 1.0 / np.sqrt(in_dim)
    W = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = rng.uniform(-bound, bound, size=out_dim)
    return W, b


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        W, b = uniform_fan_in(rng, out_dim, in_dim)
        self.W = ag.parameter(W, "W")
        self.b = ag.parameter(b, "b")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def weight(self) -> Tensor:
        return self.W

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ag.ShapeError(f"Linear: expected input width {self.in_dim}, got shape {x.shape}")
        return ag.add(ag.matmul(x, ag.transpose(self.weight())), self.b)


def lipschitz_normalize(W, c) -> Tensor:
    """Scale each row of ``W`` by ``min(1, softplus(c) / ||row||_1)``.

    The resulting matrix has infinity-norm operator bound at most
    ``softplus(c)``.  All-zero rows pass through unchanged.
    """
    W = ag._as_tensor(W)
    c = ag._as_tensor(c)
    row_l1 = ag.sum(ag.abs(W), axis=-1)
    # zero rows: keep the ratio finite; min(.,1) then selects 1 with zero gradient
    safe = ag.add(row_l1, Tensor(np.where(row_l1.data > 0, 0.0, 1.0)))
    ratio = ag.div(ag.softplus(c), safe)
    factor = ag.minimum(ratio, 1.0)
    return ag.mul(W, ag.expand_last(factor, W.shape[1]))


class LipschitzLinear(Linear):
    """Linear layer whose effective weight is Lipschitz-normalized by a trainable bound."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, headroom: float = 1.0):
        super().__init__(in_dim, out_dim, rng)
        if headroom <= 0:
            raise ValueError("LipschitzLinear: headroom must be positive")
        # bound starts at headroom x the largest initial row norm (1.0: tight from the start)
        bound = headroom * float(np.abs(self.W.data).sum(axis=1).max())
        self.c = ag.parameter(np.asarray(inverse_softplus(bound)), "c")

    def weight(self) -> Tensor:
        return lipschitz_normalize(self.W, self.c)

    def bound(self) -> float:
        return float(ag.softplus_np(self.c.data))


def lipschitz_loss(layers: Sequence[LipschitzLinear]) -> Tensor:
    """Product of ``softplus(c_i)`` over the given layers."""
    layers = list(layers)
    if not layers:
        raise ValueError("lipschitz_loss: need at least one layer")
    out = ag.softplus(layers[0].c)
    for layer in layers[1:]:
        out = ag.mul(out, ag.softplus(layer.c))
    return out


@dataclass
class MlpConfig:
    """Layer widths ``[in, h1, ..., out]`` and one activation per linear layer."""

    widths: list[int]
    activations: list[str] | None = None
    lipschitz: bool = False
    hidden_activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpConfig: need at least an input and an output width")
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"MlpConfig: widths must be positive, got {self.widths}")
        n = len(self.widths) - 1
        if self.activations is None:
            self.activations = [self.hidden_activation] * (n - 1) + [self.output_activation]
        if len(self.activations) != n:
            raise ValueError("MlpConfig: one activation per layer required")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"MlpConfig: unknown activation {a!r}")


class MLP(Module):
    def __init__(self, config: MlpConfig, rng: np.random.Generator):
        self.config = config
        cls = LipschitzLinear if config.lipschitz else Linear
        w = config.widths
        self.layers = [cls(w[i], w[i + 1], rng) for i in range(len(w) - 1)]

    @property
    def in_dim(self) -> int:
        return self.config.widths[0]

    @property
    def out_dim(self) -> int:
        return self.config.widths[-1]

    def lipschitz_layers(self) -> list[LipschitzLinear]:
        return [l for l in self.layers if isinstance(l, LipschitzLinear)]

    def __call__(self, x: Tensor) -> Tensor:
        x = ag._as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ag.ShapeError(f"MLP: expected input width {self.in_dim}, got shape {x.shape}")
        for layer, act in zip(self.layers, self.config.activations):
            x = ACTIVATIONS[act](layer(x))
        return x


def mlp_forward(mlp: MLP, x) -> Tensor:
    return mlp(x)


def make_mlp(in_dim: int, hidden: int, depth: int, out_dim: int, rng: np.random.Generator, *,
             activation: str = "relu", output_activation: str = "none", lipschitz: bool = False) -> MLP:
    """``depth`` linear layers: ``in -> hidden -> ... -> out``."""
    if depth < 1:
        raise ValueError("make_mlp: depth must be >= 1")
    widths = [in_dim] + [hidden] * (depth - 1) + [out_dim]
    cfg = MlpConfig(widths, hidden_activation=activation, output_activation=output_activation, lipschitz=lipschitz)
    return MLP(cfg, rng)


class GRUCell(Module):
    """GRU update ``h' = (1 - u) * n + u * h`` with reset gate ``r`` and candidate ``n``.

    Gate weights are stacked as ``[r; u; n]`` row blocks.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        Wx, bx = uniform_fan_in(rng, 3 * hidden_dim, input_dim)
        Wh, bh = uniform_fan_in(rng, 3 * hidden_dim, hidden_dim)
        self.W_x = ag.parameter(Wx, "W_x")
        self.W_h = ag.parameter(Wh, "W_h")
        self.b_x = ag.parameter(bx, "b_x")
        self.b_h = ag.parameter(bh, "b_h")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim

    def __call__(self, h, x) -> Tensor:
        h, x = ag._as_tensor(h), ag._as_tensor(x)
        H = self.hidden_dim
        if h.shape[-1] != H or x.shape[-1] != self.input_dim or h.shape[:-1] != x.shape[:-1]:
            raise ag.ShapeError(
                f"GRUCell: hidden {h.shape} / input {x.shape} do not match cell ({H}, {self.input_dim})")
        gx = ag.add(ag.matmul(x, ag.transpose(self.W_x)), self.b_x)
        gh = ag.add(ag.matmul(h, ag.transpose(self.W_h)), self.b_h)
        r = ag.sigmoid(ag.add(ag.slice_last(gx, 0, H), ag.slice_last(gh, 0, H)))
        u = ag.sigmoid(ag.add(ag.slice_last(gx, H, 2 * H), ag.slice_last(gh, H, 2 * H)))
        n = ag.tanh(ag.add(ag.slice_last(gx, 2 * H, 3 * H), ag.mul(r, ag.slice_last(gh, 2 * H, 3 * H))))
        return ag.add(ag.mul(ag.sub(1.0, u), n), ag.mul(u, h))


def gru_step(cell: GRUCell, h, x) -> Tensor:
    return cell(h, x)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors (updated in place)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}
        self.counts = {id(p): 0 for p in self.params}
        self.step_count = 0

    def step(self, grads: Mapping[Tensor, Tensor], only: Iterable[Tensor] | None = None) -> None:
        """Apply one update.  ``only`` restricts the update to a subset (frozen training)."""
        active = self.params if only is None else list(only)
        for p in active:
            g = grads.get(p)
            if g is None:
                continue
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            if g.shape != p.shape:
                raise ag.ShapeError(f"Adam: gradient shape {g.shape} != parameter shape {p.shape}")
            k = id(p)
            if k not in self.m:
                raise KeyError(f"Adam: parameter {p!r} is not managed by this optimizer")
            self.counts[k] += 1
            t = self.counts[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.step_count += 1

    def state_arrays(self, names: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        out = {}
        for name, p in names.items():
            k = id(p)
            out[f"adam.m.{name}"] = self.m[k]
            out[f"adam.v.{name}"] = self.v[k]
            out[f"adam.t.{name}"] = np.asarray(float(self.counts[k]))
        return out

    def load_state_arrays(self, names: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
        for name, p in names.items():
            k = id(p)
            if f"adam.m.{name}" in arrays:
                self.m[k][...] = arrays[f"adam.m.{name}"]
                self.v[k][...] = arrays[f"adam.v.{name}"]
                self.counts[k] = int(arrays[f"adam.t.{name}"])


def adam_step(state: Adam, grads: Mapping[Tensor, Tensor]) -> None:
    state.step(grads)


def init_latent(rng: np.random.Generator, dim: int, std: float = 0.1, name: str | None = None) -> Tensor:
    if dim <= 0:
        raise ValueError("latent dimension must be positive")
    return ag.parameter(rng.normal(0.0, std, size=dim), name)


def init_params(spec: Mapping[str, tuple], seed: int, latent_std: float = 0.1) -> dict[str, Tensor]:
    """Build named parameters deterministically from ``seed``.

    ``spec`` maps a name to ``("latent", dim)`` or ``("linear", in_dim, out_dim)``.
    Linear entries produce ``name.W`` and ``name.b`` with fan-in uniform init;
    latents are drawn from N(0, latent_std**2).
    """
    rng = np.random.default_rng(seed)
    out: dict[str, Tensor] = {}
    for name, entry in spec.items():
        kind = entry[0]
        if kind == "latent":
            out[name] = init_latent(rng, int(entry[1]), latent_std, name)
        elif kind == "linear":
            W, b = uniform_fan_in(rng, int(entry[2]), int(entry[1]))
            out[f"{name}.W"] = ag.parameter(W, f"{name}.W")
            out[f"{name}.b"] = ag.parameter(b, f"{name}.b")
        else:
            raise ValueError(f"init_params: unknown entry kind {kind!r} for {name!r}")
    return out
