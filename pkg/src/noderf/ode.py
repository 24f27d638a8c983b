"""Differentiable initial-value solvers: fixed-step Euler and adaptive Dormand-Prince.

Both integrators are unrolled on the autodiff tape, so gradients are exact
derivatives of the discrete scheme (discretize-then-optimize).  The dopri5
step-size controller runs on plain arrays; the accepted step sequence is
treated as a constant during backward.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import MLP, MlpConfig, Module


class SolverError(RuntimeError):
    """Integration failed: step budget exhausted or invalid time grid."""


@dataclass
class SolverConfig:
    kind: str = "euler"
    step: float = 0.05
    atol: float = 1e-3
    rtol: float = 1e-4
    max_steps: int = 10_000

    def __post_init__(self):
        if self.kind not in ("euler", "dopri5"):
            raise ValueError(f"SolverConfig: unknown solver kind {self.kind!r}")
        if self.step <= 0 or self.atol <= 0 or self.rtol <= 0:
            raise ValueError("SolverConfig: step, atol and rtol must be positive")
        if self.max_steps < 1:
            raise ValueError("SolverConfig: max_steps must be >= 1")


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    n_steps: int = 0
    error_ratios: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i):
        return self.states[i]


class OdeFunc(Module):
    """Learned vector field ``dh/dt = f(h, t)``; time enters as an extra input column."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, depth: int = 3,
                 activation: str = "tanh", time_input: bool = True):
        self.dim = dim
        self.time_input = time_input
        widths = [dim + (1 if time_input else 0)] + [hidden] * (depth - 1) + [dim]
        self.net = MLP(MlpConfig(widths, hidden_activation=activation, output_activation="none"), rng)

    def __call__(self, h, t: float) -> Tensor:
        h = ag._as_tensor(h)
        if h.shape[-1] != self.dim:
            raise ag.ShapeError(f"OdeFunc: state width {h.shape[-1]} != {self.dim}")
        if self.time_input:
            tcol = Tensor(np.full(h.shape[:-1] + (1,), float(t)))
            h = ag.concat([h, tcol])
        return self.net(h)


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.size == 0:
        raise SolverError("ode_solve: empty time list")
    if np.any(np.diff(times) <= 0):
        raise SolverError(f"ode_solve: times must be strictly increasing, got {times.tolist()}")
    return times


def _euler(f, h0: Tensor, times: np.ndarray, cfg: SolverConfig) -> Trajectory:
    step = cfg.step
    t0 = times[0]
    tol = 1e-9 * step
    states = [h0]
    h = h0
    t = t0
    k = 0  # index of the last grid node t0 + k*step reached
    n = 0
    for target in times[1:]:
        while t < target - tol:
            nxt = t0 + (k + 1) * step
            if nxt <= target + tol:
                # full step to the next grid node; snap onto it when aligned with target
                dt = nxt - t
                new_t = nxt
                k += 1
            else:
                dt = target - t
                new_t = target
            h = ag.add(h, ag.scale(f(h, t), dt))
            t = new_t
            n += 1
            if n > cfg.max_steps:
                raise SolverError(f"ode_solve: euler exceeded max_steps={cfg.max_steps}")
        states.append(h)
    return Trajectory(times, states, n_steps=n)


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _combine(h: Tensor, ks: Sequence[Tensor], coeffs, dt: float) -> Tensor:
    acc = None
    for kk, a in zip(ks, coeffs):
        if a == 0.0:
            continue
        term = ag.scale(kk, a * dt)
        acc = term if acc is None else ag.add(acc, term)
    return h if acc is None else ag.add(h, acc)


def _dopri5(f, h0: Tensor, times: np.ndarray, cfg: SolverConfig) -> Trajectory:
    t = times[0]
    h = h0
    states = [h0]
    span = times[-1] - times[0]
    dt = 0.01 * span if span > 0 else cfg.step
    ratios = []
    n = 0
    k1 = f(h, t)
    for target in times[1:]:
        while t < target:
            if n >= cfg.max_steps:
                raise SolverError(f"ode_solve: dopri5 exceeded max_steps={cfg.max_steps}")
            n += 1
            remaining = target - t
            landing = dt >= remaining * (1 - 1e-12)
            step = remaining if landing else dt
            ks = [k1]
            with np.errstate(over="ignore", invalid="ignore"):
                for i in range(1, 7):
                    hi = _combine(h, ks, _A[i], step)
                    ks.append(f(hi, t + _C[i] * step))
                err_vec = sum(e * kk.data for e, kk in zip(_E, ks) if e != 0.0) * step
            h_new = hi  # stage 7 input equals the 5th-order solution (FSAL)
            err = float(np.max(np.abs(err_vec))) if err_vec.size else 0.0
            scale_tol = cfg.atol + cfg.rtol * max(float(np.max(np.abs(h.data))), float(np.max(np.abs(h_new.data))))
            ratio = err / scale_tol
            if not np.isfinite(ratio):
                raise SolverError("ode_solve: non-finite error estimate (divergent dynamics)")
            if ratio <= 1.0:
                ratios.append(ratio)
                h = h_new
                k1 = ks[6]
                t = target if landing else t + step
            factor = 5.0 if ratio == 0 else min(5.0, max(0.2, 0.9 * ratio ** (-0.2)))
            if ratio <= 1.0 and landing:
                # a step clipped to land on a requested time must not shrink the next one
                dt = max(dt, step * factor)
            else:
                dt = step * factor
        states.append(h)
    return Trajectory(times, states, n_steps=n, error_ratios=ratios)


def ode_solve(f: Callable, h0, times, config: SolverConfig | None = None) -> Trajectory:
    """Integrate ``dh/dt = f(h, t)`` from ``h0`` at ``times[0]`` and return states at ``times``.

    ``h0`` may be a single state ``(D,)`` or a batch ``(B, D)``.
    """
    config = config or SolverConfig()
    times = _check_times(times)
    h0 = ag._as_tensor(h0)
    if config.kind == "euler":
        return _euler(f, h0, times, config)
    return _dopri5(f, h0, times, config)
