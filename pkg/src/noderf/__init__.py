"""Latent-ODE-driven dynamic radiance fields at desk scale, built on a small autodiff core."""
from . import analysis, autograd, checkpoint, metrics, nn, ode, pipelines, radiance, synth
from .estimators import MultiSequenceNodeRF, SingleSequenceNodeRF

__version__ = "0.1.0"

__all__ = ["analysis", "autograd", "checkpoint", "metrics", "nn", "ode", "pipelines", "radiance", "synth",
           "SingleSequenceNodeRF", "MultiSequenceNodeRF"]
