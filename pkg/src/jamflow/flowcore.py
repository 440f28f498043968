"""Rectified-flow interpolation, loss, timestep sampling and Euler sampling.

Convention: ``t = 0`` is data (z1) and ``t = 1`` is noise (z0), so
``z_t = (1 - t) z1 + t z0`` and the target velocity is ``z0 - z1``. Sampling
integrates from t=1 down to t=0.

A velocity field is any callable ``field(z_t, t, cond)`` returning an array
or :class:`~jamflow.autograd.Tensor` with the shape of ``z_t``; ``t`` is a
per-sample array of shape ``(B,)`` for batched latents.
"""
from __future__ import annotations

from typing import Any, Protocol

import numpy as np

from jamflow import autograd as ag

DEFAULT_STEPS = 32


class VelocityField(Protocol):
    def __call__(self, z_t: np.ndarray, t: np.ndarray, cond: Any): ...


def _check_shapes(z1, z0):
    if np.shape(z1) != np.shape(z0):
        raise ValueError(f"shape mismatch: {np.shape(z1)} vs {np.shape(z0)}")


def _time_column(t, ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def interpolate(z1: np.ndarray, z0: np.ndarray, t) -> np.ndarray:
    _check_shapes(z1, z0)
    z1 = np.asarray(z1)
    tc = _time_column(t, z1.ndim).astype(z1.dtype)
    return (1 - tc) * z1 + tc * np.asarray(z0)


def target_velocity(z1: np.ndarray, z0: np.ndarray) -> np.ndarray:
    _check_shapes(z1, z0)
    return np.asarray(z0) - np.asarray(z1)


def fm_loss(field: VelocityField, z1, z0, t, cond) -> ag.Tensor:
    """Mean squared velocity error over every entry of the batch."""
    u = ag.lift(field(interpolate(z1, z0, t), t, cond))
    return ag.square(u - target_velocity(z1, z0)).mean()


def per_sample_fm_error(field: VelocityField, z1, z0, t, cond) -> ag.Tensor:
    """Per-sample mean squared velocity error, shape (B,)."""
    u = ag.lift(field(interpolate(z1, z0, t), t, cond))
    err = ag.square(u - target_velocity(z1, z0))
    return err.mean(axis=tuple(range(1, err.ndim)))


def logistic(n):
    with np.errstate(over="ignore"):  # exp overflow just means t -> 0
        return 1.0 / (1.0 + np.exp(-np.asarray(n, dtype=np.float64)))


def sample_timestep(rng: np.random.Generator, size=None):
    """Logit-normal draw: t = logistic(n), n ~ N(0, 1); always inside (0, 1)."""
    t = logistic(rng.standard_normal(size))
    # the logistic saturates in float64 for |n| > ~37
    return np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def euler_sample(field: VelocityField, z0: np.ndarray, steps: int = DEFAULT_STEPS, cond=None) -> np.ndarray:
    """Integrate dz/dt = u from t=1 to t=0 with ``steps`` uniform Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(z0, copy=True)
    dt = 1.0 / steps
    batch = z.shape[:1] if z.ndim == 3 else ()
    with ag.no_grad():
        for i in range(steps):
            t = 1.0 - i * dt
            u = field(z, np.full(batch, t), cond)
            z = z - np.asarray(getattr(u, "data", u), dtype=z.dtype) * z.dtype.type(dt)
    return z
