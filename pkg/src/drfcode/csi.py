"""LMMSE estimation of the fading amplitude and receiver-side compensation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import rayleigh_moments

JITTER = 1e-12


@dataclass(frozen=True)
class FadingPrior:
    mean: float
    var: float

    def __post_init__(self):
        if self.var < 0:
            raise ValueError("prior variance must be non-negative")

    @classmethod
    def rayleigh(cls, omega: float = 1.0) -> "FadingPrior":
        return cls(*rayleigh_moments(np.sqrt(omega / 2.0)))

    @classmethod
    def for_mode(cls, fading: str, omega: float = 1.0) -> "FadingPrior":
        return cls(1.0, 0.0) if fading == "awgn" else cls.rayleigh(omega)


def lmmse_fast(z, x_prev, prior: FadingPrior, sigma_n2: float, sigma_m2: float):
    """Per-symbol LMMSE gain estimate from one feedback observation z = a*x + noise."""
    z = np.asarray(z, dtype=float)
    x = np.asarray(x_prev, dtype=float)
    s = sigma_n2 + sigma_m2
    num = x * prior.var * z + s * prior.mean
    den = x * x * prior.var + s
    safe = np.where(den == 0, 1.0, den)
    return np.where(den == 0, prior.mean, num / safe)


def lmmse_slow(z, x, prior: FadingPrior, sigma_n2: float, sigma_m2: float):
    """LMMSE estimate of a gain held fixed over all observations ``z_j = a*x_j + w_j``.

    ``z`` and ``x`` hold the paired observations along the last axis
    (any leading batch axes).  The covariance ``var*x x^T + s*I`` is rank-one
    plus identity, so its inverse is applied through the Sherman-Morrison
    identity.  With no observations the prior mean is returned.
    """
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    if z.shape != x.shape:
        raise ValueError(f"observation shapes differ: {z.shape} vs {x.shape}")
    s = sigma_n2 + sigma_m2
    if z.shape[-1] == 0:
        return np.full(z.shape[:-1], prior.mean) if z.ndim > 1 else prior.mean
    xz = np.sum(x * z, axis=-1)
    xx = np.sum(x * x, axis=-1)
    den = prior.var * xx + s
    safe = np.where(den == 0, 1.0, den)
    return np.where(den == 0, prior.mean, (prior.var * xz + s * prior.mean) / safe)


def lmmse_slow_direct(z, x, prior: FadingPrior, sigma_n2: float, sigma_m2: float) -> float:
    """Same estimate through an explicit matrix inverse (single instance).

    A ``1e-12`` diagonal jitter keeps the noiseless multi-observation case
    invertible.
    """
    z = np.asarray(z, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n == 0:
        return float(prior.mean)
    s = sigma_n2 + sigma_m2
    C = prior.var * np.outer(x, x) + (s + (JITTER if s == 0 else 0.0)) * np.eye(n)
    g = prior.var * x @ np.linalg.inv(C)
    return float(g @ z + prior.mean * (1.0 - g @ x))


def causal_estimates(x, zhat, prior: FadingPrior, sigma_n2: float, sigma_m2: float,
                     slow: bool) -> np.ndarray:
    """Estimate per channel use from feedback seen so far (time on the last axis).

    ``zhat[..., t]`` is the fed-back observation of ``x[..., t]``.  Fast
    fading estimates each use on its own; slow fading pools every
    observation up to and including ``t``.
    """
    x = np.asarray(x, dtype=float)
    zhat = np.asarray(zhat, dtype=float)
    if not slow:
        return lmmse_fast(zhat, x, prior, sigma_n2, sigma_m2)
    s = sigma_n2 + sigma_m2
    xz = np.cumsum(x * zhat, axis=-1)
    xx = np.cumsum(x * x, axis=-1)
    den = prior.var * xx + s
    safe = np.where(den == 0, 1.0, den)
    return np.where(den == 0, prior.mean, (prior.var * xz + s * prior.mean) / safe)


def receiver_compensate(y, alpha, sigma_n2: float):
    """LMMSE equalisation of received symbols: alpha*y / (alpha^2 + sigma_n^2)."""
    alpha = np.asarray(alpha, dtype=float)
    den = alpha * alpha + sigma_n2
    scale = np.where(den == 0, 0.0, alpha / np.where(den == 0, 1.0, den))
    if isinstance(y, Tensor):
        return ad.mul(y, scale)
    return scale * np.asarray(y, dtype=float)
