"""Low-dose measurement model in the post-log domain.

A clean sinogram ``p_bar`` acquired with ``n0`` incident photons per ray
is degraded by additive Gaussian noise whose variance is

    var = exp(p_bar) / n0 * (1 + exp(p_bar) * (sigma_e_sq - 1.25) / n0)

clamped below at ``variance_floor``.  The noise draw is kept so the
sample ``p = p_bar + sqrt(var) * eta`` can be differentiated in the
log-flux ``d`` (``n0 = exp(d)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class NoiseModelParams:
    sigma_e_sq: float = 10.0
    variance_floor: float = 1e-12

    def __post_init__(self):
        if self.sigma_e_sq < 0:
            raise ParameterError(f"sigma_e_sq must be >= 0, got {self.sigma_e_sq}")
        if not self.variance_floor > 0:
            raise ParameterError(f"variance_floor must be > 0, got {self.variance_floor}")


@dataclass(frozen=True)
class DoseSetting:
    """Log-flux ``d``; the photon count is always ``exp(d) > 0``."""

    d: float

    @property
    def n0(self):
        return float(np.exp(self.d))

    @classmethod
    def from_n0(cls, n0):
        _check_n0(n0)
        return cls(float(np.log(n0)))


def _check_n0(n0):
    n0 = np.asarray(n0, dtype=np.float64)
    if not np.all(np.isfinite(n0)) or np.any(n0 <= 0):
        raise ParameterError(f"n0 must be finite and > 0, got {n0}")
    return n0


def _raw_variance(p_bar, n0, params):
    e = np.exp(np.asarray(p_bar, dtype=np.float64))
    return e / n0 * (1.0 + e * (params.sigma_e_sq - 1.25) / n0)


def projection_variance(p_bar, n0, params=NoiseModelParams()):
    """Per-bin noise variance for a scalar (or broadcastable) photon count."""
    n0 = _check_n0(n0)
    return np.maximum(_raw_variance(p_bar, n0, params), params.variance_floor)


def d_variance_d_n0(p_bar, n0, params=NoiseModelParams()):
    """Analytic derivative of :func:`projection_variance` in ``n0``; zero where clamped."""
    n0 = _check_n0(n0)
    e = np.exp(np.asarray(p_bar, dtype=np.float64))
    grad = -e / n0**2 - 2.0 * e**2 * (params.sigma_e_sq - 1.25) / n0**3
    clamped = _raw_variance(p_bar, n0, params) <= params.variance_floor
    return np.where(clamped, 0.0, grad)


def noise_draw(shape, seed):
    """Standard-normal draw fixed by ``seed``; independent of thread scheduling."""
    return np.random.default_rng(seed).standard_normal(shape)


def d_sigma_d_logflux(p_bar, d, params=NoiseModelParams()):
    """Derivative of the noise standard deviation with respect to ``d``.

    ``d sigma / d d = (d var / d n0) * n0 / (2 sigma)`` by the chain rule.
    """
    n0 = np.exp(np.asarray(d, dtype=np.float64))
    var = projection_variance(p_bar, n0, params)
    return d_variance_d_n0(p_bar, n0, params) * n0 / (2.0 * np.sqrt(var))


def inject_noise(p_bar, dose: DoseSetting, params=NoiseModelParams(), seed=0, eta=None):
    """Return ``(p_bar + sigma * eta, eta)`` for the given dose.

    ``eta`` may be supplied to reuse a draw; otherwise it is generated
    from ``seed``.
    """
    p_bar = np.asarray(p_bar)
    if not np.all(np.isfinite(p_bar)):
        raise ParameterError("p_bar contains non-finite values")
    if eta is None:
        eta = noise_draw(p_bar.shape, seed)
    sigma = np.sqrt(projection_variance(p_bar, dose.n0, params))
    noisy = p_bar.astype(np.float64) + sigma * eta
    return noisy.astype(np.result_type(p_bar.dtype, np.float32)), eta
