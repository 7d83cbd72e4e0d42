"""CT-specific primitives: filtered backprojection and reparameterised noise."""

from __future__ import annotations

import numpy as np

from .. import physics
from ..errors import ParameterError
from ..projector import Geometry, fbp, fbp_adjoint
from .tensor import as_tensor, make_output


def fbp_op(sino, geom: Geometry):
    """FBP as a single linear node; its adjoint is ``scale * ramp(forward_project(.))``."""
    sino = as_tensor(sino)
    if sino.shape[-2:] != geom.sino_shape:
        raise ParameterError(f"fbp_op: sinogram shape {sino.shape} does not match geometry {geom.sino_shape}")
    value = fbp(sino.data, geom)
    return make_output(value, (sino,), lambda g: (fbp_adjoint(g, geom).astype(sino.dtype),))


def noise_op(d, p_bar, eta, params=physics.NoiseModelParams()):
    """Noisy sinograms ``p_bar + sigma(exp(d)) * eta`` for a batch of log-fluxes.

    ``d`` has shape ``(N,)`` and ``p_bar``/``eta`` shape ``(N, views, bins)``.
    Only ``d`` is differentiated; the draw ``eta`` is held fixed.
    """
    d = as_tensor(d)
    p_bar = np.asarray(p_bar)
    eta = np.asarray(eta)
    if d.data.ndim != 1 or p_bar.shape[0] != d.shape[0] or p_bar.shape != eta.shape:
        raise ParameterError(f"noise_op: shapes d{d.shape}, p_bar{p_bar.shape}, eta{eta.shape} disagree")
    d64 = d.data.astype(np.float64)[:, None, None]
    n0 = np.exp(d64)
    sigma = np.sqrt(physics.projection_variance(p_bar, n0, params))
    value = (p_bar.astype(np.float64) + sigma * eta).astype(np.result_type(p_bar.dtype, d.dtype))
    dsigma_dd = physics.d_sigma_d_logflux(p_bar, d64, params)

    def adjoint(g):
        gd = np.sum(g.astype(np.float64) * eta * dsigma_dd, axis=(1, 2))
        return (gd.astype(d.dtype),)

    return make_output(value, (d,), adjoint)
