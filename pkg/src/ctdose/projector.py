"""Parallel-beam projector, ramp filtering and filtered backprojection.

The forward projector is Joseph's method: each ray is traversed along
the image axis it is most aligned with, the image is linearly
interpolated across the other axis, and every sample is weighted by the
path length through one pixel row/column.  The operator is assembled
once per geometry as a sparse matrix, so ``backproject`` is its exact
transpose and the adjoint identity holds to rounding error.

Ray ``(v, b)`` is the line ``x cos(theta_v) + y sin(theta_v) = s_b`` with
``theta_v = v * pi / n_views`` and ``s_b = (b - (n_bins - 1) / 2) * bin_spacing``;
``x`` runs along image columns and ``y`` along rows, both in pixel units
from the grid centre.  Line integrals are scaled by ``pixel_size`` so the
sinogram carries physical attenuation lengths.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.signal import fftconvolve

from .errors import ParameterError

FILTERS = ("ram-lak", "shepp-logan")


@dataclass(frozen=True)
class Geometry:
    n_views: int = 180
    n_bins: int = 185
    bin_spacing: float = 1.0
    image_size: int = 128
    pixel_size: float = 0.1
    filter: str = "ram-lak"

    def __post_init__(self):
        if self.n_views < 1:
            raise ParameterError(f"n_views must be >= 1, got {self.n_views}")
        if self.n_bins < 1 or self.image_size < 1:
            raise ParameterError("n_bins and image_size must be positive")
        if self.bin_spacing <= 0 or self.pixel_size <= 0:
            raise ParameterError("bin_spacing and pixel_size must be positive")
        if self.n_bins * self.bin_spacing < np.sqrt(2.0) * self.image_size:
            raise ParameterError(
                f"detector span {self.n_bins * self.bin_spacing:g} does not cover the image "
                f"diagonal {np.sqrt(2.0) * self.image_size:.2f}"
            )
        if self.filter not in FILTERS:
            raise ParameterError(f"unknown filter {self.filter!r}; choose from {FILTERS}")

    @property
    def angles(self):
        return np.arange(self.n_views) * (np.pi / self.n_views)

    @property
    def offsets(self):
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2.0) * self.bin_spacing

    @property
    def sino_shape(self):
        return (self.n_views, self.n_bins)

    @property
    def image_shape(self):
        return (self.image_size, self.image_size)


def _interp_entries(t_coord, n):
    """Linear-interpolation taps for fractional index arrays ``t_coord``.

    Returns (index, weight) pairs for the lower and upper neighbours;
    taps falling outside ``[0, n)`` get zero weight and a clipped index.
    """
    lo = np.floor(t_coord)
    frac = t_coord - lo
    lo = lo.astype(np.int64)
    hi = lo + 1
    w_lo = np.where((lo >= 0) & (lo < n), 1.0 - frac, 0.0)
    w_hi = np.where((hi >= 0) & (hi < n), frac, 0.0)
    return (np.clip(lo, 0, n - 1), w_lo), (np.clip(hi, 0, n - 1), w_hi)


@lru_cache(maxsize=8)
def system_matrix(geom: Geometry) -> sp.csr_matrix:
    """Sparse Joseph projector, shape ``(n_views * n_bins, image_size ** 2)``."""
    n = geom.image_size
    c = (n - 1) / 2.0
    steps = np.arange(n, dtype=np.float64) - c
    s = geom.offsets
    rows, cols, vals = [], [], []
    for v, theta in enumerate(geom.angles):
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        ray = v * geom.n_bins + np.arange(geom.n_bins)
        if abs(sin_t) >= abs(cos_t):
            # march over columns, interpolate across rows
            y = (s[:, None] - steps[None, :] * cos_t) / sin_t
            weight = geom.pixel_size / abs(sin_t)
            col_idx = np.broadcast_to(np.arange(n), y.shape)
            for r_idx, w in _interp_entries(y + c, n):
                keep = w > 0
                rows.append(np.broadcast_to(ray[:, None], y.shape)[keep])
                cols.append((r_idx * n + col_idx)[keep])
                vals.append(w[keep] * weight)
        else:
            x = (s[:, None] - steps[None, :] * sin_t) / cos_t
            weight = geom.pixel_size / abs(cos_t)
            row_idx = np.broadcast_to(np.arange(n), x.shape)
            for c_idx, w in _interp_entries(x + c, n):
                keep = w > 0
                rows.append(np.broadcast_to(ray[:, None], x.shape)[keep])
                cols.append((row_idx * n + c_idx)[keep])
                vals.append(w[keep] * weight)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_views * geom.n_bins, n * n),
    ).tocsr()
    mat.sum_duplicates()
    return mat


@lru_cache(maxsize=8)
def _transposed(geom: Geometry) -> sp.csr_matrix:
    return system_matrix(geom).T.tocsr()


def _check_trailing(arr, shape, what):
    arr = np.asarray(arr)
    if arr.shape[-2:] != tuple(shape):
        raise ParameterError(f"{what} shape {arr.shape[-2:]} does not match geometry {tuple(shape)}")
    return arr


def _apply(mat, arr, in_shape, out_shape):
    lead = arr.shape[:-2]
    flat = arr.reshape(-1, in_shape[0] * in_shape[1])
    out = (mat @ flat.T).T
    return np.asarray(out, dtype=np.result_type(arr.dtype, np.float32)).reshape(lead + out_shape)


def forward_project(image, geom: Geometry) -> np.ndarray:
    """Line integrals of ``image`` (or a stack of images) along every ray."""
    image = _check_trailing(image, geom.image_shape, "image")
    return _apply(system_matrix(geom), image, geom.image_shape, geom.sino_shape)


def backproject(sino, geom: Geometry) -> np.ndarray:
    """Exact transpose of :func:`forward_project` (no angular weighting)."""
    sino = _check_trailing(sino, geom.sino_shape, "sinogram")
    return _apply(_transposed(geom), sino, geom.sino_shape, geom.image_shape)


def ramp_kernel(n_bins, spacing=1.0, window="ram-lak"):
    """Spatial filter taps for offsets ``-(n_bins-1) .. n_bins-1``."""
    k = np.arange(-(n_bins - 1), n_bins)
    if window == "ram-lak":
        h = np.zeros(k.shape, dtype=np.float64)
        h[k == 0] = 1.0 / (4.0 * spacing**2)
        odd = k % 2 == 1
        h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    elif window == "shepp-logan":
        h = -2.0 / (np.pi**2 * spacing**2 * (4.0 * k.astype(np.float64) ** 2 - 1.0))
    else:
        raise ParameterError(f"unknown filter {window!r}; choose from {FILTERS}")
    return h


def ramp_filter(sino, geom: Geometry) -> np.ndarray:
    """Convolve every view with the band-limited ramp kernel.

    Linear convolution with zero extension; the kernel is symmetric so the
    operator is self-adjoint.
    """
    sino = _check_trailing(sino, geom.sino_shape, "sinogram")
    h = ramp_kernel(geom.n_bins, geom.bin_spacing, geom.filter)
    shape = (1,) * (sino.ndim - 1) + (h.size,)
    full = fftconvolve(sino.astype(np.float64), h.reshape(shape), mode="full", axes=-1)
    out = full[..., geom.n_bins - 1: 2 * geom.n_bins - 1]
    return out.astype(np.result_type(sino.dtype, np.float32))


def fbp_scale(geom: Geometry) -> float:
    """Constant applied after backprojection so that fbp inverts forward_project."""
    return (np.pi / geom.n_views) * (geom.bin_spacing / geom.pixel_size) ** 2


def fbp(sino, geom: Geometry) -> np.ndarray:
    """Filtered backprojection: ``scale * backproject(ramp_filter(sino))``."""
    return (fbp_scale(geom) * backproject(ramp_filter(sino, geom), geom)).astype(
        np.result_type(np.asarray(sino).dtype, np.float32))


def fbp_adjoint(image, geom: Geometry) -> np.ndarray:
    """Adjoint of :func:`fbp`: ``scale * ramp_filter(forward_project(image))``."""
    return (fbp_scale(geom) * ramp_filter(forward_project(image, geom), geom)).astype(
        np.result_type(np.asarray(image).dtype, np.float32))
