"""Dose module, reconstruction module and the PSNR quality metric.

The dose module maps the prior patient image to a log-flux ``d`` (so
``n0 = exp(d)``).  The reconstruction module is FBP followed by a small
residual convolutional denoiser.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff.ct_ops import fbp_op
from .errors import DivergenceError, ParameterError
from .projector import Geometry, forward_project

INF_PSNR = math.inf


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass(frozen=True)
class DoseNetConfig:
    channels: int = 8
    hidden: int = 16
    input_downsample: int = 2  # number of 2x poolings before the first conv
    input_scale: float = 4.0
    n0_init: float = 1e5
    fixed_features: bool = True
    seed: int = 0


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 16
    layers: int = 3
    kernel: int = 3
    seed: int = 1


N_PRIOR_FEATURES = 4


def sinogram_features(p_bar):
    """Fixed attenuation summaries of prior sinograms ``(N, views, bins) -> (N, 3)``.

    Columns: log of mean transmission loss ``log mean exp(p_bar)``, the
    maximum and the mean line integral.
    """
    p = np.asarray(p_bar, dtype=np.float64).reshape(len(p_bar), -1)
    top = p.max(axis=1)
    lme = top + np.log(np.mean(np.exp(p - top[:, None]), axis=1))
    return np.stack([lme, top, p.mean(axis=1)], axis=1)


def prior_features(prior, p_bar):
    """:func:`sinogram_features` plus the log edge energy of the prior image -> ``(N, 4)``.

    Edge energy is ``log sum |grad x|^2``; it tracks how much structure the
    denoiser has to preserve.
    """
    img = np.asarray(prior, dtype=np.float64)
    gy, gx = np.gradient(img, axis=(-2, -1))
    energy = np.log(np.sum(gx**2 + gy**2, axis=(-2, -1)) + 1e-12).reshape(-1, 1)
    return np.concatenate([sinogram_features(p_bar), energy], axis=1)


class DoseModule:
    """Prior image -> log-flux.

    A small conv/pool stack summarises the image; when
    ``config.fixed_features`` is set, the fixed summaries of
    :func:`prior_features` (attenuation statistics a scout scan provides,
    plus edge energy) are appended before the dense layers and routed
    straight to the head.
    """

    def __init__(self, config: DoseNetConfig = DoseNetConfig(), geom: Geometry | None = None):
        self.config = config
        self.geom = geom or Geometry()
        rng = np.random.default_rng(config.seed)
        c, h = config.channels, config.hidden
        extra = N_PRIOR_FEATURES if config.fixed_features else 0
        p = ad.NetworkParams()
        p.add("conv1.w", _he(rng, (c, 1, 3, 3), 9))
        p.add("conv1.b", np.zeros(c))
        p.add("conv2.w", _he(rng, (c, c, 3, 3), 9 * c))
        p.add("conv2.b", np.zeros(c))
        p.add("conv3.w", _he(rng, (c, c, 3, 3), 9 * c))
        p.add("conv3.b", np.zeros(c))
        p.add("fc1.w", _he(rng, (c + extra, h), c + extra))
        p.add("fc1.b", np.zeros(h))
        # zero head: every input starts at d = ln(n0_init)
        p.add("head.w", np.zeros((h + extra, 1)))
        p.add("head.b", np.full(1, math.log(config.n0_init)))
        self.params = p
        # non-trainable standardisation of the fixed features
        self.feature_mean = np.zeros(N_PRIOR_FEATURES, dtype=np.float32)
        self.feature_std = np.ones(N_PRIOR_FEATURES, dtype=np.float32)

    def fit_feature_scaling(self, priors, prior_sinos=None):
        """Set the feature standardisation from a set of prior images."""
        priors = np.asarray(priors, dtype=np.float32)
        if prior_sinos is None:
            prior_sinos = forward_project(priors, self.geom)
        f = prior_features(priors, prior_sinos)
        self.feature_mean = f.mean(axis=0).astype(np.float32)
        self.feature_std = np.maximum(f.std(axis=0), 1e-6).astype(np.float32)

    def __call__(self, prior):
        return predict_log_dose(self, prior)


class ReconModule:
    def __init__(self, geom: Geometry, config: DenoiserConfig = DenoiserConfig()):
        if config.layers < 2:
            raise ParameterError("denoiser needs at least 2 conv layers")
        self.geom = geom
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, k = config.channels, config.kernel
        p = ad.NetworkParams()
        cin = 1
        for i in range(config.layers - 1):
            p.add(f"conv{i}.w", _he(rng, (c, cin, k, k), cin * k * k))
            p.add(f"conv{i}.b", np.zeros(c))
            cin = c
        # zeroed residual branch: the untrained module is plain FBP
        p.add("out.w", np.zeros((1, c, k, k)))
        p.add("out.b", np.zeros(1))
        self.params = p

    def __call__(self, noisy):
        return reconstruct(self, noisy)


def predict_log_dose(dose: DoseModule, prior, prior_sino=None):
    """Log-flux for each prior image; ``prior`` is ``(H, W)`` or ``(N, H, W)``.

    ``prior_sino`` may pass precomputed projections of ``prior``.
    Returns a tensor of shape ``(N,)`` (``N = 1`` for a single image).
    """
    prior = np.asarray(prior, dtype=np.float32)
    if prior.ndim == 2:
        prior = prior[None]
    if prior.ndim != 3:
        raise ParameterError(f"prior must be (H, W) or (N, H, W), got {prior.shape}")
    p = dose.params
    x = ad.Tensor(prior[:, None] * np.float32(dose.config.input_scale))
    for _ in range(dose.config.input_downsample):
        x = ad.downsample2x(x)
    x = ad.leaky_relu(ad.conv2d(x, p["conv1.w"], p["conv1.b"]))
    x = ad.downsample2x(x)
    x = ad.leaky_relu(ad.conv2d(x, p["conv2.w"], p["conv2.b"]))
    x = ad.downsample2x(x)
    x = ad.leaky_relu(ad.conv2d(x, p["conv3.w"], p["conv3.b"]))
    x = ad.global_mean_pool(x)
    if dose.config.fixed_features:
        if prior_sino is None:
            prior_sino = forward_project(prior, dose.geom)
        raw = prior_features(prior, prior_sino)
        feats = ad.Tensor(((raw - dose.feature_mean) / dose.feature_std).astype(np.float32))
        x = ad.leaky_relu(ad.dense(ad.concat([x, feats]), p["fc1.w"], p["fc1.b"]))
        x = ad.concat([x, feats])
    else:
        x = ad.leaky_relu(ad.dense(x, p["fc1.w"], p["fc1.b"]))
    d = ad.reshape(ad.dense(x, p["head.w"], p["head.b"]), (prior.shape[0],))
    if not np.all(np.isfinite(d.data)):
        raise DivergenceError(f"dose module produced non-finite log-flux: {d.data}")
    return d


def denoise(recon: ReconModule, image):
    """Residual denoiser on a ``(N, H, W)`` tensor."""
    image = ad.as_tensor(image)
    n, h, w = image.shape
    p = recon.params
    x = ad.reshape(image, (n, 1, h, w))
    y = x
    for i in range(recon.config.layers - 1):
        y = ad.leaky_relu(ad.conv2d(y, p[f"conv{i}.w"], p[f"conv{i}.b"]))
    y = ad.conv2d(y, p["out.w"], p["out.b"])
    return ad.reshape(ad.add(x, y), (n, h, w))


def reconstruct(recon: ReconModule, noisy):
    """FBP plus residual denoiser; ``noisy`` is ``(views, bins)`` or ``(N, views, bins)``."""
    noisy = ad.as_tensor(noisy)
    if noisy.shape[-2:] != recon.geom.sino_shape:
        raise ParameterError(
            f"sinogram shape {noisy.shape[-2:]} does not match geometry {recon.geom.sino_shape}")
    if noisy.data.ndim == 2:
        noisy = ad.reshape(noisy, (1,) + noisy.shape)
    return denoise(recon, fbp_op(noisy, recon.geom))


def psnr(x, ref, peak=1.0, mask=None):
    """Per-image PSNR in dB, ``10 log10(peak^2 / mse)``, as a taped tensor.

    The last two axes are image axes.  Identical images give ``+inf`` and
    contribute no gradient.  ``mask`` restricts the mean to selected pixels.
    """
    if peak <= 0:
        raise ParameterError(f"peak must be > 0, got {peak}")
    x = ad.as_tensor(x)
    ref = np.asarray(ref)
    if x.shape[-2:] != ref.shape[-2:]:
        raise ParameterError(f"psnr: image shape {x.shape} does not match reference {ref.shape}")
    if mask is None:
        weight = np.ones(x.shape[-2:])
    else:
        weight = np.asarray(mask, dtype=np.float64)
    count = np.sum(weight, axis=(-2, -1), keepdims=True)
    diff = x.data.astype(np.float64) - ref.astype(np.float64)
    mse = np.sum(weight * diff**2, axis=(-2, -1), keepdims=True) / count
    with np.errstate(divide="ignore"):
        value = 10.0 * np.log10(peak**2 / mse)
    value = value[..., 0, 0]
    finite = mse > 0

    def adjoint(g):
        g = np.asarray(g, dtype=np.float64)[..., None, None]
        safe = np.where(finite, mse, 1.0)
        gx = np.where(finite, -10.0 / math.log(10.0) * g * 2.0 * weight * diff / (count * safe), 0.0)
        return (gx.astype(x.dtype),)

    return ad.make_output(value.astype(np.float64), (x,), adjoint)


def psnr_value(x, ref, peak=1.0, mask=None):
    """Plain-float PSNR helper (no tape)."""
    out = psnr(np.asarray(x), ref, peak, mask).data
    return float(out) if out.ndim == 0 else out


# --- persistence -------------------------------------------------------------

def _meta(prefix, config):
    return {f"{prefix}.{k}": v for k, v in asdict(config).items()}


def _config_from_meta(cls, prefix, meta):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in meta:
            kind = type(getattr(cls(), f.name))
            raw = meta[key]
            kwargs[f.name] = (raw == "True") if kind is bool else kind(raw)
    return cls(**kwargs)


def save_modules(path, dose: DoseModule | None, recon: ReconModule, extra_meta=None):
    """Write dose and reconstruction parameters (with Adam state) into one checkpoint."""
    arrays, meta = {}, dict(extra_meta or {})
    if dose is not None:
        for k, v in dose.params.state().items():
            arrays[f"dose/{k}"] = v
        arrays["dosebuf/feature_mean"] = dose.feature_mean
        arrays["dosebuf/feature_std"] = dose.feature_std
        meta.update(_meta("dose", dose.config))
        for k, v in asdict(dose.geom).items():
            meta[f"dosegeom.{k}"] = v
        meta["dose.step"] = dose.params.step
    for k, v in recon.params.state().items():
        arrays[f"recon/{k}"] = v
    meta.update(_meta("recon", recon.config))
    meta["recon.step"] = recon.params.step
    for k, v in asdict(recon.geom).items():
        meta[f"geom.{k}"] = v
    return ad.save_checkpoint(path, arrays, meta)


def load_modules(path):
    """Inverse of :func:`save_modules`; returns ``(dose or None, recon, meta)``."""
    arrays, meta = ad.load_checkpoint(path)
    geom = _config_from_meta(Geometry, "geom", meta)
    recon = ReconModule(geom, _config_from_meta(DenoiserConfig, "recon", meta))
    recon.params.load_state({k[6:]: v for k, v in arrays.items() if k.startswith("recon/")},
                            int(meta.get("recon.step", 0)))
    dose = None
    if any(k.startswith("dose/") for k in arrays):
        dose = DoseModule(_config_from_meta(DoseNetConfig, "dose", meta),
                          _config_from_meta(Geometry, "dosegeom", meta))
        dose.params.load_state({k[5:]: v for k, v in arrays.items() if k.startswith("dose/")},
                               int(meta.get("dose.step", 0)))
        if "dosebuf/feature_mean" in arrays:
            dose.feature_mean = arrays["dosebuf/feature_mean"].copy()
            dose.feature_std = arrays["dosebuf/feature_std"].copy()
    return dose, recon, meta
