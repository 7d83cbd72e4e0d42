"""Synthetic patient cohorts and raw-float image ingestion.

Images are square ``float32`` arrays holding normalised attenuation in
``[0, 1]``.  A phantom is a water-like body disk with a handful of
internal ellipses painted on top of it.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import IngestionError, ParameterError

SPLITS = ("train", "validation", "test")


def check_image(image, name="image"):
    """Validate the Image invariants and return the array."""
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ParameterError(f"{name} must be a square 2-D grid, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ParameterError(f"{name} contains non-finite values")
    if np.any(image < 0):
        raise ParameterError(f"{name} contains negative values")
    return image


@dataclass(frozen=True)
class PhantomSpec:
    grid_size: int = 128
    body_radius_fraction: float = 0.8
    ellipse_count: int = 6
    intensity_range: tuple[float, float] = (0.1, 0.6)
    seed: int = 0
    body_intensity: float = 0.2
    edge_sigma: float = 0.0

    def validate(self):
        if int(self.grid_size) != self.grid_size or self.grid_size < 2:
            raise ParameterError(f"grid_size must be an integer >= 2, got {self.grid_size}")
        if not 0.0 < self.body_radius_fraction <= 1.0:
            raise ParameterError(
                f"body_radius_fraction must lie in (0, 1], got {self.body_radius_fraction}"
            )
        if int(self.ellipse_count) != self.ellipse_count or self.ellipse_count < 0:
            raise ParameterError(f"ellipse_count must be a non-negative integer, got {self.ellipse_count}")
        lo, hi = self.intensity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ParameterError(f"intensity_range must satisfy 0 <= low <= high <= 1, got {self.intensity_range}")
        if not 0.0 <= self.body_intensity <= 1.0:
            raise ParameterError(f"body_intensity must lie in [0, 1], got {self.body_intensity}")
        if self.edge_sigma < 0:
            raise ParameterError(f"edge_sigma must be >= 0, got {self.edge_sigma}")


def pixel_coordinates(n):
    """Pixel-centre coordinates in pixel units, origin at the grid centre.

    Returns ``(x, y)`` broadcastable grids; ``x`` runs along columns and
    ``y`` along rows.
    """
    c = (n - 1) / 2.0
    idx = np.arange(n, dtype=np.float64) - c
    return idx[None, :], idx[:, None]


def body_mask(grid_size, body_radius_fraction):
    x, y = pixel_coordinates(grid_size)
    radius = body_radius_fraction * grid_size / 2.0
    return x**2 + y**2 <= radius**2


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    spec.validate()
    n = int(spec.grid_size)
    rng = np.random.default_rng(spec.seed)
    x, y = pixel_coordinates(n)
    radius = spec.body_radius_fraction * n / 2.0
    inside = x**2 + y**2 <= radius**2

    image = np.zeros((n, n), dtype=np.float64)
    image[inside] = spec.body_intensity

    lo, hi = spec.intensity_range
    for _ in range(int(spec.ellipse_count)):
        # semi-axes and centre chosen so the ellipse stays inside the body
        a = rng.uniform(0.05, 0.35) * radius
        b = rng.uniform(0.05, 0.35) * radius
        room = radius - max(a, b)
        rho = room * np.sqrt(rng.uniform(0.0, 1.0))
        phi = rng.uniform(0.0, 2.0 * np.pi)
        cx, cy = rho * np.cos(phi), rho * np.sin(phi)
        theta = rng.uniform(0.0, np.pi)
        value = rng.uniform(lo, hi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (x - cx) * ct + (y - cy) * st
        v = -(x - cx) * st + (y - cy) * ct
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        image[mask & inside] = value

    if spec.edge_sigma > 0:
        # partial-volume blur; hard-edged phantoms are not band-limited
        image = gaussian_filter(image, spec.edge_sigma, mode="constant")
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def stable_split(case_id: str) -> str:
    """70/10/20 split assignment from a hash of the case id alone."""
    bucket = int.from_bytes(hashlib.sha256(case_id.encode("utf-8")).digest()[:8], "little") % 100
    if bucket < 70:
        return "train"
    if bucket < 80:
        return "validation"
    return "test"


@dataclass
class Cohort:
    cases: list[tuple[str, np.ndarray]] = field(default_factory=list)
    split: dict[str, str] = field(default_factory=dict)
    radii: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        ids = [cid for cid, _ in self.cases]
        if len(set(ids)) != len(ids):
            raise ParameterError("case ids must be unique")
        for cid in ids:
            self.split.setdefault(cid, stable_split(cid))

    def __len__(self):
        return len(self.cases)

    def ids(self, split=None):
        return [cid for cid, _ in self.cases if split is None or self.split[cid] == split]

    def subset(self, split):
        """Cases of one split, in cohort order."""
        if split not in SPLITS:
            raise ParameterError(f"unknown split {split!r}")
        return [(cid, img) for cid, img in self.cases if self.split[cid] == split]

    def image(self, case_id):
        for cid, img in self.cases:
            if cid == case_id:
                return img
        raise KeyError(case_id)


def generate_cohort(n_cases, size_range=(0.5, 0.95), grid_size=128, seed=0,
                    ellipse_count=6, intensity_range=(0.1, 0.6), body_intensity=0.2,
                    edge_sigma=1.0) -> Cohort:
    """Cohort of phantoms whose body radii are uniform over ``size_range``."""
    if int(n_cases) != n_cases or n_cases < 1:
        raise ParameterError(f"n_cases must be a positive integer, got {n_cases}")
    lo, hi = size_range
    if not (0.0 < lo <= hi <= 1.0) or lo == hi:
        raise ParameterError(f"size_range must be a non-empty interval within (0, 1], got {size_range}")

    rng = np.random.default_rng(seed)
    radii = rng.uniform(lo, hi, size=int(n_cases))
    case_seeds = rng.integers(0, 2**63 - 1, size=int(n_cases), dtype=np.int64)
    cases = []
    radius_map = {}
    for i, (r, s) in enumerate(zip(radii, case_seeds)):
        cid = f"case{i:05d}"
        spec = PhantomSpec(grid_size=grid_size, body_radius_fraction=float(r),
                           ellipse_count=ellipse_count, intensity_range=tuple(intensity_range),
                           seed=int(s), body_intensity=body_intensity,
                           edge_sigma=edge_sigma)
        cases.append((cid, generate_phantom(spec)))
        radius_map[cid] = float(r)
    return Cohort(cases=cases, radii=radius_map)


# --- raw-float manifest I/O -------------------------------------------------

def write_raw(path, array):
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def read_raw(path, width, height):
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise IngestionError(
            f"{path}: expected {width * height * 4} bytes for {width}x{height}, got {data.size * 4}"
        )
    return data.reshape(height, width).astype(np.float32)


def save_cohort(cohort: Cohort, directory, manifest_name="manifest.csv") -> Path:
    """Write every case as a raw payload plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for cid, img in cohort.cases:
        rel = f"{cid}.f32"
        write_raw(directory / rel, img)
        h, w = img.shape
        lines.append(f"{cid},{rel},{w},{h}")
    manifest = directory / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_images(manifest_path) -> Cohort:
    """Load a cohort from a ``case_id,relative_path,width,height[,scale,offset]`` manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    cases = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) not in (4, 6):
            raise IngestionError(f"line {lineno}: expected 4 or 6 fields, got {len(fields)}")
        cid, rel = fields[0], fields[1]
        try:
            width, height = int(fields[2]), int(fields[3])
            scale, offset = (float(fields[4]), float(fields[5])) if len(fields) == 6 else (1.0, 0.0)
        except ValueError as exc:
            raise IngestionError(f"entry {cid!r}: malformed numeric field ({exc})") from None
        if width != height or width < 1:
            raise IngestionError(f"entry {cid!r}: images must be square, got {width}x{height}")
        path = base / rel
        if not os.path.isfile(path):
            raise IngestionError(f"entry {cid!r}: missing file {path}")
        try:
            values = read_raw(path, width, height)
        except IngestionError as exc:
            raise IngestionError(f"entry {cid!r}: {exc}") from None
        if not np.all(np.isfinite(values)):
            raise IngestionError(f"entry {cid!r}: non-finite values in {path}")
        if (scale, offset) != (1.0, 0.0):
            values = (values.astype(np.float64) * scale + offset).astype(np.float32)
        cases.append((cid, np.clip(values, 0.0, 1.0)))
    try:
        return Cohort(cases=cases)
    except ParameterError as exc:
        raise IngestionError(str(exc)) from None


# modified Shepp-Logan (Toft): amplitude, semi-axes a, b, centre x0, y0, angle in degrees
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def shepp_logan(n=128):
    """Modified Shepp-Logan head phantom on an ``n x n`` grid, values in [0, 1]."""
    x, y = pixel_coordinates(n)
    x = x / (n / 2.0)
    y = -y / (n / 2.0)
    image = np.zeros((n, n), dtype=np.float64)
    for amp, a, b, x0, y0, deg in _SHEPP_LOGAN:
        t = np.deg2rad(deg)
        u = (x - x0) * np.cos(t) + (y - y0) * np.sin(t)
        v = -(x - x0) * np.sin(t) + (y - y0) * np.cos(t)
        image[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += amp
    return np.clip(image, 0.0, 1.0).astype(np.float32)
