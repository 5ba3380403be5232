"""Synthetic multi-modal glioma phantoms and a low-quality-scanner degradation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .preprocess import resize_linear
from .volume import ED, ET, MODALITIES, NCR, Case, Domain, LabelVolume, MultiModalVolume, VoxelGrid

BASE_INTENSITY = 100.0

# multipliers for (brain, ED, ET, NCR) per modality
DEFAULT_CONTRAST = {
    "T1": (1.0, 0.80, 0.90, 0.50),
    "T1ce": (1.0, 0.85, 2.00, 0.45),
    "T2": (1.0, 1.60, 1.30, 1.90),
    "FLAIR": (1.0, 2.00, 1.40, 1.10),
}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_axes: tuple[float, float, float] = (26.0, 28.0, 24.0)
    tumor_center: tuple[float, float, float] = (32.0, 36.0, 28.0)
    ncr_radius: float = 3.0
    tc_radius: float = 6.0
    ed_radius: float = 11.0
    # relative amplitude of the smooth boundary perturbation
    irregularity: float = 0.15
    contrast: dict = field(default_factory=lambda: dict(DEFAULT_CONTRAST))
    noise_sd: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.ncr_radius < self.tc_radius < self.ed_radius:
            raise DataError("tumor radii must satisfy 0 < NCR < TC < ED")
        if set(self.contrast) != set(MODALITIES):
            raise DataError(f"contrast table must cover {MODALITIES}")
        if self.noise_sd < 0:
            raise DataError("noise_sd must be non-negative")


@dataclass(frozen=True)
class DegradeSpec:
    factor: float = 2.0
    noise_sd: float = 0.08
    bias_amplitude: float = 0.25
    slab: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.factor < 1:
            raise DataError("downsample factor must be >= 1")
        if self.slab < 0 or self.noise_sd < 0 or self.bias_amplitude < 0:
            raise DataError("degradation parameters must be non-negative")


def _grid(dims):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")


def _smooth_field(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return f / (np.abs(f).max() or 1.0)


def generate_phantom(spec: PhantomSpec | None = None, case_id: str = "phantom-0000") -> Case:
    """Build a clean phantom: ellipsoidal brain with a nested NCR/ET/ED tumour."""
    spec = spec or PhantomSpec()
    rng = np.random.default_rng(spec.seed)
    zz, yy, xx = _grid(spec.dims)
    centre = [(n - 1) / 2.0 for n in spec.dims]
    brain = sum(((c - m) / a) ** 2 for c, m, a in zip((zz, yy, xx), centre, spec.brain_axes)) <= 1.0

    dist = np.sqrt(sum((c - m) ** 2 for c, m in zip((zz, yy, xx), spec.tumor_center)))
    if spec.irregularity > 0:
        dist = dist * (1.0 + spec.irregularity * _smooth_field(rng, spec.dims, 4.0))
    labels = np.zeros(spec.dims, np.uint8)
    labels[dist < spec.ed_radius] = ED
    labels[dist < spec.tc_radius] = ET
    labels[dist < spec.ncr_radius] = NCR
    if np.any(labels[~brain]):
        raise DataError("tumor extends outside the brain ellipsoid")
    if not np.all(np.isin([NCR, ET, ED], labels)):
        raise DataError("tumor too small for the grid: some sub-region is empty")

    tissue = np.zeros(spec.dims, np.intp)  # index into the contrast tuple
    tissue[labels == ED] = 1
    tissue[labels == ET] = 2
    tissue[labels == NCR] = 3
    channels = {}
    for m in MODALITIES:
        table = np.asarray(spec.contrast[m], dtype=np.float64)
        img = BASE_INTENSITY * table[tissue]
        if spec.noise_sd > 0:
            img = img + rng.standard_normal(spec.dims) * (spec.noise_sd * BASE_INTENSITY)
        img = np.where(brain, np.maximum(img, 1e-2), 0.0)
        channels[m] = VoxelGrid(img.astype(np.float32), spec.spacing)
    truth = LabelVolume(labels, spec.spacing)
    return Case(case_id, MultiModalVolume(channels), truth, Domain.PHANTOM_CLEAN)


def random_phantom_spec(seed: int, dims=(64, 64, 64), noise_sd: float = 0.05) -> PhantomSpec:
    """Draw tumour placement and size so that the tumour fits inside the brain."""
    rng = np.random.default_rng(seed)
    scale = min(dims) / 64.0
    axes = tuple(float(a) * scale for a in rng.uniform(0.36, 0.44, 3) * 64)
    ed = float(rng.uniform(8.0, 12.0)) * scale
    tc = ed * float(rng.uniform(0.45, 0.65))
    ncr = tc * float(rng.uniform(0.35, 0.6))
    centre = [(n - 1) / 2.0 for n in dims]
    # keep the perturbed ED boundary (up to ~1/(1 - irregularity) larger) inside the ellipsoid
    margin = ed / (1.0 - 0.15) + 1.5
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    room = min(a - margin for a in axes)
    offset = direction * max(0.0, room) * float(rng.uniform(0.0, 1.0))
    tumour = tuple(float(c + o) for c, o in zip(centre, offset))
    return PhantomSpec(dims=tuple(dims), brain_axes=axes, tumor_center=tumour, ncr_radius=ncr,
                       tc_radius=tc, ed_radius=ed, noise_sd=noise_sd, seed=seed)


def _bias_field(rng: np.random.Generator, dims, amplitude: float) -> np.ndarray:
    coords = _grid(dims)
    field = np.zeros(dims)
    for c, n in zip(coords, dims):
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(np.pi * c / n + phase)
    field /= len(dims)
    return 1.0 + amplitude * field


def degrade_case(case: Case, dspec: DegradeSpec | None = None, case_id: str | None = None) -> Case:
    """Blur, bias, add noise and truncate the bottom axial slab; truth is untouched."""
    dspec = dspec or DegradeSpec()
    dims = case.images.dims
    if dspec.slab >= dims[0]:
        raise DataError(f"slab of {dspec.slab} slices does not fit depth {dims[0]}")
    rng = np.random.default_rng(dspec.seed)
    bias = _bias_field(rng, dims, dspec.bias_amplitude) if dspec.bias_amplitude > 0 else None
    channels = {}
    for m in MODALITIES:
        src = case.images.channels[m].data
        support = src != 0
        img = src.astype(np.float64)
        if dspec.factor > 1:
            low = tuple(max(1, int(round(n / dspec.factor))) for n in dims)
            img = resize_linear(resize_linear(img, low), dims)
        if bias is not None:
            img = img * bias
        if dspec.noise_sd > 0:
            ref = float(np.abs(src[support]).mean()) if support.any() else 0.0
            img = img + rng.standard_normal(dims) * (dspec.noise_sd * ref)
            img = np.maximum(img, 1e-2)
        img = np.where(support, img, 0.0)
        if dspec.slab:
            img[:dspec.slab] = 0.0
        channels[m] = case.images.channels[m].with_data(img.astype(np.float32))
    return Case(case_id or case.id, MultiModalVolume(channels), case.truth, Domain.PHANTOM_DEGRADED)


def phantom_cohort(count: int, seed: int, dims=(64, 64, 64), degrade: DegradeSpec | None = None,
                   prefix: str = "phantom") -> list[Case]:
    """Generate ``count`` phantoms with per-case specs derived from ``seed``."""
    cases = []
    for i in range(count):
        case_seed = int(np.random.default_rng([seed, i]).integers(0, 2**31 - 1))
        case = generate_phantom(random_phantom_spec(case_seed, dims), f"{prefix}-{i:04d}")
        if degrade is not None:
            d = DegradeSpec(degrade.factor, degrade.noise_sd, degrade.bias_amplitude,
                            degrade.slab, degrade.seed + case_seed)
            case = degrade_case(case, d)
        cases.append(case)
    return cases
