"""Volumetric data model: intensity grids, label grids, regions, and cases.

Arrays are stored in (D, H, W) order where D is the axial (slice) axis.
Spacing tuples follow the same order, in millimetres.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DescriptorError

MODALITIES: tuple[str, ...] = ("T1", "T1ce", "T2", "FLAIR")

BG, NCR, ED, ET = 0, 1, 2, 3
LABEL_CODES = frozenset({BG, NCR, ED, ET})


class Domain(str, enum.Enum):
    GLI = "GLI"
    SSA = "SSA"
    PHANTOM_CLEAN = "PHANTOM_CLEAN"
    PHANTOM_DEGRADED = "PHANTOM_DEGRADED"


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise DataError(f"spacing must be three positive reals, got {spacing}")
    return spacing


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A single-modality 3D intensity volume (float32)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # raw qform/sform header bytes, carried through I/O untouched
    orientation: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"voxel grid must be a non-empty 3D array, got shape {data.shape}")
        data = data.astype(np.float32, copy=False)
        if not np.all(np.isfinite(data)):
            raise DataError("voxel grid contains NaN or Inf")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, spacing=None) -> VoxelGrid:
        return VoxelGrid(data, self.spacing if spacing is None else spacing, self.orientation)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer segmentation over {0=BG, 1=NCR, 2=ED, 3=ET}."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise DataError(f"label volume must be a non-empty 3D array, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > ET):
            bad = sorted(set(np.unique(labels).tolist()) - LABEL_CODES)
            raise DataError(f"invalid label codes {bad}")
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def with_labels(self, labels: np.ndarray, spacing=None) -> LabelVolume:
        return LabelVolume(labels, self.spacing if spacing is None else spacing, self.orientation)


@dataclass(frozen=True, eq=False)
class MultiModalVolume:
    channels: dict[str, VoxelGrid]

    def __post_init__(self):
        missing = [m for m in MODALITIES if m not in self.channels]
        if missing:
            raise DataError(f"missing channels: {missing}")
        extra = set(self.channels) - set(MODALITIES)
        if extra:
            raise DataError(f"unknown channels: {sorted(extra)}")
        ordered = {m: self.channels[m] for m in MODALITIES}
        ref = ordered["T1"]
        for name, grid in ordered.items():
            if grid.dims != ref.dims or grid.spacing != ref.spacing:
                raise DataError(f"channel {name} geometry {grid.dims}/{grid.spacing} "
                                f"differs from T1 {ref.dims}/{ref.spacing}")
        object.__setattr__(self, "channels", ordered)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.channels["T1"].dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.channels["T1"].spacing

    def stack(self) -> np.ndarray:
        """Return a (4, D, H, W) float32 array in modality order."""
        return np.stack([self.channels[m].data for m in MODALITIES])

    @classmethod
    def from_array(cls, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> MultiModalVolume:
        if arr.shape[0] != len(MODALITIES):
            raise DataError(f"expected {len(MODALITIES)} channels, got {arr.shape[0]}")
        return cls({m: VoxelGrid(arr[i], spacing) for i, m in enumerate(MODALITIES)})


@dataclass(frozen=True)
class Case:
    id: str
    images: MultiModalVolume
    truth: LabelVolume | None = None
    domain: Domain = Domain.PHANTOM_CLEAN

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.truth is not None:
            if self.truth.dims != self.images.dims or self.truth.spacing != self.images.spacing:
                raise DataError(f"case {self.id}: truth geometry does not match images")


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionSpec:
    name: str
    members: frozenset[int]


REGION_ET = RegionSpec("ET", frozenset({ET}))
REGION_TC = RegionSpec("TC", frozenset({NCR, ET}))
REGION_WT = RegionSpec("WT", frozenset({NCR, ED, ET}))
REGIONS: dict[str, RegionSpec] = {r.name: r for r in (REGION_ET, REGION_TC, REGION_WT)}


def _as_region(region: RegionSpec | str) -> RegionSpec:
    if isinstance(region, str):
        try:
            return REGIONS[region]
        except KeyError:
            raise DataError(f"unknown region {region!r}") from None
    return region


def region_mask(labels: LabelVolume | np.ndarray, region: RegionSpec | str) -> np.ndarray:
    """Binary mask of voxels whose code belongs to ``region``."""
    region = _as_region(region)
    arr = labels.labels if isinstance(labels, LabelVolume) else np.asarray(labels)
    return np.isin(arr, sorted(region.members))


# ---------------------------------------------------------------------------
# Dataset descriptor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseEntry:
    id: str
    domain: Domain
    channels: dict[str, Path]
    truth: Path | None


@dataclass(frozen=True)
class Manifest:
    name: str
    cases: tuple[CaseEntry, ...]

    def ids(self, domain: Domain | str | None = None) -> list[str]:
        if domain is None:
            return [c.id for c in self.cases]
        domain = Domain(domain)
        return [c.id for c in self.cases if c.domain == domain]


def load_descriptor(path: str | Path, check_paths: bool = True) -> Manifest:
    """Parse a dataset descriptor JSON file.

    Relative paths resolve against the descriptor's directory. Cases are
    returned sorted by id so that array order in the file does not matter.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DescriptorError(f"descriptor not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DescriptorError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("cases"), list):
        raise DescriptorError(f"{path}: expected an object with a 'cases' array")
    base = path.parent
    seen: set[str] = set()
    entries = []
    for i, raw in enumerate(doc["cases"]):
        if not isinstance(raw, dict) or not isinstance(raw.get("id"), str):
            raise DescriptorError(f"{path}: case #{i} lacks a string 'id'")
        cid = raw["id"]
        if cid in seen:
            raise DescriptorError(f"{path}: duplicate case id {cid!r}")
        seen.add(cid)
        try:
            domain = Domain(raw.get("domain"))
        except ValueError:
            raise DescriptorError(f"case {cid!r}: unknown domain {raw.get('domain')!r}") from None
        chans = raw.get("channels")
        if not isinstance(chans, dict):
            raise DescriptorError(f"case {cid!r}: missing 'channels' object")
        channels = {}
        for m in MODALITIES:
            if not isinstance(chans.get(m), str):
                raise DescriptorError(f"case {cid!r}: missing channel {m}")
            channels[m] = base / chans[m]
        truth = raw.get("truth")
        truth_path = base / truth if truth is not None else None
        if check_paths:
            for label, p in [*channels.items(), ("truth", truth_path)]:
                if p is not None and not p.is_file():
                    raise DescriptorError(f"case {cid!r}: {label} path does not exist: {p}")
        entries.append(CaseEntry(cid, domain, channels, truth_path))
    entries.sort(key=lambda e: e.id)
    return Manifest(str(doc.get("name", path.stem)), tuple(entries))


def load_case(entry: CaseEntry) -> Case:
    from .nifti import read_label_volume, read_voxel_grid

    images = MultiModalVolume({m: read_voxel_grid(p) for m, p in entry.channels.items()})
    truth = read_label_volume(entry.truth) if entry.truth is not None else None
    return Case(entry.id, images, truth, entry.domain)


def load_dataset(path: str | Path) -> list[Case]:
    return [load_case(e) for e in load_descriptor(path).cases]


def write_dataset(cases, directory: str | Path, name: str) -> Path:
    """Write cases as NIfTI files plus a descriptor; returns the descriptor path."""
    from .nifti import write_nifti

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for case in sorted(cases, key=lambda c: c.id):
        chans = {}
        for m, grid in case.images.channels.items():
            fname = f"{case.id}_{m}.nii"
            write_nifti(grid, directory / fname)
            chans[m] = fname
        truth = None
        if case.truth is not None:
            truth = f"{case.id}_seg.nii"
            write_nifti(case.truth, directory / truth)
        records.append({"id": case.id, "domain": case.domain.value, "channels": chans, "truth": truth})
    desc = directory / "dataset.json"
    desc.write_text(json.dumps({"name": name, "cases": records}, indent=2) + "\n")
    return desc
