"""Minimal NIfTI-1 single-file (.nii) reader/writer.

Only little-endian files with datatype uint8 (2), int16 (4) or float32 (16)
are handled. Array axis order (D, H, W) maps to NIfTI (k, j, i), so the C-order
payload of a (D, H, W) array is exactly the NIfTI on-disk order with i fastest.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import NiftiError
from .volume import LabelVolume, VoxelGrid

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: np.dtype("<u1"), DT_INT16: np.dtype("<i2"), DT_FLOAT32: np.dtype("<f4")}

# byte ranges inside the header
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL = 112
_OFF_XYZT_UNITS = 123
_OFF_ORIENT = 252  # qform_code .. srow_z end
_ORIENT_LEN = 328 - 252
_OFF_MAGIC = 344

NIFTI_UNITS_MM = 2


def _default_orientation(spacing_ijk) -> bytes:
    # qform_code 0, sform_code 1 (scanner), zero quaternion, diagonal srow
    sx, sy, sz = spacing_ijk
    srow = [sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0]
    return struct.pack("<hh6f12f", 0, 1, *([0.0] * 6), *srow)


def _build_header(shape_dhw, spacing_dhw, datatype: int, orientation: bytes | None) -> bytes:
    d, h, w = shape_dhw
    sd, sh, sw = spacing_dhw
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, _OFF_DIM, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, _OFF_DATATYPE, datatype, _DTYPES[datatype].itemsize * 8)
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, 1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, _OFF_VOX_OFFSET, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, _OFF_SCL, 1.0, 0.0)
    hdr[_OFF_XYZT_UNITS] = NIFTI_UNITS_MM
    if orientation is None:
        orientation = _default_orientation((sw, sh, sd))
    if len(orientation) != _ORIENT_LEN:
        raise NiftiError(f"orientation block must be {_ORIENT_LEN} bytes")
    hdr[_OFF_ORIENT:_OFF_ORIENT + _ORIENT_LEN] = orientation
    hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC
    return bytes(hdr)


def write_nifti(grid: VoxelGrid | LabelVolume, path: str | Path) -> None:
    """Write ``grid`` as a single-file NIfTI-1 image.

    Label volumes are stored as uint8, intensity grids as float32. Output
    bytes depend only on the grid contents.
    """
    if isinstance(grid, LabelVolume):
        arr, datatype = grid.labels, DT_UINT8
    elif isinstance(grid, VoxelGrid):
        arr, datatype = grid.data, DT_FLOAT32
    else:
        raise TypeError(f"cannot write {type(grid).__name__} as NIfTI")
    header = _build_header(arr.shape, grid.spacing, datatype, grid.orientation)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[datatype]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)


def read_nifti(path: str | Path) -> VoxelGrid | LabelVolume:
    """Read a NIfTI-1 file; uint8 payloads become LabelVolume, others VoxelGrid."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", raw, 0)[0] != HEADER_SIZE:
        raise NiftiError(f"{path}: sizeof_hdr is not 348 (big-endian or not NIfTI-1)")
    if raw[_OFF_MAGIC:_OFF_MAGIC + 4] != MAGIC:
        raise NiftiError(f"{path}: bad magic {raw[_OFF_MAGIC:_OFF_MAGIC + 4]!r}")
    dim = struct.unpack_from("<8h", raw, _OFF_DIM)
    if dim[0] != 3 and not (dim[0] > 3 and all(n == 1 for n in dim[4:dim[0] + 1])):
        raise NiftiError(f"{path}: expected a 3D image, dim={dim}")
    w, h, d = dim[1:4]
    if min(w, h, d) < 1:
        raise NiftiError(f"{path}: non-positive dimensions {dim[1:4]}")
    datatype = struct.unpack_from("<h", raw, _OFF_DATATYPE)[0]
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, _OFF_PIXDIM)
    sw, sh, sd = (float(abs(p)) for p in pixdim[1:4])
    offset = int(struct.unpack_from("<f", raw, _OFF_VOX_OFFSET)[0])
    dtype = _DTYPES[datatype]
    nbytes = w * h * d * dtype.itemsize
    if offset < HEADER_SIZE or len(raw) - offset != nbytes:
        raise NiftiError(f"{path}: payload size {len(raw) - offset} does not match header "
                         f"({nbytes} bytes expected)")
    arr = np.frombuffer(raw, dtype=dtype, count=w * h * d, offset=offset).reshape(d, h, w)
    orientation = raw[_OFF_ORIENT:_OFF_ORIENT + _ORIENT_LEN]
    if datatype == DT_UINT8:
        return LabelVolume(arr, (sd, sh, sw), orientation)
    slope, inter = struct.unpack_from("<ff", raw, _OFF_SCL)
    data = arr.astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * np.float32(slope if slope else 1.0) + np.float32(inter)
    return VoxelGrid(data, (sd, sh, sw), orientation)


def read_voxel_grid(path: str | Path) -> VoxelGrid:
    img = read_nifti(path)
    if isinstance(img, LabelVolume):
        return VoxelGrid(img.labels.astype(np.float32), img.spacing, img.orientation)
    return img


def read_label_volume(path: str | Path) -> LabelVolume:
    img = read_nifti(path)
    if isinstance(img, VoxelGrid):
        rounded = np.rint(img.data)
        if not np.array_equal(rounded, img.data):
            raise NiftiError(f"{path}: label file holds non-integer values")
        return LabelVolume(rounded.astype(np.int64), img.spacing, img.orientation)
    return img
