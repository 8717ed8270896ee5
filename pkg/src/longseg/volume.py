"""Volumetric containers and their on-disk formats.

Two native little-endian formats are supported:

``LVOL`` (intensities)
    ``b"LVOL"``, ``u8`` version, ``u32`` nx, ny, nz, nc, ``f32`` sx, sy, sz,
    then ``nx*ny*nz*nc`` ``f32`` values, x fastest, then y, z, channel.

``LSEG`` (labels)
    ``b"LSEG"``, ``u8`` version, ``u32`` nx, ny, nz, ``u32`` lesion label,
    ``f32`` sx, sy, sz, then ``nx*ny*nz`` ``u16`` labels.

Single-file NIfTI-1 images can be read (not written).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, TruncationError, UnsupportedError

LVOL_MAGIC = b"LVOL"
LSEG_MAGIC = b"LSEG"
FORMAT_VERSION = 1

_LVOL_HEADER = struct.Struct("<4sB4I3f")
_LSEG_HEADER = struct.Struct("<4sB4I3f")

DEFAULT_EPSILON = 1e-4


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense multi-channel scalar grid.

    ``data`` has shape ``(nx, ny, nz, nc)``; flattening it in Fortran order
    gives the on-disk voxel order.
    """

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise DataError(f"volume data must be 4-D and non-empty, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise DataError(f"spacing must be three positive reals, got {self.spacing}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def channels(self):
        return int(self.data.shape[3])

    @property
    def n_voxels(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    def voxels(self):
        """Return an ``(n_voxels, channels)`` array in x-fastest order."""
        return self.data.reshape(self.n_voxels, self.channels, order="F")

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label map. Anatomical classes are ``0..K-1`` (0 = background)."""

    data: np.ndarray
    spacing: tuple
    lesion_label: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DataError(f"label data must be 3-D, got shape {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 0xFFFF):
            raise DataError("labels must fit in uint16")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise DataError(f"spacing must be three positive reals, got {self.spacing}")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint16)))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "lesion_label", int(self.lesion_label))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.lesion_label == other.lesion_label
            and np.array_equal(self.data, other.data)
        )


# --------------------------------------------------------------------------- LVOL


def encode_lvol(v: Volume) -> bytes:
    nx, ny, nz = v.dims
    header = _LVOL_HEADER.pack(LVOL_MAGIC, FORMAT_VERSION, nx, ny, nz, v.channels, *v.spacing)
    with np.errstate(over="ignore"):
        values = v.data.astype("<f4")
    if not np.all(np.isfinite(values)):
        raise DataError("volume values overflow binary32")
    return header + values.tobytes(order="F")


def decode_lvol(buf: bytes) -> Volume:
    if len(buf) < 5 or buf[:4] != LVOL_MAGIC:
        raise FormatError("not an LVOL file (bad magic)")
    if buf[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported LVOL version {buf[4]}")
    if len(buf) < _LVOL_HEADER.size:
        raise TruncationError("LVOL header truncated")
    _, _, nx, ny, nz, nc, sx, sy, sz = _LVOL_HEADER.unpack_from(buf)
    expected = _LVOL_HEADER.size + 4 * nx * ny * nz * nc
    if len(buf) < expected:
        raise TruncationError(f"LVOL payload truncated: {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise FormatError(f"LVOL has {len(buf) - expected} trailing bytes")
    values = np.frombuffer(buf, dtype="<f4", offset=_LVOL_HEADER.size)
    if not np.all(np.isfinite(values)):
        raise DataError("LVOL contains non-finite values")
    data = values.astype(np.float64).reshape((nx, ny, nz, nc), order="F")
    return Volume(data, (sx, sy, sz))


def write_lvol(v: Volume, path) -> None:
    """Write ``v`` as LVOL. Nothing is written if encoding fails."""
    payload = encode_lvol(v)
    with open(path, "wb") as fh:
        fh.write(payload)


def read_lvol(path) -> Volume:
    with open(path, "rb") as fh:
        return decode_lvol(fh.read())


# --------------------------------------------------------------------------- LSEG


def encode_lseg(seg: LabelVolume) -> bytes:
    nx, ny, nz = seg.dims
    header = _LSEG_HEADER.pack(LSEG_MAGIC, FORMAT_VERSION, nx, ny, nz, seg.lesion_label, *seg.spacing)
    return header + seg.data.astype("<u2").tobytes(order="F")


def decode_lseg(buf: bytes) -> LabelVolume:
    if len(buf) < 5 or buf[:4] != LSEG_MAGIC:
        raise FormatError("not an LSEG file (bad magic)")
    if buf[4] != FORMAT_VERSION:
        raise FormatError(f"unsupported LSEG version {buf[4]}")
    if len(buf) < _LSEG_HEADER.size:
        raise TruncationError("LSEG header truncated")
    _, _, nx, ny, nz, lesion, sx, sy, sz = _LSEG_HEADER.unpack_from(buf)
    expected = _LSEG_HEADER.size + 2 * nx * ny * nz
    if len(buf) < expected:
        raise TruncationError(f"LSEG payload truncated: {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise FormatError(f"LSEG has {len(buf) - expected} trailing bytes")
    labels = np.frombuffer(buf, dtype="<u2", offset=_LSEG_HEADER.size)
    return LabelVolume(labels.reshape((nx, ny, nz), order="F"), (sx, sy, sz), lesion)


def write_lseg(seg: LabelVolume, path) -> None:
    payload = encode_lseg(seg)
    with open(path, "wb") as fh:
        fh.write(payload)


def read_lseg(path) -> LabelVolume:
    with open(path, "rb") as fh:
        return decode_lseg(fh.read())


# -------------------------------------------------------------------------- NIfTI

_NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}


def read_nifti_minimal(path) -> Volume:
    """Read a single-file NIfTI-1 image.

    Supports uint8, int16, float32 and float64 data. ``scl_slope`` and
    ``scl_inter`` are applied when the slope is non-zero.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 348:
        raise FormatError("file too short for a NIfTI-1 header")
    endian = None
    for candidate in ("<", ">"):
        if struct.unpack_from(candidate + "i", buf, 0)[0] == 348:
            endian = candidate
            break
    if endian is None:
        raise FormatError("sizeof_hdr is not 348")

    dim = struct.unpack_from(endian + "8h", buf, 40)
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    vox_offset = struct.unpack_from(endian + "f", buf, 108)[0]
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", buf, 112)

    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedError(f"unsupported NIfTI datatype {datatype}")
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise FormatError(f"invalid dim[0]={ndim}")
    shape = [dim[i] if i <= ndim else 1 for i in range(1, 5)]
    if any(n < 1 for n in shape):
        raise FormatError(f"invalid dimensions {dim}")
    nx, ny, nz, nc = shape
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])

    offset = int(vox_offset) if vox_offset >= 348 else 352
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = nx * ny * nz * nc
    if len(buf) < offset + count * dtype.itemsize:
        raise TruncationError("NIfTI voxel data truncated")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    values = raw.astype(np.float64)
    if scl_slope != 0 and np.isfinite(scl_slope):
        values = values * float(scl_slope) + float(scl_inter)
    return Volume(values.reshape((nx, ny, nz, nc), order="F"), spacing)


def read_volume(path) -> Volume:
    """Dispatch on extension: ``.nii`` goes to the NIfTI reader, else LVOL."""
    if os.fspath(path).endswith(".nii"):
        return read_nifti_minimal(path)
    return read_lvol(path)


def log_transform(v: Volume, epsilon: float = DEFAULT_EPSILON) -> Volume:
    """Elementwise ``ln(max(v, epsilon))``."""
    if not epsilon > 0:
        raise DataError("epsilon must be positive")
    if np.any(v.data < 0):
        raise DataError("log_transform requires non-negative intensities")
    return Volume(np.log(np.maximum(v.data, epsilon)), v.spacing)
