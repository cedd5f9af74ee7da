"""Single-file NIfTI-1 reading and writing.

Supported subset: little-endian ``.nii`` with scalar datatypes uint8, int16,
or float32, plus the package's own multi-channel files (vector dimension 5).
Compressed files, header/image pairs, big-endian files, and time series are
rejected rather than guessed at.

On read the voxel-to-world affine comes from the sform when ``sform_code > 0``
and from the quaternion qform otherwise; a file with neither is an error.
``scl_slope``/``scl_inter`` are applied when the slope is nonzero.  Files are
always written as float32 with the sform populated and ``vox_offset = 352``.
"""

from __future__ import annotations

import struct
import warnings

import numpy as np

from .errors import FormatError, UnsupportedError
from .volume import Units, Volume, VoxelGrid

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# struct format for the full 348-byte header, field for field.
_HDR_FMT = "<i10s18sih2c8h3f4h8f3fh2c4f2i80s24s2h6f12f16s4s"
assert struct.calcsize(_HDR_FMT) == HEADER_SIZE

_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_DT_FLOAT32 = 16
_UNITS_MM = 2
_INTENT_VECTOR = 1007


def _parse_header(raw: bytes, path) -> dict:
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: shorter than a NIfTI-1 header")
    f = struct.unpack(_HDR_FMT, raw[:HEADER_SIZE])
    hdr = {
        "sizeof_hdr": f[0],
        "dim": f[7:15],
        "datatype": f[19],
        "bitpix": f[20],
        "pixdim": f[22:30],
        "vox_offset": f[30],
        "scl_slope": f[31],
        "scl_inter": f[32],
        "qform_code": f[44],
        "sform_code": f[45],
        "quatern": f[46:49],
        "qoffset": f[49:52],
        "srow": np.array(f[52:64], dtype=float).reshape(3, 4),
        "magic": f[65],
    }
    if hdr["sizeof_hdr"] != HEADER_SIZE:
        swapped = struct.unpack(">i", raw[:4])[0]
        if swapped == HEADER_SIZE:
            raise UnsupportedError(f"{path}: big-endian NIfTI-1 is not supported")
        raise FormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr = {hdr['sizeof_hdr']})")
    if hdr["magic"] != MAGIC_SINGLE:
        detail = " (header/image pair form)" if hdr["magic"] == MAGIC_PAIR else ""
        raise FormatError(f"{path}: bad magic {hdr['magic']!r}{detail}")
    return hdr


def _qform_affine(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = float(np.sqrt(max(a2, 0.0)))
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pix = np.array(hdr["pixdim"][1:4], dtype=float)
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    affine = np.eye(4)
    affine[:3, :3] = r * pix * np.array([1.0, 1.0, qfac])
    affine[:3, 3] = hdr["qoffset"]
    return affine


def _affine_from_header(hdr: dict, path) -> np.ndarray:
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3, :] = hdr["srow"]
        return affine
    if hdr["qform_code"] > 0:
        return _qform_affine(hdr)
    raise FormatError(f"{path}: neither sform nor qform present")


def _read_raw(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    hdr = _parse_header(raw, path)
    if hdr["datatype"] not in _DTYPES:
        raise UnsupportedError(f"{path}: datatype {hdr['datatype']} not supported")
    dim = hdr["dim"]
    ndim = dim[0]
    if not 1 <= ndim <= 5:
        raise FormatError(f"{path}: bad dim[0] = {ndim}")
    shape = tuple(int(x) for x in dim[1 : 1 + ndim])
    if any(s < 1 for s in shape):
        raise FormatError(f"{path}: non-positive dimension in {shape}")
    if ndim >= 4 and shape[3] != 1:
        raise UnsupportedError(f"{path}: time series (dim[4] = {shape[3]}) not supported")
    dtype = _DTYPES[hdr["datatype"]]
    count = int(np.prod(shape))
    offset = int(hdr["vox_offset"])
    end = offset + count * dtype.itemsize
    if len(raw) < end:
        raise FormatError(f"{path}: file truncated ({len(raw)} < {end} bytes)")
    data = np.frombuffer(raw[offset:end], dtype=dtype).reshape(shape, order="F")
    data = data.astype(np.float64)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0.0 and (slope, inter) != (1.0, 0.0):
        data = data * slope + inter
    affine = _affine_from_header(hdr, path)
    spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
    grid = VoxelGrid(shape[:3], spacing, affine)
    return grid, data


def read_nifti(path, units: Units = Units.DIMENSIONLESS) -> Volume:
    """Read a scalar volume; vector files must use read_nifti_channels."""
    grid, data = _read_raw(path)
    if data.ndim > 3:
        if data.shape[3:] == (1,) * (data.ndim - 3):
            data = data.reshape(grid.dims)
        else:
            raise UnsupportedError(f"{path}: has {data.shape[4]} channels, expected a scalar volume")
    return Volume(grid, data, units)


def read_nifti_channels(path):
    """Read a multi-channel file; returns (grid, data) with data shaped dims + (C,)."""
    grid, data = _read_raw(path)
    if data.ndim == 3:
        data = data[..., None, None]
    data = data.reshape(grid.dims + (data.shape[4],))
    return grid, data


def _pack_header(grid: VoxelGrid, n_channels: int) -> bytes:
    dim = [3, *grid.dims, 1, 1, 1, 1]
    intent = 0
    if n_channels > 1:
        dim[0] = 5
        dim[5] = n_channels
        intent = _INTENT_VECTOR
    pixdim = [1.0, *grid.spacing, 0.0, 0.0, 0.0, 0.0]
    srow = grid.affine[:3, :].ravel()
    return struct.pack(
        _HDR_FMT,
        HEADER_SIZE,  # sizeof_hdr
        b"", b"", 0, 0, b"\x00", b"\x00",  # legacy fields, dim_info
        *dim,
        0.0, 0.0, 0.0,  # intent_p1..p3
        intent, _DT_FLOAT32, 32, 0,  # intent_code, datatype, bitpix, slice_start
        *pixdim,
        float(VOX_OFFSET), 1.0, 0.0,  # vox_offset, scl_slope, scl_inter
        0, b"\x00", bytes([_UNITS_MM]),  # slice_end, slice_code, xyzt_units
        0.0, 0.0, 0.0, 0.0, 0, 0,  # cal_max/min, slice_duration, toffset, glmax/min
        b"neurovox", b"",  # descrip, aux_file
        0, 1,  # qform_code, sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,  # quaternion and offsets (unused)
        *srow,
        b"", MAGIC_SINGLE,
    )


def _write_raw(path, grid: VoxelGrid, data: np.ndarray, n_channels: int):
    hdr = _pack_header(grid, n_channels)
    body = np.asarray(data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(hdr)
        fh.write(b"\x00\x00\x00\x00")  # no header extensions
        fh.write(body)


def write_nifti(v: Volume, path) -> None:
    """Write a scalar volume as little-endian float32 single-file NIfTI-1.

    Non-finite voxels are written verbatim (a warning is emitted).
    """
    if not np.isfinite(v.data).all():
        warnings.warn(f"{path}: volume contains non-finite voxels, written as-is")
    _write_raw(path, v.grid, v.data, 1)


def write_nifti_channels(grid: VoxelGrid, data: np.ndarray, path) -> None:
    """Write a dims + (C,) array as a vector-valued NIfTI-1 file."""
    if data.shape[:3] != grid.dims or data.ndim != 4:
        raise FormatError(f"channel data shape {data.shape} does not match grid {grid.dims}")
    _write_raw(path, grid, data.reshape(grid.dims + (1, data.shape[3])), data.shape[3])
