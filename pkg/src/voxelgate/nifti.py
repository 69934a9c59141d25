"""Reader/writer for the NIfTI-1 single-file format (.nii / .nii.gz).

Only what the segmentation pipeline needs: 3-D volumes in uint8, int16,
float32 or float64, with slope/intercept scaling. Orientation fields
(qform/sform) are carried through untouched but never interpreted.
The writer always emits little-endian single-file "n+1" images with the
voxel payload at byte 352.
"""

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CorruptHeader,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDatatype,
    ValueOverflow,
)

HEADER_SIZE = 348
DATA_OFFSET = 352

# datatype code -> numpy dtype (without byte order)
DTYPE_BY_CODE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
CODE_BY_DTYPE = {dt: code for code, dt in DTYPE_BY_CODE.items()}
BITPIX_BY_CODE = {2: 8, 4: 16, 16: 32, 64: 64}

GOOD_MAGICS = (b"n+1\x00", b"ni1\x00")

# full NIfTI-1 layout; struct format below must describe exactly 348 bytes
_HDR_FMT = (
    "i"      # sizeof_hdr
    "10s"    # data_type (unused)
    "18s"    # db_name (unused)
    "i"      # extents (unused)
    "h"      # session_error (unused)
    "c"      # regular (unused)
    "c"      # dim_info
    "8h"     # dim
    "3f"     # intent_p1..p3
    "h"      # intent_code
    "h"      # datatype
    "h"      # bitpix
    "h"      # slice_start
    "8f"     # pixdim
    "f"      # vox_offset
    "f"      # scl_slope
    "f"      # scl_inter
    "h"      # slice_end
    "c"      # slice_code
    "c"      # xyzt_units
    "f"      # cal_max
    "f"      # cal_min
    "f"      # slice_duration
    "f"      # toffset
    "i"      # glmax (unused)
    "i"      # glmin (unused)
    "80s"    # descrip
    "24s"    # aux_file
    "h"      # qform_code
    "h"      # sform_code
    "6f"     # quatern_b..d, qoffset_x..z
    "4f"     # srow_x
    "4f"     # srow_y
    "4f"     # srow_z
    "16s"    # intent_name
    "4s"     # magic
)
assert struct.calcsize("<" + _HDR_FMT) == HEADER_SIZE


@dataclass
class NiftiHeader:
    """Decoded NIfTI-1 header plus the detected byte order."""

    sizeof_hdr: int
    dim: tuple
    datatype_code: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    byteorder: str = "<"
    # orientation and misc fields, recorded but not interpreted
    extra: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.dim[0]

    @property
    def extents(self) -> tuple:
        return tuple(self.dim[1 : 1 + self.dim[0]])

    def voxel_dtype(self) -> np.dtype:
        return DTYPE_BY_CODE[self.datatype_code].newbyteorder(self.byteorder)


@dataclass
class NiftiVolume:
    """Header plus slope/intercept-scaled rank-3 voxel data."""

    header: NiftiHeader
    data: np.ndarray

    @property
    def extents(self) -> tuple:
        return self.data.shape


def parse_header(raw: bytes) -> NiftiHeader:
    """Decode 348 header bytes, detecting endianness from sizeof_hdr."""
    if len(raw) != HEADER_SIZE:
        raise CorruptHeader(f"expected {HEADER_SIZE} header bytes, got {len(raw)}")
    byteorder = None
    for order in ("<", ">"):
        if struct.unpack_from(order + "i", raw, 0)[0] == HEADER_SIZE:
            byteorder = order
            break
    if byteorder is None:
        raise CorruptHeader("sizeof_hdr is not 348 under either byte order")

    fields = struct.unpack(byteorder + _HDR_FMT, raw)
    (sizeof_hdr, _data_type, _db_name, _extents, _session_error, _regular,
     dim_info) = fields[0:7]
    dim = fields[7:15]
    intent_p = fields[15:18]
    (intent_code, datatype, bitpix, slice_start) = fields[18:22]
    pixdim = fields[22:30]
    (vox_offset, scl_slope, scl_inter, slice_end, slice_code, xyzt_units,
     cal_max, cal_min, slice_duration, toffset, _glmax, _glmin,
     descrip, aux_file, qform_code, sform_code) = fields[30:46]
    quatern = fields[46:52]
    srow_x = fields[52:56]
    srow_y = fields[56:60]
    srow_z = fields[60:64]
    (intent_name, magic) = fields[64:66]

    if magic not in GOOD_MAGICS:
        raise BadMagic(f"magic {magic!r} is neither 'n+1' nor 'ni1'")
    if datatype not in DTYPE_BY_CODE:
        raise UnsupportedDatatype(f"datatype code {datatype} not in {sorted(DTYPE_BY_CODE)}")
    if not (1 <= dim[0] <= 7):
        raise CorruptHeader(f"dim[0] = {dim[0]} outside 1..7")
    for i in range(1, dim[0] + 1):
        if dim[i] < 1:
            raise CorruptHeader(f"dim[{i}] = {dim[i]} < 1")
    if bitpix != BITPIX_BY_CODE[datatype]:
        raise CorruptHeader(
            f"bitpix {bitpix} inconsistent with datatype {datatype} "
            f"(expected {BITPIX_BY_CODE[datatype]})")
    if magic == b"n+1\x00" and vox_offset < DATA_OFFSET:
        raise CorruptHeader(f"vox_offset {vox_offset} < {DATA_OFFSET} for single-file image")

    extra = {
        "dim_info": dim_info,
        "intent_p": intent_p,
        "intent_code": intent_code,
        "slice_start": slice_start,
        "slice_end": slice_end,
        "slice_code": slice_code,
        "xyzt_units": xyzt_units,
        "cal_max": cal_max,
        "cal_min": cal_min,
        "slice_duration": slice_duration,
        "toffset": toffset,
        "descrip": descrip,
        "aux_file": aux_file,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern": quatern,
        "srow_x": srow_x,
        "srow_y": srow_y,
        "srow_z": srow_z,
        "intent_name": intent_name,
    }
    return NiftiHeader(
        sizeof_hdr=sizeof_hdr,
        dim=tuple(dim),
        datatype_code=datatype,
        bitpix=bitpix,
        pixdim=tuple(pixdim),
        vox_offset=float(vox_offset),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        magic=magic,
        byteorder=byteorder,
        extra=extra,
    )


def _open_maybe_gzip(path: Path):
    # sniff the 2-byte gzip magic rather than trusting the suffix
    with open(path, "rb") as fh:
        magic2 = fh.read(2)
    if magic2 == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_volume(path) -> NiftiVolume:
    """Read a .nii or .nii.gz file into a scaled rank-3 float volume.

    Values are raw * scl_slope + scl_inter, with slope 0 treated as 1
    per the format convention. Integer inputs come back float32; float
    inputs keep their precision.
    """
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        raw_header = fh.read(HEADER_SIZE)
        header = parse_header(raw_header)
        ext = header.extents
        if len(ext) < 3 or any(e != 1 for e in ext[3:]):
            raise CorruptHeader(f"expected a 3-D volume, got extents {ext}")
        shape = ext[:3]
        dtype = header.voxel_dtype()
        n_bytes = int(np.prod(shape)) * dtype.itemsize
        skip = int(header.vox_offset) - HEADER_SIZE
        if skip < 0:
            raise CorruptHeader(f"vox_offset {header.vox_offset} before end of header")
        fh.read(skip)
        payload = fh.read(n_bytes)
    if len(payload) < n_bytes:
        raise TruncatedData(f"{path}: need {n_bytes} voxel bytes, found {len(payload)}")

    raw = np.frombuffer(payload, dtype=dtype).reshape(shape)
    slope = header.scl_slope if header.scl_slope != 0.0 else 1.0
    inter = header.scl_inter
    if raw.dtype.kind == "f":
        data = raw.astype(raw.dtype.newbyteorder("="), copy=True)
        if slope != 1.0 or inter != 0.0:
            data = data * np.array(slope, dtype=data.dtype) + np.array(inter, dtype=data.dtype)
    else:
        data = raw.astype(np.float32) * np.float32(slope) + np.float32(inter)
    return NiftiVolume(header=header, data=data)


def _default_header(shape, datatype_code: int) -> NiftiHeader:
    if datatype_code not in DTYPE_BY_CODE:
        raise UnsupportedDatatype(f"datatype code {datatype_code} not in {sorted(DTYPE_BY_CODE)}")
    dim = [3, shape[0], shape[1], shape[2], 1, 1, 1, 1]
    return NiftiHeader(
        sizeof_hdr=HEADER_SIZE,
        dim=tuple(dim),
        datatype_code=datatype_code,
        bitpix=BITPIX_BY_CODE[datatype_code],
        pixdim=(1.0,) * 8,
        vox_offset=float(DATA_OFFSET),
        scl_slope=1.0,
        scl_inter=0.0,
        magic=b"n+1\x00",
        byteorder="<",
    )


def _encode_header(header: NiftiHeader) -> bytes:
    e = header.extra
    fields = (
        HEADER_SIZE, b"", b"", 0, 0, b"r",
        e.get("dim_info", b"\x00"),
        *header.dim,
        *e.get("intent_p", (0.0, 0.0, 0.0)),
        e.get("intent_code", 0),
        header.datatype_code,
        header.bitpix,
        e.get("slice_start", 0),
        *header.pixdim,
        float(DATA_OFFSET), header.scl_slope, header.scl_inter,
        e.get("slice_end", 0),
        e.get("slice_code", b"\x00"),
        e.get("xyzt_units", b"\x00"),
        e.get("cal_max", 0.0), e.get("cal_min", 0.0),
        e.get("slice_duration", 0.0), e.get("toffset", 0.0),
        0, 0,
        e.get("descrip", b""), e.get("aux_file", b""),
        e.get("qform_code", 0), e.get("sform_code", 0),
        *e.get("quatern", (0.0,) * 6),
        *e.get("srow_x", (0.0,) * 4),
        *e.get("srow_y", (0.0,) * 4),
        *e.get("srow_z", (0.0,) * 4),
        e.get("intent_name", b""),
        b"n+1\x00",
    )
    return struct.pack("<" + _HDR_FMT, *fields)


def _cast_checked(data: np.ndarray, dtype: np.dtype) -> np.ndarray:
    if dtype.kind in "ui":
        info = np.iinfo(dtype)
        rounded = np.rint(data)
        if np.any(rounded < info.min) or np.any(rounded > info.max):
            raise ValueOverflow(
                f"values outside [{info.min}, {info.max}] cannot be written as {dtype}")
        if not np.array_equal(rounded, data):
            raise ValueOverflow(f"non-integral values cannot be written as {dtype}")
        return rounded.astype(dtype)
    return np.asarray(data, dtype=dtype)


def write_volume(volume: NiftiVolume, path, datatype_code: int = None) -> None:
    """Write a little-endian single-file image; gzip when path ends in .gz.

    Emits scl_slope 1 / scl_inter 0, so integer volumes round-trip
    bit-exactly. Raises ValueOverflow when values do not fit the target
    type. Gzip output carries a fixed mtime so identical volumes produce
    identical bytes.
    """
    path = Path(path)
    if datatype_code is None:
        datatype_code = volume.header.datatype_code
    if datatype_code not in DTYPE_BY_CODE:
        raise UnsupportedDatatype(f"datatype code {datatype_code} not in {sorted(DTYPE_BY_CODE)}")
    if volume.data.ndim != 3:
        raise ShapeMismatch(f"writer handles rank-3 volumes, got rank {volume.data.ndim}")
    dtype = DTYPE_BY_CODE[datatype_code].newbyteorder("<")
    payload = _cast_checked(volume.data, dtype)

    header = _default_header(volume.data.shape, datatype_code)
    header.pixdim = tuple(volume.header.pixdim) if volume.header else header.pixdim
    header.extra = dict(volume.header.extra) if volume.header else {}
    blob = _encode_header(header) + b"\x00" * (DATA_OFFSET - HEADER_SIZE)
    blob += payload.tobytes(order="C")

    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # fixed mtime and no embedded name: identical volumes give identical bytes
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)


def volume_from_array(data: np.ndarray, datatype_code: int, pixdim=(1.0,) * 8) -> NiftiVolume:
    """Wrap an array in a canonical writer-ready volume."""
    header = _default_header(data.shape, datatype_code)
    header.pixdim = tuple(pixdim)
    return NiftiVolume(header=header, data=np.asarray(data))
