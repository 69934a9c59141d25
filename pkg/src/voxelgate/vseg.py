"""VSEG1 binary container for persisted arrays.

Layout: magic "VSEG1\\0", one u8 dtype code (0 = float32, 1 = uint8),
one u8 rank, rank little-endian u32 extents, then the raw little-endian
payload in C order (channel-major, then L, W, S). Case artifacts carry a
text sidecar of "key = value" lines.
"""

from pathlib import Path

import numpy as np

from .errors import BadContainer

MAGIC = b"VSEG1\x00"

_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_BY_KIND = {("f", 4): 0, ("u", 1): 1}


def save_array(arr: np.ndarray, path) -> None:
    """Write an array as a VSEG1 blob; only float32 and uint8 payloads."""
    arr = np.ascontiguousarray(arr)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_BY_KIND:
        raise BadContainer(f"VSEG1 stores float32 or uint8, not {arr.dtype}")
    code = _CODE_BY_KIND[key]
    if arr.ndim > 255:
        raise BadContainer("rank exceeds u8")
    header = MAGIC + bytes([code, arr.ndim])
    header += np.asarray(arr.shape, dtype="<u4").tobytes()
    payload = arr.astype(_DTYPE_BY_CODE[code], copy=False).tobytes(order="C")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_array(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise BadContainer(f"{path}: bad magic {blob[:6]!r}")
    if len(blob) < len(MAGIC) + 2:
        raise BadContainer(f"{path}: truncated header")
    code, rank = blob[6], blob[7]
    if code not in _DTYPE_BY_CODE:
        raise BadContainer(f"{path}: unknown dtype code {code}")
    off = 8
    if len(blob) < off + 4 * rank:
        raise BadContainer(f"{path}: truncated extents")
    shape = tuple(np.frombuffer(blob, dtype="<u4", count=rank, offset=off).tolist())
    off += 4 * rank
    dtype = _DTYPE_BY_CODE[code]
    n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) < off + n_bytes:
        raise BadContainer(f"{path}: payload truncated ({len(blob) - off} of {n_bytes} bytes)")
    arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=off)
    out = arr.reshape(shape)
    if out.dtype.byteorder not in ("=", "|"):
        out = out.astype(out.dtype.newbyteorder("="))
    return out.copy()


def save_sidecar(meta: dict, path) -> None:
    """Write metadata as sorted "key = value" lines."""
    lines = [f"{k} = {meta[k]}" for k in sorted(meta)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_sidecar(path) -> dict:
    meta = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadContainer(f"{path}: bad sidecar line {raw!r}")
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta
