"""Binary named-array container used for checkpoints, latents and feature dumps.

Layout (all integers little-endian):

    magic   b"PSER"
    u32     format version
    u32     entry count
    per entry:
        u32     name byte length, then UTF-8 name
        u8      dtype tag (0 = f32, 1 = f64, 2 = u8)
        u8      rank
        u64*rank dims
        raw little-endian array data
    u32     CRC32 of every preceding byte

Loads are strict: truncation, trailing garbage or a checksum mismatch
raise ``CorruptFile``; an unknown version raises ``VersionMismatch``.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import CorruptFile, FormatError, NonFiniteData, VersionMismatch

MAGIC = b"PSER"
FORMAT_VERSION = 1

_TAG_BY_DTYPE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPE_BY_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}

META_KEY = "__meta__"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays; f32/f64/u8 payloads only."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # rank-preserving for 0-d
        if arr.dtype == np.float16 or arr.dtype == np.float32:
            arr = arr.astype("<f4")
        elif arr.dtype == np.float64:
            arr = arr.astype("<f8")
        elif arr.dtype == np.uint8:
            arr = arr.astype("u1")
        else:
            raise FormatError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _TAG_BY_DTYPE[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a container back into name -> array, verifying the checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptFile("missing or short PSER header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFile("checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", body, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            dtype = _DTYPE_BY_TAG[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(body):
                raise CorruptFile("truncated array data")
            out[name] = np.frombuffer(
                body, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)),
                offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"malformed entry table: {exc}") from exc
    if off != len(body):
        raise CorruptFile("trailing bytes after last entry")
    return out


def pack_meta(meta: dict) -> np.ndarray:
    """Encode a JSON-serializable dict as a u8 array entry."""
    return np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_meta(arr: np.ndarray) -> dict:
    try:
        return json.loads(bytes(arr.astype(np.uint8)).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad metadata entry: {exc}") from exc


def save_latents(path, latents: np.ndarray, mask: np.ndarray) -> None:
    """One utterance worth of frame embeddings plus validity mask."""
    save_arrays(path, {"latents": np.asarray(latents, dtype=np.float32),
                       "mask": np.asarray(mask, dtype=np.float32)})


def load_latents(path):
    """Returns (latents (T_e, D_e) float64, mask (T_e,)) after validation."""
    arrays = load_arrays(path)
    if "latents" not in arrays or "mask" not in arrays:
        raise FormatError("latent file must contain 'latents' and 'mask'")
    lat = np.asarray(arrays["latents"], dtype=np.float64)
    mask = np.asarray(arrays["mask"], dtype=np.float64)
    if lat.ndim != 2:
        raise FormatError("'latents' must be 2-D (frames x dims)")
    if mask.ndim != 1 or mask.shape[0] != lat.shape[0]:
        raise FormatError("mask length must equal the latent frame count")
    if not np.all(np.isfinite(lat)):
        raise NonFiniteData("latent frames contain non-finite values")
    return lat, mask
