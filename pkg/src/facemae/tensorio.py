"""Little-endian binary containers for datasets, embeddings, masks and parameters.

Four flat formats, each opened by a 4-byte magic and a u16 version:

    FMDS  labelled image datasets       (float32 pixels in [0, 1])
    FMEB  labelled embedding matrices   (float32 rows)
    FMMK  per-image patch mask bitsets  (bit j set => patch j masked)
    FMPR  named parameter tensors       (float64 payload)

Readers validate every declared length against the bytes actually present.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

VERSION = 1
DTYPE_F32_UNIT = 1

_DS_HEADER = struct.Struct("<4sHBBIHHH")
_EB_HEADER = struct.Struct("<4sHII")
_MK_HEADER = struct.Struct("<4sHII")
_PR_HEADER = struct.Struct("<4sHI")


class FormatError(ValueError):
    """Base class for malformed or unreadable files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class InvariantViolation(ValueError):
    """The in-memory object breaks a documented invariant."""


@dataclass(eq=False)
class Dataset:
    """N labelled images stored as an (N, H, W, C) float32 array."""

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim == 3:
            self.pixels = self.pixels[..., None]
        self.validate()

    def validate(self) -> None:
        if self.pixels.ndim != 4:
            raise InvariantViolation(f"pixels must be (N, H, W, C), got {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise InvariantViolation("labels length must equal n_images")
        if np.any(self.labels < 0) or np.any(self.labels > 0xFFFFFFFF):
            raise InvariantViolation("labels must be non-negative u32 values")
        if not np.all(np.isfinite(self.pixels)):
            raise InvariantViolation("pixels must be finite")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise InvariantViolation("pixel values must lie in [0, 1]")

    @property
    def n_images(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def channels(self) -> int:
        return self.pixels.shape[3]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.pixels[index], self.labels[index])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.pixels.shape == other.pixels.shape
            and np.array_equal(self.labels, other.labels)
            and self.pixels.tobytes() == other.pixels.tobytes()
        )


@dataclass(eq=False)
class EmbeddingSet:
    """n labelled d-dimensional feature rows."""

    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise InvariantViolation(f"rows must be 2-D, got shape {self.rows.shape}")
        if self.labels.shape != (self.rows.shape[0],):
            raise InvariantViolation("labels length must equal n")
        if np.any(self.labels < 0) or np.any(self.labels > 0xFFFFFFFF):
            raise InvariantViolation("labels must be non-negative u32 values")
        if not np.all(np.isfinite(self.rows)):
            raise InvariantViolation("embedding entries must be finite")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def subset(self, index) -> "EmbeddingSet":
        index = np.asarray(index)
        return EmbeddingSet(self.rows[index], self.labels[index])

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.rows.shape == other.rows.shape
            and np.array_equal(self.labels, other.labels)
            and self.rows.tobytes() == other.rows.tobytes()
        )


@dataclass(frozen=True)
class MaskPattern:
    """Masked patch indices for one image.

    Only ``n_patches`` and ``masked`` take part in equality; ``ratio`` and
    ``strategy`` record provenance and are not stored in FMMK files.
    """

    n_patches: int
    masked: frozenset
    ratio: float = field(default=0.0, compare=False)
    strategy: str = field(default="explicit", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "masked", frozenset(int(i) for i in self.masked))
        if self.n_patches < 1:
            raise InvariantViolation("n_patches must be >= 1")
        if any(i < 0 or i >= self.n_patches for i in self.masked):
            raise InvariantViolation("masked indices must lie in [0, n_patches)")

    @property
    def visible(self) -> list[int]:
        return [i for i in range(self.n_patches) if i not in self.masked]

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.n_patches, dtype=bool)
        out[sorted(self.masked)] = True
        return out


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def _check_magic(buf: bytes, magic: bytes) -> None:
    if len(buf) < 6:
        raise TruncatedFileError("file shorter than magic + version")
    if buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {buf[:4]!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")


def _expect_length(buf, expected: int) -> None:
    actual = buf if isinstance(buf, int) else len(buf)
    if actual < expected:
        raise TruncatedFileError(f"expected {expected} bytes, file has {actual}")
    if actual > expected:
        raise FormatError(f"expected {expected} bytes, file has {actual} (trailing data)")


# --- FMDS ---------------------------------------------------------------

def dataset_to_bytes(ds: Dataset) -> bytes:
    ds.validate()
    n, h, w, c = ds.pixels.shape
    header = _DS_HEADER.pack(b"FMDS", VERSION, DTYPE_F32_UNIT, 0, n, h, w, c)
    return (
        header
        + ds.labels.astype("<u4").tobytes()
        + np.ascontiguousarray(ds.pixels, dtype="<f4").tobytes()
    )


def dataset_from_bytes(buf: bytes) -> Dataset:
    _check_magic(buf, b"FMDS")
    if len(buf) < _DS_HEADER.size:
        raise TruncatedFileError("truncated FMDS header")
    _, _, dtype, _, n, h, w, c = _DS_HEADER.unpack_from(buf, 0)
    if dtype != DTYPE_F32_UNIT:
        raise FormatError(f"unsupported pixel dtype code {dtype}")
    off = _DS_HEADER.size
    _expect_length(buf, off + 4 * n + 4 * n * h * w * c)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    pixels = np.frombuffer(buf, dtype="<f4", count=n * h * w * c, offset=off + 4 * n)
    return Dataset(pixels.reshape(n, h, w, c).astype(np.float32), labels)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(_read_bytes(path))


def iter_dataset(path, batch_size: int = 64) -> Iterator[Dataset]:
    """Stream an FMDS file in batches through a read-only memory map."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(_DS_HEADER.size)
    _check_magic(head, b"FMDS")
    if len(head) < _DS_HEADER.size:
        raise TruncatedFileError("truncated FMDS header")
    _, _, dtype, _, n, h, w, c = _DS_HEADER.unpack(head)
    if dtype != DTYPE_F32_UNIT:
        raise FormatError(f"unsupported pixel dtype code {dtype}")
    off = _DS_HEADER.size
    _expect_length(path.stat().st_size, off + 4 * n + 4 * n * h * w * c)
    if n == 0:
        return
    labels = np.memmap(path, dtype="<u4", mode="r", offset=off, shape=(n,))
    pixels = np.memmap(path, dtype="<f4", mode="r", offset=off + 4 * n, shape=(n, h, w, c))
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        yield Dataset(np.array(pixels[start:stop]), np.array(labels[start:stop]))


# --- FMEB ---------------------------------------------------------------

def embeddings_to_bytes(es: EmbeddingSet) -> bytes:
    header = _EB_HEADER.pack(b"FMEB", VERSION, es.n, es.dim)
    return (
        header
        + es.labels.astype("<u4").tobytes()
        + np.ascontiguousarray(es.rows, dtype="<f4").tobytes()
    )


def embeddings_from_bytes(buf: bytes) -> EmbeddingSet:
    _check_magic(buf, b"FMEB")
    if len(buf) < _EB_HEADER.size:
        raise TruncatedFileError("truncated FMEB header")
    _, _, n, d = _EB_HEADER.unpack_from(buf, 0)
    off = _EB_HEADER.size
    _expect_length(buf, off + 4 * n + 4 * n * d)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    rows = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off + 4 * n)
    return EmbeddingSet(rows.reshape(n, d).astype(np.float32), labels)


def write_embeddings(es: EmbeddingSet, path) -> None:
    Path(path).write_bytes(embeddings_to_bytes(es))


def read_embeddings(path) -> EmbeddingSet:
    return embeddings_from_bytes(_read_bytes(path))


# --- FMMK ---------------------------------------------------------------

def masks_to_bytes(patterns: Sequence[MaskPattern]) -> bytes:
    sizes = {p.n_patches for p in patterns}
    if len(sizes) > 1:
        raise InvariantViolation(f"heterogeneous n_patches in mask list: {sorted(sizes)}")
    n_patches = sizes.pop() if sizes else 0
    bits = np.zeros((len(patterns), n_patches), dtype=bool)
    for i, p in enumerate(patterns):
        bits[i, sorted(p.masked)] = True
    rows = np.packbits(bits, axis=1, bitorder="little") if n_patches else np.zeros((len(patterns), 0), np.uint8)
    return _MK_HEADER.pack(b"FMMK", VERSION, len(patterns), n_patches) + rows.tobytes()


def masks_from_bytes(buf: bytes) -> list[MaskPattern]:
    _check_magic(buf, b"FMMK")
    if len(buf) < _MK_HEADER.size:
        raise TruncatedFileError("truncated FMMK header")
    _, _, n_images, n_patches = _MK_HEADER.unpack_from(buf, 0)
    row_bytes = (n_patches + 7) // 8
    off = _MK_HEADER.size
    _expect_length(buf, off + n_images * row_bytes)
    raw = np.frombuffer(buf, dtype=np.uint8, count=n_images * row_bytes, offset=off)
    bits = np.unpackbits(raw.reshape(n_images, row_bytes), axis=1, bitorder="little")
    patterns = []
    for row in bits[:, :n_patches]:
        masked = np.flatnonzero(row)
        patterns.append(MaskPattern(n_patches, frozenset(masked.tolist()),
                                    ratio=len(masked) / n_patches))
    return patterns


def write_masks(patterns: Sequence[MaskPattern], path) -> None:
    Path(path).write_bytes(masks_to_bytes(patterns))


def read_masks(path) -> list[MaskPattern]:
    return masks_from_bytes(_read_bytes(path))


# --- FMPR ---------------------------------------------------------------

def params_to_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [_PR_HEADER.pack(b"FMPR", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise InvariantViolation(f"tensor {name!r} has non-finite entries")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise InvariantViolation(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    _check_magic(buf, b"FMPR")
    if len(buf) < _PR_HEADER.size:
        raise TruncatedFileError("truncated FMPR header")
    _, _, count = _PR_HEADER.unpack_from(buf, 0)
    off = _PR_HEADER.size
    out: dict[str, np.ndarray] = {}

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise TruncatedFileError("FMPR tensor record runs past end of file")
        chunk = buf[off:off + n]
        off += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        out[name] = data.reshape(dims)
    if off != len(buf):
        raise FormatError("trailing bytes after last FMPR tensor")
    return out


def write_params(tensors: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(params_to_bytes(tensors))


def read_params(path) -> dict[str, np.ndarray]:
    return params_from_bytes(_read_bytes(path))
