"""Binary embedding-store and dataset container.

Layout (all integers and reals little-endian)::

    magic      4 bytes   b"PGES"
    version    u32       currently 1
    D          u32       embedding dimension
    N          u64       number of records
    dtype      u8        0 = float32
    ids        N x (u32 byte length, UTF-8 bytes)
    mu         N*D float32, row-major
    log_var    N*D float32, row-major
    [payload]  optional extra section, only used by dataset files

A dataset file is the same container with ``D = 0`` (no embedding arrays)
followed by a ``b"SYND"`` payload section::

    tag          4 bytes  b"SYND"
    version      u32      1
    H, W, T      u32 x 3  grid height/width, text feature length
    class_label  N int32
    text_class   N int32
    ambiguity    N float64
    view1, view2 N*H*W float64 each
    sect1, sect2 N*T float64 each
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .prob_core import LOG_VAR_MAX, LOG_VAR_MIN
from .synth_data import SynthStudy

MAGIC = b"PGES"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sIIQB")
DATASET_TAG = b"SYND"
DATASET_HEADER = struct.Struct("<4sIIII")
READ_TOLERANCE = 1e-6


class StoreError(Exception):
    pass


class StoreFormatError(StoreError):
    pass


class StoreValidationError(StoreError):
    pass


class StoreLengthError(StoreError):
    pass


class StoreIOError(StoreError):
    pass


@dataclass
class EmbeddingStore:
    ids: list[str]
    mu: np.ndarray
    log_var: np.ndarray
    version: int = VERSION

    def __post_init__(self):
        self.ids = list(self.ids)
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float32)
        self.log_var = np.ascontiguousarray(self.log_var, dtype=np.float32)
        if self.mu.ndim != 2 and self.mu.size == 0:
            self.mu = self.mu.reshape(0, 0)
            self.log_var = self.log_var.reshape(0, 0)
        self.validate()

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self, tolerance: float = 0.0):
        if self.mu.ndim != 2 or self.mu.shape != self.log_var.shape:
            raise StoreValidationError(
                f"mu {self.mu.shape} and log_var {self.log_var.shape} must be equal N x D arrays"
            )
        if self.mu.shape[0] != len(self.ids):
            raise StoreValidationError(f"{len(self.ids)} ids for {self.mu.shape[0]} rows")
        if len(set(self.ids)) != len(self.ids):
            raise StoreValidationError("ids are not unique")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_var))):
            raise StoreValidationError("non-finite values in store")
        if self.log_var.size and (
            self.log_var.min() < LOG_VAR_MIN - tolerance or self.log_var.max() > LOG_VAR_MAX + tolerance
        ):
            raise StoreValidationError(
                f"log_var outside [{LOG_VAR_MIN}, {LOG_VAR_MAX}]: "
                f"[{self.log_var.min()}, {self.log_var.max()}]"
            )

    def as_float64(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mu.astype(np.float64), self.log_var.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.version == other.version
            and self.ids == other.ids
            and self.mu.shape == other.mu.shape
            and self.mu.tobytes() == other.mu.tobytes()
            and self.log_var.tobytes() == other.log_var.tobytes()
        )


def _encode_container(store: EmbeddingStore) -> bytes:
    parts = [HEADER.pack(MAGIC, store.version, store.dim, len(store), DTYPE_F32)]
    for ident in store.ids:
        raw = ident.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(store.mu.astype("<f4").tobytes())
    parts.append(store.log_var.astype("<f4").tobytes())
    return b"".join(parts)


def _write_bytes(path, data: bytes):
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise StoreIOError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as exc:
        raise StoreIOError(f"cannot read {path}: {exc}") from exc


def write_store(store: EmbeddingStore, path) -> None:
    store.validate()
    _write_bytes(path, _encode_container(store))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise StoreLengthError(
                f"{self.path}: truncated file (needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)})"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()

    def remaining(self) -> bytes:
        return self.data[self.pos :]


def _decode_container(data: bytes, path) -> tuple[EmbeddingStore, bytes]:
    r = _Reader(data, path)
    if len(data) < HEADER.size:
        if len(data) >= 4 and data[:4] != MAGIC:
            raise StoreFormatError(f"{path}: bad magic {data[:4]!r}")
        raise StoreLengthError(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, dim, count, dtype = r.unpack(HEADER)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise StoreFormatError(f"{path}: unsupported dtype flag {dtype}")
    ids = []
    for _ in range(count):
        (n,) = struct.unpack("<I", r.take(4))
        try:
            ids.append(r.take(n).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise StoreFormatError(f"{path}: id is not valid UTF-8") from exc
    mu = r.array("<f4", count * dim).reshape(count, dim)
    log_var = r.array("<f4", count * dim).reshape(count, dim)
    store = EmbeddingStore.__new__(EmbeddingStore)
    store.ids, store.mu, store.log_var, store.version = ids, mu.astype(np.float32), log_var.astype(np.float32), version
    try:
        store.validate(tolerance=READ_TOLERANCE)
    except StoreValidationError as exc:
        raise StoreValidationError(f"{path}: {exc}") from exc
    return store, r.remaining()


def read_store(path) -> EmbeddingStore:
    store, payload = _decode_container(_read_bytes(path), path)
    if payload:
        raise StoreFormatError(f"{path}: {len(payload)} unexpected trailing bytes (dataset file?)")
    return store


def store_nbytes(ids: Sequence[str], dim: int) -> int:
    """Expected file size of a store with these ids and dimension."""
    return HEADER.size + sum(4 + len(i.encode("utf-8")) for i in ids) + 2 * len(ids) * dim * 4


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------


def write_dataset(studies: Sequence[SynthStudy], path) -> None:
    if not studies:
        raise StoreValidationError("cannot write an empty dataset")
    incomplete = [s.id for s in studies if s.view2 is None or s.sect2 is None]
    if incomplete:
        raise StoreValidationError(f"studies missing view2/sect2: {incomplete[:3]}")
    H, W = studies[0].view1.shape
    T = studies[0].sect1.shape[0]
    header = EmbeddingStore([s.id for s in studies], np.zeros((len(studies), 0)), np.zeros((len(studies), 0)))
    parts = [
        _encode_container(header),
        DATASET_HEADER.pack(DATASET_TAG, 1, H, W, T),
        np.array([s.class_label for s in studies], dtype="<i4").tobytes(),
        np.array([s.text_class for s in studies], dtype="<i4").tobytes(),
        np.array([s.ambiguity for s in studies], dtype="<f8").tobytes(),
    ]
    for key in ("view1", "view2", "sect1", "sect2"):
        parts.append(np.stack([getattr(s, key) for s in studies]).astype("<f8").tobytes())
    _write_bytes(path, b"".join(parts))


def read_dataset(path) -> list[SynthStudy]:
    data = _read_bytes(path)
    header, payload = _decode_container(data, path)
    if not payload:
        raise StoreFormatError(f"{path}: missing dataset payload section (plain embedding store?)")
    r = _Reader(payload, path)
    tag, version, H, W, T = r.unpack(DATASET_HEADER)
    if tag != DATASET_TAG:
        raise StoreFormatError(f"{path}: missing dataset payload section")
    if version != 1:
        raise StoreFormatError(f"{path}: unsupported dataset payload version {version}")
    n = len(header)
    labels = r.array("<i4", n)
    text_classes = r.array("<i4", n)
    ambiguity = r.array("<f8", n)
    arrays = {k: r.array("<f8", n * H * W).reshape(n, H, W) for k in ("view1", "view2")}
    arrays.update({k: r.array("<f8", n * T).reshape(n, T) for k in ("sect1", "sect2")})
    if r.remaining():
        raise StoreFormatError(f"{path}: unexpected trailing bytes after dataset payload")
    return [
        SynthStudy(
            id=header.ids[i],
            view1=arrays["view1"][i],
            view2=arrays["view2"][i],
            sect1=arrays["sect1"][i],
            sect2=arrays["sect2"][i],
            class_label=int(labels[i]),
            text_class=int(text_classes[i]),
            ambiguity=float(ambiguity[i]),
        )
        for i in range(n)
    ]
