"""Named-tensor checkpoint container (safetensors format).

Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
tensor names to ``{"dtype", "shape", "data_offsets"}`` (plus an optional
``"__metadata__"`` string map), then the raw little-endian payload.

Supported dtypes are F32, F64 and BF16.  BF16 is a storage format only:
loaded tensors are widened exactly before any arithmetic, and narrowing on
save uses round-to-nearest-even.  Loads are memory-mapped, so arbitrarily
large checkpoints can be processed layer by layer without full residency;
saves stream one tensor at a time for the same reason.
"""

from __future__ import annotations

import hashlib
import json
import mmap
import os
import struct
import tempfile
from dataclasses import dataclass, field

import ml_dtypes
import numpy as np

from .errors import CompatibilityError, FormatError, IntegrityError

BFLOAT16 = np.dtype(ml_dtypes.bfloat16)

# container dtype code -> numpy dtype (little-endian on disk)
_DTYPES = {
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "BF16": BFLOAT16,
}
_CODES = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64", BFLOAT16: "BF16"}

_METADATA_KEY = "__metadata__"
_HEADER_LIMIT = 100 * 1024 * 1024  # sanity bound on header size


def dtype_code(arr: np.ndarray) -> str:
    """Container code ("F32"/"F64"/"BF16") for an array's dtype."""
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported tensor dtype {arr.dtype!r}")
    return code


def widen(arr: np.ndarray) -> np.ndarray:
    """Widen a storage-dtype array to F64 exactly (BF16/F32 embed losslessly)."""
    return np.asarray(arr, dtype=np.float64)


@dataclass
class Checkpoint:
    """Immutable ordered map of layer name -> tensor.

    Iteration order is always lexicographic by name, independent of the
    on-disk order, so two loads of the same file enumerate identically.
    """

    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)
    source_path: str | None = None

    def __post_init__(self):
        ordered = {}
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            if not isinstance(arr, np.ndarray):
                arr = np.asarray(arr, dtype=np.float32)
            dtype_code(arr)  # validates
            ordered[name] = arr
        self.tensors = ordered
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise FormatError("checkpoint metadata must map str -> str")

    def names(self) -> list[str]:
        return list(self.tensors)

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def content_hash(self) -> str:
        """Hash of tensor names, dtypes, shapes and payload bytes.

        Independent of file layout and metadata, so a save/load round trip
        (and re-serialization with different header padding) preserves it.
        """
        h = hashlib.sha256()
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            h.update(struct.pack("<I", len(raw)))
            h.update(raw)
            h.update(dtype_code(arr).encode("ascii"))
            h.update(struct.pack("<I", arr.ndim))
            h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            h.update(np.ascontiguousarray(arr).tobytes())
        return "sha256:" + h.hexdigest()


def _parse_header(blob: bytes, path: str) -> tuple[dict, dict[str, str]]:
    def reject_duplicates(pairs):
        d = {}
        for k, v in pairs:
            if k in d:
                raise FormatError(f"{path}: duplicate tensor name {k!r} in header")
            d[k] = v
        return d

    try:
        header = json.loads(blob.decode("utf-8"), object_pairs_hook=reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed container header: {e}") from e
    if not isinstance(header, dict):
        raise FormatError(f"{path}: container header is not a JSON object")
    metadata = header.pop(_METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError(f"{path}: __metadata__ must be a string map")
    return header, metadata


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    """Load a checkpoint, memory-mapping tensor data.

    Raises FormatError for malformed headers and IntegrityError when the
    declared tensor spans do not match the payload.
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise FormatError(f"{path}: file too short for container header")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len == 0 or header_len > _HEADER_LIMIT:
            raise FormatError(f"{path}: implausible header length {header_len}")
        blob = f.read(header_len)
        if len(blob) != header_len:
            raise IntegrityError(f"{path}: truncated header")
        payload_start = 8 + header_len
        f.seek(0, os.SEEK_END)
        payload_len = f.tell() - payload_start
        mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ) if payload_len else b""

    header, metadata = _parse_header(blob, path)

    tensors: dict[str, np.ndarray] = {}
    covered = 0
    for name, entry in header.items():
        try:
            code = entry["dtype"]
            shape = entry["shape"]
            begin, end = entry["data_offsets"]
        except (TypeError, KeyError, ValueError) as e:
            raise FormatError(f"{path}: bad header entry for {name!r}") from e
        if code not in _DTYPES:
            raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {code!r}")
        if not all(isinstance(d, int) and d >= 0 for d in shape):
            raise FormatError(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if not (0 <= begin <= end <= payload_len) or end - begin != nbytes:
            raise IntegrityError(
                f"{path}: tensor {name!r} spans [{begin}, {end}) but needs "
                f"{nbytes} bytes within a {payload_len}-byte payload"
            )
        count = int(np.prod(shape, dtype=np.int64))
        if count == 0:
            arr = np.empty(shape, dtype=dt)
        else:
            arr = np.frombuffer(
                mm, dtype=dt, count=count, offset=payload_start + begin
            ).reshape(shape)
        tensors[name] = arr
        covered += nbytes
    if covered != payload_len:
        raise IntegrityError(
            f"{path}: payload is {payload_len} bytes but tensors cover {covered}"
        )
    return Checkpoint(tensors=tensors, metadata=dict(metadata), source_path=path)


def _narrowed(arr: np.ndarray, policy: str) -> np.ndarray:
    if policy == "preserve":
        return arr
    if policy == "force-f32":
        return arr.astype(np.float32) if arr.dtype != np.float32 else arr
    if policy == "force-bf16":
        # round-to-nearest-even narrowing; widening first keeps BF16 inputs intact
        return arr.astype(BFLOAT16) if arr.dtype != BFLOAT16 else arr
    raise FormatError(f"unknown dtype policy {policy!r}")


def save_checkpoint(
    ckpt: Checkpoint, path: str | os.PathLike, dtype_policy: str = "preserve"
) -> None:
    """Write a checkpoint canonically: lexicographic order, contiguous payload.

    dtype_policy is one of "preserve", "force-f32", "force-bf16".  Under
    "preserve" a save/load round trip is bit-exact.  Writes are atomic
    (temp file + rename) and stream one tensor at a time.
    """
    path = os.fspath(path)
    policy = dtype_policy.lower()
    arrays = {name: _narrowed(arr, policy) for name, arr in ckpt.tensors.items()}

    header: dict[str, object] = {}
    if ckpt.metadata:
        header[_METADATA_KEY] = dict(sorted(ckpt.metadata.items()))
    offset = 0
    for name in sorted(arrays):
        if name == _METADATA_KEY:
            raise FormatError(f"tensor name {name!r} is reserved")
        arr = arrays[name]
        nbytes = arr.size * arr.dtype.itemsize
        header[name] = {
            "dtype": dtype_code(arr),
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes

    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    if len(blob) % 8:  # pad to 8-byte alignment, as conventional for this format
        blob += b" " * (8 - len(blob) % 8)

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for name in sorted(arrays):
                f.write(np.ascontiguousarray(arrays[name]).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def assert_compatible(a: Checkpoint, b: Checkpoint) -> None:
    """Check that two checkpoints share layer names and per-layer shapes."""
    names_a, names_b = set(a.tensors), set(b.tensors)
    problems = []
    for name in sorted(names_a - names_b):
        problems.append(f"missing from second: {name}")
    for name in sorted(names_b - names_a):
        problems.append(f"missing from first: {name}")
    for name in sorted(names_a & names_b):
        sa, sb = a[name].shape, b[name].shape
        if sa != sb:
            problems.append(f"shape mismatch for {name}: {list(sa)} vs {list(sb)}")
    if problems:
        shown = "; ".join(problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        raise CompatibilityError(f"incompatible checkpoints: {shown}{more}")
