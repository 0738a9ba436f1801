"""Dense containers for volumes, probabilities, labels and patch embeddings,
plus the bit-exact ``.json`` + ``.bin`` on-disk format.

Disk layout: ``<stem>.json`` holds ``{shape, dtype, order, endian}`` and
``<stem>.bin`` holds the raw little-endian payload in row-major order with
the last axis fastest. Volumes are stored as float32, labels as int32;
loss/gradient arithmetic elsewhere in the package runs in float64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CorruptFileError, FormatError

ORDER = "row-major-D-fastest"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4"}

# Probability fields must have channel sums within this of 1.
PROB_SUM_TOL = 1e-5
UNIT_NORM_TOL = 1e-5


def _require_finite(a: np.ndarray, what: str) -> None:
    if not np.isfinite(a).all():
        raise ContractError(f"{what} contains NaN or Inf")


@dataclass(frozen=True)
class VolumeBatch:
    """Batch of single- or multi-channel volumes, shape (B, C, H, W, D), float32."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 5:
            raise ContractError(f"VolumeBatch needs 5 axes (B,C,H,W,D), got {a.ndim}")
        _require_finite(a, "VolumeBatch")
        object.__setattr__(self, "data", np.ascontiguousarray(a))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ProbabilityField:
    """Per-voxel class probabilities, shape (B, C, H, W, D).

    Every value must lie in [0, 1] and each voxel's channel sum must be
    1 within ``PROB_SUM_TOL``.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 5:
            raise ContractError(f"ProbabilityField needs 5 axes, got {a.ndim}")
        _require_finite(a, "ProbabilityField")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ContractError("ProbabilityField values must lie in [0, 1]")
        sums = a.sum(axis=1, dtype=np.float64)
        err = np.abs(sums - 1.0).max()
        if err > PROB_SUM_TOL:
            raise ContractError(
                f"ProbabilityField channel sums deviate from 1 by up to {err:.3g}"
            )
        object.__setattr__(self, "data", np.ascontiguousarray(a))

    @property
    def shape(self):
        return self.data.shape

    @property
    def classes(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class LabelField:
    """Integer class per voxel, shape (B, H, W, D), values in {0..classes-1}."""

    data: np.ndarray
    classes: int = 2

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 4:
            raise ContractError(f"LabelField needs 4 axes (B,H,W,D), got {a.ndim}")
        if not np.issubdtype(a.dtype, np.integer):
            raise ContractError("LabelField data must be integer")
        a = a.astype(np.int32, copy=False)
        if a.min() < 0 or a.max() >= self.classes:
            raise ContractError(
                f"LabelField values outside [0, {self.classes - 1}]"
            )
        object.__setattr__(self, "data", np.ascontiguousarray(a))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class PatchEmbeddings:
    """Averaged, optionally L2-normalized patch vectors for one volume.

    ``vectors`` has shape (P, E) with P = k**3 for the configured grid size k;
    ``patch_class`` assigns each patch an integer class.
    """

    vectors: np.ndarray
    patch_class: np.ndarray
    source: str  # "student" | "teacher"
    grid_k: int
    normalized: bool = True

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        c = np.ascontiguousarray(np.asarray(self.patch_class, dtype=np.int64))
        if self.source not in ("student", "teacher"):
            raise ContractError(f"unknown embedding source {self.source!r}")
        if v.ndim != 2:
            raise ContractError("PatchEmbeddings.vectors must be 2-D (P, E)")
        if v.shape[0] != self.grid_k ** 3:
            raise ContractError(
                f"expected {self.grid_k ** 3} patches for k={self.grid_k}, got {v.shape[0]}"
            )
        if c.shape != (v.shape[0],):
            raise ContractError("patch_class length must equal patch count")
        _require_finite(v, "PatchEmbeddings")
        if self.normalized:
            norms = np.linalg.norm(v, axis=1)
            if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
                raise ContractError("normalized embeddings must have unit L2 norm")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "patch_class", c)


# ---------------------------------------------------------------------------
# Raw array I/O (also used for checkpoints).


def _stem(path: str) -> str:
    return path[:-4] if path.endswith(".bin") else path


def write_array(a: np.ndarray, path: str) -> str:
    """Write an array as ``<stem>.json`` + ``<stem>.bin``. Returns the stem."""
    stem = _stem(str(path))
    a = np.ascontiguousarray(a)
    name = None
    for dname, code in _DTYPES.items():
        if np.dtype(code) == a.dtype.newbyteorder("<"):
            name = dname
            break
    if name is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    header = {
        "shape": list(a.shape),
        "dtype": name,
        "order": ORDER,
        "endian": "little",
    }
    payload = a.astype(_DTYPES[name]).tobytes(order="C")
    with open(stem + ".json", "w") as fh:
        json.dump(header, fh)
        fh.write("\n")
    with open(stem + ".bin", "wb") as fh:
        fh.write(payload)
    return stem


def read_array(path: str) -> np.ndarray:
    stem = _stem(str(path))
    sidecar = stem + ".json"
    if not os.path.exists(sidecar):
        raise FormatError(f"missing sidecar header {sidecar}")
    with open(sidecar) as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"unreadable sidecar {sidecar}: {e}") from e
    for key in ("shape", "dtype", "order", "endian"):
        if key not in header:
            raise FormatError(f"sidecar {sidecar} lacks '{key}'")
    if header["order"] != ORDER:
        raise FormatError(f"unsupported element order {header['order']!r}")
    if header["endian"] != "little":
        raise FormatError(f"unsupported endianness {header['endian']!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"unsupported dtype {header['dtype']!r}")
    shape = tuple(int(s) for s in header["shape"])
    dtype = np.dtype(_DTYPES[header["dtype"]])
    n = int(np.prod(shape)) if shape else 1
    with open(stem + ".bin", "rb") as fh:
        payload = fh.read()
    if len(payload) != n * dtype.itemsize:
        raise CorruptFileError(
            f"{stem}.bin holds {len(payload)} bytes, header implies {n * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_volume(v: VolumeBatch | LabelField, path: str) -> str:
    """Persist a volume or label field. Round-trips bitwise."""
    return write_array(v.data, path)


def read_volume(path: str) -> VolumeBatch | LabelField:
    """Load a container written by :func:`write_volume`.

    5-D float32 payloads come back as VolumeBatch, 4-D int32 as LabelField;
    anything else is a format error.
    """
    a = read_array(path)
    if a.ndim == 5 and a.dtype == np.float32:
        return VolumeBatch(a)
    if a.ndim == 4 and a.dtype == np.int32:
        return LabelField(a, classes=int(a.max()) + 1 if a.size else 2)
    raise FormatError(
        f"payload of shape {a.shape} dtype {a.dtype} is neither a volume nor a label field"
    )
