"""Block-diagonal orthogonal transforms applied to matrix rows before quantization.

Each row is split into contiguous ``block``-wide slices and every slice is
rotated by the same k x k orthogonal matrix U (column-vector convention
``y = U x``; the inverse applies U^T).  Hadamard blocks use the Sylvester
construction scaled by 1/sqrt(k); DCT/DST are the orthonormal type-II
variants.  Accumulation is always in float64.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np
import scipy.fft

from .errors import DataError

__all__ = [
    "TransformKind",
    "TransformSpec",
    "apply_blockwise",
    "fuse_into_weights",
    "transform_matrix",
]


class TransformKind(enum.Enum):
    IDENTITY = "identity"
    HADAMARD = "hadamard"
    DCT2 = "dct"
    DST2 = "dst"


@dataclasses.dataclass(frozen=True)
class TransformSpec:
    kind: TransformKind
    block: int

    def __post_init__(self):
        if self.block < 1:
            raise DataError("transform block size must be positive")
        if self.kind is TransformKind.HADAMARD and self.block & (self.block - 1):
            raise DataError(f"Hadamard block size must be a power of two, got {self.block}")

    @classmethod
    def identity(cls, block: int = 1) -> "TransformSpec":
        return cls(TransformKind.IDENTITY, block)

    @classmethod
    def hadamard(cls, block: int) -> "TransformSpec":
        return cls(TransformKind.HADAMARD, block)


def _sylvester(k: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < k:
        h = np.block([[h, h], [h, -h]])
    return h


def transform_matrix(spec: TransformSpec) -> np.ndarray:
    """The normalized k x k block: U with U @ U.T == I."""
    k = spec.block
    if spec.kind is TransformKind.IDENTITY:
        return np.eye(k)
    if spec.kind is TransformKind.HADAMARD:
        return _sylvester(k) / np.sqrt(k)
    if spec.kind is TransformKind.DCT2:
        return scipy.fft.dct(np.eye(k), type=2, axis=0, norm="ortho")
    if spec.kind is TransformKind.DST2:
        return scipy.fft.dst(np.eye(k), type=2, axis=0, norm="ortho")
    raise DataError(f"unknown transform kind {spec.kind}")


def apply_blockwise(X, spec: TransformSpec | None, inverse: bool = False) -> np.ndarray:
    """Rotate each k-wide column slice of every row by U (or U^T if inverse)."""
    X = np.asarray(X, dtype=np.float64)
    if spec is None or spec.kind is TransformKind.IDENTITY:
        return np.array(X, copy=True)
    k = spec.block
    if X.ndim != 2:
        raise DataError("expected a 2-D matrix")
    rows, cols = X.shape
    if cols % k != 0:
        raise DataError(f"columns ({cols}) not divisible by transform block ({k})")
    U = transform_matrix(spec)
    M = U if inverse else U.T  # row-vector form of y = U x / x = U^T y
    out = X.reshape(rows, cols // k, k) @ M
    return out.reshape(rows, cols)


def fuse_into_weights(W, spec: TransformSpec | None) -> np.ndarray:
    """Forward-rotate a weight matrix so the rotation is baked into storage.

    The result must be matched by rotating activations with the same spec;
    the container records the transform so reconstruction can undo it.
    """
    return apply_blockwise(W, spec, inverse=False)
