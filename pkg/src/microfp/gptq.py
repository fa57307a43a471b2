"""GPTQ second-order weight quantization and the micro-rotated variant.

The solver follows the classic fixed-order formulation: dampen the
calibration Hessian, take the upper Cholesky factor of its inverse, then
quantize column by column, folding each column's rounding error into the
not-yet-quantized columns (lazily, in blocks).  ``obq_fixed_order`` is the
O(d^4) reference that re-inverts the remaining Hessian at every step; the
fast path must match it bit for bit.

Micro-rotated GPTQ adds a block Hadamard fused into the weights (with the
Hessian conjugated to match), MSE- or range-fitted scales, and static
activation reordering: scales are fixed on the original column order,
columns are shuffled by descending Hessian diagonal for the solve, and
shuffled back afterwards so the group layout of the output is unchanged.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.linalg

from .errors import DataError, NumericalError
from .formats import FormatSpec, ScaleKind, fp4_round_codes, pack_tensor
from .quantizers import (
    GroupScales,
    QuantResult,
    ScaleMode,
    ScalePolicy,
    _matrix_metrics,
    optimize_group_scales,
    prepare_scales,
)
from .transforms import TransformKind, TransformSpec, apply_blockwise, transform_matrix

__all__ = [
    "GptqConfig",
    "Hessian",
    "accumulate_hessian",
    "conjugated_hessian",
    "dampened_hessian",
    "gptq_quantize",
    "mr_gptq",
    "obq_fixed_order",
    "proxy_loss",
    "static_act_order",
]


@dataclasses.dataclass
class GptqConfig:
    dampening: float = 1e-2
    block_width: int = 128
    act_order: bool = False
    scale_policy: ScalePolicy = dataclasses.field(default_factory=ScalePolicy)
    transform: TransformSpec | None = None

    def __post_init__(self):
        if self.dampening <= 0:
            raise DataError("dampening must be positive")
        if self.block_width < 1:
            raise DataError("block width must be positive")


class Hessian:
    """Accumulator for 2 * X^T X over calibration batches."""

    def __init__(self, n_cols: int):
        self.matrix = np.zeros((n_cols, n_cols))
        self.sample_count = 0

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[0]

    def finalized(self) -> np.ndarray:
        """Sample-count-normalized Hessian."""
        return self.matrix / max(self.sample_count, 1)


def accumulate_hessian(X_batch, state: Hessian) -> Hessian:
    """Add a calibration batch (n_samples, n_cols) into the running Hessian."""
    X = np.asarray(X_batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.n_cols:
        raise DataError(
            f"batch with {X.shape[-1] if X.ndim == 2 else '?'} columns "
            f"does not match Hessian size {state.n_cols}"
        )
    if not np.isfinite(X).all():
        raise DataError("non-finite element in calibration batch")
    state.matrix += 2.0 * (X.T @ X)
    state.sample_count += X.shape[0]
    return state


def _hessian_matrix(H) -> np.ndarray:
    if isinstance(H, Hessian):
        return H.finalized()
    Hm = np.asarray(H, dtype=np.float64)
    if Hm.ndim != 2 or Hm.shape[0] != Hm.shape[1]:
        raise DataError("Hessian must be square")
    return Hm


def static_act_order(H) -> np.ndarray:
    """Column permutation by descending Hessian diagonal (stable ties)."""
    diag = np.diag(_hessian_matrix(H))
    return np.argsort(-diag, kind="stable")


def dampened_hessian(H, cfg: GptqConfig) -> np.ndarray:
    """Replace dead diagonals by the mean, then add dampening * mean * I."""
    Hm = np.array(_hessian_matrix(H), copy=True)
    d = np.diag(Hm).copy()
    mean0 = float(d.mean())
    if mean0 <= 0:
        mean0 = 1.0
    dead = d == 0
    d[dead] = mean0
    Hm[np.diag_indices_from(Hm)] = d + cfg.dampening * float(d.mean())
    return Hm


def _inverse_factor(Hd: np.ndarray) -> np.ndarray:
    """Upper-triangular T with inv(Hd) = T.T @ T."""
    try:
        L = np.linalg.cholesky(Hd)
        Hinv = scipy.linalg.cho_solve((L, True), np.eye(Hd.shape[0]))
        return scipy.linalg.cholesky(Hinv, lower=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "Hessian Cholesky failed even after dampening; increase the dampening factor"
        ) from exc


def _per_column_scales(gscales: GroupScales, cols: int) -> np.ndarray:
    """(rows, cols) effective scale for each weight, original column order."""
    g = gscales.spec.group_size
    return np.repeat(gscales.effective(), g, axis=1)[:, :cols]


def _quantize_column(w, s, normalized: bool):
    codes, vals = fp4_round_codes(w / s, normalized=normalized)
    return codes, s * vals


def _gptq_core(Wp, T, col_scales, normalized: bool, block_width: int):
    """Column-serial quantization with lazy block error propagation."""
    W = np.array(Wp, copy=True)
    r, d = W.shape
    Q = np.zeros_like(W)
    codes = np.zeros((r, d), dtype=np.uint8)
    for i1 in range(0, d, block_width):
        i2 = min(i1 + block_width, d)
        Err = np.zeros((r, i2 - i1))
        for i in range(i1, i2):
            c, q = _quantize_column(W[:, i], col_scales[:, i], normalized)
            Q[:, i] = q
            codes[:, i] = c
            e = (W[:, i] - q) / T[i, i]
            Err[:, i - i1] = e
            if i + 1 < i2:
                W[:, i + 1:i2] -= np.outer(e, T[i, i + 1:i2])
        if i2 < d:
            W[:, i2:] -= Err @ T[i1:i2, i2:]
    return Q, codes


def conjugated_hessian(Hm: np.ndarray, transform: TransformSpec) -> np.ndarray:
    if transform.kind is TransformKind.IDENTITY:
        return Hm
    d = Hm.shape[0]
    k = transform.block
    if d % k != 0:
        raise DataError(f"Hessian size ({d}) not divisible by transform block ({k})")
    Ubd = np.kron(np.eye(d // k), transform_matrix(transform))
    return Ubd.T @ Hm @ Ubd


def gptq_quantize(W, H, spec: FormatSpec, cfg: GptqConfig | None = None) -> QuantResult:
    """Quantize a weight matrix against a calibration Hessian.

    Pipeline: fuse the transform into W (conjugating H), fix group scales on
    the current column order, optionally permute by descending Hessian
    diagonal, run the Cholesky solver, then un-permute so the output groups
    match the original layout.
    """
    cfg = cfg or GptqConfig()
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DataError("expected a 2-D weight matrix")
    if not np.isfinite(W).all():
        raise DataError("non-finite element in weights")
    rows, cols = W.shape
    if cols % spec.group_size != 0:
        raise DataError(f"columns ({cols}) not divisible by group size ({spec.group_size})")
    Hm = _hessian_matrix(H)
    if Hm.shape[0] != cols:
        raise DataError("Hessian size does not match the weight columns")

    if cfg.transform is not None:
        Wt = apply_blockwise(W, cfg.transform)
        Hm = conjugated_hessian(Hm, cfg.transform)
    else:
        Wt = W

    if cfg.scale_policy.mode is ScaleMode.MSE:
        gscales = optimize_group_scales(Wt, spec, cfg.scale_policy)
    else:
        gscales = prepare_scales(Wt, spec, cfg.scale_policy)
    col_scales = _per_column_scales(gscales, cols)
    normalized = gscales.normalized_elements

    if cfg.act_order:
        perm = static_act_order(Hm)
        Wp = Wt[:, perm]
        Hp = Hm[np.ix_(perm, perm)]
        sp = col_scales[:, perm]
    else:
        perm = None
        Wp, Hp, sp = Wt, Hm, col_scales

    T = _inverse_factor(dampened_hessian(Hp, cfg))
    Q, codes = _gptq_core(Wp, T, sp, normalized, cfg.block_width)

    if perm is not None:
        inv = np.argsort(perm)
        Q = Q[:, inv]
        codes = codes[:, inv]

    tensor = pack_tensor(
        codes, gscales.codes.reshape(-1), spec, (rows, cols),
        tensor_scale=gscales.tensor_scale, transform=cfg.transform,
        scale_fit=gscales.scale_fit,
    )
    mse_rel, mse_top_rel = _matrix_metrics(Wt, Q, spec.group_size)
    return QuantResult(tensor, mse_rel, mse_top_rel)


def obq_fixed_order(W, H, spec: FormatSpec, scales) -> np.ndarray:
    """Slow fixed-order OBQ oracle: exact re-inversion at every column.

    ``H`` must already include any dampening (pass ``dampened_hessian``
    output to compare against gptq_quantize).  ``scales`` is a GroupScales
    for the contiguous-group layout, or an explicit ((rows, cols) effective
    scale array, normalized_elements flag) pair when the columns carry
    permuted scale assignments.  Returns the quantized-value matrix;
    intended for small test instances only (O(d^4)).
    """
    W = np.array(np.asarray(W, dtype=np.float64), copy=True)
    Hm = _hessian_matrix(H)
    rows, cols = W.shape
    if isinstance(scales, GroupScales):
        col_scales = _per_column_scales(scales, cols)
        normalized = scales.normalized_elements
    else:
        col_scales, normalized = scales
        col_scales = np.asarray(col_scales, dtype=np.float64)
    Q = np.zeros_like(W)
    for i in range(cols):
        try:
            Hinv = np.linalg.inv(Hm[i:, i:])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular Hessian submatrix at column {i}") from exc
        _, q = _quantize_column(W[:, i], col_scales[:, i], normalized)
        Q[:, i] = q
        err = W[:, i] - q
        if i + 1 < cols:
            W[:, i + 1:] -= np.outer(err, Hinv[0, 1:] / Hinv[0, 0])
    return Q


def mr_gptq(W, H, spec: FormatSpec, cfg: GptqConfig | None = None,
            transform: TransformSpec | None = None) -> QuantResult:
    """GPTQ with block rotation, format-specific scales, and static reordering.

    Defaults per format: Hadamard block = group size; E4M3-scale formats get
    MSE-optimized scales, E8M0 formats absmax scales with the fitted grid
    (Hadamard blocks above 128 are rejected for E8M0).  Pass an explicit
    ``transform`` (e.g. Identity) to degenerate into plain gptq_quantize.
    """
    base = cfg or GptqConfig()
    if transform is None:
        transform = base.transform
    if transform is None:
        transform = TransformSpec.hadamard(spec.group_size)
    kind = spec.scale.kind
    if kind is ScaleKind.E8M0 and transform.block > 128:
        raise DataError("MR-GPTQ Hadamard blocks are limited to 128 for E8M0 formats")
    if kind is ScaleKind.FPEM:
        policy = ScalePolicy(mode=ScaleMode.MSE)
    elif kind is ScaleKind.E8M0:
        policy = ScalePolicy(mode=ScaleMode.ABSMAX, scale_fit="auto")
    else:
        policy = base.scale_policy
    forced = dataclasses.replace(
        base, transform=transform, scale_policy=policy, act_order=True
    )
    return gptq_quantize(W, H, spec, forced)


def proxy_loss(W, W_hat, H) -> float:
    """Layer reconstruction objective ||X W_hat^T - X W^T||_F^2.

    Uses the accumulated (unnormalized) Hessian 2 X^T X, so the value matches
    the loss over the full calibration set.
    """
    E = np.asarray(W_hat, dtype=np.float64) - np.asarray(W, dtype=np.float64)
    M = H.matrix if isinstance(H, Hessian) else np.asarray(H, dtype=np.float64)
    return float(0.5 * np.sum((E @ M) * E))
