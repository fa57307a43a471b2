"""Round-to-nearest microscaling quantization pipelines.

Covers absmax group scaling, scale-code quantization (including the 4/3
E8M0 rescale and range-fitted E8M0 grids), alternating MSE scale search,
and reconstruction.  Groups are contiguous runs of ``G`` elements within a
row; scales are stored row-major, one per group.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from . import formats
from .errors import DataError
from .formats import FormatSpec, MfpTensor, ScaleKind, fp4_round_codes, fp_scale_encode, pack_tensor
from .transforms import TransformSpec, apply_blockwise

__all__ = [
    "GroupScales",
    "QuantResult",
    "ScaleMode",
    "ScalePolicy",
    "absmax_group_scale",
    "fit_e8m0_range",
    "mse_optimize_scales",
    "prepare_scales",
    "quantize_rtn",
    "reconstruct",
]

FOUR_THIRDS = 4.0 / 3.0
# Multiplier grid for the MSE scale search, shrink-dominant around absmax.
MSE_SEARCH_MULTIPLIERS = np.linspace(0.50, 1.20, 128)
MSE_SEARCH_ROUNDS = 3
MSE_SEARCH_RTOL = 1e-12
_CHUNK_GROUPS = 2048


class ScaleMode(enum.Enum):
    ABSMAX = "absmax"
    MSE = "mse"


@dataclasses.dataclass(frozen=True)
class ScalePolicy:
    """How group scales are chosen and encoded.

    ``scale_fit`` is only meaningful with E8M0 scales: ``"auto"`` fits the
    exponent remap ``s = 2**(alpha*q + beta)`` to this tensor's raw scales,
    a tuple supplies (alpha, beta) directly.  When a fit is active the 4/3
    rescale is disabled (the fitted grid replaces it).
    """

    mode: ScaleMode = ScaleMode.ABSMAX
    e8m0_four_thirds: bool = True
    scale_fit: tuple[float, float] | str | None = None


@dataclasses.dataclass(frozen=True)
class QuantResult:
    tensor: MfpTensor
    mse_rel: float
    mse_top_rel: float


@dataclasses.dataclass
class GroupScales:
    """Per-group scale assignment for a (rows, cols) matrix.

    ``raw`` are the absmax-derived scales before encoding, shaped
    (rows, cols // G); ``codes`` the stored scale codes, ``decoded`` their
    decoded values.  ``tensor_scale`` multiplies every decoded scale (global
    NVFP4 scale and/or the 4/3 E8M0 factor, already float32-cast).
    """

    spec: FormatSpec
    raw: np.ndarray
    codes: np.ndarray
    decoded: np.ndarray
    tensor_scale: float
    scale_fit: tuple[float, float] | None = None

    @property
    def normalized_elements(self) -> bool:
        return self.spec.scale.kind is ScaleKind.UNQUANTIZED

    def effective(self) -> np.ndarray:
        """tensor_scale * decoded, shaped like ``raw``."""
        return self.tensor_scale * self.decoded


def _validated_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise DataError("expected a non-empty 2-D matrix")
    if not np.isfinite(X).all():
        raise DataError("non-finite element")
    return X


def _check_shapes(X, spec: FormatSpec, transform: TransformSpec | None):
    g = spec.group_size
    if X.shape[1] % g != 0:
        raise DataError(f"columns ({X.shape[1]}) not divisible by group size ({g})")
    if transform is not None and X.shape[1] % transform.block != 0:
        raise DataError(
            f"columns ({X.shape[1]}) not divisible by transform block ({transform.block})"
        )


def absmax_group_scale(block, spec: FormatSpec) -> float:
    """Raw scale for one group: absmax / 6 so the maximum hits the grid top.

    All-zero blocks return the 1.0 sentinel (their codes are all zero, so
    reconstruction stays exact).
    """
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 1 or block.size != spec.group_size:
        raise DataError(f"expected a block of length {spec.group_size}")
    if not np.isfinite(block).all():
        raise DataError("non-finite element")
    m = float(np.abs(block).max())
    return 1.0 if m == 0.0 else m / formats.FP4_MAX


def fit_e8m0_range(scales) -> tuple[float, float]:
    """Fit the E8M0 exponent remap to a set of positive scales.

    Returns (alpha, beta) with alpha = (log2 smax - log2 smin) / 255 and
    beta = log2 smin, so code q decodes to 2**(alpha*q + beta) and the range
    endpoints land exactly on codes 0 and 255.  All-equal scales yield the
    degenerate alpha = 0 (every code decodes to smin).
    """
    s = np.asarray(scales, dtype=np.float64).reshape(-1)
    if s.size == 0 or not (np.isfinite(s).all() and (s > 0).all()):
        raise DataError("scales must be finite and positive")
    lo, hi = np.log2(s.min()), np.log2(s.max())
    return (float((hi - lo) / 255.0), float(lo))


def _fit_encode(raw, fit: tuple[float, float]) -> np.ndarray:
    alpha, beta = fit
    if alpha == 0.0:
        return np.zeros(np.shape(raw), dtype=np.uint8)
    q = np.clip(np.rint((np.log2(raw) - beta) / alpha), 0, 255)
    return q.astype(np.uint8)


def _fit_decode(codes, fit: tuple[float, float]) -> np.ndarray:
    alpha, beta = fit
    return np.exp2(alpha * np.asarray(codes, dtype=np.float64) + beta)


def _encode_raw(raw, spec: FormatSpec, tensor_scale_global: float,
                fit: tuple[float, float] | None):
    """Encode raw group scales; returns (codes, decoded)."""
    if spec.scale.kind is ScaleKind.UNQUANTIZED:
        return np.array(raw, dtype=np.float64), np.array(raw, dtype=np.float64)
    enc_in = np.asarray(raw, dtype=np.float64) / tensor_scale_global
    if fit is not None:
        codes = _fit_encode(enc_in, fit)
        return codes, _fit_decode(codes, fit)
    codes = fp_scale_encode(enc_in, spec.scale)
    return codes, np.asarray(formats.fp_scale_decode(codes, spec.scale), dtype=np.float64)


def prepare_scales(Xt, spec: FormatSpec, policy: ScalePolicy | None = None) -> GroupScales:
    """Absmax-initialized scale assignment for a (post-transform) matrix."""
    policy = policy or ScalePolicy()
    Xt = _validated_matrix(Xt)
    _check_shapes(Xt, spec, None)
    g = spec.group_size
    rows, cols = Xt.shape
    absmax = np.abs(Xt.reshape(rows, cols // g, g)).max(axis=2)
    kind = spec.scale.kind

    if kind is ScaleKind.UNQUANTIZED:
        raw = np.where(absmax == 0.0, 1.0, absmax)
        return GroupScales(spec, raw, raw.copy(), raw.copy(), 1.0)

    if policy.scale_fit is not None and kind is not ScaleKind.E8M0:
        raise DataError("scale_fit is only valid with the E8M0 scale format")

    raw = np.where(absmax == 0.0, 1.0, absmax / formats.FP4_MAX)

    s_global, factor, fit = _scale_parts(absmax, spec, policy, raw)
    codes, decoded = _encode_raw(raw, spec, s_global, fit)
    tensor_scale = float(np.float32(s_global * factor))
    return GroupScales(spec, raw, codes, decoded, tensor_scale, fit)


def _scale_parts(absmax, spec: FormatSpec, policy: ScalePolicy, raw):
    """(global scale, policy factor, fit) making tensor_scale = global * factor."""
    s_global = 1.0
    if spec.global_scale and spec.scale.kind is ScaleKind.FPEM:
        top = float(absmax.max()) / formats.FP4_MAX
        s_global = float(np.float32(top / spec.scale.max_value)) if top > 0 else 1.0
    factor = 1.0
    fit = None
    if spec.scale.kind is ScaleKind.E8M0:
        if policy.scale_fit is not None:
            fit = fit_e8m0_range(raw) if policy.scale_fit == "auto" else tuple(policy.scale_fit)
        elif policy.e8m0_four_thirds:
            factor = FOUR_THIRDS
    return s_global, factor, fit


def _quantize_groups(B, eff, normalized: bool):
    """Quantize grouped values (..., G) against effective scales (...)."""
    u = B / eff[..., None]
    codes, vals = fp4_round_codes(u, normalized=normalized)
    return codes, eff[..., None] * vals


def _matrix_metrics(Xt, Xhat, g: int) -> tuple[float, float]:
    err2 = (Xt - Xhat) ** 2
    denom = float((Xt ** 2).sum())
    mse_rel = float(err2.sum() / denom) if denom > 0 else 0.0
    rows, cols = Xt.shape
    B = Xt.reshape(-1, g)
    Bh = Xhat.reshape(-1, g)
    it = np.argmax(np.abs(B), axis=1)
    rix = np.arange(B.shape[0])
    top = B[rix, it]
    e2 = (top - Bh[rix, it]) ** 2
    t2 = top ** 2
    ratios = np.divide(e2, t2, out=np.zeros_like(e2), where=t2 > 0)
    return mse_rel, float(ratios.mean())


def _assemble(Xt, spec, gscales: GroupScales, transform) -> QuantResult:
    g = spec.group_size
    rows, cols = Xt.shape
    B = Xt.reshape(rows, cols // g, g)
    codes, values = _quantize_groups(B, gscales.effective(), gscales.normalized_elements)
    tensor = pack_tensor(
        codes.reshape(rows, cols), gscales.codes.reshape(-1), spec, (rows, cols),
        tensor_scale=gscales.tensor_scale, transform=transform, scale_fit=gscales.scale_fit,
    )
    mse_rel, mse_top_rel = _matrix_metrics(Xt, values.reshape(rows, cols), g)
    return QuantResult(tensor, mse_rel, mse_top_rel)


def quantize_rtn(X, spec: FormatSpec, policy: ScalePolicy | None = None,
                 transform: TransformSpec | None = None) -> QuantResult:
    """Round-to-nearest quantization with absmax-initialized scales."""
    policy = policy or ScalePolicy()
    X = _validated_matrix(X)
    _check_shapes(X, spec, transform)
    Xt = apply_blockwise(X, transform) if transform is not None else X
    gscales = prepare_scales(Xt, spec, policy)
    return _assemble(Xt, spec, gscales, transform)


def _group_errors(B, eff, normalized: bool) -> np.ndarray:
    _, vals = _quantize_groups(B, eff, normalized)
    return ((B - vals) ** 2).sum(axis=-1)


def optimize_group_scales(Xt, spec: FormatSpec, policy: ScalePolicy | None = None) -> GroupScales:
    """Alternating MSE search over group scales and the per-tensor scale.

    Candidates are the absmax incumbent plus 128 multipliers of the absmax
    scale in [0.50, 1.20], each rounded through the scale codec before the
    error is measured; ties keep the earliest candidate.  The result never
    has a larger total squared error than the absmax initialization.
    """
    policy = policy or ScalePolicy(mode=ScaleMode.MSE)
    Xt = _validated_matrix(Xt)
    _check_shapes(Xt, spec, None)
    g = spec.group_size
    gs = prepare_scales(Xt, spec, policy)
    B = Xt.reshape(-1, g)
    raw0 = gs.raw.reshape(-1)
    normalized = gs.normalized_elements

    is_global = spec.global_scale and spec.scale.kind is ScaleKind.FPEM
    absmax = np.abs(B).max(axis=1)
    s_global, factor, _ = _scale_parts(absmax, spec, policy, gs.raw)

    codes = np.array(gs.codes.reshape(-1), copy=True)
    decoded = np.array(gs.decoded.reshape(-1), copy=True)
    cand_mults = np.concatenate([[1.0], MSE_SEARCH_MULTIPLIERS])

    def pass_groups(sg: float) -> float:
        """Best candidate per group at the current global scale; returns total err."""
        ts = float(np.float32(sg * factor))
        total = 0.0
        for lo in range(0, B.shape[0], _CHUNK_GROUPS):
            hi = min(lo + _CHUNK_GROUPS, B.shape[0])
            raws = cand_mults[:, None] * raw0[None, lo:hi]
            ccodes, cdec = _encode_raw(raws, spec, sg, gs.scale_fit)
            errs = _group_errors(B[None, lo:hi, :], ts * cdec, normalized)
            best = np.argmin(errs, axis=0)
            cix = np.arange(hi - lo)
            codes[lo:hi] = ccodes[best, cix]
            decoded[lo:hi] = cdec[best, cix]
            total += float(errs[best, cix].sum())
        return total

    def total_err(sg: float) -> float:
        ts = float(np.float32(sg * factor))
        return float(_group_errors(B, ts * decoded, normalized).sum())

    best_total = pass_groups(s_global)
    for _ in range(MSE_SEARCH_ROUNDS):
        if is_global:
            anchor = s_global
            improved_to = best_total
            for m in cand_mults[1:]:
                sg_c = float(np.float32(m * anchor))
                if sg_c > 0:
                    e = total_err(sg_c)
                    if e < improved_to:
                        improved_to, s_global = e, sg_c
        improved_to = pass_groups(s_global)
        if best_total - improved_to < MSE_SEARCH_RTOL * max(best_total, 1e-300):
            best_total = improved_to
            break
        best_total = improved_to

    return GroupScales(spec, gs.raw, codes.reshape(gs.raw.shape),
                       decoded.reshape(gs.raw.shape),
                       float(np.float32(s_global * factor)), gs.scale_fit)


def mse_optimize_scales(X, spec: FormatSpec, transform: TransformSpec | None = None,
                        policy: ScalePolicy | None = None) -> QuantResult:
    """quantize_rtn with MSE-optimized scales (never worse than absmax)."""
    policy = policy or ScalePolicy(mode=ScaleMode.MSE)
    X = _validated_matrix(X)
    _check_shapes(X, spec, transform)
    Xt = apply_blockwise(X, transform) if transform is not None else X
    gscales = optimize_group_scales(Xt, spec, policy)
    return _assemble(Xt, spec, gscales, transform)


def quantize(X, spec: FormatSpec, policy: ScalePolicy | None = None,
             transform: TransformSpec | None = None) -> QuantResult:
    """Dispatch on policy.mode between plain RTN and the MSE scale search."""
    policy = policy or ScalePolicy()
    if policy.mode is ScaleMode.MSE:
        return mse_optimize_scales(X, spec, transform=transform, policy=policy)
    return quantize_rtn(X, spec, policy=policy, transform=transform)


def reconstruct(t: MfpTensor) -> np.ndarray:
    """Dequantize and undo the recorded transform, estimating the original matrix."""
    out = formats.dequantize(t)
    if t.transform is not None:
        out = apply_blockwise(out, t.transform, inverse=True)
    return out
