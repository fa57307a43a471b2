"""Bit-exact codecs for FP4 (E2M1) elements and 8-bit group-scale formats.

Element codes are 4-bit sign/exponent/mantissa patterns (1/2/1).  Scale
codes come in four flavours:

* ``E8M0``      -- pure power-of-two exponent byte, bias 127, code 255 reserved.
* ``FpEM(e,m)`` -- generic minifloat with ``e`` exponent and ``m`` mantissa
  bits (sign bit unused, scales are non-negative), subnormals included,
  the all-ones pattern reserved.  E4M3 is the (4, 3) instance with max 448.
* ``Int8Linear`` -- 256 uniformly spaced levels over an attached
  calibration range ``[lo, hi]``.
* ``Unquantized`` -- the raw per-group scale is kept as a float64.  In this
  mode the stored scale equals the group absmax and element codes address
  the absmax-normalized grid (FP4 values / 6), so the block maximum
  round-trips exactly.

All encoders round to nearest with ties to the even mantissa bit and
saturate at the format maximum.
"""

from __future__ import annotations

import dataclasses
import enum

import numpy as np

from .errors import DataError

__all__ = [
    "FP4_CODE_VALUES",
    "FP4_GRID",
    "FP4_MAX",
    "FormatSpec",
    "MfpTensor",
    "ScaleFormat",
    "ScaleKind",
    "dequantize",
    "e8m0_decode",
    "e8m0_encode",
    "fp4_decode",
    "fp4_encode",
    "fp4_round",
    "fp_scale_decode",
    "fp_scale_encode",
    "pack_tensor",
    "unpack_tensor",
]

# Positive E2M1 values; code = sign<<3 | exp<<1 | mant.
FP4_GRID = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
FP4_MAX = 6.0
FP4_CODE_VALUES = np.concatenate([FP4_GRID, -FP4_GRID])  # index == 4-bit code
# Grid normalized to [-1, 1]; used with the Unquantized scale format.
FP4_GRID_NORMALIZED = FP4_GRID / FP4_MAX

_FP4_MIDS = (FP4_GRID[:-1] + FP4_GRID[1:]) / 2.0
# At a midpoint tie, rounding toward even mantissa selects the upper level
# exactly when the lower one has mantissa bit 1 (values 0.5, 1.5, 3.0).
_FP4_TIE_UP = np.array([False, True, False, True, False, True, False])


def fp4_round(x):
    """Round to the nearest E2M1 grid value.

    Saturates beyond +-6; ties go to the even mantissa bit (0.25 -> 0,
    0.75 -> 1, 2.5 -> 2, 3.5 -> 4, 5 -> 4).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise DataError("non-finite element")
    mag = np.abs(x)
    idx = np.searchsorted(_FP4_MIDS, mag, side="left")
    at_mid = np.minimum(idx, _FP4_MIDS.size - 1)
    bump = (idx < _FP4_MIDS.size) & (mag == _FP4_MIDS[at_mid]) & _FP4_TIE_UP[at_mid]
    idx = np.minimum(idx + bump, FP4_GRID.size - 1)
    out = np.where(np.signbit(x), -FP4_GRID[idx], FP4_GRID[idx])
    return out if out.ndim else float(out)


def _rtn_even(values, levels):
    """RTN of non-negative ``values`` onto ascending ``levels`` (index result).

    Ties at exact midpoints resolve to the even index, which for minifloat
    level tables is the even mantissa bit.
    """
    mids = (levels[:-1] + levels[1:]) / 2.0
    idx = np.searchsorted(mids, values, side="left")
    at_mid = np.minimum(idx, mids.size - 1)
    bump = (idx < mids.size) & (values == mids[at_mid]) & (at_mid % 2 == 1)
    return np.minimum(idx + bump, levels.size - 1)


def fp4_round_codes(x, normalized: bool = False):
    """fp4_round returning 4-bit codes and rounded values in one pass.

    With ``normalized=True`` the grid is FP4/6 (max level 1.0), which is the
    element codec used together with the Unquantized scale format.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise DataError("non-finite element")
    grid = FP4_GRID_NORMALIZED if normalized else FP4_GRID
    mids = (grid[:-1] + grid[1:]) / 2.0
    mag = np.abs(x)
    idx = np.searchsorted(mids, mag, side="left")
    at_mid = np.minimum(idx, mids.size - 1)
    bump = (idx < mids.size) & (mag == mids[at_mid]) & _FP4_TIE_UP[at_mid]
    idx = np.minimum(idx + bump, grid.size - 1)
    neg = np.signbit(x) & (idx > 0)
    codes = (idx + np.where(neg, 8, 0)).astype(np.uint8)
    values = np.where(np.signbit(x), -grid[idx], grid[idx])
    return codes, values


def fp4_encode(values):
    """Encode exact grid values to 4-bit codes (-0.0 canonicalizes to 0)."""
    v = np.asarray(values, dtype=np.float64)
    mag = np.abs(v)
    idx = np.searchsorted(FP4_GRID, mag)
    if not np.array_equal(FP4_GRID[np.minimum(idx, 7)], mag):
        raise DataError("value not on the FP4 grid")
    neg = (v < 0) & (mag > 0)
    codes = (idx + np.where(neg, 8, 0)).astype(np.uint8)
    return codes if codes.ndim else np.uint8(codes)


def fp4_decode(codes):
    """Decode 4-bit codes to grid values; both zero patterns give 0.0."""
    c = np.asarray(codes)
    if c.size and (c.min() < 0 or c.max() > 15):
        raise DataError("FP4 code out of range")
    out = FP4_CODE_VALUES[c.astype(np.intp)]
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Scale formats
# ---------------------------------------------------------------------------

class ScaleKind(enum.Enum):
    E8M0 = "e8m0"
    FPEM = "fpem"
    INT8_LINEAR = "int8"
    UNQUANTIZED = "unquantized"


@dataclasses.dataclass(frozen=True)
class ScaleFormat:
    """Description of the codec used for per-group scales."""

    kind: ScaleKind
    exp_bits: int = 0
    mant_bits: int = 0
    bias: int = 0
    lo: float | None = None  # Int8Linear calibration range
    hi: float | None = None

    @classmethod
    def e8m0(cls) -> "ScaleFormat":
        return cls(ScaleKind.E8M0, exp_bits=8, mant_bits=0, bias=127)

    @classmethod
    def fpem(cls, exp_bits: int, mant_bits: int, bias: int | None = None) -> "ScaleFormat":
        if exp_bits < 1 or mant_bits < 0 or exp_bits + mant_bits > 7:
            raise DataError("FpEM requires e >= 1 and e + m <= 7 (sign bit unused)")
        if bias is None:
            bias = 2 ** (exp_bits - 1) - 1
        return cls(ScaleKind.FPEM, exp_bits=exp_bits, mant_bits=mant_bits, bias=bias)

    @classmethod
    def e4m3(cls) -> "ScaleFormat":
        return cls.fpem(4, 3)

    @classmethod
    def int8_linear(cls, lo: float | None = None, hi: float | None = None) -> "ScaleFormat":
        if lo is not None and hi is not None and hi < lo:
            raise DataError("Int8Linear calibration range must have hi >= lo")
        return cls(ScaleKind.INT8_LINEAR, lo=lo, hi=hi)

    @classmethod
    def unquantized(cls) -> "ScaleFormat":
        return cls(ScaleKind.UNQUANTIZED)

    @property
    def n_codes(self) -> int:
        if self.kind is ScaleKind.FPEM:
            return 1 << (self.exp_bits + self.mant_bits)
        return 256

    def levels(self) -> np.ndarray:
        """Representable values, indexed by code (NaN marks reserved codes)."""
        if self.kind is ScaleKind.E8M0:
            vals = np.ldexp(1.0, np.arange(256) - self.bias)
            vals[255] = np.nan  # reserved
            return vals
        if self.kind is ScaleKind.FPEM:
            codes = np.arange(self.n_codes)
            exp = codes >> self.mant_bits
            mant = codes & ((1 << self.mant_bits) - 1)
            sub = mant * 2.0 ** (1 - self.bias - self.mant_bits)
            norm = (1.0 + mant * 2.0 ** -self.mant_bits) * np.ldexp(1.0, exp - self.bias)
            vals = np.where(exp == 0, sub, norm)
            vals[-1] = np.nan  # exp and mantissa all ones: reserved
            return vals
        if self.kind is ScaleKind.INT8_LINEAR:
            if self.lo is None or self.hi is None:
                raise DataError("Int8Linear scale format is uncalibrated")
            return self.lo + np.arange(256) * (self.hi - self.lo) / 255.0
        raise DataError("unquantized scales have no code table")

    @property
    def max_value(self) -> float:
        if self.kind is ScaleKind.E8M0:
            return float(2.0 ** 127)
        lv = self.levels()
        return float(np.nanmax(lv))


def e8m0_encode(s):
    """Encode positive reals to E8M0 bytes: clamp(rint(log2 s), -127, 127) + 127."""
    s = np.asarray(s, dtype=np.float64)
    if not (np.isfinite(s).all() and (s > 0).all()):
        raise DataError("E8M0 scale must be finite and positive")
    e = np.clip(np.rint(np.log2(s)), -127, 127)
    out = (e + 127).astype(np.uint8)
    return out if out.ndim else np.uint8(out)


def e8m0_decode(codes):
    """Decode E8M0 bytes to 2**(code - 127); code 255 is reserved."""
    c = np.asarray(codes)
    if c.size and (c.min() < 0 or c.max() > 254):
        raise DataError("E8M0 code out of range (255 is reserved)")
    out = np.ldexp(1.0, c.astype(np.int64) - 127)
    return out if out.ndim else float(out)


def fp_scale_encode(s, fmt: ScaleFormat):
    """Encode positive scales with the given format (RNE + saturation)."""
    s = np.asarray(s, dtype=np.float64)
    if not (np.isfinite(s).all() and (s > 0).all()):
        raise DataError("scale must be finite and positive")
    if fmt.kind is ScaleKind.E8M0:
        return e8m0_encode(s)
    if fmt.kind is ScaleKind.FPEM:
        lv = fmt.levels()
        finite = lv[~np.isnan(lv)]  # reserved code is the last one
        idx = _rtn_even(s, finite)
        out = idx.astype(np.uint8)
        return out if out.ndim else np.uint8(out)
    if fmt.kind is ScaleKind.INT8_LINEAR:
        if fmt.lo is None or fmt.hi is None:
            raise DataError("Int8Linear scale format is uncalibrated")
        span = fmt.hi - fmt.lo
        if span <= 0:
            codes = np.zeros(s.shape, dtype=np.uint8)
            return codes if codes.ndim else np.uint8(0)
        q = np.clip(np.rint((s - fmt.lo) * (255.0 / span)), 0, 255)
        out = q.astype(np.uint8)
        return out if out.ndim else np.uint8(out)
    raise DataError("unquantized scales are not encoded")


def fp_scale_decode(codes, fmt: ScaleFormat):
    """Decode scale codes to their real values."""
    if fmt.kind is ScaleKind.E8M0:
        return e8m0_decode(codes)
    if fmt.kind is ScaleKind.UNQUANTIZED:
        out = np.asarray(codes, dtype=np.float64)
        return out if out.ndim else float(out)
    lv = fmt.levels()
    c = np.asarray(codes).astype(np.intp)
    if c.size and (c.min() < 0 or c.max() >= lv.size):
        raise DataError("scale code out of range")
    out = lv[c]
    if np.isnan(out).any():
        raise DataError("reserved scale code")
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Tensor container
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class FormatSpec:
    """A microscaling format: group size, element codec, scale codec."""

    group_size: int
    scale: ScaleFormat
    global_scale: bool = False
    element: str = "fp4_e2m1"

    def __post_init__(self):
        if self.group_size < 1:
            raise DataError("group size must be positive")
        if self.element != "fp4_e2m1":
            raise DataError("only the FP4 E2M1 element codec is supported")

    @classmethod
    def mxfp4(cls) -> "FormatSpec":
        return cls(group_size=32, scale=ScaleFormat.e8m0(), global_scale=False)

    @classmethod
    def nvfp4(cls) -> "FormatSpec":
        return cls(group_size=16, scale=ScaleFormat.e4m3(), global_scale=True)


@dataclasses.dataclass(frozen=True)
class MfpTensor:
    """Packed quantized tensor: 4-bit codes, per-group scale codes, metadata.

    ``scale_codes`` is uint8 with shape (rows, cols // G) for coded scale
    formats and float64 raw scales for the Unquantized format.
    ``tensor_scale`` (float32 semantics) multiplies every group scale; it
    carries the NVFP4 global scale and/or the E8M0 4/3 rescale factor.
    ``scale_fit`` holds the (alpha, beta) exponent remap when the E8M0 grid
    was fitted to the data range; scale codes then decode to
    2**(alpha * code + beta).
    """

    spec: FormatSpec
    rows: int
    cols: int
    codes: np.ndarray           # packed uint8, two 4-bit codes per byte
    scale_codes: np.ndarray
    tensor_scale: float = 1.0
    transform: object | None = None  # TransformSpec; kept loose to avoid a cycle
    scale_fit: tuple[float, float] | None = None

    def __post_init__(self):
        g = self.spec.group_size
        if self.rows < 1 or self.cols < 1 or self.cols % g != 0:
            raise DataError(
                f"dims ({self.rows}, {self.cols}) not compatible with group size {g}"
            )
        n_groups = self.rows * (self.cols // g)
        if self.scale_codes.size != n_groups:
            raise DataError(
                f"expected {n_groups} scale codes, got {self.scale_codes.size}"
            )
        if self.codes.size != (self.rows * self.cols + 1) // 2:
            raise DataError("packed code buffer has the wrong size")
        kind = self.spec.scale.kind
        if self.scale_fit is not None and kind is not ScaleKind.E8M0:
            raise DataError("scale_fit is only valid with the E8M0 scale format")
        if kind is ScaleKind.UNQUANTIZED:
            if not np.issubdtype(self.scale_codes.dtype, np.floating):
                raise DataError("unquantized scales must be stored as floats")
        elif kind in (ScaleKind.E8M0, ScaleKind.FPEM):
            sc = self.scale_codes
            if sc.size:
                top = 254 if kind is ScaleKind.E8M0 else self.spec.scale.n_codes - 2
                if self.scale_fit is not None:
                    top = 255
                if int(sc.max()) > top:
                    raise DataError("reserved scale code in container")

    @property
    def n_groups(self) -> int:
        return self.rows * (self.cols // self.spec.group_size)

    def element_codes(self) -> np.ndarray:
        """Unpacked (rows, cols) array of 4-bit codes."""
        return _unpack_codes(self.codes, self.rows * self.cols).reshape(self.rows, self.cols)

    def group_scales(self) -> np.ndarray:
        """Decoded per-group scale values, tensor_scale *not* applied."""
        if self.scale_fit is not None:
            alpha, beta = self.scale_fit
            c = np.asarray(self.scale_codes, dtype=np.float64)
            return np.exp2(alpha * c + beta)
        return np.asarray(fp_scale_decode(self.scale_codes, self.spec.scale), dtype=np.float64)


def _pack_codes(flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.uint8)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    pairs = flat.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8)


def _unpack_codes(packed: np.ndarray, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


def pack_tensor(element_codes, scale_codes, spec: FormatSpec, dims=None,
                tensor_scale: float = 1.0, transform=None,
                scale_fit: tuple[float, float] | None = None) -> MfpTensor:
    """Bundle element and scale codes into an MfpTensor (low nibble first)."""
    ec = np.asarray(element_codes)
    if dims is None:
        if ec.ndim != 2:
            raise DataError("dims required for non-2D element codes")
        dims = ec.shape
    rows, cols = int(dims[0]), int(dims[1])
    if ec.size != rows * cols:
        raise DataError("element code count does not match dims")
    if ec.size and (ec.min() < 0 or ec.max() > 15):
        raise DataError("element code out of range")
    sc = np.asarray(scale_codes)
    sc = sc.reshape(-1) if spec.scale.kind is ScaleKind.UNQUANTIZED else sc.reshape(-1).astype(np.uint8)
    return MfpTensor(
        spec=spec, rows=rows, cols=cols,
        codes=_pack_codes(ec.reshape(-1)),
        scale_codes=sc,
        tensor_scale=float(np.float32(tensor_scale)),
        transform=transform,
        scale_fit=scale_fit,
    )


def unpack_tensor(t: MfpTensor):
    """Inverse of pack_tensor: (element_codes, scale_codes)."""
    return t.element_codes(), np.array(t.scale_codes, copy=True)


def dequantize(t: MfpTensor) -> np.ndarray:
    """Reconstruct the (rows, cols) real matrix from a container.

    Does not undo the recorded transform; see ``quantizers.reconstruct``.
    With coded scale formats each element is
    ``tensor_scale * scale * fp4_value``; with Unquantized scales it is
    ``tensor_scale * absmax * (fp4_value / 6)`` so the stored block maximum
    is reproduced exactly.
    """
    g = t.spec.group_size
    codes = t.element_codes()
    scales = t.group_scales().reshape(t.rows, t.cols // g)
    if t.spec.scale.kind is ScaleKind.UNQUANTIZED:
        table = np.concatenate([FP4_GRID_NORMALIZED, -FP4_GRID_NORMALIZED])
    else:
        table = FP4_CODE_VALUES
    vals = table[codes.astype(np.intp)].reshape(t.rows, t.cols // g, g)
    out = t.tensor_scale * scales[:, :, None] * vals
    return out.reshape(t.rows, t.cols)
