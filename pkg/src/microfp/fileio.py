"""Binary tensor and quantized-container file formats.

TensorFile ("MFPT"): magic, version byte, dtype byte (0 = IEEE binary32),
ndim byte, reserved byte, then ndim little-endian uint64 dims and the
row-major float32 payload.

QuantFile ("MFPQ"): magic, version byte, uint32-LE header length, UTF-8
``key=value`` header lines, then the sections: packed 4-bit element codes,
scale codes (one byte per group, or float64-LE raw scales for the
Unquantized format), and an optional uint64-LE column permutation.  Floats
in the header are serialized with ``float.hex`` so round trips are
bit-exact.  Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import DataError
from .formats import FormatSpec, MfpTensor, ScaleFormat, ScaleKind
from .transforms import TransformKind, TransformSpec

__all__ = [
    "QUANT_MAGIC",
    "TENSOR_MAGIC",
    "read_quant",
    "read_tensor",
    "write_quant",
    "write_tensor",
]

TENSOR_MAGIC = b"MFPT"
QUANT_MAGIC = b"MFPQ"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file + rename so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".microfp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_tensor(path, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise DataError("TensorFile supports 1-D or 2-D arrays")
    payload = arr.astype("<f4").tobytes(order="C")
    head = TENSOR_MAGIC + struct.pack("<BBBB", FORMAT_VERSION, _DTYPE_F32, arr.ndim, 0)
    dims = b"".join(struct.pack("<Q", d) for d in arr.shape)
    atomic_write_bytes(path, head + dims + payload)


def read_tensor(path) -> np.ndarray:
    """Read a TensorFile; returns float64 (payload is stored as float32)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != TENSOR_MAGIC:
        raise DataError(f"{path}: not a TensorFile")
    version, dtype, ndim, _ = struct.unpack("<BBBB", blob[4:8])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported TensorFile version {version}")
    if dtype != _DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {dtype}")
    if ndim not in (1, 2):
        raise DataError(f"{path}: bad ndim {ndim}")
    need = 8 + 8 * ndim
    if len(blob) < need:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f"<{ndim}Q", blob[8:need])
    count = int(np.prod(dims)) if dims else 0
    if len(blob) != need + 4 * count:
        raise DataError(f"{path}: payload size mismatch")
    data = np.frombuffer(blob[need:], dtype="<f4", count=count)
    return data.astype(np.float64).reshape(dims)


def _scale_tag(fmt: ScaleFormat) -> str:
    if fmt.kind is ScaleKind.E8M0:
        return "e8m0"
    if fmt.kind is ScaleKind.FPEM:
        if (fmt.exp_bits, fmt.mant_bits, fmt.bias) == (4, 3, 7):
            return "e4m3"
        return f"fpem:{fmt.exp_bits},{fmt.mant_bits},{fmt.bias}"
    if fmt.kind is ScaleKind.INT8_LINEAR:
        if fmt.lo is None or fmt.hi is None:
            raise DataError("cannot serialize an uncalibrated Int8Linear format")
        return f"int8:{float(fmt.lo).hex()},{float(fmt.hi).hex()}"
    return "unquantized"


def _parse_scale_tag(tag: str) -> ScaleFormat:
    if tag == "e8m0":
        return ScaleFormat.e8m0()
    if tag == "e4m3":
        return ScaleFormat.e4m3()
    if tag == "unquantized":
        return ScaleFormat.unquantized()
    if tag.startswith("fpem:"):
        e, m, bias = (int(v) for v in tag[5:].split(","))
        return ScaleFormat.fpem(e, m, bias)
    if tag.startswith("int8:"):
        lo, hi = (float.fromhex(v) for v in tag[5:].split(","))
        return ScaleFormat.int8_linear(lo, hi)
    raise DataError(f"unknown scale format tag {tag!r}")


def _transform_tag(spec: TransformSpec | None) -> str:
    if spec is None or spec.kind is TransformKind.IDENTITY:
        return "none"
    return f"{spec.kind.value}:{spec.block}"


def _parse_transform_tag(tag: str) -> TransformSpec | None:
    if tag == "none":
        return None
    kind, _, block = tag.partition(":")
    try:
        return TransformSpec(TransformKind(kind), int(block))
    except ValueError as exc:
        raise DataError(f"unknown transform tag {tag!r}") from exc


def write_quant(path, t: MfpTensor, perm=None) -> None:
    """Serialize a quantized container (and optional column permutation)."""
    lines = [
        f"group_size={t.spec.group_size}",
        f"element={t.spec.element}",
        f"scale={_scale_tag(t.spec.scale)}",
        f"global_scale={int(t.spec.global_scale)}",
        f"rows={t.rows}",
        f"cols={t.cols}",
        f"tensor_scale={float(t.tensor_scale).hex()}",
        f"transform={_transform_tag(t.transform)}",
    ]
    if t.scale_fit is not None:
        alpha, beta = t.scale_fit
        lines.append(f"scale_fit={float(alpha).hex()},{float(beta).hex()}")
    lines.append(f"perm={int(perm is not None)}")
    header = ("\n".join(lines) + "\n").encode("utf-8")

    parts = [QUANT_MAGIC, struct.pack("<BI", FORMAT_VERSION, len(header)), header]
    parts.append(np.ascontiguousarray(t.codes, dtype=np.uint8).tobytes())
    if t.spec.scale.kind is ScaleKind.UNQUANTIZED:
        parts.append(np.asarray(t.scale_codes, dtype="<f8").tobytes())
    else:
        parts.append(np.asarray(t.scale_codes, dtype=np.uint8).tobytes())
    if perm is not None:
        perm = np.asarray(perm)
        if perm.shape != (t.cols,):
            raise DataError("permutation length must equal the column count")
        parts.append(perm.astype("<u8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_quant(path):
    """Read a QuantFile; returns (MfpTensor, permutation-or-None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9 or blob[:4] != QUANT_MAGIC:
        raise DataError(f"{path}: not a QuantFile")
    version, header_len = struct.unpack("<BI", blob[4:9])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported QuantFile version {version}")
    if len(blob) < 9 + header_len:
        raise DataError(f"{path}: truncated header")
    header = blob[9:9 + header_len].decode("utf-8")
    fields = {}
    for line in header.splitlines():
        if line:
            key, _, value = line.partition("=")
            fields[key] = value
    try:
        spec = FormatSpec(
            group_size=int(fields["group_size"]),
            scale=_parse_scale_tag(fields["scale"]),
            global_scale=bool(int(fields["global_scale"])),
            element=fields.get("element", "fp4_e2m1"),
        )
        rows, cols = int(fields["rows"]), int(fields["cols"])
        tensor_scale = float.fromhex(fields["tensor_scale"])
        transform = _parse_transform_tag(fields.get("transform", "none"))
        scale_fit = None
        if "scale_fit" in fields:
            a, b = fields["scale_fit"].split(",")
            scale_fit = (float.fromhex(a), float.fromhex(b))
        has_perm = bool(int(fields.get("perm", "0")))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed header ({exc})") from exc

    pos = 9 + header_len
    n_codes = (rows * cols + 1) // 2
    n_groups = rows * (cols // spec.group_size) if spec.group_size else 0
    scale_bytes = n_groups * (8 if spec.scale.kind is ScaleKind.UNQUANTIZED else 1)
    perm_bytes = 8 * cols if has_perm else 0
    if len(blob) != pos + n_codes + scale_bytes + perm_bytes:
        raise DataError(f"{path}: section size mismatch")
    codes = np.frombuffer(blob, dtype=np.uint8, count=n_codes, offset=pos).copy()
    pos += n_codes
    if spec.scale.kind is ScaleKind.UNQUANTIZED:
        scale_codes = np.frombuffer(blob, dtype="<f8", count=n_groups, offset=pos).astype(np.float64)
    else:
        scale_codes = np.frombuffer(blob, dtype=np.uint8, count=n_groups, offset=pos).copy()
    pos += scale_bytes
    perm = None
    if has_perm:
        perm = np.frombuffer(blob, dtype="<u8", count=cols, offset=pos).astype(np.int64)
    tensor = MfpTensor(
        spec=spec, rows=rows, cols=cols, codes=codes, scale_codes=scale_codes,
        tensor_scale=tensor_scale, transform=transform, scale_fit=scale_fit,
    )
    return tensor, perm
