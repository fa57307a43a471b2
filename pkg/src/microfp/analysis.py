"""Monte Carlo harness for the normalized-grid quantization model.

Works in the theory's normalized domain: blocks of G i.i.d. unit-variance
samples, absmax scaling onto a symmetric grid inside [-1, 1], optional
normalized Hadamard rotation before quantization.  Provides the samplers,
the model quantizer, metric estimators with standard errors, the dead-zone
rate experiment, scale-format sweeps, outlier statistics, and a small
quadrature oracle used to cross-check the Monte Carlo path at G = 2.

Randomness uses the counter-based Philox generator keyed as
(seed, chunk_index) with a fixed chunk size, so results are reproducible
and independent of how work is scheduled.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import quantizers
from .errors import DataError
from .formats import FP4_GRID, FormatSpec, ScaleFormat, ScaleKind
from .transforms import TransformSpec, transform_matrix

__all__ = [
    "KurtosisReport",
    "MetricsReport",
    "ModelGrid",
    "RateRow",
    "RateTable",
    "Sampler",
    "estimate_metrics",
    "kurtosis_report",
    "model_mse_quadrature_g2",
    "model_quantize_block",
    "outlier_mape",
    "rate_experiment",
    "sample_blocks",
    "sweep_scale_formats",
]

_CHUNK_ELEMENTS = 1 << 22
_SQRT2 = math.sqrt(2.0)


@dataclasses.dataclass(frozen=True)
class ModelGrid:
    """Finite symmetric grid in [-1, 1] containing 0 and 1.

    ``delta`` (= q_min / 2) is the dead-zone half-width: normalized inputs
    below it quantize to zero.
    """

    positive_levels: tuple[float, ...]

    def __post_init__(self):
        lv = np.asarray(self.positive_levels, dtype=np.float64)
        if lv.size < 2 or lv[0] != 0.0 or lv[-1] != 1.0:
            raise DataError("grid must contain 0 and 1")
        if np.any(np.diff(lv) <= 0) or np.any(lv < 0):
            raise DataError("grid levels must be ascending and non-negative")

    @property
    def levels(self) -> np.ndarray:
        return np.asarray(self.positive_levels, dtype=np.float64)

    @property
    def q_min(self) -> float:
        return self.positive_levels[1]

    @property
    def delta(self) -> float:
        return self.q_min / 2.0

    @classmethod
    def from_levels(cls, levels) -> "ModelGrid":
        return cls(tuple(float(v) for v in levels))

    @classmethod
    def normalized_e2m1(cls) -> "ModelGrid":
        return cls.from_levels(FP4_GRID / FP4_GRID[-1])

    @classmethod
    def binary(cls) -> "ModelGrid":
        return cls((0.0, 1.0))

    @classmethod
    def with_dead_zone(cls, delta: float) -> "ModelGrid":
        """Minimal grid {0, 2*delta, 1} realizing the given dead-zone half-width."""
        if not 0.0 < delta < 0.5:
            raise DataError("delta must lie in (0, 1/2)")
        if delta == 0.25:
            return cls((0.0, 0.5, 1.0))
        return cls((0.0, 2.0 * delta, 1.0))


@dataclasses.dataclass(frozen=True)
class Sampler:
    """Unit-variance block sampler: 'laplace' (b = 1/sqrt(2)) or 'normal'."""

    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("laplace", "normal"):
            raise DataError(f"unknown sampler kind {self.kind!r}")


def _draw(kind: str, rng: np.random.Generator, shape) -> np.ndarray:
    if kind == "laplace":
        # inverse-CDF of the Exp(sqrt(2)) magnitude, then a random sign
        u = rng.random(shape)
        mags = -np.log1p(-u) / _SQRT2
        signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return signs * mags
    return rng.standard_normal(shape)


def _chunks(sampler: Sampler, G: int, n_blocks: int):
    chunk = max(1, _CHUNK_ELEMENTS // G)
    for ci, start in enumerate(range(0, n_blocks, chunk)):
        rng = np.random.Generator(
            np.random.Philox(key=[sampler.seed & 0xFFFFFFFFFFFFFFFF, ci])
        )
        yield _draw(sampler.kind, rng, (min(chunk, n_blocks - start), G))


def sample_blocks(sampler: Sampler, G: int, n_blocks: int) -> np.ndarray:
    """(n_blocks, G) i.i.d. blocks, deterministic given the sampler seed."""
    if G < 2:
        raise DataError("block size must be at least 2")
    if n_blocks < 1:
        raise DataError("need at least one block")
    return np.concatenate(list(_chunks(sampler, G, n_blocks)), axis=0)


def _rtn_lower(mag: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """RTN index with ties toward the lower-magnitude level."""
    mids = (levels[:-1] + levels[1:]) / 2.0
    return np.searchsorted(mids, mag, side="left")


def model_quantize_block(block, grid: ModelGrid, rotate: bool = False) -> np.ndarray:
    """Absmax-normalized RTN of one block (or a stack of blocks).

    With ``rotate`` the normalized Hadamard is applied first and its inverse
    after reconstruction, so the returned estimate lives in the original
    domain.  All-zero blocks come back as zeros.
    """
    X = np.asarray(block, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    G = X.shape[1]
    if rotate and (G & (G - 1)):
        raise DataError("rotation requires a power-of-two block size")
    U = transform_matrix(TransformSpec.hadamard(G)) if rotate else None
    Y = X @ U.T if rotate else X
    s = np.abs(Y).max(axis=1, keepdims=True)
    safe = np.where(s == 0.0, 1.0, s)
    levels = grid.levels
    Uv = Y / safe
    Q = np.sign(Uv) * levels[_rtn_lower(np.abs(Uv), levels)]
    Yh = np.where(s == 0.0, 0.0, safe * Q)
    Xh = Yh @ U if rotate else Yh
    return Xh[0] if squeeze else Xh


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    """Monte Carlo quantization metrics with per-metric standard errors.

    ``mse_top`` tracks the pre-rotation argmax of each block.
    ``top_minus_mse_stderr`` is the paired standard error of
    (mse_top - mse), the right yardstick for the rotation-spreading check.
    """

    mse: float
    mse_top: float
    mse_rel: float
    mse_top_rel: float
    preserved_mass: float
    block_count: int
    mse_stderr: float
    mse_top_stderr: float
    mse_rel_stderr: float
    mse_top_rel_stderr: float
    top_minus_mse_stderr: float


class _Welford:
    """Streaming mean + stderr over per-block statistics (pairwise-summed chunks)."""

    def __init__(self):
        self.n = 0
        self.s1 = 0.0
        self.s2 = 0.0

    def add(self, x: np.ndarray):
        self.n += x.size
        self.s1 += float(x.sum())
        self.s2 += float((x * x).sum())

    @property
    def mean(self) -> float:
        return self.s1 / self.n

    @property
    def stderr(self) -> float:
        if self.n < 2:
            return float("inf")
        var = max(self.s2 / self.n - self.mean ** 2, 0.0) * self.n / (self.n - 1)
        return math.sqrt(var / self.n)


def _block_stats(X, grid, rotate):
    Xh = model_quantize_block(X, grid, rotate=rotate)
    err2 = (X - Xh) ** 2
    m_b = err2.mean(axis=1)
    it = np.argmax(np.abs(X), axis=1)
    rix = np.arange(X.shape[0])
    top = X[rix, it]
    t_b = err2[rix, it]
    x2 = X ** 2
    denom = x2.sum(axis=1)
    rel_b = np.divide(err2.sum(axis=1), denom, out=np.zeros_like(denom), where=denom > 0)
    t2 = top ** 2
    trel_b = np.divide(t_b, t2, out=np.zeros_like(t_b), where=t2 > 0)
    return m_b, t_b, rel_b, trel_b


def estimate_metrics(sampler: Sampler, G: int, grid: ModelGrid, rotate: bool,
                     n_blocks: int) -> MetricsReport:
    """Monte Carlo estimates of the Definition-3/4 metrics over n_blocks."""
    if n_blocks < 1000:
        raise DataError("estimate_metrics needs at least 1000 blocks")
    acc = {k: _Welford() for k in ("m", "t", "rel", "trel", "d")}
    for X in _chunks(sampler, G, n_blocks):
        m_b, t_b, rel_b, trel_b = _block_stats(X, grid, rotate)
        acc["m"].add(m_b)
        acc["t"].add(t_b)
        acc["rel"].add(rel_b)
        acc["trel"].add(trel_b)
        acc["d"].add(t_b - m_b)
    mse = acc["m"].mean
    return MetricsReport(
        mse=mse,
        mse_top=acc["t"].mean,
        mse_rel=acc["rel"].mean,
        mse_top_rel=acc["trel"].mean,
        preserved_mass=1.0 - mse,
        block_count=n_blocks,
        mse_stderr=acc["m"].stderr,
        mse_top_stderr=acc["t"].stderr,
        mse_rel_stderr=acc["rel"].stderr,
        mse_top_rel_stderr=acc["trel"].stderr,
        top_minus_mse_stderr=acc["d"].stderr,
    )


@dataclasses.dataclass(frozen=True)
class RateRow:
    G: int
    R: float                  # preserved mass 1 - MSE(G)
    stderr: float
    corrected_log_R: float    # log(R / correction(G)) with the asymptotic polylog correction
    escape_prob: float        # P(|U| >= delta): fraction escaping the dead zone
    escape_stderr: float


@dataclasses.dataclass(frozen=True)
class RateTable:
    rows: list[RateRow]
    slope: float              # fitted exponent of the dead-zone escape probability
    distribution: str

    def as_columns(self):
        header = ["G", "R", "stderr", "corrected_log_R", "escape_prob", "escape_stderr"]
        data = [[r.G, r.R, r.stderr, r.corrected_log_R, r.escape_prob, r.escape_stderr]
                for r in self.rows]
        return header, data


def _log_correction(kind: str, G: np.ndarray) -> np.ndarray:
    lg = np.log(G)
    return lg ** 2 if kind == "laplace" else np.sqrt(lg)


def rate_experiment(sampler: Sampler, grid: ModelGrid, G_list, n_total: int) -> RateTable:
    """Dead-zone decay rates over a sweep of group sizes.

    For each G, ``n_total`` sample elements are quantized; the table reports
    the preserved mass R = 1 - MSE with its asymptotic log correction, plus the
    dead-zone escape probability P(|U| >= delta).  The fitted ``slope`` is
    the exponent of the escape probability from the regression
    log P ~ a*log G + b*log log G + c; the polylog factor is estimated
    jointly because at practical G it is far from its asymptotic limit, and
    the escape probability is the quantity whose power law is clean (for
    Laplace magnitudes it is exactly (G-1) * Beta(1 + delta, G - 1)).
    """
    G_list = [int(g) for g in G_list]
    if any(b <= a for a, b in zip(G_list, G_list[1:])):
        raise DataError("G_list must be strictly ascending")
    rows = []
    delta = grid.delta
    for G in G_list:
        n_blocks = max(n_total // G, 32)
        mse_acc, esc_acc = _Welford(), _Welford()
        for X in _chunks(sampler, G, n_blocks):
            s = np.abs(X).max(axis=1, keepdims=True)
            safe = np.where(s == 0.0, 1.0, s)
            Uv = X / safe
            lv = grid.levels
            Q = np.sign(Uv) * lv[_rtn_lower(np.abs(Uv), lv)]
            err2 = (X - safe * Q) ** 2
            mse_acc.add(err2.mean(axis=1))
            esc_acc.add((np.abs(Uv) >= delta).mean(axis=1))
        R = 1.0 - mse_acc.mean
        corr = float(_log_correction(sampler.kind, np.asarray([float(G)]))[0])
        clr = math.log(R / corr) if R > 0 else float("-inf")
        rows.append(RateRow(G, R, mse_acc.stderr, clr, esc_acc.mean, esc_acc.stderr))
    lg = np.log(np.asarray(G_list, dtype=np.float64))
    design = np.column_stack([lg, np.log(lg), np.ones_like(lg)])
    y = np.log(np.asarray([r.escape_prob for r in rows]))
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return RateTable(rows=rows, slope=float(coef[0]), distribution=sampler.kind)


def scale_format_label(fmt: ScaleFormat) -> str:
    if fmt.kind is ScaleKind.E8M0:
        return "e8m0"
    if fmt.kind is ScaleKind.FPEM:
        return f"e{fmt.exp_bits}m{fmt.mant_bits}"
    if fmt.kind is ScaleKind.INT8_LINEAR:
        return "int8"
    return "unquantized"


def sweep_scale_formats(X, formats_list, group_size: int = 16,
                        policy: quantizers.ScalePolicy | None = None):
    """Quantize X with a fixed element codec and each scale format in turn.

    Returns [(label, mse_rel)] rows.  Uncalibrated Int8Linear formats are
    calibrated from this tensor's raw scale range.
    """
    if not formats_list:
        raise DataError("formats list must not be empty")
    X = np.asarray(X, dtype=np.float64)
    rows = []
    for fmt in formats_list:
        if fmt.kind is ScaleKind.INT8_LINEAR and (fmt.lo is None or fmt.hi is None):
            spec0 = FormatSpec(group_size=group_size, scale=ScaleFormat.unquantized())
            gs = quantizers.prepare_scales(X, spec0)
            raw = gs.raw / FP4_GRID[-1]  # absmax -> grid-unit raw scales
            fmt = ScaleFormat.int8_linear(float(raw.min()), float(raw.max()))
        spec = FormatSpec(group_size=group_size, scale=fmt, global_scale=False)
        res = quantizers.quantize_rtn(X, spec, policy=policy)
        rows.append((scale_format_label(fmt), res.mse_rel))
    return rows


def sweep_group_sizes(sampler: Sampler, G_list, scale_format: ScaleFormat,
                      global_scale: bool = False, n_blocks: int = 1 << 16,
                      hadamard: tuple = (False, True),
                      policy: quantizers.ScalePolicy | None = None):
    """Production-path group-size sweep with and without the matched Hadamard.

    Each G samples (n_blocks, G) fresh blocks (one group per row) and
    quantizes them with the full production pipeline.  Metrics are measured
    in the original (pre-rotation) domain, with the top element taken at the
    pre-rotation argmax; per-block standard errors are included.  Rows are
    (G, transform_label, mse_rel, mse_rel_stderr, mse_top_rel,
    mse_top_rel_stderr).
    """
    rows = []
    for G in G_list:
        G = int(G)
        X = sample_blocks(sampler, G, n_blocks)
        for use_ht in hadamard:
            spec = FormatSpec(group_size=G, scale=scale_format, global_scale=global_scale)
            tr = TransformSpec.hadamard(G) if use_ht else None
            res = quantizers.quantize_rtn(X, spec, policy=policy, transform=tr)
            Xh = quantizers.reconstruct(res.tensor)
            err2 = ((X - Xh) ** 2).sum(axis=1)
            x2 = (X ** 2).sum(axis=1)
            rel = np.divide(err2, x2, out=np.zeros_like(err2), where=x2 > 0)
            it = np.argmax(np.abs(X), axis=1)
            rix = np.arange(X.shape[0])
            te = (X[rix, it] - Xh[rix, it]) ** 2
            t2 = X[rix, it] ** 2
            trel = np.divide(te, t2, out=np.zeros_like(te), where=t2 > 0)
            rows.append((
                G, "hadamard" if use_ht else "none",
                float(rel.mean()), float(rel.std(ddof=1) / math.sqrt(rel.size)),
                float(trel.mean()), float(trel.std(ddof=1) / math.sqrt(trel.size)),
            ))
    return rows


def make_outlier_mixture(n: int, p: float, magnitude: float, seed: int = 0) -> np.ndarray:
    """Laplace base samples with a p-fraction replaced by +-magnitude outliers."""
    if not 0.0 < p < 1.0:
        raise DataError("outlier fraction must lie in (0, 1)")
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0]))
    base = _draw("laplace", rng, n)
    mask = rng.random(n) < p
    signs = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return np.where(mask, magnitude * signs, base)


def outlier_mape(X, X_hat, p: float) -> float:
    """Mean of (x - xhat)^2 / x^2 over the top-p fraction of |x|."""
    X = np.asarray(X, dtype=np.float64).reshape(-1)
    Xh = np.asarray(X_hat, dtype=np.float64).reshape(-1)
    if X.shape != Xh.shape:
        raise DataError("X and X_hat must have the same shape")
    if not 0.0 < p < 1.0:
        raise DataError("outlier fraction must lie in (0, 1)")
    k = int(p * X.size)
    if k < 1:
        raise DataError("p * size must be at least 1")
    idx = np.argpartition(np.abs(X), X.size - k)[X.size - k:]
    e2 = (X[idx] - Xh[idx]) ** 2
    x2 = X[idx] ** 2
    return float(np.divide(e2, x2, out=np.zeros_like(e2), where=x2 > 0).mean())


@dataclasses.dataclass(frozen=True)
class KurtosisReport:
    variance: float
    excess_kurtosis: float
    normal_sigma: float
    normal_loglik: float
    laplace_loc: float
    laplace_b: float
    laplace_loglik: float


def kurtosis_report(X) -> KurtosisReport:
    """Moments plus maximum-likelihood Normal and Laplace fits."""
    x = np.asarray(X, dtype=np.float64).reshape(-1)
    if x.size < 1000:
        raise DataError("kurtosis_report needs at least 1000 samples")
    mu = float(x.mean())
    var = float(((x - mu) ** 2).mean())
    if var == 0.0:
        raise DataError("degenerate (zero-variance) input")
    m4 = float(((x - mu) ** 4).mean())
    kurt = m4 / var ** 2 - 3.0
    n = x.size
    normal_ll = -0.5 * n * (math.log(2.0 * math.pi * var) + 1.0)
    loc = float(np.median(x))
    b = float(np.abs(x - loc).mean())
    laplace_ll = -n * (math.log(2.0 * b) + 1.0)
    return KurtosisReport(
        variance=var, excess_kurtosis=kurt,
        normal_sigma=math.sqrt(var), normal_loglik=normal_ll,
        laplace_loc=loc, laplace_b=b, laplace_loglik=laplace_ll,
    )


def _gauss_legendre_panels(f, a: float, b: float, n_panels: int = 24, order: int = 32) -> float:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, n_panels + 1)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
        total += half * float(np.sum(weights * f(mid + half * nodes)))
    return total


def model_mse_quadrature_g2(grid: ModelGrid, kind: str) -> float:
    """Deterministic oracle for MSE(G=2): nested Gauss-Legendre quadrature.

    Exploits sign symmetry and the exactness of the block maximum (1 is on
    the grid), splitting the inner integral at the rounding boundaries so
    every panel integrates a smooth function.
    """
    if kind == "normal":
        def density(x):
            return np.exp(-x * x / 2.0) / math.sqrt(2.0 * math.pi)
        cutoff = 10.0
    elif kind == "laplace":
        b = 1.0 / _SQRT2

        def density(x):
            return np.exp(-np.abs(x) / b) / (2.0 * b)
        cutoff = 30.0
    else:
        raise DataError(f"unknown distribution kind {kind!r}")

    levels = grid.levels
    mids = (levels[:-1] + levels[1:]) / 2.0

    def inner(x2: float) -> float:
        # E over x1 in (0, x2) of (x1 - x2*q(x1/x2))^2 f(x1); kinks at x2*mids
        edges = np.concatenate([[0.0], x2 * mids, [x2]])
        total = 0.0
        for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
            q = levels[i] * x2

            def seg(x1, q=q):
                return (x1 - q) ** 2 * density(x1)
            total += _gauss_legendre_panels(seg, lo, hi, n_panels=4, order=32)
        return total

    def outer(x2_arr):
        return np.asarray([inner(float(x2)) * density(float(x2)) for x2 in np.atleast_1d(x2_arr)])

    # factor 4: sign symmetry in both coordinates; the x1 > x2 half is exact (error 0)
    return 4.0 * _gauss_legendre_panels(outer, 0.0, cutoff, n_panels=48, order=32)
