"""Command-line front end: gen / quantize / dequantize / analyze.

Exit codes: 0 success, 2 usage errors (argparse), 3 data errors (bad files,
shape mismatches), 4 numerical failures.  All commands are deterministic
functions of their arguments, input bytes, and seed; CSV output is
RFC-4180-style with '.' decimals and is written atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys

import numpy as np

from . import analysis, fileio, gptq, quantizers
from .analysis import ModelGrid, Sampler
from .errors import DataError, NumericalError
from .formats import FormatSpec, ScaleFormat, dequantize
from .quantizers import ScaleMode, ScalePolicy
from .transforms import TransformSpec

_DEFAULT_SWEEP_GROUPS = "8,16,32,64,128,256"
_DEFAULT_RATE_GROUPS = ",".join(str(2 ** e) for e in range(6, 17))


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise DataError(f"bad integer list {text!r}") from exc


def _parse_format(tag: str) -> FormatSpec:
    if tag == "mxfp4":
        return FormatSpec.mxfp4()
    if tag == "nvfp4":
        return FormatSpec.nvfp4()
    if tag.startswith("custom:"):
        parts = tag[len("custom:"):].split(",")
        if len(parts) < 2:
            raise DataError("custom format is custom:G,<scale>[,global]")
        g = int(parts[0])
        scale = fileio._parse_scale_tag(parts[1])
        global_scale = len(parts) > 2 and parts[2] == "global"
        return FormatSpec(group_size=g, scale=scale, global_scale=global_scale)
    raise DataError(f"unknown format {tag!r} (mxfp4 | nvfp4 | custom:G,<scale>[,global])")


def _parse_grid(tag: str) -> ModelGrid:
    if tag == "e2m1":
        return ModelGrid.normalized_e2m1()
    if tag == "binary":
        return ModelGrid.binary()
    return ModelGrid.from_levels(float(v) for v in tag.split(","))


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def _emit_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt_cell(v) for v in row])
    if path:
        fileio.atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
    else:
        sys.stdout.write(buf.getvalue())


def _load_matrix(path) -> np.ndarray:
    X = fileio.read_tensor(path)
    return X.reshape(1, -1) if X.ndim == 1 else X


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    data = analysis.sample_blocks(Sampler(args.dist, args.seed), args.cols, args.rows)
    fileio.write_tensor(args.out, data)
    print(f"wrote {args.out} ({args.rows}x{args.cols} {args.dist}, seed={args.seed})")
    return 0


def _policy_from_args(args, spec: FormatSpec, for_mr: bool) -> ScalePolicy:
    if args.scale_opt is None and for_mr:
        # MR-GPTQ defaults: MSE grids for FpEM-scaled formats, absmax with
        # the fitted E8M0 grid otherwise.
        from .formats import ScaleKind

        if spec.scale.kind is ScaleKind.FPEM:
            return ScalePolicy(mode=ScaleMode.MSE)
        if spec.scale.kind is ScaleKind.E8M0:
            return ScalePolicy(mode=ScaleMode.ABSMAX, scale_fit="auto")
    mode = ScaleMode.MSE if args.scale_opt == "mse" else ScaleMode.ABSMAX
    return ScalePolicy(
        mode=mode,
        e8m0_four_thirds=not args.no_four_thirds,
        scale_fit="auto" if args.scale_fit else None,
    )


def cmd_quantize(args, parser: argparse.ArgumentParser) -> int:
    X = _load_matrix(args.input)
    spec = _parse_format(args.format)
    transform_given = args.transform is not None
    transform = fileio._parse_transform_tag(args.transform) if transform_given else None
    if args.method in ("gptq", "mr-gptq") and not args.calib:
        parser.error(f"--calib is required for method {args.method}")

    perm = None
    if args.method == "rtn":
        policy = _policy_from_args(args, spec, for_mr=False)
        res = quantizers.quantize(X, spec, policy=policy, transform=transform)
    else:
        calib = _load_matrix(args.calib)
        if calib.shape[1] != X.shape[1]:
            raise DataError(
                f"calibration columns ({calib.shape[1]}) do not match input ({X.shape[1]})"
            )
        state = gptq.Hessian(X.shape[1])
        gptq.accumulate_hessian(calib, state)
        if args.method == "mr-gptq":
            if not transform_given:
                transform = TransformSpec.hadamard(min(spec.group_size, 128))
            policy = _policy_from_args(args, spec, for_mr=True)
            act_order = True
        else:
            policy = _policy_from_args(args, spec, for_mr=False)
            act_order = args.act_order
        cfg = gptq.GptqConfig(
            dampening=args.damp, block_width=args.block_width,
            act_order=act_order, scale_policy=policy, transform=transform,
        )
        res = gptq.gptq_quantize(X, state, spec, cfg)
        if act_order:
            Hm = state.finalized()
            if transform is not None:
                Hm = gptq.conjugated_hessian(Hm, transform)
            perm = gptq.static_act_order(Hm)

    fileio.write_quant(args.out, res.tensor, perm=perm)
    print(f"mse_rel={res.mse_rel:.10g} mse_top_rel={res.mse_top_rel:.10g}")
    return 0


def cmd_dequantize(args) -> int:
    tensor, _ = fileio.read_quant(args.input)
    fileio.write_tensor(args.out, quantizers.reconstruct(tensor))
    print(f"wrote {args.out} ({tensor.rows}x{tensor.cols})")
    return 0


def cmd_analyze(args) -> int:
    sampler = Sampler(args.dist, args.seed)
    if args.subcommand == "rates":
        grid = _parse_grid(args.grid) if args.grid else ModelGrid.with_dead_zone(args.delta)
        table = analysis.rate_experiment(
            sampler, grid, _parse_int_list(args.g_list or _DEFAULT_RATE_GROUPS), int(args.n)
        )
        _emit_csv(args.csv, *table.as_columns())
        print(f"slope={table.slope:.6g}")
        return 0

    if args.subcommand == "sweep-groups":
        scale = fileio._parse_scale_tag(args.scale)
        rows = analysis.sweep_group_sizes(
            sampler, _parse_int_list(args.g_list or _DEFAULT_SWEEP_GROUPS), scale,
            global_scale=args.global_scale, n_blocks=int(args.n),
        )
        _emit_csv(args.csv, ["G", "transform", "mse_rel", "mse_rel_stderr",
                             "mse_top_rel", "mse_top_rel_stderr"], rows)
        return 0

    if args.subcommand == "sweep-scale-formats":
        if args.input:
            X = _load_matrix(args.input)
        else:
            n_blocks = max(int(args.n) // args.group_size, 1)
            X = analysis.sample_blocks(sampler, args.group_size, n_blocks)
        tags = (args.formats.split(",") if args.formats else
                ["unquantized"] + [f"fpem:{e},{7 - e}," + str(2 ** (e - 1) - 1) for e in range(1, 8)]
                + ["e8m0", "int8"])
        fmts = []
        for tag in tags:
            if tag == "int8":
                fmts.append(ScaleFormat.int8_linear())
            elif tag == "fpem:4,3,7":
                fmts.append(ScaleFormat.e4m3())
            else:
                fmts.append(fileio._parse_scale_tag(tag))
        rows = analysis.sweep_scale_formats(X, fmts, group_size=args.group_size)
        _emit_csv(args.csv, ["format", "mse_rel"], rows)
        return 0

    if args.subcommand == "lemma1":
        grid = _parse_grid(args.grid)
        rotate = args.rotate == "true"
        rows = []
        for G in _parse_int_list(args.g_list or "16,32,64"):
            rep = analysis.estimate_metrics(sampler, G, grid, rotate, int(args.n))
            rows.append((G, args.rotate, rep.mse, rep.mse_stderr, rep.mse_top,
                         rep.mse_top_stderr, rep.mse_top - rep.mse, rep.top_minus_mse_stderr))
        _emit_csv(args.csv, ["G", "rotate", "mse", "mse_stderr", "mse_top",
                             "mse_top_stderr", "top_minus_mse", "top_minus_mse_stderr"], rows)
        return 0

    if args.subcommand == "outliers":
        G = args.group_size
        X = analysis.make_outlier_mixture(int(args.n), args.p, args.magnitude, args.seed)
        X = X[: (X.size // G) * G].reshape(-1, G)
        spec = FormatSpec(group_size=G, scale=fileio._parse_scale_tag(args.scale))
        res = quantizers.quantize_rtn(X, spec)
        mape = analysis.outlier_mape(X, dequantize(res.tensor), args.p)
        tol = 0.1 * res.mse_top_rel + 10.0 * args.p * G
        _emit_csv(args.csv, ["p", "magnitude", "G", "outlier_mape", "mse_top_rel",
                             "abs_diff", "tolerance"],
                  [(args.p, args.magnitude, G, mape, res.mse_top_rel,
                    abs(mape - res.mse_top_rel), tol)])
        return 0

    raise DataError(f"unknown analyze subcommand {args.subcommand!r}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microfp",
        description="Microscaling FP4 quantization toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a seeded synthetic tensor file")
    p.add_argument("dist", choices=["laplace", "normal"])
    p.add_argument("rows", type=int)
    p.add_argument("cols", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("out")

    q = sub.add_parser("quantize", help="quantize a tensor file")
    q.add_argument("input")
    q.add_argument("out")
    q.add_argument("--format", default="nvfp4",
                   help="mxfp4 | nvfp4 | custom:G,<scale>[,global]")
    q.add_argument("--method", choices=["rtn", "gptq", "mr-gptq"], default="rtn")
    q.add_argument("--transform", default=None,
                   help="none | hadamard:K | dct:K | dst:K")
    q.add_argument("--scale-opt", choices=["absmax", "mse"], default=None)
    q.add_argument("--scale-fit", action="store_true",
                   help="fit the E8M0 exponent grid to the data range")
    q.add_argument("--no-four-thirds", action="store_true",
                   help="disable the 4/3 E8M0 rescale")
    q.add_argument("--act-order", action="store_true")
    q.add_argument("--calib", default=None, help="calibration TensorFile (gptq/mr-gptq)")
    q.add_argument("--damp", type=float, default=1e-2)
    q.add_argument("--block-width", type=int, default=128)
    q.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("dequantize", help="reconstruct a tensor from a quantized file")
    d.add_argument("input")
    d.add_argument("out")

    a = sub.add_parser("analyze", help="Monte Carlo experiments, CSV output")
    asub = a.add_subparsers(dest="subcommand", required=True)

    def common(sp, n_default):
        sp.add_argument("--dist", choices=["laplace", "normal"], default="laplace")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--n", type=float, default=n_default)
        sp.add_argument("--csv", default=None)

    sp = asub.add_parser("rates", help="dead-zone decay rates vs group size")
    common(sp, 1e7)
    sp.add_argument("--delta", type=float, default=0.25)
    sp.add_argument("--grid", default=None, help="e2m1 | binary | comma levels")
    sp.add_argument("--g-list", default=None)

    sp = asub.add_parser("sweep-groups", help="production-format HT effect vs group size")
    common(sp, 65536)
    sp.add_argument("--scale", default="e4m3")
    sp.add_argument("--global-scale", action="store_true")
    sp.add_argument("--g-list", default=None)

    sp = asub.add_parser("sweep-scale-formats", help="mse_rel per scale codec")
    common(sp, 1e6)
    sp.add_argument("--input", default=None, help="TensorFile to sweep instead of synthetic data")
    sp.add_argument("--group-size", type=int, default=16)
    sp.add_argument("--formats", default=None, help="comma list of scale tags")

    sp = asub.add_parser("lemma1", help="rotation error-spreading check")
    common(sp, 1e6)
    sp.add_argument("--grid", default="e2m1")
    sp.add_argument("--g-list", default=None)
    sp.add_argument("--rotate", choices=["true", "false"], default="true")

    sp = asub.add_parser("outliers", help="outlier relative error vs top-element MSE")
    common(sp, 1e6)
    sp.add_argument("--p", type=float, default=1e-3)
    sp.add_argument("--magnitude", type=float, default=50.0)
    sp.add_argument("--group-size", type=int, default=16)
    sp.add_argument("--scale", default="e4m3")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen":
            if args.rows < 1 or args.cols < 2:
                parser.error("rows must be >= 1 and cols >= 2")
            return cmd_gen(args)
        if args.command == "quantize":
            return cmd_quantize(args, parser)
        if args.command == "dequantize":
            return cmd_dequantize(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        parser.error(f"unknown command {args.command!r}")
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
