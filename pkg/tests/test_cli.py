"""End-to-end CLI tests: exit codes, determinism, file round trips."""

import csv
import io

import numpy as np
import pytest

from microfp.cli import main
from microfp.fileio import read_tensor, write_tensor


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def run_expect_usage_error(*argv):
    with pytest.raises(SystemExit) as exc:
        main(list(argv))
    return exc.value.code


def parse_metrics(stdout: str) -> dict:
    fields = dict(kv.split("=") for kv in stdout.split()[:2])
    return {k: float(v) for k, v in fields.items()}


def read_csv_text(path) -> list[list[str]]:
    return list(csv.reader(io.StringIO(path.read_text())))


class TestGen:
    def test_deterministic_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a.mfpt", tmp_path / "b.mfpt"
        assert run(capsys, "gen", "normal", "4", "32", "--seed", "7", str(a))[0] == 0
        assert run(capsys, "gen", "normal", "4", "32", "--seed", "7", str(b))[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_laplace_unit_variance(self, tmp_path, capsys):
        path = tmp_path / "l.mfpt"
        assert run(capsys, "gen", "laplace", "1000", "1024", str(path))[0] == 0
        X = read_tensor(path)
        assert 0.99 <= X.var() <= 1.01

    def test_zero_rows_usage_error(self, tmp_path):
        assert run_expect_usage_error("gen", "normal", "0", "32", str(tmp_path / "x")) == 2

    def test_unknown_flag_exit_2(self, tmp_path):
        assert run_expect_usage_error("gen", "normal", "1", "32", "--bogus", "x") == 2


@pytest.fixture
def on_grid_file(tmp_path):
    # exactly representable under NVFP4 with absmax scales: one shared absmax
    row = np.array([6.0, 3.0, -1.5, 0.5, 2.0, -4.0, 1.0, 0.0] * 4)
    X = np.vstack([row, row * 2.0])
    path = tmp_path / "grid.mfpt"
    write_tensor(path, X)
    return path


class TestQuantize:
    def test_on_grid_rtn_zero_error(self, tmp_path, capsys, on_grid_file):
        out = tmp_path / "q.mfpq"
        code, stdout, _ = run(capsys, "quantize", str(on_grid_file), str(out),
                              "--format", "custom:16,unquantized")
        assert code == 0
        metrics = parse_metrics(stdout)
        assert metrics["mse_rel"] == 0.0
        assert metrics["mse_top_rel"] == 0.0

    def test_missing_calib_exit_2(self, tmp_path, on_grid_file):
        code = run_expect_usage_error("quantize", str(on_grid_file),
                                      str(tmp_path / "q.mfpq"), "--method", "gptq")
        assert code == 2

    def test_corrupt_input_exit_3(self, tmp_path, capsys):
        bad = tmp_path / "bad.mfpt"
        bad.write_bytes(b"garbage")
        code, _, err = run(capsys, "quantize", str(bad), str(tmp_path / "q.mfpq"))
        assert code == 3
        assert "error" in err

    def test_group_divisibility_error(self, tmp_path, capsys):
        path = tmp_path / "odd.mfpt"
        write_tensor(path, np.zeros((2, 20)))
        code, _, err = run(capsys, "quantize", str(path), str(tmp_path / "q.mfpq"),
                           "--format", "mxfp4")
        assert code == 3
        assert "divisible" in err

    def test_numerical_failure_exit_4(self, tmp_path, capsys):
        # rank-1 calibration with a vanishing dampening factor: Cholesky fails
        w = tmp_path / "w.mfpt"
        c = tmp_path / "c.mfpt"
        rng = np.random.default_rng(0)
        write_tensor(w, rng.laplace(size=(2, 32)))
        write_tensor(c, np.outer(np.ones(8), rng.standard_normal(32)))
        code, _, err = run(capsys, "quantize", str(w), str(tmp_path / "q.mfpq"),
                           "--method", "gptq", "--calib", str(c), "--damp", "1e-300")
        assert code == 4
        assert "numerical" in err

    def test_mr_gptq_degenerate_matches_gptq_bytes(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        w = tmp_path / "w.mfpt"
        c = tmp_path / "c.mfpt"
        write_tensor(w, rng.laplace(size=(8, 64)))
        write_tensor(c, rng.standard_normal((128, 64)))
        q1, q2 = tmp_path / "a.mfpq", tmp_path / "b.mfpq"
        assert run(capsys, "quantize", str(w), str(q1), "--format", "mxfp4",
                   "--method", "mr-gptq", "--transform", "none",
                   "--scale-opt", "absmax", "--calib", str(c))[0] == 0
        assert run(capsys, "quantize", str(w), str(q2), "--format", "mxfp4",
                   "--method", "gptq", "--act-order", "--calib", str(c))[0] == 0
        assert q1.read_bytes() == q2.read_bytes()

    def test_mse_scale_opt_not_worse(self, tmp_path, capsys):
        rng = np.random.default_rng(23)
        path = tmp_path / "x.mfpt"
        write_tensor(path, rng.laplace(size=(16, 64)))
        _, absmax_out, _ = run(capsys, "quantize", str(path), str(tmp_path / "a.mfpq"),
                               "--format", "nvfp4", "--scale-opt", "absmax")
        _, mse_out, _ = run(capsys, "quantize", str(path), str(tmp_path / "m.mfpq"),
                            "--format", "nvfp4", "--scale-opt", "mse")
        assert parse_metrics(mse_out)["mse_rel"] <= parse_metrics(absmax_out)["mse_rel"]

    @pytest.mark.parametrize("tag", ["dct:16", "dst:16", "hadamard:32"])
    def test_transform_tags_roundtrip(self, tmp_path, capsys, tag):
        rng = np.random.default_rng(29)
        src = tmp_path / "x.mfpt"
        write_tensor(src, rng.laplace(size=(4, 64)))
        q, d = tmp_path / "q.mfpq", tmp_path / "d.mfpt"
        assert run(capsys, "quantize", str(src), str(q), "--format", "mxfp4",
                   "--transform", tag)[0] == 0
        assert run(capsys, "dequantize", str(q), str(d))[0] == 0
        rel = ((read_tensor(d) - read_tensor(src)) ** 2).sum() / (read_tensor(src) ** 2).sum()
        assert rel < 0.2

    def test_scale_fit_improves_narrow_scale_fixture(self, tmp_path, capsys):
        rng = np.random.default_rng(11)
        # narrow log-range group magnitudes: vanilla E8M0 rounding hurts
        scales = np.exp2(rng.uniform(-0.45, 0.45, size=(64, 1)))
        X = rng.laplace(size=(64, 128)) * scales
        path = tmp_path / "narrow.mfpt"
        write_tensor(path, X)
        _, plain_out, _ = run(capsys, "quantize", str(path), str(tmp_path / "p.mfpq"),
                              "--format", "mxfp4")
        _, fit_out, _ = run(capsys, "quantize", str(path), str(tmp_path / "f.mfpq"),
                            "--format", "mxfp4", "--scale-fit")
        assert parse_metrics(fit_out)["mse_rel"] < parse_metrics(plain_out)["mse_rel"]


class TestDequantize:
    def test_quantize_dequantize_close(self, tmp_path, capsys, on_grid_file):
        q = tmp_path / "q.mfpq"
        d = tmp_path / "d.mfpt"
        run(capsys, "quantize", str(on_grid_file), str(q),
            "--format", "custom:16,unquantized")
        assert run(capsys, "dequantize", str(q), str(d))[0] == 0
        np.testing.assert_allclose(read_tensor(d), read_tensor(on_grid_file), atol=1e-5)

    def test_truncated_quant_file_exit_3(self, tmp_path, capsys, on_grid_file):
        q = tmp_path / "q.mfpq"
        run(capsys, "quantize", str(on_grid_file), str(q), "--format", "nvfp4")
        q.write_bytes(q.read_bytes()[:-2])
        code, _, err = run(capsys, "dequantize", str(q), str(tmp_path / "d.mfpt"))
        assert code == 3

    def test_transform_header_applied(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        X = rng.laplace(size=(4, 64))
        src = tmp_path / "x.mfpt"
        write_tensor(src, X)
        q = tmp_path / "q.mfpq"
        d = tmp_path / "d.mfpt"
        run(capsys, "quantize", str(src), str(q), "--format", "nvfp4",
            "--transform", "hadamard:16")
        run(capsys, "dequantize", str(q), str(d))
        est = read_tensor(d)
        rel = ((est - read_tensor(src)) ** 2).sum() / (read_tensor(src) ** 2).sum()
        assert rel < 0.1  # inverse transform was applied: estimate lives near X


class TestAnalyze:
    def test_lemma1_no_rotation_zero_top(self, tmp_path, capsys):
        out = tmp_path / "l.csv"
        code, _, _ = run(capsys, "analyze", "lemma1", "--rotate", "false",
                         "--g-list", "16", "--n", "2000", "--csv", str(out))
        assert code == 0
        rows = read_csv_text(out)
        assert rows[0][4] == "mse_top"
        assert float(rows[1][4]) == 0.0

    def test_rates_prints_slope_and_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "r.csv"
        code, stdout, _ = run(capsys, "analyze", "rates", "--g-list", "64,128,256",
                              "--n", "100000", "--csv", str(out))
        assert code == 0
        assert stdout.startswith("slope=")
        rows = read_csv_text(out)
        assert rows[0] == ["G", "R", "stderr", "corrected_log_R",
                           "escape_prob", "escape_stderr"]
        assert len(rows) == 4

    def test_csv_bytes_stable(self, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for path in (a, b):
            run(capsys, "analyze", "sweep-scale-formats", "--n", "20000",
                "--formats", "unquantized,e4m3,e8m0", "--csv", str(path))
        assert a.read_bytes() == b.read_bytes()

    def test_sweep_groups(self, tmp_path, capsys):
        out = tmp_path / "g.csv"
        code, _, _ = run(capsys, "analyze", "sweep-groups", "--g-list", "16",
                         "--n", "2048", "--csv", str(out))
        assert code == 0
        rows = read_csv_text(out)
        assert len(rows) == 3  # header + (none, hadamard)

    def test_outliers(self, tmp_path, capsys):
        out = tmp_path / "o.csv"
        code, _, _ = run(capsys, "analyze", "outliers", "--n", "100000",
                         "--csv", str(out))
        assert code == 0
        rows = read_csv_text(out)
        header, vals = rows[0], rows[1]
        rec = dict(zip(header, vals))
        assert abs(float(rec["outlier_mape"]) - float(rec["mse_top_rel"])) <= float(rec["tolerance"])

    def test_csv_to_stdout(self, capsys):
        code, stdout, _ = run(None or capsys, "analyze", "sweep-scale-formats",
                              "--n", "5000", "--formats", "e4m3")
        assert code == 0
        assert stdout.splitlines()[0].startswith("format,")
