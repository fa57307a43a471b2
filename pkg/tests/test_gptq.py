"""GPTQ solver tests: Hessian plumbing, act-order, oracle equivalence."""

import numpy as np
import pytest

from microfp.errors import DataError, NumericalError
from microfp.formats import FormatSpec, ScaleFormat, dequantize, fp4_round
from microfp.gptq import (
    GptqConfig,
    Hessian,
    accumulate_hessian,
    conjugated_hessian,
    dampened_hessian,
    gptq_quantize,
    mr_gptq,
    obq_fixed_order,
    proxy_loss,
    static_act_order,
)
from microfp.quantizers import ScaleMode, ScalePolicy, prepare_scales, quantize_rtn
from microfp.transforms import TransformSpec

MXFP4 = FormatSpec.mxfp4()
NVFP4 = FormatSpec.nvfp4()


def random_psd(rng, d, rank=None):
    A = rng.standard_normal((rank or d, d))
    return A.T @ A + 0.1 * np.diag(rng.random(d))


def correlated_batch(rng, n, d, rank=4):
    F = rng.standard_normal((d, rank))
    z = rng.standard_normal((n, rank))
    eps = rng.standard_normal((n, d))
    return z @ F.T + 0.3 * eps


class TestHessian:
    def test_zero_batch_unchanged(self):
        state = Hessian(8)
        accumulate_hessian(np.zeros((4, 8)), state)
        np.testing.assert_array_equal(state.matrix, np.zeros((8, 8)))
        assert state.sample_count == 4

    def test_single_row_outer_product(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(6)
        state = accumulate_hessian(x[None, :], Hessian(6))
        np.testing.assert_allclose(state.matrix, 2.0 * np.outer(x, x))

    def test_batch_additivity(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((16, 8)), rng.standard_normal((9, 8))
        s1 = Hessian(8)
        accumulate_hessian(a, s1)
        accumulate_hessian(b, s1)
        s2 = accumulate_hessian(np.vstack([a, b]), Hessian(8))
        np.testing.assert_allclose(s1.matrix, s2.matrix, atol=1e-10)
        assert s1.sample_count == s2.sample_count == 25

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            accumulate_hessian(np.zeros((2, 5)), Hessian(8))

    def test_symmetry_and_nonnegative_diag(self):
        rng = np.random.default_rng(2)
        state = accumulate_hessian(rng.standard_normal((64, 16)), Hessian(16))
        assert np.abs(state.matrix - state.matrix.T).max() <= 1e-8
        assert (np.diag(state.matrix) >= 0).all()


class TestStaticActOrder:
    @pytest.mark.parametrize("diag,expected", [
        ([1.0, 3.0, 2.0], [1, 2, 0]),
        ([4.0, 4.0, 4.0], [0, 1, 2]),
        ([5.0, 5.0, 7.0], [2, 0, 1]),
    ])
    def test_examples(self, diag, expected):
        np.testing.assert_array_equal(static_act_order(np.diag(diag)), expected)


class TestGptqBasics:
    def test_diagonal_hessian_reduces_to_rtn(self):
        rng = np.random.default_rng(3)
        W = rng.laplace(size=(4, 32))
        H = np.diag(rng.random(32) + 0.5)
        res = gptq_quantize(W, H, MXFP4, GptqConfig())
        base = quantize_rtn(W, MXFP4)
        np.testing.assert_array_equal(res.tensor.codes, base.tensor.codes)
        np.testing.assert_array_equal(res.tensor.scale_codes, base.tensor.scale_codes)

    def test_single_column(self):
        rng = np.random.default_rng(4)
        W = rng.standard_normal((5, 1))
        spec = FormatSpec(group_size=1, scale=ScaleFormat.e8m0())
        res = gptq_quantize(W, np.array([[2.0]]), spec, GptqConfig())
        base = quantize_rtn(W, spec)
        np.testing.assert_array_equal(res.tensor.codes, base.tensor.codes)

    def test_row_independence(self):
        rng = np.random.default_rng(5)
        W = rng.laplace(size=(6, 32))
        H = random_psd(rng, 32)
        cfg = GptqConfig(act_order=True)
        joint = gptq_quantize(W, H, MXFP4, cfg)
        for r in range(W.shape[0]):
            single = gptq_quantize(W[r:r + 1], H, MXFP4, cfg)
            got = dequantize(single.tensor)
            np.testing.assert_array_equal(got, dequantize(joint.tensor)[r:r + 1])

    def test_determinism(self):
        rng = np.random.default_rng(6)
        W = rng.laplace(size=(4, 64))
        H = random_psd(rng, 64)
        cfg = GptqConfig(act_order=True, scale_policy=ScalePolicy(mode=ScaleMode.MSE))
        a = gptq_quantize(W, H, NVFP4, cfg)
        b = gptq_quantize(W.copy(), H.copy(), NVFP4, cfg)
        np.testing.assert_array_equal(a.tensor.codes, b.tensor.codes)
        assert a.mse_rel == b.mse_rel

    def test_cholesky_failure_raises_numerical_error(self):
        W = np.ones((1, 2))
        H = -np.eye(2)
        with pytest.raises(NumericalError, match="dampening"):
            gptq_quantize(W, H, FormatSpec(group_size=2, scale=ScaleFormat.e8m0()), GptqConfig())

    def test_group_structure_preserved_under_act_order(self):
        rng = np.random.default_rng(7)
        W = rng.laplace(size=(2, 64))
        H = random_psd(rng, 64)
        plain = gptq_quantize(W, H, NVFP4, GptqConfig(act_order=False))
        ordered = gptq_quantize(W, H, NVFP4, GptqConfig(act_order=True))
        np.testing.assert_array_equal(plain.tensor.scale_codes, ordered.tensor.scale_codes)
        assert plain.tensor.tensor_scale == ordered.tensor.tensor_scale


class TestObqOracle:
    def test_two_column_closed_form(self):
        # quantize col 0, compensate col 1 by +eps * H01 / H11, then round it
        b = -0.95
        H = np.array([[1.0, b], [b, 1.0]])
        W = np.array([[6.9, 2.6]])
        spec = FormatSpec(group_size=2, scale=ScaleFormat.e8m0())
        policy = ScalePolicy(e8m0_four_thirds=False)
        scales = prepare_scales(W, spec, policy)
        assert scales.effective()[0, 0] == 1.0
        out = obq_fixed_order(W, H, spec, scales)
        q0 = fp4_round(6.9)
        eps = 6.9 - q0
        w1_comp = 2.6 + eps * b / 1.0
        assert out[0, 0] == q0
        assert out[0, 1] == fp4_round(w1_comp)
        # the compensation changed the outcome vs plain RTN
        assert fp4_round(w1_comp) != fp4_round(2.6)

    def test_diagonal_equals_rtn(self):
        rng = np.random.default_rng(8)
        W = rng.laplace(size=(3, 16))
        H = np.diag(rng.random(16) + 0.2)
        scales = prepare_scales(W, NVFP4)
        out = obq_fixed_order(W, H, NVFP4, scales)
        np.testing.assert_array_equal(out, dequantize(quantize_rtn(W, NVFP4).tensor))

    def test_singular_submatrix_raises(self):
        W = np.ones((1, 4))
        H = np.zeros((4, 4))
        scales = prepare_scales(W, FormatSpec(group_size=4, scale=ScaleFormat.e8m0()))
        with pytest.raises(NumericalError, match="singular"):
            obq_fixed_order(W, H, FormatSpec(group_size=4, scale=ScaleFormat.e8m0()), scales)

    @pytest.mark.parametrize("block_width", [4, 8, 128])
    @pytest.mark.parametrize("spec", [MXFP4, NVFP4], ids=["mxfp4", "nvfp4"])
    def test_gptq_matches_obq(self, spec, block_width):
        rng = np.random.default_rng(9)
        for trial in range(6):
            W = rng.laplace(size=(8, 32))
            H = random_psd(rng, 32)
            cfg = GptqConfig(block_width=block_width)
            res = gptq_quantize(W, H, spec, cfg)
            scales = prepare_scales(W, spec, cfg.scale_policy)
            oracle = obq_fixed_order(W, dampened_hessian(H, cfg), spec, scales)
            np.testing.assert_array_equal(dequantize(res.tensor), oracle)


class TestMrGptq:
    def test_identity_transform_degenerates_to_gptq(self):
        rng = np.random.default_rng(10)
        W = rng.laplace(size=(4, 64))
        H = random_psd(rng, 64)
        got = mr_gptq(W, H, NVFP4, transform=TransformSpec.identity(1))
        cfg = GptqConfig(act_order=True, scale_policy=ScalePolicy(mode=ScaleMode.MSE),
                         transform=TransformSpec.identity(1))
        want = gptq_quantize(W, H, NVFP4, cfg)
        np.testing.assert_array_equal(got.tensor.codes, want.tensor.codes)
        np.testing.assert_array_equal(got.tensor.scale_codes, want.tensor.scale_codes)

    def test_default_transform_matches_group_size(self):
        rng = np.random.default_rng(11)
        W = rng.laplace(size=(2, 64))
        H = random_psd(rng, 64)
        res = mr_gptq(W, H, NVFP4)
        assert res.tensor.transform == TransformSpec.hadamard(16)
        res_mx = mr_gptq(W, H, MXFP4)
        assert res_mx.tensor.transform == TransformSpec.hadamard(32)
        assert res_mx.tensor.scale_fit is not None  # fitted E8M0 grid by default

    def test_e8m0_block_cap(self):
        rng = np.random.default_rng(12)
        W = rng.laplace(size=(2, 256))
        H = random_psd(rng, 256)
        with pytest.raises(DataError, match="128"):
            mr_gptq(W, H, MXFP4, transform=TransformSpec.hadamard(256))

    def test_nvfp4_parity_with_plain_gptq(self):
        # rotation + MSE scales stay within 1.1x of plain GPTQ on NVFP4
        rng = np.random.default_rng(601)
        d = 256
        F = rng.standard_normal((d, 16))
        X = rng.standard_normal((512, 16)) @ F.T + 0.3 * rng.standard_normal((512, d))
        W = rng.laplace(scale=1 / np.sqrt(2), size=(128, d))
        state = accumulate_hessian(X, Hessian(d))
        plain = gptq_quantize(W, state, NVFP4, GptqConfig())
        mr = mr_gptq(W, state, NVFP4)
        assert mr.mse_rel <= 1.1 * plain.mse_rel

    def test_transform_is_recorded_for_reconstruction(self):
        rng = np.random.default_rng(13)
        W = rng.laplace(size=(2, 64))
        H = random_psd(rng, 64)
        res = mr_gptq(W, H, MXFP4)
        from microfp.quantizers import reconstruct
        est = reconstruct(res.tensor)
        assert est.shape == W.shape
        rel = ((est - W) ** 2).sum() / (W ** 2).sum()
        assert rel < 0.2


class TestProxyLoss:
    def test_matches_explicit_calibration_product(self):
        rng = np.random.default_rng(14)
        X = rng.standard_normal((50, 16))
        W = rng.standard_normal((3, 16))
        Wh = W + 0.01 * rng.standard_normal(W.shape)
        state = accumulate_hessian(X, Hessian(16))
        direct = np.linalg.norm(X @ Wh.T - X @ W.T) ** 2
        assert proxy_loss(W, Wh, state) == pytest.approx(direct, rel=1e-10)

    def test_gptq_beats_rtn_on_correlated_data(self):
        rng = np.random.default_rng(15)
        wins = 0
        for trial in range(10):
            X = correlated_batch(rng, 256, 64)
            W = rng.laplace(size=(16, 64))
            state = accumulate_hessian(X, Hessian(64))
            res = gptq_quantize(W, state, MXFP4, GptqConfig())
            base = quantize_rtn(W, MXFP4)
            lg = proxy_loss(W, dequantize(res.tensor), state)
            lr = proxy_loss(W, dequantize(base.tensor), state)
            wins += lg <= lr
        assert wins >= 9

    def test_conjugated_hessian_preserves_proxy_loss(self):
        # rotating W and conjugating H leaves the objective invariant
        rng = np.random.default_rng(16)
        X = rng.standard_normal((64, 32))
        W = rng.laplace(size=(4, 32))
        E = 0.01 * rng.standard_normal(W.shape)
        state = accumulate_hessian(X, Hessian(32))
        tr = TransformSpec.hadamard(16)
        from microfp.transforms import apply_blockwise
        lhs = proxy_loss(W, W + E, state)
        rhs = proxy_loss(apply_blockwise(W, tr), apply_blockwise(W + E, tr),
                         conjugated_hessian(state.matrix, tr))
        assert lhs == pytest.approx(rhs, rel=1e-10)
