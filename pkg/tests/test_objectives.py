import numpy as np
import pytest

from modmae.errors import (
    DegenerateLossError,
    InsufficientBatchError,
    NonFiniteLossError,
    RangeError,
)
from modmae.network import init_params
from modmae.objectives import (
    GradcheckReport,
    compute_loss_and_grads,
    gradcheck,
    loss_cov,
    loss_cov_grad,
    loss_mae,
    loss_total,
    loss_var,
    loss_var_grad,
    warmup_lambdas,
)
from modmae.tokenizer import MaskPlan, PatchSet, SessionTokens, TokenBatch


def fake_batch(target, mask, hidden=(0,)):
    """Single-session batch with hand-built patches for loss oracles."""
    target = np.asarray(target, np.float32)
    mask = np.asarray(mask, bool)
    n, p3 = target.shape
    ps = PatchSet(
        patches=target,
        extent_mask=mask,
        modality_ids=np.zeros(n, np.int32),
        coords=np.zeros((n, 3), np.int32),
        valid=mask.any(axis=1),
        grid=(n, 1, 1),
        patch_size=(p3, 1, 1),
        modalities=["t1"],
    )
    plan = MaskPlan(hidden=np.asarray(hidden, np.int64))
    tokens = SessionTokens(case_id="f", patch_set=ps, plan=plan,
                           modality_embeddings=np.zeros((1, 4)))
    return TokenBatch(sessions=[tokens])


class TestLossMae:
    def test_perfect_reconstruction_is_zero(self):
        batch = fake_batch([[1.0, 2.0]], [[True, True]])
        value, n = loss_mae([np.array([[1.0, 2.0]])], batch)
        assert value == 0.0 and n == 2

    def test_hand_summation_example(self):
        batch = fake_batch([[1.0, 2.0]], [[True, True]])
        value, n = loss_mae([np.array([[1.0, 0.0]])], batch)
        assert value == pytest.approx(2.0, abs=1e-9)
        assert n == 2

    def test_straddling_patch_counts_valid_voxel_only(self):
        batch = fake_batch([[1.0, 2.0]], [[True, False]])
        value, n = loss_mae([np.array([[5.0, 7.0]])], batch)
        assert n == 1
        assert value == pytest.approx(16.0, abs=1e-9)

    def test_no_hidden_valid_voxels_is_degenerate(self):
        batch = fake_batch([[1.0, 2.0]], [[False, False]])
        with pytest.raises(DegenerateLossError):
            loss_mae([np.array([[0.0, 0.0]])], batch)

    def test_invariant_to_recon_at_invalid_positions(self):
        batch = fake_batch([[1.0, 2.0]], [[True, False]])
        a, _ = loss_mae([np.array([[5.0, 7.0]])], batch)
        b, _ = loss_mae([np.array([[5.0, -999.0]])], batch)
        assert a == b


class TestLossVar:
    def test_saturated_when_variance_high(self):
        rng = np.random.default_rng(0)
        z = rng.normal(0, 2.0, (200, 4))
        z = (z - z.mean(0)) / z.std(0, ddof=1) * 2.0  # unbiased var = 4
        assert loss_var(z) == 0.0

    def test_constant_columns(self):
        z = np.ones((3, 5))
        assert loss_var(z) == pytest.approx(0.99, abs=1e-12)

    def test_hand_example(self):
        z = np.array([[0.0, 0.0], [2.0, 0.0]])
        assert loss_var(z) == pytest.approx(0.495, abs=1e-9)

    def test_insufficient_batch(self):
        with pytest.raises(InsufficientBatchError):
            loss_var(np.ones((1, 4)))

    def test_scaling_up_never_increases(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(8, 6))
        prev = loss_var(z)
        for c in (1.0, 1.5, 2.0, 4.0):
            cur = loss_var(c * z)
            assert cur <= prev + 1e-12
            prev = cur

    def test_zero_when_all_variances_above_threshold(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(64, 8))
        z = (z - z.mean(0)) / z.std(0, ddof=1)  # unbiased var exactly 1
        assert loss_var(z) == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        z = rng.normal(0, 0.3, (6, 5))
        _, dz = loss_var_grad(z)
        h = 1e-6
        for idx in [(0, 0), (3, 2), (5, 4)]:
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            numeric = (loss_var(zp) - loss_var(zm)) / (2 * h)
            assert dz[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


class TestLossCov:
    def test_orthogonal_centered_columns(self):
        z = np.array([[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]])
        assert loss_cov(z) == 0.0

    def test_single_dimension_defined_zero(self):
        assert loss_cov(np.array([[1.0], [2.0]])) == 0.0

    def test_hand_example(self):
        z = np.array([[1.0, 1.0], [-1.0, -1.0]])
        assert loss_cov(z) == pytest.approx(4.0, abs=1e-9)

    def test_invariant_to_row_constant_shift(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(7, 5))
        shift = rng.normal(size=5)
        assert loss_cov(z + shift) == pytest.approx(loss_cov(z), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(5, 4))
        _, dz = loss_cov_grad(z)
        h = 1e-6
        for idx in [(0, 0), (2, 3), (4, 1)]:
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            numeric = (loss_cov(zp) - loss_cov(zm)) / (2 * h)
            assert dz[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-9)


class TestWarmup:
    def test_ramp_start(self):
        assert warmup_lambdas(0, 10) == (0.0, 0.0)

    def test_halfway(self):
        lv, lc = warmup_lambdas(25, 10)  # 2.5 epochs of 10 steps
        assert lv == pytest.approx(0.05)
        assert lc == pytest.approx(0.0025)

    def test_full_weights_at_and_after_warmup_end(self):
        for step in (50, 51, 500):
            assert warmup_lambdas(step, 10) == (0.1, 0.005)

    def test_negative_step_rejected(self):
        with pytest.raises(RangeError):
            warmup_lambdas(-1, 10)


class TestLossTotal:
    def test_component_example(self):
        report = loss_total(2.0, 0.99, 4.0, 0.1, 0.005, 7)
        assert report.l_total == pytest.approx(2.119, abs=1e-12)

    def test_zero_lambdas(self):
        assert loss_total(1.5, 9.0, 9.0, 0.0, 0.0).l_total == 1.5

    def test_all_zero(self):
        assert loss_total(0.0, 0.0, 0.0, 0.0, 0.0).l_total == 0.0

    def test_identity_holds_exactly_as_computed(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            lm, lv, lc = rng.uniform(0, 3, 3)
            wv, wc = rng.uniform(0, 0.2, 2)
            report = loss_total(lm, lv, lc, wv, wc)
            assert report.l_total == lm + wv * lv + wc * lc

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteLossError):
            loss_total(np.nan, 0.0, 0.0, 0.1, 0.005)


class TestGradcheck:
    def test_central_difference_exact_for_linear_model(self):
        # L(w) = (w x)^2 is quadratic, so the central difference is exact
        x, w, h = 3.0, 1.25, 1e-3
        analytic = 2.0 * w * x * x
        numeric = (((w + h) * x) ** 2 - ((w - h) * x) ** 2) / (2 * h)
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        assert rel < 1e-12

    def test_tiny_full_model_passes(self, tiny_net, tiny_batch):
        # h = 3e-4: small enough that O(h^2) truncation stays below the
        # 1e-4 tolerance, large enough to stay clear of cancellation noise
        params = init_params(tiny_net, seed=5, scheme="dense",
                             dtype=np.float64)
        report = gradcheck(params, tiny_net, tiny_batch, coords_per_tensor=1,
                           h=3e-4)
        assert isinstance(report, GradcheckReport)
        assert report.passed
        assert report.max_rel_error < 1e-4

    def test_fault_injection_detected(self, tiny_net, tiny_batch):
        params = init_params(tiny_net, seed=5, scheme="dense",
                             dtype=np.float64)
        report = gradcheck(params, tiny_net, tiny_batch, coords_per_tensor=1,
                           grad_scale=1.01)
        assert not report.passed
        assert 3e-3 < report.max_rel_error < 8e-3


class TestComputeLossAndGrads:
    def test_report_consistency(self, tiny_net, tiny_batch):
        params = init_params(tiny_net, seed=5, scheme="dense",
                             dtype=np.float64)
        report, grads = compute_loss_and_grads(params, tiny_net, tiny_batch,
                                               0.1, 0.005)
        assert set(grads) == set(params)
        assert report.l_total == report.l_mae + 0.1 * report.l_var \
            + 0.005 * report.l_cov
        assert report.n_valid_elements >= 1
        for g in grads.values():
            assert np.isfinite(g).all()
