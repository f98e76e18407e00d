import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatmark import losses as L
from heatmark.engine.gradcheck import gradient_check
from heatmark.engine.tensor import Tensor
from heatmark.errors import ContractError
from heatmark.heatmaps import (
    GAUSSIAN,
    LAPLACE,
    DistributionParams,
    HeatmapStack,
    LandmarkSet,
    SoftargmaxConfig,
    estimate_scale,
    normalize,
    softargmax2d,
)


def laplace_kl_closed(delta, b):
    return -np.log(b) + abs(delta) + b * np.exp(-abs(delta) / b) - 1.0


def gaussian_kl_closed(delta, s):
    return -np.log(s) + (s * s + delta * delta) / 2.0 - 0.5


def kl_integration_oracle(family, delta, scale):
    """Adaptive trapezoid quadrature of q ln(q/p); step shrinks with the
    scale so peak curvature is resolved, range grows so tails vanish."""
    reach = 80.0 * max(1.0, scale) + abs(delta)
    step = min(1e-3, scale / 1000.0)
    x = np.arange(-reach, reach + step, step)
    if family == LAPLACE:
        logq = -np.abs(x - delta) / scale - np.log(2.0 * scale)
        logp = -np.abs(x) - np.log(2.0)
    else:
        logq = -((x - delta) ** 2) / (2 * scale * scale) - np.log(scale * np.sqrt(2 * np.pi))
        logp = -(x**2) / 2.0 - np.log(np.sqrt(2 * np.pi))
    q = np.exp(logq)
    return float(np.trapezoid(q * (logq - logp), x))


def params(family, mu, scale):
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
    scale = np.asarray(scale, dtype=np.float64).reshape(-1, 2)
    return DistributionParams(family, Tensor(mu), Tensor(scale))


class TestL2CoordinateLoss:
    def test_identical_is_zero(self):
        pts = LandmarkSet(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert L.l2_coordinate_loss(pts, pts).item() == 0.0

    def test_three_four_five(self):
        pred = LandmarkSet(np.array([[3.0, 4.0]]))
        truth = LandmarkSet(np.array([[0.0, 0.0]]))
        assert L.l2_coordinate_loss(pred, truth).item() == pytest.approx(5.0)

    def test_mean_over_landmarks(self):
        pred = LandmarkSet(np.array([[1.0, 0.0], [3.0, 0.0]]))
        truth = LandmarkSet(np.zeros((2, 2)))
        assert L.l2_coordinate_loss(pred, truth).item() == pytest.approx(2.0)

    def test_only_visible_landmarks_count(self):
        pred = LandmarkSet(np.array([[1.0, 0.0], [100.0, 0.0]]))
        truth = LandmarkSet(np.zeros((2, 2)), visible=np.array([True, False]))
        assert L.l2_coordinate_loss(pred, truth).item() == pytest.approx(1.0)

    def test_zero_visible_rejected(self):
        pred = LandmarkSet(np.zeros((1, 2)))
        truth = LandmarkSet(np.zeros((1, 2)), visible=np.array([False]))
        with pytest.raises(ContractError):
            L.l2_coordinate_loss(pred, truth)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ContractError):
            L.l2_coordinate_loss(LandmarkSet(np.zeros((1, 2))), LandmarkSet(np.zeros((2, 2))))


class TestSoftargmaxLoss:
    def test_saturated_one_hot_near_zero(self):
        raw = np.zeros((1, 9, 9))
        raw[0, 4, 6] = 1000.0
        truth = LandmarkSet(np.array([[6.0, 4.0]]))
        loss = L.softargmax_loss(HeatmapStack(Tensor(raw)), truth)
        assert loss.item() < 1e-4

    def test_uniform_raw_centroid(self):
        truth = LandmarkSet(np.array([[4.0, 4.0]]))
        loss = L.softargmax_loss(HeatmapStack(Tensor(np.zeros((1, 9, 9)))), truth)
        assert loss.item() < 1e-6

    def test_already_normalized_input_used_as_is(self):
        maps = np.array([[[0.25, 0.5, 0.25]]])
        truth = LandmarkSet(np.array([[0.0, 0.0]]))
        loss = L.softargmax_loss(HeatmapStack(Tensor(maps), normalized=True), truth)
        assert loss.item() == pytest.approx(1.0)


class TestKlDivergence:
    def test_identical_distributions_zero(self):
        q = params(LAPLACE, [[0.0, 0.0]], [[1.0, 1.0]])
        truth = LandmarkSet(np.zeros((1, 2)))
        assert L.kl_divergence(q, truth).item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift_gives_exp_minus_one(self):
        q = params(LAPLACE, [[1.0, 1.0]], [[1.0, 1.0]])
        truth = LandmarkSet(np.zeros((1, 2)))
        assert L.kl_divergence(q, truth).item() == pytest.approx(np.exp(-1), rel=1e-9)

    def test_double_scale_gives_one_minus_ln2(self):
        q = params(LAPLACE, [[0.0, 0.0]], [[2.0, 2.0]])
        truth = LandmarkSet(np.zeros((1, 2)))
        assert L.kl_divergence(q, truth).item() == pytest.approx(1 - np.log(2), rel=1e-9)

    def test_nonpositive_scale_rejected(self):
        q = params(LAPLACE, [[0.0, 0.0]], [[1.0, 0.0]])
        with pytest.raises(ContractError):
            L.kl_divergence(q, LandmarkSet(np.zeros((1, 2))))

    @pytest.mark.parametrize("family", [LAPLACE, GAUSSIAN])
    @pytest.mark.parametrize("delta", [0.0, 0.5, -1.0, 3.0])
    @pytest.mark.parametrize("scale", [0.25, 1.0, 4.0])
    def test_closed_form_matches_quadrature(self, family, delta, scale):
        closed = (
            laplace_kl_closed(delta, scale) if family == LAPLACE else gaussian_kl_closed(delta, scale)
        )
        q = params(family, [[delta, delta]], [[scale, scale]])
        truth = LandmarkSet(np.zeros((1, 2)))
        assert L.kl_divergence(q, truth).item() == pytest.approx(closed, abs=1e-9)
        assert closed == pytest.approx(kl_integration_oracle(family, delta, scale), abs=1e-6)

    @given(
        mu=st.floats(-5, 5),
        scale=st.floats(0.05, 8.0),
        family=st.sampled_from([LAPLACE, GAUSSIAN]),
    )
    @settings(max_examples=60, deadline=None)
    def test_nonnegative_and_zero_only_at_target(self, mu, scale, family):
        q = params(family, [[mu, mu]], [[scale, scale]])
        val = L.kl_divergence(q, LandmarkSet(np.zeros((1, 2)))).item()
        assert val >= -1e-12
        if abs(mu) > 1e-3 or abs(scale - 1.0) > 1e-3:
            assert val > 1e-9

    def test_monotone_in_log_scale(self):
        truth = LandmarkSet(np.zeros((1, 2)))
        below = [L.kl_divergence(params(LAPLACE, [[0, 0]], [[b, b]]), truth).item()
                 for b in (1.0, 0.5, 0.25, 0.125)]
        above = [L.kl_divergence(params(LAPLACE, [[0, 0]], [[b, b]]), truth).item()
                 for b in (1.0, 2.0, 4.0, 8.0)]
        assert all(np.diff(below) > 0) and all(np.diff(above) > 0)


class TestAdversarialLosses:
    def test_maximal_confusion_point(self):
        half = Tensor(np.full((2, 3), 0.5))
        d_loss, g_adv = L.adversarial_losses(half, half)
        assert d_loss.item() == pytest.approx(2 * np.log(2), rel=1e-6)
        assert g_adv.item() == pytest.approx(np.log(2), rel=1e-6)

    def test_perfect_discriminator_loss_vanishes(self):
        d_loss, _ = L.adversarial_losses(
            Tensor(np.full((2, 2), 1.0 - 1e-9)), Tensor(np.full((2, 2), 1e-9))
        )
        assert d_loss.item() < 1e-5

    def test_scores_clamped_before_log(self):
        d_loss, g_adv = L.adversarial_losses(Tensor(np.zeros((1, 1))), Tensor(np.ones((1, 1))))
        assert np.isfinite(d_loss.item()) and np.isfinite(g_adv.item())

    def test_saturating_flag_flips_generator_form(self):
        fake = Tensor(np.full((1, 4), 0.3))
        _, non_sat = L.adversarial_losses(fake, fake, saturating=False)
        _, sat = L.adversarial_losses(fake, fake, saturating=True)
        assert non_sat.item() == pytest.approx(-np.log(0.3), rel=1e-6)
        assert sat.item() == pytest.approx(np.log(0.7), rel=1e-6)


class TestTotalGeneratorLoss:
    def test_zero_lambda_passthrough(self):
        sup = L.LossValue(Tensor(np.float64(1.5)), {"supervised": 1.5})
        adv = L.LossValue(Tensor(np.float64(2.0)), {"adversarial": 2.0})
        assert L.total_generator_loss(sup, adv, 0.0).item() == pytest.approx(1.5)

    def test_weighted_combination(self):
        sup = L.LossValue(Tensor(np.float64(1.0)), {})
        adv = L.LossValue(Tensor(np.float64(2.0)), {})
        assert L.total_generator_loss(sup, adv, 0.001).item() == pytest.approx(1.002)

    @given(sup=st.floats(0, 10), adv=st.floats(-5, 10), lam=st.floats(0, 1))
    @settings(max_examples=40, deadline=None)
    def test_breakdown_sums_to_scalar(self, sup, adv, lam):
        total = L.total_generator_loss(
            L.LossValue(Tensor(np.float64(sup)), {}),
            L.LossValue(Tensor(np.float64(adv)), {}),
            lam,
        )
        assert sum(total.breakdown.values()) == pytest.approx(total.item(), abs=1e-5)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ContractError):
            L.total_generator_loss(
                L.LossValue(Tensor(np.float64(1.0)), {}),
                L.LossValue(Tensor(np.float64(1.0)), {}),
                -0.1,
            )


class TestEndToEndGradients:
    @pytest.mark.parametrize("kind", L.LOSS_KINDS)
    def test_loss_through_heatmap_pipeline(self, kind):
        rng = np.random.default_rng(4)
        truth = LandmarkSet(np.array([[4.3, 3.6], [2.2, 6.1]]))

        def fn(x):
            raw = HeatmapStack(x)
            return L.supervised_loss(raw, truth, kind, SoftargmaxConfig(1.0)).scalar

        point = Tensor(rng.standard_normal((2, 9, 9)), dtype=np.float64)
        assert gradient_check(fn, point) <= 1e-6

    def test_scale_pipeline_gradient(self):
        rng = np.random.default_rng(8)

        def fn(x):
            st_ = normalize(HeatmapStack(x))
            mu = softargmax2d(st_)
            dp = estimate_scale(st_, mu, LAPLACE)
            return L.kl_divergence(dp, LandmarkSet(np.array([[4.0, 4.0]]))).scalar

        point = Tensor(rng.standard_normal((1, 9, 9)), dtype=np.float64)
        assert gradient_check(fn, point) <= 1e-6
