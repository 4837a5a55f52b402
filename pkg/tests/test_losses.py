"""Loss values, analytic gradients and the finite-difference harness."""

import numpy as np
import pytest

from depi import (
    DenseField,
    FieldGradient,
    LossWeights,
    MatchabilityConfig,
    ValidationError,
    perturb_field,
)
from depi.consistency import (
    AffinitySet,
    build_affinities,
    multiview_loss,
    photometric_loss,
)
from depi.exceptions import MaskMismatchError
from depi.field import PART_MISMATCH_PENALTY, foreground_uv
from depi.losses import (
    FdResult,
    LossReport,
    distillation_loss,
    finite_difference_check,
    grad_multiview,
    grad_photometric,
    grad_total,
    pair_terms,
    supervised_loss,
)


def _strip_field(uv_row, parts=None):
    """1xN all-foreground field from a row of UV values."""
    uv_row = np.asarray(uv_row, dtype=float)
    n = len(uv_row)
    part = np.zeros((1, n), np.uint8) if parts is None else \
        np.asarray(parts, np.uint8).reshape(1, n)
    return DenseField(np.ones((1, n), bool), part,
                      uv_row.reshape(1, n, 2), num_parts=int(part.max()) + 1)


def _pair_affinities(rig, cfg=None):
    views, obs = rig
    o = obs[0]
    return o, build_affinities(views[0].field, views[1].field, o.pair,
                               o.image_a, o.image_b, o.vis_a, o.vis_b,
                               cfg or MatchabilityConfig())


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_m, w.lambda_r, w.lambda_t) == (1.0, 2000.0, 10.0)

    def test_rejects_negative(self):
        with pytest.raises(ValidationError):
            LossWeights(lambda_m=-1.0)
        with pytest.raises(ValidationError):
            LossWeights(lambda_r=float("nan"))

    def test_to_dict(self):
        assert LossWeights(1.0, 2.0, 3.0).to_dict() == {
            "lambda_m": 1.0, "lambda_r": 2.0, "lambda_t": 3.0}


class TestFieldGradient:
    def test_zeros_and_flat_roundtrip(self):
        f = _strip_field([(0.1, 0.2), (0.3, 0.4), (0.5, 0.6)])
        g = FieldGradient.zeros(f)
        assert g.values.shape == (1, 3, 2)
        flat = np.arange(6.0).reshape(3, 2)
        g2 = FieldGradient.from_flat(f, flat)
        assert np.array_equal(g2.flat, flat)

    def test_background_stays_zero(self):
        fg = np.array([[True, False, True]])
        f = DenseField(fg, np.zeros((1, 3), np.uint8), np.zeros((1, 3, 2)),
                       num_parts=1)
        g = FieldGradient.from_flat(f, np.ones((2, 2)))
        assert np.all(g.values[0, 1] == 0.0)

    def test_scaled_and_add(self):
        f = _strip_field([(0.0, 0.0), (1.0, 1.0)])
        g = FieldGradient.from_flat(f, np.array([[1.0, 2.0], [3.0, 4.0]]))
        total = g.scaled(2.0).add(g)
        assert np.allclose(total.flat, 3.0 * g.flat)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            FieldGradient(np.zeros((2, 2, 2)), np.ones((3, 3), bool))


class TestSupervisedLoss:
    def test_zero_at_ground_truth(self):
        f = _strip_field([(0.1, 0.9), (0.4, 0.4)])
        loss, grad = supervised_loss(f, f.copy())
        assert loss == 0.0
        assert np.all(grad.flat == 0.0)  # sign(0) at the tie

    def test_summed_l1_with_sign_gradient(self):
        gt = _strip_field([(0.5, 0.5), (0.5, 0.5), (0.5, 0.5)])
        pred = gt.copy()
        pred.uv += np.array([0.1, -0.2])
        loss, grad = supervised_loss(pred, gt)
        assert loss == pytest.approx(3 * 0.3, rel=1e-12)
        assert np.allclose(grad.flat, np.tile([1.0, -1.0], (3, 1)))

    def test_part_mismatch_is_flat_penalty(self):
        gt = _strip_field([(0.5, 0.5), (0.5, 0.5)], parts=[0, 1])
        pred = _strip_field([(0.5, 0.5), (0.5, 0.5)], parts=[0, 0])
        pred.uv[0, 1] += 0.25  # wrong-part pixel; offset must not matter
        loss, grad = supervised_loss(pred, gt)
        assert loss == pytest.approx(PART_MISMATCH_PENALTY)
        assert np.all(grad.flat[1] == 0.0)

    def test_mask_mismatch_rejected(self):
        a = _strip_field([(0.1, 0.1)])
        fg = np.array([[True, True]])
        b = DenseField(fg, np.zeros((1, 2), np.uint8), np.zeros((1, 2, 2)),
                       num_parts=1)
        with pytest.raises(MaskMismatchError):
            supervised_loss(a, b)

    def test_finite_differences_away_from_ties(self, rig_small):
        views, _ = rig_small
        gt = views[0].field
        pred = perturb_field(gt, 0.03, seed=9)
        err = finite_difference_check(lambda f: supervised_loss(f, gt), pred)
        assert err < 1e-5


class TestDistillationLoss:
    def test_zero_at_anchor(self):
        f = _strip_field([(0.2, 0.8)])
        loss, grad = distillation_loss(f, f.copy())
        assert loss == 0.0 and np.all(grad.flat == 0.0)

    def test_summed_squared_with_linear_gradient(self):
        anchor = _strip_field([(0.5, 0.5), (0.5, 0.5), (0.5, 0.5)])
        pred = anchor.copy()
        pred.uv += np.array([0.1, -0.2])
        loss, grad = distillation_loss(pred, anchor)
        assert loss == pytest.approx(3 * (0.01 + 0.04), rel=1e-12)
        assert np.allclose(grad.flat, np.tile([0.2, -0.4], (3, 1)))

    def test_part_mismatch_is_flat_penalty(self):
        anchor = _strip_field([(0.5, 0.5)], parts=[1])
        anchor.num_parts = 2
        pred = _strip_field([(0.9, 0.5)], parts=[0])
        pred.num_parts = 2
        loss, grad = distillation_loss(pred, anchor)
        assert loss == pytest.approx(PART_MISMATCH_PENALTY)
        assert np.all(grad.flat == 0.0)

    def test_finite_differences(self, rig_small):
        views, _ = rig_small
        anchor = views[0].field
        pred = perturb_field(anchor, 0.05, seed=10)
        err = finite_difference_check(lambda f: distillation_loss(f, anchor), pred)
        assert err < 1e-5


class TestPairTerms:
    def test_matches_standalone_losses(self, rig_small):
        _, aff = _pair_affinities(rig_small,
                                  MatchabilityConfig(omega_mode="partners"))
        l_m, l_t, g_a, g_b = pair_terms(aff, aff.uv_a, aff.uv_b,
                                        lambda_m=1.0, lambda_t=1.0)
        assert l_m == pytest.approx(multiview_loss(aff), rel=1e-10)
        assert l_t == pytest.approx(photometric_loss(aff), rel=1e-10)
        assert g_a.shape == (aff.shape[0], 2)
        assert g_b.shape == (aff.shape[1], 2)

    def test_want_grads_false(self, rig_small):
        _, aff = _pair_affinities(rig_small)
        l_m, l_t, g_a, g_b = pair_terms(aff, aff.uv_a, aff.uv_b,
                                        want_grads=False)
        assert g_a is None and g_b is None and l_m > 0.0

    def test_gradient_linear_in_lambdas(self, rig_small):
        _, aff = _pair_affinities(rig_small,
                                  MatchabilityConfig(omega_mode="partners"))
        _, _, ga_m, gb_m = pair_terms(aff, aff.uv_a, aff.uv_b, 1.0, 0.0)
        _, _, ga_t, gb_t = pair_terms(aff, aff.uv_a, aff.uv_b, 0.0, 1.0)
        _, _, ga, gb = pair_terms(aff, aff.uv_a, aff.uv_b, 2.0, 3.0)
        assert np.allclose(ga, 2.0 * ga_m + 3.0 * ga_t, rtol=1e-10, atol=1e-12)
        assert np.allclose(gb, 2.0 * gb_m + 3.0 * gb_t, rtol=1e-10, atol=1e-12)

    def test_sigma_override_changes_kernel(self, rig_small):
        _, aff = _pair_affinities(rig_small)
        base = pair_terms(aff, aff.uv_a, aff.uv_b, want_grads=False)[0]
        tight = pair_terms(aff, aff.uv_a, aff.uv_b, sigma=0.01,
                           want_grads=False)[0]
        assert tight != pytest.approx(base, rel=1e-3)

    def test_empty_pair(self):
        cfg = MatchabilityConfig()
        z2 = np.zeros((0, 2))
        aff = AffinitySet(M=np.zeros((0, 0)), E=np.zeros((0, 0)),
                          Eprime=np.zeros((0, 0)), T=np.zeros((0, 0)),
                          V=np.zeros(0), Vprime=np.zeros(0),
                          pixels_a=np.zeros((0, 2), np.int64),
                          pixels_b=np.zeros((0, 2), np.int64),
                          parts_a=np.zeros(0, np.int64),
                          parts_b=np.zeros(0, np.int64),
                          uv_a=z2, uv_b=z2, cfg=cfg)
        l_m, l_t, g_a, g_b = pair_terms(aff, z2, z2)
        assert (l_m, l_t) == (0.0, 0.0)
        assert g_a.shape == (0, 2) and g_b.shape == (0, 2)


class TestCorrespondenceGradients:
    @pytest.mark.parametrize("mode", ["grid", "partners"])
    def test_multiview_finite_differences(self, rig_small, mode):
        views, obs = rig_small
        o = obs[0]
        fa = perturb_field(views[0].field, 0.02, seed=31)
        fb = perturb_field(views[1].field, 0.02, seed=32)
        cfg = MatchabilityConfig(sigma=0.05, omega_mode=mode)
        aff = build_affinities(fa, fb, o.pair, o.image_a, o.image_b,
                               o.vis_a, o.vis_b, cfg)
        err_a = finite_difference_check(
            lambda f: grad_multiview(f, fb, aff)[:2], fa)
        err_b = finite_difference_check(
            lambda f: grad_multiview(fa, f, aff)[0:3:2], fb)
        assert err_a < 1e-5 and err_b < 1e-5

    @pytest.mark.parametrize("mode", ["grid", "partners"])
    def test_photometric_finite_differences(self, rig_small, mode):
        views, obs = rig_small
        o = obs[0]
        fa = perturb_field(views[0].field, 0.02, seed=33)
        fb = perturb_field(views[1].field, 0.02, seed=34)
        cfg = MatchabilityConfig(sigma=0.05, omega_mode=mode)
        aff = build_affinities(fa, fb, o.pair, o.image_a, o.image_b,
                               o.vis_a, o.vis_b, cfg)
        err_a = finite_difference_check(
            lambda f: grad_photometric(f, fb, aff)[:2], fa)
        # the small photometric loss needs a larger bump to stay above
        # central-difference roundoff
        err_b = finite_difference_check(
            lambda f: grad_photometric(fa, f, aff)[0:3:2], fb, epsilon=3e-5)
        assert err_a < 1e-5 and err_b < 1e-5

    def test_loss_value_matches_consistency_module(self, rig_small):
        views, obs = rig_small
        o = obs[0]
        fa, fb = views[0].field, views[1].field
        aff = build_affinities(fa, fb, o.pair, o.image_a, o.image_b,
                               o.vis_a, o.vis_b)
        assert grad_multiview(fa, fb, aff)[0] == pytest.approx(
            multiview_loss(aff), rel=1e-10)
        assert grad_photometric(fa, fb, aff)[0] == pytest.approx(
            photometric_loss(aff), rel=1e-10)

    def test_gradients_zero_on_background(self, rig_small):
        views, obs = rig_small
        o = obs[0]
        fa, fb = views[0].field, views[1].field
        aff = build_affinities(fa, fb, o.pair, o.image_a, o.image_b,
                               o.vis_a, o.vis_b)
        _, ga, gb = grad_multiview(fa, fb, aff)
        assert np.all(ga.values[~fa.foreground] == 0.0)
        assert np.all(gb.values[~fb.foreground] == 0.0)


class TestGradTotal:
    def test_composes_linearly(self, rig_small):
        views, obs = rig_small
        o = obs[0]
        gt_a, gt_b = views[0].field, views[1].field
        fa = perturb_field(gt_a, 0.03, seed=41)
        fb = perturb_field(gt_b, 0.03, seed=42)
        aff = build_affinities(fa, fb, o.pair, o.image_a, o.image_b,
                               o.vis_a, o.vis_b)
        w = LossWeights(0.5, 100.0, 3.0)
        g_a, g_b, report = grad_total(fa, fb, aff, w, frozen_a=gt_a,
                                      frozen_b=gt_b, gt_a=gt_a, gt_b=gt_b)

        _, ga_m, _ = grad_multiview(fa, fb, aff)
        _, ga_t, _ = grad_photometric(fa, fb, aff)
        _, ga_r = distillation_loss(fa, gt_a)
        _, ga_l = supervised_loss(fa, gt_a)
        manual = (w.lambda_m * ga_m.values + w.lambda_t * ga_t.values
                  + w.lambda_r * ga_r.values + ga_l.values)
        assert np.allclose(g_a.values, manual, rtol=1e-10, atol=1e-12)

    def test_report_totals(self, rig_small):
        views, obs = rig_small
        o = obs[0]
        gt_a = views[0].field
        fa = perturb_field(gt_a, 0.02, seed=43)
        fb = views[1].field
        aff = build_affinities(fa, fb, o.pair, o.image_a, o.image_b,
                               o.vis_a, o.vis_b)
        w = LossWeights(1.0, 10.0, 2.0)
        _, _, rep = grad_total(fa, fb, aff, w, frozen_a=gt_a, gt_a=gt_a)
        assert rep.total == rep.l_l + rep.l_m + 10.0 * rep.l_r + 2.0 * rep.l_t
        assert rep.l_r > 0.0 and rep.l_l > 0.0

    def test_terms_enter_only_when_references_given(self, rig_small):
        views, obs = rig_small
        o = obs[0]
        fa, fb = views[0].field, views[1].field
        aff = build_affinities(fa, fb, o.pair, o.image_a, o.image_b,
                               o.vis_a, o.vis_b)
        _, _, rep = grad_total(fa, fb, aff, LossWeights())
        assert rep.l_r == 0.0 and rep.l_l == 0.0 and rep.l_m > 0.0

    def test_error_maps(self, rig_small):
        views, obs = rig_small
        o = obs[0]
        fa, fb = views[0].field, views[1].field
        aff = build_affinities(fa, fb, o.pair, o.image_a, o.image_b,
                               o.vis_a, o.vis_b)
        _, _, rep = grad_total(fa, fb, aff, LossWeights(), with_maps=True)
        map_a, map_b = rep.maps
        assert map_a.shape == fa.foreground.shape
        assert np.all(map_a[~fa.foreground] == 0.0)
        assert np.all(map_a >= 0.0) and np.all(map_b >= 0.0)

    def test_report_json_roundtrip(self, rig_small, tmp_path):
        import json

        rep = LossReport(l_l=1.0, l_m=2.0, l_r=3.0, l_t=4.0,
                         weights=LossWeights(1.0, 2.0, 3.0))
        path = tmp_path / "report.json"
        rep.to_json(path, config=MatchabilityConfig())
        data = json.loads(path.read_text())
        assert data["total"] == 1.0 + 2.0 + 6.0 + 12.0
        assert data["matchability"]["sigma"] == 0.05


class TestFiniteDifferenceHarness:
    def _quadratic(self, field):
        fg = field.foreground
        loss = float((field.uv[fg] ** 2).sum())
        return loss, FieldGradient.from_flat(field, 2.0 * field.uv[fg])

    def test_accepts_exact_gradient(self):
        rng = np.random.default_rng(7)
        f = _strip_field(rng.random((12, 2)))
        assert finite_difference_check(self._quadratic, f) < 1e-8

    def test_catches_wrong_gradient(self):
        rng = np.random.default_rng(8)
        f = _strip_field(rng.random((12, 2)))

        def biased(field):
            loss, grad = self._quadratic(field)
            return loss, grad.scaled(1.1)

        assert finite_difference_check(biased, f) > 0.05

    def test_details_and_sample_clipping(self):
        f = _strip_field([(0.1, 0.2), (0.3, 0.4), (0.5, 0.6)])
        res = finite_difference_check(self._quadratic, f, samples=50,
                                      details=True)
        assert isinstance(res, FdResult)
        assert res.n_checked == 6  # 2 components times 3 pixels
        assert float(res) == res.max_rel_error
        assert res.max_abs_grad > 0.0

    def test_deterministic(self, rig_small):
        views, _ = rig_small
        gt = views[0].field
        pred = perturb_field(gt, 0.03, seed=9)
        fn = lambda f: supervised_loss(f, gt)
        a = finite_difference_check(fn, pred, seed=5)
        b = finite_difference_check(fn, pred, seed=5)
        assert a == b

    def test_validation(self):
        f = _strip_field([(0.1, 0.2)])
        with pytest.raises(ValidationError):
            finite_difference_check(self._quadratic, f, epsilon=0.0)
        empty = DenseField(np.zeros((2, 2), bool), np.zeros((2, 2), np.uint8),
                           np.zeros((2, 2, 2)), num_parts=1)
        with pytest.raises(ValidationError):
            finite_difference_check(self._quadratic, empty)
