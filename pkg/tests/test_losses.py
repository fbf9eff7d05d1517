import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multiseg import losses


def t(arr, dtype=torch.float64):
    return torch.as_tensor(np.asarray(arr), dtype=dtype)


class TestDiceLoss:
    def test_perfect_overlap_near_zero(self):
        ones = torch.ones(10, 10, 10, dtype=torch.float64)
        n = ones.numel()
        val = float(losses.dice_loss(ones, ones))
        assert val == pytest.approx(losses.DICE_EPS / (2 * n + losses.DICE_EPS), rel=1e-6)
        assert val < 1e-6

    def test_disjoint_is_one(self):
        gt = torch.zeros(6, 6, 6, dtype=torch.float64)
        gt[:2] = 1.0
        pred = torch.zeros_like(gt)
        assert float(losses.dice_loss(gt, pred)) == pytest.approx(1.0, abs=1e-6)

    def test_hand_computed_value(self):
        # sum(t*p) = 0.5, sum(t^2) + sum(p^2) = 1.5 -> 1 - 1/1.5
        val = float(losses.dice_loss(t([1.0, 0.0]), t([0.5, 0.5])))
        assert val == pytest.approx(1.0 - 1.0 / 1.5, abs=1e-6)
        assert val == pytest.approx(1.0 - 1.0 / (1.5 + losses.DICE_EPS), rel=1e-12)

    def test_multichannel_is_channel_mean(self):
        rng = np.random.default_rng(0)
        p_true = t(rng.random((3, 4, 4, 4)))
        p_pred = t(rng.random((3, 4, 4, 4)))
        whole = float(losses.dice_loss(p_true, p_pred))
        per = [float(losses.dice_loss(p_true[c], p_pred[c])) for c in range(3)]
        assert whole == pytest.approx(np.mean(per), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            losses.dice_loss(torch.ones(3, 3), torch.ones(3, 4))

    def test_binary_self_dice_below_eps(self):
        rng = np.random.default_rng(1)
        p = t((rng.random((5, 5, 5)) < 0.3).astype(float))
        assert p.sum() > 0
        assert float(losses.dice_loss(p, p)) <= losses.DICE_EPS


class TestKLStdNormal:
    def test_standard_normal_is_zero(self):
        g = losses.GaussianParams(mu=torch.zeros(8), sigma=torch.ones(8))
        assert float(losses.kl_std_normal(g)) == 0.0

    def test_unit_mean_closed_form(self):
        g = losses.GaussianParams(mu=torch.ones(8), sigma=torch.ones(8))
        assert float(losses.kl_std_normal(g)) == pytest.approx(0.5, rel=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        g = losses.GaussianParams(
            mu=t(rng.standard_normal(8)), sigma=t(rng.uniform(0.1, 3.0, 8))
        )
        assert float(losses.kl_std_normal(g)) >= 0.0

    def test_non_positive_sigma_rejected(self):
        g = losses.GaussianParams(mu=torch.zeros(4), sigma=torch.zeros(4))
        with pytest.raises(ValueError):
            losses.kl_std_normal(g)


class TestVaeLoss:
    def test_zero_at_perfect_reconstruction(self):
        x = t(np.random.default_rng(0).standard_normal((4, 4, 4, 4)))
        g = losses.GaussianParams(mu=torch.zeros(8), sigma=torch.ones(8))
        assert float(losses.vae_loss(x, x, g)) == 0.0

    def test_unit_mse_gives_point_one(self):
        x = t(np.random.default_rng(0).standard_normal((4, 4, 4, 4)))
        g = losses.GaussianParams(mu=torch.zeros(8), sigma=torch.ones(8))
        assert float(losses.vae_loss(x + 1.0, x, g)) == pytest.approx(0.1, rel=1e-9)

    def test_exact_weighting(self):
        rng = np.random.default_rng(3)
        recon, x = t(rng.standard_normal((2, 3, 3, 3))), t(rng.standard_normal((2, 3, 3, 3)))
        g = losses.GaussianParams(mu=t(rng.standard_normal(4)), sigma=t(rng.uniform(0.5, 2, 4)))
        expected = 0.1 * (float(((recon - x) ** 2).mean()) + float(losses.kl_std_normal(g)))
        assert float(losses.vae_loss(recon, x, g)) == pytest.approx(expected, rel=1e-12)


def bce_oracle(pred, true):
    """Hand-expanded weighted BCE over one channel (slow reference)."""
    pred = np.clip(np.asarray(pred, dtype=np.float64).ravel(), 1e-7, 1 - 1e-7)
    true = np.asarray(true).ravel()
    n_boundary = int(true.sum())
    beta = 1.0 - n_boundary / true.size
    pos = -beta * sum(math.log(p) for p, y in zip(pred, true) if y == 1)
    neg = -(1.0 - beta) * sum(math.log(1 - p) for p, y in zip(pred, true) if y == 0)
    return pos + neg


class TestEdgeWeightedBce:
    def test_all_zero_boundary_gives_zero(self):
        pred = t(np.random.default_rng(0).uniform(0.1, 0.9, (4, 4, 4)))
        true = torch.zeros(4, 4, 4, dtype=torch.float64)
        assert float(losses.edge_weighted_bce(pred, true)) == pytest.approx(0.0, abs=1e-12)

    def test_beta_ratio(self):
        # 100 voxels with 10 boundary -> beta = 0.9; check via the weighting
        true = np.zeros(100)
        true[:10] = 1
        pred = np.full(100, 0.5)
        val = losses.edge_weighted_bce(t(pred).reshape(1, 10, 10, 1), t(true).reshape(1, 10, 10, 1))
        expected = -(0.9 * 10 + 0.1 * 90) * math.log(0.5)
        assert float(val) == pytest.approx(expected, rel=1e-9)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            true = (rng.random((3, 3, 3)) < 0.3).astype(float)
            pred = rng.uniform(0.02, 0.98, (3, 3, 3))
            got = float(losses.edge_weighted_bce(t(pred), t(true)))
            assert got == pytest.approx(bce_oracle(pred, true), rel=1e-9)

    def test_near_perfect_prediction_near_zero(self):
        rng = np.random.default_rng(5)
        true = (rng.random((4, 4, 4)) < 0.25).astype(float)
        pred = np.where(true > 0, 1 - 1e-7, 1e-7)
        assert float(losses.edge_weighted_bce(t(pred), t(true))) == pytest.approx(0.0, abs=1e-4)

    def test_multichannel_is_channel_mean(self):
        rng = np.random.default_rng(9)
        true = (rng.random((2, 3, 3, 3)) < 0.3).astype(float)
        pred = rng.uniform(0.05, 0.95, (2, 3, 3, 3))
        whole = float(losses.edge_weighted_bce(t(pred), t(true)))
        per = [bce_oracle(pred[c], true[c]) for c in range(2)]
        assert whole == pytest.approx(np.mean(per), rel=1e-9)


class TestBoundaryLoss:
    def test_perfect_prediction_near_zero(self):
        rng = np.random.default_rng(2)
        true = (rng.random((4, 4, 4)) < 0.2).astype(float)
        pred = np.where(true > 0, 1 - 1e-7, 1e-7)
        assert float(losses.boundary_loss(t(pred), t(true))) < 1e-3

    def test_decomposition(self):
        rng = np.random.default_rng(4)
        true = (rng.random((4, 4, 4)) < 0.3).astype(float)
        pred = rng.uniform(0.05, 0.95, (4, 4, 4))
        total = float(losses.boundary_loss(t(pred), t(true)))
        parts = float(losses.dice_loss(t(true), t(pred))) + float(
            losses.edge_weighted_bce(t(pred), t(true))
        )
        assert total == pytest.approx(parts, rel=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        true = (rng.random((4, 4, 4)) < 0.4).astype(float)
        pred = rng.uniform(0.01, 0.99, (4, 4, 4))
        assert float(losses.boundary_loss(t(pred), t(true))) >= 0.0


class TestInfoNceLoss:
    @pytest.mark.parametrize("n_neg", [1, 15, 63])
    def test_uniform_logits_give_log_n(self, n_neg):
        # zero prediction vector -> every logit equals zero
        pred = torch.zeros(1, 8, dtype=torch.float64)
        target = torch.ones(1, 8, dtype=torch.float64)
        negatives = torch.ones(1, n_neg, 8, dtype=torch.float64)
        val = float(losses.infonce_loss(pred, target, negatives))
        assert val == pytest.approx(math.log(1 + n_neg), abs=1e-5)

    def test_closed_form_positive_logit(self):
        # pred.target = 5, pred.negative = 0 for 15 negatives
        c, n_neg = 5.0, 15
        pred = torch.zeros(1, 4, dtype=torch.float64)
        pred[0, 0] = c
        target = torch.zeros(1, 4, dtype=torch.float64)
        target[0, 0] = 1.0
        negatives = torch.zeros(1, n_neg, 4, dtype=torch.float64)
        negatives[:, :, 1] = 1.0
        expected = -math.log(math.exp(c) / (math.exp(c) + n_neg))
        assert float(losses.infonce_loss(pred, target, negatives)) == pytest.approx(
            expected, rel=1e-9
        )

    def test_sums_over_cells(self):
        rng = np.random.default_rng(0)
        pred, target = t(rng.standard_normal((3, 5))), t(rng.standard_normal((3, 5)))
        neg = t(rng.standard_normal((3, 4, 5)))
        total = float(losses.infonce_loss(pred, target, neg))
        per = sum(
            float(losses.infonce_loss(pred[i : i + 1], target[i : i + 1], neg[i : i + 1]))
            for i in range(3)
        )
        assert total == pytest.approx(per, rel=1e-9)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        val = losses.infonce_loss(
            t(rng.standard_normal((2, 6))),
            t(rng.standard_normal((2, 6))),
            t(rng.standard_normal((2, 5, 6))),
        )
        assert float(val) >= 0.0

    def test_invariant_to_negative_order(self):
        rng = np.random.default_rng(8)
        pred, target = t(rng.standard_normal((4, 6))), t(rng.standard_normal((4, 6)))
        neg = t(rng.standard_normal((4, 7, 6)))
        perm = neg[:, torch.randperm(7, generator=torch.Generator().manual_seed(0))]
        a = float(losses.infonce_loss(pred, target, neg))
        b = float(losses.infonce_loss(pred, target, perm))
        assert a == pytest.approx(b, rel=1e-12)

    def test_large_logits_stay_finite(self):
        pred = torch.full((1, 4), 300.0, dtype=torch.float64)
        target = torch.full((1, 4), 300.0, dtype=torch.float64)
        neg = torch.full((1, 3, 4), -300.0, dtype=torch.float64)
        assert math.isfinite(float(losses.infonce_loss(pred, target, neg)))

    def test_empty_negatives_rejected(self):
        with pytest.raises(ValueError):
            losses.infonce_loss(
                torch.zeros(2, 4), torch.zeros(2, 4), torch.zeros(2, 0, 4)
            )

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            losses.infonce_loss(torch.zeros(2, 4), torch.zeros(2, 4), torch.zeros(2, 3, 5))


class TestTotalLoss:
    def _seg_pair(self):
        rng = np.random.default_rng(0)
        seg = t(rng.uniform(0.05, 0.95, (3, 4, 4, 4)))
        label = (rng.random((3, 4, 4, 4)) < 0.3).astype(np.uint8)
        label[1] |= label[0]
        label[2] |= label[1]
        return seg, label

    def test_labeled_vae_composition(self):
        seg, label = self._seg_pair()
        rng = np.random.default_rng(1)
        terms = losses.VaeTerms(
            recon=t(rng.standard_normal((4, 4, 4, 4))),
            target=t(rng.standard_normal((4, 4, 4, 4))),
            gaussian=losses.GaussianParams(t(rng.standard_normal(6)), t(rng.uniform(0.5, 2, 6))),
        )
        out = losses.total_loss(seg, label, terms)
        dice = float(losses.dice_loss(t(label), seg))
        rec = float(((terms.recon - terms.target) ** 2).mean())
        kl = float(losses.kl_std_normal(terms.gaussian))
        assert float(out.total) == pytest.approx(dice + 0.1 * (rec + kl), rel=1e-9)
        assert set(out.components) == {"rec", "kl"}

    def test_unlabeled_cpc_branch_only(self):
        rng = np.random.default_rng(2)
        terms = losses.CpcTerms(
            pred=t(rng.standard_normal((3, 5))),
            target=t(rng.standard_normal((3, 5))),
            negatives=t(rng.standard_normal((3, 4, 5))),
        )
        out = losses.total_loss(None, None, terms)
        assert out.dice is None
        assert float(out.total) == float(out.branch)
        assert set(out.components) == {"infonce"}

    def test_labeled_no_branch(self):
        seg, label = self._seg_pair()
        out = losses.total_loss(seg, label, None)
        assert out.branch is None
        assert float(out.total) == float(out.dice)

    def test_unlabeled_no_branch_rejected(self):
        with pytest.raises(losses.UnusableSampleError):
            losses.total_loss(None, None, None)

    def test_boundary_components_recorded(self):
        rng = np.random.default_rng(3)
        seg, label = self._seg_pair()
        true = (rng.random((3, 4, 4, 4)) < 0.2).astype(float)
        terms = losses.BoundaryTerms(pred=t(rng.uniform(0.05, 0.95, (3, 4, 4, 4))), true=t(true))
        out = losses.total_loss(seg, label, terms)
        assert set(out.components) == {"boundary_dice", "edge"}
        assert float(out.total) == pytest.approx(
            float(out.dice) + float(out.branch), rel=1e-12
        )


class TestFiniteness:
    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_losses_finite_on_random_inputs(self, seed):
        rng = np.random.default_rng(seed)
        pred = t(rng.uniform(0, 1, (3, 4, 4, 4)))
        true = t((rng.random((3, 4, 4, 4)) < 0.3).astype(float))
        assert math.isfinite(float(losses.dice_loss(true, pred)))
        assert math.isfinite(float(losses.edge_weighted_bce(pred, true)))
        assert math.isfinite(float(losses.boundary_loss(pred, true)))
