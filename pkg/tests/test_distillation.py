import math

import numpy as np
import pytest
import torch

from adaptsense import (ConfigError, DataError, DistillConfig, OracleTeacher, ShapeError,
                        gradcheck, loss_cfd, loss_gt, loss_gt_regression, loss_kd, loss_l1)

DT = torch.float64


class TestOracleTeacher:
    def test_same_label_identical_outputs(self):
        t = OracleTeacher(d_f=16, n_classes=10, seed=0)
        a, b = t([3]), t([3])
        assert torch.equal(a.logits, b.logits) and torch.equal(a.feature, b.feature)

    def test_softmax_peak_closed_form(self):
        # margin 5, 10 classes: e^5 / (e^5 + 9)
        t = OracleTeacher(d_f=16, n_classes=10, margin=5.0, seed=0)
        probs = torch.softmax(t([2]).logits / 1.0, dim=-1)
        assert float(probs.max()) == pytest.approx(math.exp(5) / (math.exp(5) + 9), abs=1e-9)
        assert float(probs.max()) == pytest.approx(0.9428, abs=5e-5)

    def test_top1_exact_on_all_labels(self):
        t = OracleTeacher(d_f=16, n_classes=10, seed=0)
        out = t(np.arange(10))
        assert np.array_equal(out.logits.argmax(dim=-1).numpy(), np.arange(10))

    def test_label_range_checked(self):
        t = OracleTeacher(d_f=16, n_classes=10, seed=0)
        with pytest.raises(DataError):
            t([10])


class TestLossL1:
    def test_zero_at_identity(self, rng):
        z = torch.as_tensor(rng.standard_normal(32), dtype=DT)
        assert float(loss_l1(z, z)) == 0.0

    def test_hand_value(self):
        assert float(loss_l1([1.0, 2.0], [0.0, 0.0])) == pytest.approx(3.0, abs=1e-12)

    def test_symmetric(self, rng):
        a = torch.as_tensor(rng.standard_normal((4, 8)), dtype=DT)
        b = torch.as_tensor(rng.standard_normal((4, 8)), dtype=DT)
        assert float(loss_l1(a, b)) == float(loss_l1(b, a))

    def test_batch_mean(self):
        t = [[1.0, 2.0], [0.0, 0.0]]
        s = [[0.0, 0.0], [0.0, 0.0]]
        assert float(loss_l1(t, s)) == pytest.approx(1.5, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_l1([1.0, 2.0], [1.0, 2.0, 3.0])


class TestLossKd:
    def test_zero_for_equal_logits(self, rng):
        logits = torch.as_tensor(rng.standard_normal((3, 10)), dtype=DT)
        assert float(loss_kd(logits, logits, tau=2.0)) == pytest.approx(0.0, abs=1e-12)

    def test_shift_invariance(self, rng):
        t = torch.as_tensor(rng.standard_normal(10), dtype=DT)
        s = torch.as_tensor(rng.standard_normal(10), dtype=DT)
        assert float(loss_kd(t, s, 1.0)) == pytest.approx(float(loss_kd(t, s + 3.7, 1.0)),
                                                          abs=1e-12)

    def test_two_class_hand_value(self):
        # KL between sigma(+-1) distributions reduces to sigma(1) - sigma(-1)
        expected = 1 / (1 + math.exp(-1)) - 1 / (1 + math.exp(1))
        assert float(loss_kd([1.0, 0.0], [0.0, 1.0], tau=1.0)) == pytest.approx(expected,
                                                                                abs=1e-12)
        assert expected == pytest.approx(0.4621, abs=5e-5)

    def test_tau_squared_scaling(self):
        # at matched tempered distributions the factor is tau^2 * KL
        t, s = [2.0, 0.0], [0.0, 1.0]
        tau = 10.0
        log_p = torch.log_softmax(torch.tensor(t, dtype=DT) / tau, dim=-1)
        log_q = torch.log_softmax(torch.tensor(s, dtype=DT) / tau, dim=-1)
        kl = float((log_p.exp() * (log_p - log_q)).sum())
        assert float(loss_kd(t, s, tau)) == pytest.approx(tau * tau * kl, abs=1e-12)

    def test_non_positive_tau_rejected(self):
        with pytest.raises(ConfigError):
            loss_kd([1.0, 0.0], [0.0, 1.0], tau=0.0)


class TestLossGt:
    def test_uniform_logits_ln10(self):
        assert float(loss_gt([4], torch.zeros(1, 10, dtype=DT))) == pytest.approx(
            math.log(10), abs=1e-12)

    def test_peaked_logits_limit(self):
        logits = torch.full((1, 10), 0.0, dtype=DT)
        logits[0, 4] = 60.0
        assert float(loss_gt([4], logits)) < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(DataError):
            loss_gt([10], torch.zeros(1, 10, dtype=DT))

    def test_gradient_matches_finite_differences(self, rng):
        logits = torch.as_tensor(rng.standard_normal((4, 10)), dtype=DT).requires_grad_()
        labels = rng.integers(10, size=4)
        err = gradcheck(lambda: loss_gt(labels, logits), [logits])
        assert err < 1e-4

    def test_regression_variant_mse(self, rng):
        t = torch.as_tensor(rng.standard_normal((3, 6)), dtype=DT)
        p = torch.as_tensor(rng.standard_normal((3, 6)), dtype=DT)
        assert float(loss_gt_regression(t, p)) == pytest.approx(
            float(((t - p) ** 2).mean()), abs=1e-15)
        assert float(loss_gt_regression(t, t)) == 0.0


class TestLossCfd:
    def test_alpha_one_beta_zero_returns_kd(self):
        cfg = DistillConfig(alpha=1.0, beta=0.0)
        assert float(loss_cfd(1.25, 7.0, 9.0, cfg)) == pytest.approx(1.25, abs=1e-12)

    def test_alpha_zero_beta_zero_returns_gt(self):
        cfg = DistillConfig(alpha=0.0, beta=0.0)
        assert float(loss_cfd(1.25, 7.0, 9.0, cfg)) == pytest.approx(7.0, abs=1e-12)

    def test_default_weights_hand_value(self):
        # alpha=0.90, beta=0.85: 0.9*1 + 0.1*2 + 0.85*3 = 3.65
        cfg = DistillConfig(alpha=0.90, beta=0.85)
        assert float(loss_cfd(1.0, 2.0, 3.0, cfg)) == pytest.approx(3.65, abs=1e-12)

    def test_partial_derivatives_by_finite_differences(self):
        kd, gt, l1 = 1.3, 0.4, 2.2
        eps = 1e-6
        d_alpha = (float(loss_cfd(kd, gt, l1, DistillConfig(alpha=0.5 + eps, beta=0.85)))
                   - float(loss_cfd(kd, gt, l1, DistillConfig(alpha=0.5 - eps, beta=0.85)))) / (2 * eps)
        d_beta = (float(loss_cfd(kd, gt, l1, DistillConfig(alpha=0.5, beta=0.85 + eps)))
                  - float(loss_cfd(kd, gt, l1, DistillConfig(alpha=0.5, beta=0.85 - eps)))) / (2 * eps)
        assert d_alpha == pytest.approx(kd - gt, abs=1e-8)
        assert d_beta == pytest.approx(l1, abs=1e-8)

    def test_rejects_non_finite_components(self):
        with pytest.raises(DataError):
            loss_cfd(float("nan"), 1.0, 1.0, DistillConfig())

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            DistillConfig(alpha=1.2)
        with pytest.raises(ConfigError):
            DistillConfig(beta=-0.1)
        with pytest.raises(ConfigError):
            DistillConfig(tau_kd=0.0)


class TestNonNegativity:
    def test_losses_non_negative_on_random_inputs(self, rng):
        for _ in range(25):
            a = torch.as_tensor(rng.standard_normal((2, 6)), dtype=DT)
            b = torch.as_tensor(rng.standard_normal((2, 6)), dtype=DT)
            assert float(loss_l1(a, b)) >= 0
            assert float(loss_kd(a, b, tau=float(rng.uniform(0.5, 10)))) >= -1e-12
            labels = rng.integers(6, size=2)
            assert float(loss_gt(labels, a)) >= 0
