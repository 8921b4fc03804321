"""Closed-form predictor values by direct substitution, plus structural identities."""

import math

import numpy as np
import pytest

from qntk.theory import (
    ConcentrationResult,
    TheoryReport,
    average_kernel,
    average_kernel_large_n,
    concentration_check,
    decay_is_divergent,
    decay_prediction,
    kernel_std,
    kernel_std_ratio,
    late_time_abs_mean,
    late_time_abs_std,
    meta_kernel_std,
    noise_crossover_time,
    noise_plateau,
    noisy_mean_square,
    plateau_converges,
    precision_log_gain,
    report_for,
    steps_for_target_error,
)


def pauli_traces(dim):
    return 0.0, float(dim), float(dim)


class TestAverageKernel:
    def test_single_pauli_layer_substitution(self):
        # L=1, N=4, traceless O with Tr(O^2)=4: 1*(4*4)*2/(5*15) = 32/75.
        assert average_kernel(1, 0.0, 4.0, 4) == pytest.approx(32.0 / 75.0)

    def test_identity_observable_is_flat(self):
        # N*Tr(O^2) = Tr(O)^2 = N^2 for the identity: gradient of a constant.
        assert average_kernel(8, 4.0, 4.0, 4) == 0.0

    def test_large_n_form(self):
        assert average_kernel_large_n(64, 16.0, 16) == pytest.approx(8.0)

    def test_exact_approaches_large_n(self):
        for n in range(2, 9):
            dim = 2 ** n
            exact = average_kernel(10, *pauli_traces(dim)[:2], dim)
            approx = average_kernel_large_n(10, float(dim), dim)
            assert abs(exact - approx) / approx <= 2.0 / dim

    def test_rejects_tiny_dim(self):
        with pytest.raises(ValueError):
            average_kernel(1, 0.0, 1.0, 1)


class TestKernelStd:
    def test_pauli_substitution(self):
        # sqrt(L)/N^2 * sqrt(8N^2 + 12N)
        for n_layers, dim in ((8, 4), (64, 16)):
            want = math.sqrt(n_layers) / dim ** 2 * math.sqrt(8 * dim ** 2 + 12 * dim)
            assert kernel_std(n_layers, float(dim), float(dim), dim) == pytest.approx(want)

    def test_ratio_halves_per_quadrupling(self):
        tr = pauli_traces(16)
        r1 = kernel_std_ratio(16, *tr, 16)
        r2 = kernel_std_ratio(32, *tr, 16)
        assert r2 / r1 == pytest.approx(1.0 / math.sqrt(2.0), rel=1e-12)

    def test_ratio_vanishes_at_large_depth(self):
        tr = pauli_traces(16)
        assert kernel_std_ratio(10 ** 8, *tr, 16) < 1e-3

    def test_ratio_infinite_for_identity(self):
        assert kernel_std_ratio(8, 4.0, 4.0, 4.0, 4) == math.inf


class TestMetaKernelStd:
    def test_pauli_substitution(self):
        # sqrt(32)*L/N^3 * Tr(O^2)^1.5 = sqrt(32)*L/sqrt(N^3) for a Pauli.
        for n_layers, dim in ((8, 4), (16, 8)):
            want = math.sqrt(32.0) * n_layers / dim ** 1.5
            assert meta_kernel_std(n_layers, float(dim), dim) == pytest.approx(want)

    def test_zero_layers(self):
        assert meta_kernel_std(0, 4.0, 4) == 0.0


class TestDecayPrediction:
    def test_step_zero(self):
        assert decay_prediction(0.73, 0.01, 5.0, 0) == 0.73

    def test_unit_eta_k_reaches_zero(self):
        assert decay_prediction(1.0, 0.1, 10.0, 1) == 0.0
        assert decay_prediction(1.0, 0.1, 10.0, 7) == 0.0

    def test_reference_configuration(self):
        got = decay_prediction(1.0, 0.005, 25.0, 100)
        assert got == pytest.approx((1.0 - 0.125) ** 100, rel=0)
        assert got == pytest.approx(1.58e-6, rel=5e-3)

    def test_step_ratio_is_decay_factor(self):
        # Equality up to float pow rounding (x**(t+1) vs x**t differ by ulps).
        for t in (0, 3, 17):
            a = decay_prediction(0.5, 0.004, 30.0, t + 1)
            b = decay_prediction(0.5, 0.004, 30.0, t)
            assert a / b == pytest.approx(1.0 - 0.004 * 30.0, rel=1e-15, abs=0)

    def test_divergence_flag(self):
        assert decay_is_divergent(0.1, 25.0)
        assert not decay_is_divergent(0.01, 25.0)


class TestNoisyMeanSquare:
    def test_step_zero_is_exact(self):
        assert noisy_mean_square(0.7, 0.005, 20.0, 0.01, 0) == 0.7 ** 2

    def test_zero_noise_reduces_to_decay(self):
        for t in (0, 5, 40):
            want = decay_prediction(0.9, 0.01, 15.0, t) ** 2
            assert noisy_mean_square(0.9, 0.01, 15.0, 0.0, t) == pytest.approx(want)

    def test_monotone_decay_toward_plateau(self):
        args = (1.0, 0.005, 20.0, 0.003)
        values = [noisy_mean_square(*args, t) for t in range(0, 300, 10)]
        diffs = np.diff(values)
        assert np.all(diffs <= 1e-15)
        assert values[-1] == pytest.approx(noise_plateau(0.005, 20.0, 0.003), rel=1e-3)

    def test_monotone_growth_from_below_plateau(self):
        args = (1e-4, 0.005, 20.0, 0.01)
        values = [noisy_mean_square(*args, t) for t in range(0, 300, 10)]
        assert np.all(np.diff(values) >= -1e-15)

    def test_plateau_flags(self):
        assert plateau_converges(0.005, 20.0)
        assert not plateau_converges(0.1, 25.0)
        assert math.isnan(noise_plateau(0.1, 25.0, 0.01))

    def test_late_time_half_normal_identity(self):
        eta, kernel, sigma = 0.005, 22.0, 0.002
        mean = late_time_abs_mean(eta, kernel, sigma)
        assert mean ** 2 == pytest.approx((2.0 / math.pi)
                                          * noise_plateau(eta, kernel, sigma))
        std = late_time_abs_std(eta, kernel, sigma)
        assert mean ** 2 + std ** 2 == pytest.approx(noise_plateau(eta, kernel, sigma))


class TestNoiseCrossoverTime:
    def test_zero_noise_never_crosses(self):
        assert noise_crossover_time(1.0, 0.005, 20.0, 0.0) == math.inf

    def test_large_noise_crosses_immediately(self):
        assert noise_crossover_time(1.0, 0.005, 20.0, 50.0) < 0.1

    def test_out_of_validity_is_flagged(self):
        assert math.isnan(noise_crossover_time(1.0, 0.2, 20.0, 0.01))

    @pytest.mark.parametrize("params", [
        (1.0, 0.005, 25.0, 1e-3),
        (0.8, 0.01, 12.0, 5e-3),
        (2.0, 0.002, 100.0, 1e-4),
    ])
    def test_defining_balance(self, params):
        eps0, eta, kernel, sigma = params
        t = noise_crossover_time(eps0, eta, kernel, sigma)
        a = 1.0 - eta * kernel
        lhs = a ** t * eps0
        rhs = sigma * math.sqrt((1.0 - a ** (2 * t)) / (eta * (2.0 - eta * kernel)))
        assert abs(lhs - rhs) <= 1e-9

    def test_residual_at_crossover_minimized_near_inverse_kernel(self):
        # eps at the crossover is 2*(1-eta*K)^T * eps0; scanning eta shows the
        # minimum sits at eta = 1/K exactly (the quadratic 2*eta - eta^2*K peaks there).
        eps0, kernel, sigma = 1.0, 25.0, 1e-3
        etas = np.linspace(0.005, 0.075, 1401)
        values = []
        for eta in etas:
            t = noise_crossover_time(eps0, eta, kernel, sigma)
            values.append(2.0 * (1.0 - eta * kernel) ** t * eps0)
        best = etas[int(np.argmin(values))]
        assert best == pytest.approx(1.0 / kernel, abs=2 * (etas[1] - etas[0]))


class TestPrecisionRelation:
    def test_zero_steps(self):
        assert precision_log_gain(0.005, 64, 16.0, 16, 0) == 0.0

    def test_reference_substitution(self):
        assert precision_log_gain(0.005, 64, 16.0, 16, 100) == pytest.approx(4.0)

    def test_doubling_layers_halves_steps(self):
        t1 = steps_for_target_error(0.005, 64, 16.0, 16, 1e-3)
        t2 = steps_for_target_error(0.005, 128, 16.0, 16, 1e-3)
        assert t2 == pytest.approx(t1 / 2.0)

    def test_rejects_bad_ratio(self):
        with pytest.raises(ValueError):
            steps_for_target_error(0.005, 64, 16.0, 16, 2.0)


class TestConcentrationCheck:
    def test_deep_pauli_margins(self):
        # L=64, Pauli observable, N=16: fluctuation ratio is marginal
        # (above the 0.1 cut but order 0.2), step-size ratio passes.
        report = report_for(64, 16, pauli_traces(16), eta=0.005, eps0=1.0)
        result = concentration_check(report)
        want1 = (math.sqrt(64) / 256 * math.sqrt(8 * 256 + 12 * 16)) / average_kernel(
            64, 0.0, 16.0, 16)
        assert result.ratio1 == pytest.approx(want1)
        assert 0.1 < result.ratio1 < 0.3
        assert not result.passed1
        assert result.ratio2 == pytest.approx(0.005 * 4.0 / 16.0)
        assert result.ratio2 == pytest.approx(1.25e-3)
        assert result.passed2

    def test_single_layer_fails_fluctuation(self):
        report = report_for(1, 16, pauli_traces(16), eta=0.005, eps0=1.0)
        assert not concentration_check(report).passed1

    def test_threshold_is_configurable(self):
        report = report_for(64, 16, pauli_traces(16), eta=0.005, eps0=1.0)
        loose = concentration_check(report, threshold=0.5)
        assert loose.passed1 and loose.passed2


class TestTheoryReport:
    def test_builder_and_serialization(self):
        report = report_for(8, 4, pauli_traces(4), eta=0.01, sigma_theta=1e-3,
                            eps0=0.9)
        payload = report.to_json_dict()
        assert payload["n_layers"] == 8
        assert payload["dim"] == 4
        assert payload["avg_kernel"] == pytest.approx(average_kernel(8, 0.0, 4.0, 4))

    def test_rejects_non_power_of_two_dim(self):
        with pytest.raises(ValueError):
            TheoryReport(avg_kernel=1.0, kernel_std=0.1, meta_kernel_std=0.1,
                         eta=0.01, n_layers=4, dim=3, tr_o=0.0, tr_o2=3.0,
                         tr_o4=3.0, sigma_theta=0.0, eps0=1.0)

    def test_rejects_negative_kernel(self):
        with pytest.raises(ValueError):
            TheoryReport(avg_kernel=-1.0, kernel_std=0.1, meta_kernel_std=0.1,
                         eta=0.01, n_layers=4, dim=4, tr_o=0.0, tr_o2=4.0,
                         tr_o4=4.0, sigma_theta=0.0, eps0=1.0)
