"""Training-loop behavior: determinism, linearized decay, noise injection, traces."""

import csv

import numpy as np
import pytest

from qntk.ansatz import build_randomized_hwe, random_angles
from qntk.dynamics import (
    EnsembleResult,
    TrainConfig,
    ensemble_train,
    gd_step,
    laziness_report,
    train,
)
from qntk.gradients import ResidualContext, residual, tangent_kernel
from qntk.sim import PauliString, PauliSum, StateVector, derive_rng, expectation


def make_ctx(n, n_layers, seed, target=-1.0, n_terms=1):
    ansatz = build_randomized_hwe(n, n_layers, seed=seed)
    if n_terms == 1:
        obs = PauliString.single(n, 0, "Z")
    else:
        obs = PauliSum.from_pairs(
            n, [(1.0, PauliString.single(n, q, "Z")) for q in range(n_terms)])
    return ResidualContext(ansatz, StateVector.zero_state(n), obs, target)


class _CtxBuilder:
    def __init__(self, ctx, theta0):
        self.ctx = ctx
        self.theta0 = theta0

    def __call__(self, index):
        return self.ctx, self.theta0


class TestTrainConfig:
    def test_rejects_negative_eta(self):
        with pytest.raises(ValueError):
            TrainConfig(eta=-0.1, steps=1)

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            TrainConfig(eta=0.1, steps=1, sigma_theta=-1.0)

    def test_step_guard(self):
        with pytest.raises(ValueError):
            TrainConfig(eta=0.1, steps=10 ** 7)

    def test_zero_eta_allowed(self):
        TrainConfig(eta=0.0, steps=3)


class TestGdStep:
    def test_no_motion_at_zero_residual(self):
        ctx = make_ctx(2, 4, seed=1)
        theta = random_angles(4, np.random.default_rng(1))
        # retarget so eps(theta) = 0 exactly
        matched = ResidualContext(ctx.ansatz, ctx.psi0, ctx.observable,
                                  target=residual(ctx, theta) + ctx.target)
        cfg = TrainConfig(eta=0.01, steps=1, seed=0)
        new_theta, record = gd_step(matched, theta, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(new_theta, theta)
        assert record.eps_before == pytest.approx(0.0, abs=1e-14)

    def test_zero_eta_keeps_angles(self):
        ctx = make_ctx(2, 4, seed=2)
        theta = random_angles(4, np.random.default_rng(2))
        cfg = TrainConfig(eta=0.0, steps=1, seed=0)
        new_theta, record = gd_step(ctx, theta, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(new_theta, theta)
        assert record.max_dtheta == 0.0

    def test_first_order_error_shrinks_quadratically(self):
        # Richardson: the defect of delta_eps vs -eta*K*eps drops ~4x per eta halving.
        ctx = make_ctx(3, 8, seed=3)
        theta = random_angles(8, np.random.default_rng(3))
        eps = residual(ctx, theta)
        kernel = tangent_kernel(ctx, theta)
        defects = []
        for eta in (2e-3, 1e-3):
            cfg = TrainConfig(eta=eta, steps=1, seed=0)
            _, record = gd_step(ctx, theta, cfg, np.random.default_rng(0))
            delta = record.eps_after - record.eps_before
            defects.append(abs(delta - (-eta * kernel * eps)))
        ratio = defects[0] / defects[1]
        assert 2.5 <= ratio <= 6.0

    def test_noise_is_seed_deterministic(self):
        ctx = make_ctx(2, 4, seed=4)
        theta = random_angles(4, np.random.default_rng(4))
        cfg = TrainConfig(eta=0.01, steps=1, sigma_theta=0.05, seed=9)
        a, _ = gd_step(ctx, theta, cfg, np.random.default_rng(9))
        b, _ = gd_step(ctx, theta, cfg, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestTrain:
    def test_bit_identical_repetition(self):
        ctx = make_ctx(2, 6, seed=5)
        theta0 = random_angles(6, np.random.default_rng(5))
        cfg = TrainConfig(eta=0.01, steps=25, sigma_theta=0.01, seed=77)
        a = train(ctx, theta0, cfg)
        b = train(ctx, theta0, cfg)
        np.testing.assert_array_equal(a.eps, b.eps)
        np.testing.assert_array_equal(a.theta_final, b.theta_final)
        np.testing.assert_array_equal(a.kernel, b.kernel)

    def test_zero_initial_residual_stays_zero(self):
        ctx = make_ctx(2, 4, seed=6)
        theta0 = random_angles(4, np.random.default_rng(6))
        matched = ResidualContext(ctx.ansatz, ctx.psi0, ctx.observable,
                                  target=residual(ctx, theta0) + ctx.target)
        trace = train(matched, theta0, TrainConfig(eta=0.01, steps=10, seed=0))
        np.testing.assert_allclose(trace.eps, np.zeros(11), atol=1e-13)

    def test_noiseless_residual_magnitude_non_increasing(self):
        ctx = make_ctx(3, 16, seed=7, n_terms=1)
        theta0 = random_angles(16, np.random.default_rng(7))
        trace = train(ctx, theta0, TrainConfig(eta=0.005, steps=60, seed=0))
        # valid while 0 < eta*K(t) < 1 throughout, which holds here
        assert np.nanmax(trace.kernel) * 0.005 < 1.0
        diffs = np.abs(trace.eps[1:]) - np.abs(trace.eps[:-1])
        assert np.all(diffs <= 1e-12)

    def test_frozen_kernel_window(self):
        # First 20 steps of the default configuration track (1-eta*K0)^t within 30%.
        ctx = make_ctx(4, 64, seed=12, n_terms=3)
        rng = derive_rng(12, 0)
        ansatz = build_randomized_hwe(4, 64, seed=int(rng.integers(2 ** 63)))
        theta0 = random_angles(64, rng)
        ctx = ResidualContext(ansatz, ctx.psi0, ctx.observable, -1.0)
        trace = train(ctx, theta0, TrainConfig(eta=0.005, steps=20, seed=0))
        base = 1.0 - 0.005 * trace.kernel[0]
        for t in range(1, 21):
            ratio = abs(trace.eps[t]) / (base ** t * abs(trace.eps[0]))
            assert 0.7 <= ratio <= 1.3

    def test_kernel_recorded_per_interval_and_at_end(self):
        ctx = make_ctx(2, 4, seed=8)
        theta0 = random_angles(4, np.random.default_rng(8))
        trace = train(ctx, theta0, TrainConfig(eta=0.01, steps=10, seed=0,
                                               record_k_every=4))
        recorded = np.isfinite(trace.kernel)
        assert recorded[0] and recorded[4] and recorded[8] and recorded[10]
        assert not recorded[1] and not recorded[9]

    def test_pure_noise_displacement_variance(self):
        # eta=0 with noise: per-angle displacement is a sum of T Gaussians.
        n_layers, steps, sigma = 64, 200, 0.01
        ctx = make_ctx(2, n_layers, seed=9)
        theta0 = random_angles(n_layers, np.random.default_rng(9))
        trace = train(ctx, theta0, TrainConfig(eta=0.0, steps=steps,
                                               sigma_theta=sigma, seed=21))
        displacement = trace.theta_final - trace.theta0
        var = displacement.var()
        assert abs(var - steps * sigma ** 2) <= 0.15 * steps * sigma ** 2

    def test_theta_history_optional(self):
        ctx = make_ctx(2, 3, seed=10)
        theta0 = random_angles(3, np.random.default_rng(10))
        plain = train(ctx, theta0, TrainConfig(eta=0.01, steps=4, seed=0))
        kept = train(ctx, theta0, TrainConfig(eta=0.01, steps=4, seed=0,
                                              keep_theta=True))
        assert plain.theta_history is None
        assert kept.theta_history.shape == (5, 3)
        np.testing.assert_array_equal(kept.theta_history[0], theta0)
        np.testing.assert_array_equal(kept.theta_history[-1], kept.theta_final)


class TestTraceCsv:
    def test_schema_and_roundtrip(self, tmp_path):
        ctx = make_ctx(2, 4, seed=11)
        theta0 = random_angles(4, np.random.default_rng(11))
        trace = train(ctx, theta0, TrainConfig(eta=0.01, steps=6, seed=0))
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        with open(path) as handle:
            rows = list(csv.DictReader(handle))
        assert list(rows[0].keys()) == ["step", "eps", "loss", "kernel", "max_dtheta"]
        assert len(rows) == 7
        for t, row in enumerate(rows):
            assert int(row["step"]) == t
            assert float(row["eps"]) == trace.eps[t]
        assert row["max_dtheta"] == "nan"  # final row has no update

    def test_summary_dict(self):
        ctx = make_ctx(2, 4, seed=11)
        theta0 = random_angles(4, np.random.default_rng(11))
        trace = train(ctx, theta0, TrainConfig(eta=0.01, steps=6, seed=0))
        summary = trace.summary_dict()
        assert summary["steps"] == 6
        assert summary["eps0"] == trace.eps[0]
        assert summary["kernel_final"] == trace.kernel[-1]


class TestEnsembleTrain:
    def test_noiseless_members_identical(self):
        ctx = make_ctx(2, 4, seed=12)
        theta0 = random_angles(4, np.random.default_rng(12))
        cfg = TrainConfig(eta=0.01, steps=8, sigma_theta=0.0, seed=5)
        result = ensemble_train(_CtxBuilder(ctx, theta0), cfg, n_runs=4)
        finals = result.final_eps
        assert np.all(finals == finals[0])
        assert result.std_final == 0.0

    def test_noisy_members_differ(self):
        ctx = make_ctx(2, 4, seed=13)
        theta0 = random_angles(4, np.random.default_rng(13))
        cfg = TrainConfig(eta=0.01, steps=8, sigma_theta=0.05, seed=5)
        result = ensemble_train(_CtxBuilder(ctx, theta0), cfg, n_runs=4)
        assert result.std_final > 0.0
        assert len(result.run_summaries()) == 4

    def test_parallel_matches_serial(self):
        ctx = make_ctx(2, 4, seed=14)
        theta0 = random_angles(4, np.random.default_rng(14))
        cfg = TrainConfig(eta=0.01, steps=6, sigma_theta=0.02, seed=3)
        serial = ensemble_train(_CtxBuilder(ctx, theta0), cfg, n_runs=4, n_jobs=1)
        parallel = ensemble_train(_CtxBuilder(ctx, theta0), cfg, n_runs=4, n_jobs=2)
        np.testing.assert_array_equal(serial.final_eps, parallel.final_eps)

    def test_requires_two_runs(self):
        ctx = make_ctx(2, 4, seed=15)
        theta0 = random_angles(4, np.random.default_rng(15))
        with pytest.raises(ValueError):
            ensemble_train(_CtxBuilder(ctx, theta0),
                           TrainConfig(eta=0.01, steps=2), n_runs=1)


class TestLazinessReport:
    def test_zero_eta_means_zero_displacement(self):
        ctx = make_ctx(2, 4, seed=16)
        theta0 = random_angles(4, np.random.default_rng(16))
        trace = train(ctx, theta0, TrainConfig(eta=0.0, steps=5, seed=0))
        report = laziness_report(trace, dim=4)
        assert report.displacement == 0.0
        assert report.max_update == 0.0

    def test_initial_update_shrinks_with_dimension(self):
        # Per-angle gradients are dimension-suppressed for a fixed Pauli target.
        n_layers, samples = 16, 60
        means = []
        for n in (2, 3, 4, 5):
            updates = []
            for i in range(samples):
                rng = derive_rng(1000 + n, i)
                ansatz = build_randomized_hwe(n, n_layers,
                                              seed=int(rng.integers(2 ** 63)))
                theta0 = random_angles(n_layers, rng)
                ctx = ResidualContext(ansatz, StateVector.zero_state(n),
                                      PauliString.single(n, 0, "Z"), -1.0)
                trace = train(ctx, theta0, TrainConfig(eta=0.005, steps=1, seed=0))
                updates.append(trace.max_dtheta[0])
            means.append(np.mean(updates))
        assert all(a > b for a, b in zip(means, means[1:]))

    def test_overparametrized_contrast(self):
        # Strong loss reduction while every angle moves much less than pi.
        rng = derive_rng(12, 0)
        ansatz = build_randomized_hwe(4, 64, seed=int(rng.integers(2 ** 63)))
        theta0 = random_angles(64, rng)
        obs = PauliSum.from_pairs(
            4, [(1.0, PauliString.single(4, q, "Z")) for q in range(3)])
        ctx = ResidualContext(ansatz, StateVector.zero_state(4), obs, -1.0)
        trace = train(ctx, theta0, TrainConfig(eta=0.005, steps=100, seed=0))
        report = laziness_report(trace, dim=16)
        assert report.eps_ratio < 0.1
        assert report.max_update < 0.1 * np.pi
