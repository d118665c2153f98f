import json
import warnings

import numpy as np
import pytest

from qpdn.mle import (
    MleConfig,
    N_PARAMS,
    T_to_t,
    chi_to_t_init,
    mle_fit,
    neg_log_likelihood,
    t_to_T,
    t_to_chi,
)
from qpdn.quantum import PHI_GRID, ideal_chi, process_fidelity
from qpdn.tomography import CountTable, chi_least_squares, expected_counts, noiseless_counts, sample_counts


def random_psd_trace1(rng, dim=16):
    m = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    p = m @ m.conj().T
    return p / np.trace(p).real


class TestParameterization:
    def test_layout_roundtrip(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=N_PARAMS)
        assert np.array_equal(T_to_t(t_to_T(t)), t)
        T = t_to_T(t)
        assert np.max(np.abs(np.tril(T, -1))) == 0  # upper triangular

    def test_rank_one_corner(self):
        t = np.zeros(N_PARAMS)
        t[0] = 1.0
        chi = t_to_chi(t).chi
        expected = np.zeros((16, 16), dtype=complex)
        expected[0, 0] = 1.0
        assert np.allclose(chi, expected, atol=1e-15)

    def test_maximally_mixed(self):
        t = np.zeros(N_PARAMS)
        t[:16] = 0.25
        assert np.allclose(t_to_chi(t).chi, np.eye(16) / 16, atol=1e-15)

    def test_always_physical(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            chi = t_to_chi(rng.normal(size=N_PARAMS) * rng.uniform(0.1, 10)).chi
            assert np.max(np.abs(chi - chi.conj().T)) <= 1e-12
            assert np.linalg.eigvalsh(chi).min() >= -1e-12
            assert abs(np.trace(chi).real - 1) <= 1e-12

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            t_to_chi(np.zeros(N_PARAMS))

    def test_cholesky_roundtrip_on_psd(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            chi = random_psd_trace1(rng)
            back = t_to_chi(chi_to_t_init(chi)).chi
            assert np.max(np.abs(back - chi)) <= 1e-10

    def test_ideal_chi_roundtrip_fidelity(self):
        target = ideal_chi(np.pi)
        back = t_to_chi(chi_to_t_init(target))
        assert process_fidelity(back, target) >= 1 - 1e-8

    def test_init_from_indefinite(self):
        rng = np.random.default_rng(3)
        for s in range(5):
            table = sample_counts(expected_counts(ideal_chi(np.pi / 3), 0.1), 800 + s)
            noisy = chi_least_squares(table)
            assert np.linalg.eigvalsh(noisy.chi).min() < 0  # indefinite at this noise
            t = chi_to_t_init(noisy)
            assert np.all(np.isfinite(t))
            chi = t_to_chi(t).chi
            assert np.linalg.eigvalsh(chi).min() >= -1e-12


class TestNegLogLikelihood:
    def test_perfect_fit_near_zero(self):
        table = noiseless_counts(expected_counts(ideal_chi(np.pi / 2), 1.0))
        t = chi_to_t_init(ideal_chi(np.pi / 2))
        value, _ = neg_log_likelihood(t, table)
        assert value <= 1e-6

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(4)
        table = sample_counts(expected_counts(ideal_chi(np.pi / 3), 1.0), 42)
        base = chi_to_t_init(chi_least_squares(table))
        worst = 0.0
        for trial in range(20):
            t = base + 0.05 * rng.normal(size=N_PARAMS)
            _, grad = neg_log_likelihood(t, table)
            for i in rng.choice(N_PARAMS, 5, replace=False):
                tp = t.copy()
                tp[i] += 1e-5
                tm = t.copy()
                tm[i] -= 1e-5
                fd = (neg_log_likelihood(tp, table)[0] - neg_log_likelihood(tm, table)[0]) / 2e-5
                worst = max(worst, abs(fd - grad[i]) / max(abs(fd), 1e-8))
        assert worst <= 1e-4

    def test_count_scaling_leaves_minimizer(self):
        table = sample_counts(expected_counts(ideal_chi(5 * np.pi / 6), 1.0), 77)
        doubled = CountTable(
            expected=table.expected * 2,
            counts=table.counts * 2,
            n_per_basis=table.n_per_basis * 2,
            signal_ratio=table.signal_ratio,
            phi=table.phi,
        )
        a = mle_fit(table).chi_hat.chi
        b = mle_fit(doubled).chi_hat.chi
        assert np.linalg.norm(a - b) <= 1e-3  # same argmin within optimizer tolerance


class TestMleFit:
    def test_noiseless_recovery(self):
        for phi in (np.pi / 6, np.pi / 2, np.pi):
            table = noiseless_counts(expected_counts(ideal_chi(phi), 1.0))
            report = mle_fit(table)
            assert process_fidelity(report.chi_hat, ideal_chi(phi)) >= 0.9999
            assert report.converged

    def test_noisy_fit_quality_r1(self):
        # development measurement: mean fidelity 0.998-0.9999 at r=1 over the
        # grid; the spec op-level acceptance band is [0.96, 1.0]
        for phi, seed in ((np.pi / 2, 10), (5 * np.pi / 4, 11)):
            table = sample_counts(expected_counts(ideal_chi(phi), 1.0), seed)
            report = mle_fit(table)
            f = process_fidelity(report.chi_hat, ideal_chi(phi))
            assert 0.96 <= f <= 1.0

    def test_output_physical_and_descent(self):
        rng = np.random.default_rng(5)
        for s in range(4):
            phi = float(rng.choice(PHI_GRID))
            table = sample_counts(expected_counts(ideal_chi(phi), 0.1), 300 + s)
            report = mle_fit(table)
            chi = report.chi_hat.chi
            assert np.max(np.abs(chi - chi.conj().T)) <= 1e-10
            assert np.linalg.eigvalsh(chi).min() >= -1e-10
            assert abs(np.trace(chi).real - 1) <= 1e-10
            assert report.neg_log_likelihood <= report.initial_neg_log_likelihood
            assert report.grad_norm >= 0
            assert report.small_eigenvalues >= 0

    def test_all_zero_counts_stays_physical(self):
        table = CountTable(
            expected=np.zeros((16, 36)), counts=np.zeros((16, 36)), n_per_basis=200.0, signal_ratio=0.1
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = mle_fit(table)
        chi = report.chi_hat.chi
        assert np.linalg.eigvalsh(chi).min() >= -1e-10
        assert abs(np.trace(chi).real - 1) <= 1e-10
        assert report.neg_log_likelihood <= report.initial_neg_log_likelihood

    def test_zero_eigenvalue_count_reported(self):
        table = sample_counts(expected_counts(ideal_chi(np.pi), 1.0), 9)
        report = mle_fit(table)
        manual = int(np.sum(np.linalg.eigvalsh(report.chi_hat.chi) < 1e-6))
        assert report.small_eigenvalues == manual

    def test_report_serialization(self, tmp_path):
        table = sample_counts(expected_counts(ideal_chi(np.pi), 1.0), 1)
        report = mle_fit(table, MleConfig(max_iters=50))
        path = tmp_path / "report.json"
        report.save_json(path)
        data = json.loads(path.read_text())
        assert data["iterations"] <= 50
        assert data["config"]["max_iters"] == 50
        assert set(data) >= {"neg_log_likelihood", "converged", "grad_norm", "small_eigenvalues"}
