import hashlib
import os
import warnings

import numpy as np
import pytest
import scipy.stats

from qpdn.quantum import PHI_GRID, cp_unitary, ideal_chi, process_fidelity
from qpdn.tomography import (
    CountsParseError,
    CountTable,
    beta_tensor,
    chi_from_lambda,
    chi_least_squares,
    chi_to_image,
    default_basis,
    derive_record_seed,
    design,
    expected_counts,
    generate_dataset,
    image_to_chi,
    lambda_from_counts,
    load_counts_csv,
    load_dataset,
    noiseless_counts,
    normalize,
    normalize_components,
    plan_records,
    rescale_components,
    sample_counts,
    save_counts_csv,
    save_dataset,
    split_sizes,
    table_for_record,
)


def exact_lambda(phi):
    """Oracle: expansion of U rho_j U^dagger over the input basis via lstsq.

    Independent of ExperimentDesign: builds the basis-vectorized system and
    solves it with numpy's generic least squares.
    """
    basis = default_basis()
    u = cp_unitary(phi)
    stack = basis.inputs.reshape(16, -1).T  # columns are vec(rho_k)
    lam = np.zeros((16, 16), dtype=complex)
    for j, rho in enumerate(basis.inputs):
        out = (u @ rho @ u.conj().T).reshape(-1)
        lam[j], *_ = np.linalg.lstsq(stack, out, rcond=None)
    return lam


class TestStateBasis:
    def test_states_are_pure(self):
        basis = default_basis()
        for m in np.concatenate([basis.inputs, basis.projectors]):
            assert np.max(np.abs(m - m.conj().T)) <= 1e-12
            assert abs(np.trace(m).real - 1) <= 1e-12
            vals = np.linalg.eigvalsh(m)
            assert abs(vals[-1] - 1) <= 1e-12 and np.max(np.abs(vals[:-1])) <= 1e-12

    def test_inputs_linearly_independent(self):
        gram = design().gram
        assert np.linalg.cond(gram) < 1e6

    def test_projector_groups_complete(self):
        basis = default_basis()
        for b in range(9):
            group = basis.projectors[4 * b : 4 * b + 4]
            assert np.max(np.abs(group.sum(axis=0) - np.eye(4))) <= 1e-12

    def test_counts(self):
        basis = default_basis()
        assert basis.inputs.shape == (16, 4, 4)
        assert basis.projectors.shape == (36, 4, 4)


class TestExpectedCounts:
    def test_cz_00_zz_basis(self):
        table = expected_counts(ideal_chi(np.pi), 1.0)
        assert np.allclose(table.expected[0, 0:4], [2000, 0, 0, 0], atol=1e-9)

    def test_plus_plus_xx_low_signal(self):
        # Born probability of |++> after CZ on |++> is 0.25 (state-vector oracle)
        table = expected_counts(ideal_chi(np.pi), 0.1)
        j = 4 * 2 + 2  # |+,+> input
        l = 4 * (3 * 1 + 1) + 0  # XX basis, outcome (+,+)
        assert table.expected[j, l] == pytest.approx(200 * 0.25, abs=1e-9)

    def test_per_basis_sums(self):
        for phi in (np.pi / 6, np.pi, 7 * np.pi / 4):
            table = expected_counts(ideal_chi(phi), 0.5)
            sums = table.expected.reshape(16, 9, 4).sum(axis=2)
            assert np.max(np.abs(sums - table.n_per_basis)) <= 1e-6 * table.n_per_basis

    def test_sigma_accessor(self):
        table = expected_counts(ideal_chi(np.pi), 1.0)
        assert np.allclose(table.sigma, np.sqrt(table.expected))

    def test_rejects_nonpositive_ratio(self):
        with pytest.raises(ValueError):
            expected_counts(ideal_chi(np.pi), 0.0)


class TestSampleCounts:
    def test_zero_mean_gives_zero(self):
        table = expected_counts(ideal_chi(np.pi), 1.0)
        sampled = sample_counts(table, 123)
        assert np.all(sampled.counts[table.expected == 0] == 0)

    def test_deterministic(self):
        table = expected_counts(ideal_chi(np.pi / 3), 0.5)
        a = sample_counts(table, 99)
        b = sample_counts(table, 99)
        assert np.array_equal(a.counts, b.counts)
        assert not np.array_equal(a.counts, sample_counts(table, 100).counts)

    def test_sample_mean_near_expectation(self):
        # mean of 10000 draws from Poisson(2000) is within 5 sigma/sqrt(n)
        n = 10000
        rng_table = CountTable(
            expected=np.full((100, 100), 2000.0), counts=None, n_per_basis=2000.0, signal_ratio=1.0
        )
        draws = sample_counts(rng_table, 7).counts.reshape(-1)
        bound = 5 * np.sqrt(2000.0 / n)
        assert abs(draws.mean() - 2000.0) <= bound

    def test_poisson_chi_square_gof(self):
        # exactness check at low and high mean, 1e5 draws, alpha = 0.001
        for mean, seed in ((5.0, 21), (2000.0, 22)):
            table = CountTable(
                expected=np.full((100, 1000), mean), counts=None, n_per_basis=2000.0, signal_ratio=1.0
            )
            draws = sample_counts(table, seed).counts.reshape(-1)
            lo = int(max(0, np.floor(mean - 4 * np.sqrt(mean))))
            hi = int(np.ceil(mean + 4 * np.sqrt(mean)))
            values = list(range(lo, hi + 1))
            probs = np.concatenate(
                [
                    [scipy.stats.poisson.cdf(lo - 1, mean)],
                    scipy.stats.poisson.pmf(values, mean),
                    [scipy.stats.poisson.sf(hi, mean)],
                ]
            )
            observed = np.concatenate(
                [[(draws < lo).sum()], [np.sum(draws == v) for v in values], [(draws > hi).sum()]]
            )
            # drop impossible bins, then merge sub-threshold bins so every
            # expected count is at least 5
            possible = probs > 0
            assert observed[~possible].sum() == 0
            observed, probs = observed[possible], probs[possible]
            keep = probs * draws.size >= 5
            merged_obs = list(observed[keep])
            merged_probs = list(probs[keep])
            if (~keep).any():
                merged_obs[-1] += observed[~keep].sum()
                merged_probs[-1] += probs[~keep].sum()
            stat, pvalue = scipy.stats.chisquare(merged_obs, np.array(merged_probs) * draws.size)
            assert pvalue >= 0.001


class TestBetaTensor:
    def test_identity_conjugation(self):
        bt = beta_tensor()
        assert np.allclose(bt.beta[0, 0], np.eye(16), atol=1e-10)

    def test_tau_contraction_identity(self):
        bt = beta_tensor()
        flat = bt.beta.transpose(2, 3, 0, 1).reshape(256, 256)
        assert np.max(np.abs(bt.tau @ flat - np.eye(256))) <= 1e-8

    def test_reconstruction_identity(self):
        # brute force: contracting beta with chi reproduces the expansion of the output
        rng = np.random.default_rng(12)
        h = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
        chi = h @ h.conj().T
        chi /= np.trace(chi).real
        bt = beta_tensor()
        des = design()
        lam_via_beta = np.einsum("mnjk,mn->jk", bt.beta, chi)
        from qpdn.quantum import PAULI_2Q

        for j, rho in enumerate(default_basis().inputs):
            out = np.einsum("mn,mab,bc,ndc->ad", chi, PAULI_2Q, rho, PAULI_2Q.conj())
            lam_direct = des.expand_in_inputs(out)
            assert np.max(np.abs(lam_via_beta[j] - lam_direct)) <= 1e-9


class TestLambdaRoute:
    def test_noiseless_lambda_matches_oracle(self):
        for phi in (np.pi / 6, np.pi, 5 * np.pi / 3):
            table = noiseless_counts(expected_counts(ideal_chi(phi), 1.0))
            lam = lambda_from_counts(table)
            assert np.max(np.abs(lam - exact_lambda(phi))) <= 1e-9

    def test_identity_channel_lambda_is_delta(self):
        table = noiseless_counts(expected_counts(ideal_chi(2 * np.pi), 1.0))
        lam = lambda_from_counts(table)
        assert np.max(np.abs(lam - np.eye(16))) <= 1e-9

    def test_noisy_lambda_statistical_bound(self):
        # Poisson noise at r=1 perturbs lambda by O(1/sqrt(2000)) times the
        # design's amplification factor: measured over 200 draws the
        # max-entry error is 0.062 +- 0.009, so 0.12 sits past 5 sigma.
        phi = 3 * np.pi / 4
        exact = exact_lambda(phi)
        table = sample_counts(expected_counts(ideal_chi(phi), 1.0), 31)
        lam = lambda_from_counts(table)
        assert np.max(np.abs(lam - exact)) <= 0.12

    def test_chi_from_lambda_identity(self):
        bt = beta_tensor()
        chi = chi_from_lambda(np.eye(16), bt)
        assert process_fidelity(chi, ideal_chi(2 * np.pi)) >= 1 - 1e-9

    def test_noiseless_roundtrip_all_grid(self):
        bt = beta_tensor()
        for phi in PHI_GRID:
            table = noiseless_counts(expected_counts(ideal_chi(float(phi)), 1.0))
            chi = chi_from_lambda(lambda_from_counts(table), bt)
            assert process_fidelity(chi, ideal_chi(float(phi))) >= 1 - 1e-9


class TestChiLeastSquares:
    def test_noiseless_exact(self):
        for phi in PHI_GRID:
            table = noiseless_counts(expected_counts(ideal_chi(float(phi)), 1.0))
            chi = chi_least_squares(table)
            assert process_fidelity(chi, ideal_chi(float(phi))) >= 1 - 1e-9
            assert np.max(np.abs(chi.chi - chi.chi.conj().T)) <= 1e-12

    def test_route_equivalence_on_noisy_tables(self):
        bt = beta_tensor()
        rng = np.random.default_rng(13)
        for i in range(10):
            phi = float(rng.choice(PHI_GRID))
            r = float(rng.choice([1.0, 0.5, 0.1]))
            table = sample_counts(expected_counts(ideal_chi(phi), r), int(rng.integers(1 << 40)))
            a = chi_least_squares(table)
            b = chi_from_lambda(lambda_from_counts(table), bt)
            assert np.linalg.norm(a.chi - b.chi) <= 1e-8

    def test_zero_counts_degenerate(self):
        table = CountTable(
            expected=np.zeros((16, 36)), counts=np.zeros((16, 36)), n_per_basis=2000.0, signal_ratio=1.0
        )
        with pytest.warns(UserWarning):
            chi = chi_least_squares(table)
        assert np.count_nonzero(chi.chi) == 0
        assert chi.degenerate


class TestDatasetGeneration:
    def test_paper_default_plan(self):
        plan = plan_records(PHI_GRID, 500, (1.0, 0.5, 0.1))
        assert len(plan) == 24000
        splits = {}
        for _, _, _, split, _ in plan:
            splits[split] = splits.get(split, 0) + 1
        assert splits == {"train": 18000, "val": 2400, "test": 3600}

    def test_split_sizes(self):
        assert split_sizes(500) == {"train": 375, "val": 50, "test": 75}
        assert split_sizes(1) == {"train": 1, "val": 0, "test": 0}
        for n in (2, 3, 7, 10, 33, 200):
            sizes = split_sizes(n)
            assert sum(sizes.values()) == n
            for name, frac in (("train", 0.75), ("val", 0.10), ("test", 0.15)):
                assert abs(sizes[name] - frac * n) <= 1.0

    def test_small_generation(self):
        ds = generate_dataset(phis=PHI_GRID[:2], instances=5, ratios=(1.0, 0.1), seed=3)
        assert len(ds.records) == 20
        for rec in ds.records:
            assert rec.noisy.label == "noisy"
            assert rec.target.label == "theoretical"
            assert rec.noisy.signal_ratio in (1.0, 0.1)

    def test_determinism_and_seed_derivation(self):
        a = generate_dataset(phis=PHI_GRID[:1], instances=4, ratios=(0.5,), seed=17)
        b = generate_dataset(phis=PHI_GRID[:1], instances=4, ratios=(0.5,), seed=17)
        for ra, rb in zip(a.records, b.records):
            assert np.array_equal(ra.noisy.chi, rb.noisy.chi)
        assert derive_record_seed(17, 0) != derive_record_seed(17, 1)
        assert derive_record_seed(17, 3) == a.records[3].seed

    def test_difference_matrix_symmetry(self):
        ds = generate_dataset(phis=PHI_GRID[:3], instances=4, ratios=(0.1,), seed=5)
        for rec in ds.records:
            d = rec.noisy.chi - rec.target.chi
            assert np.max(np.abs(d - d.conj().T)) <= 1e-9
            assert np.max(np.abs(d.real - d.real.T)) <= 1e-9
            assert np.max(np.abs(d.imag + d.imag.T)) <= 1e-9

    def test_fidelity_decreases_with_signal(self):
        ds = generate_dataset(phis=[np.pi], instances=100, ratios=(1.0, 0.5, 0.1), seed=8)
        means = []
        for r in (1.0, 0.5, 0.1):
            recs = ds.slice(ratio=r)
            assert len(recs) == 100
            means.append(np.mean([process_fidelity(x.noisy, x.target) for x in recs]))
        assert means[0] > means[1] > means[2]

    def test_table_for_record_regenerates_counts(self):
        ds = generate_dataset(phis=PHI_GRID[:1], instances=2, ratios=(1.0,), seed=55)
        rec = ds.records[1]
        table = table_for_record(ds, rec)
        chi = chi_least_squares(table)
        assert np.array_equal(chi.chi, rec.noisy.chi)


class TestNormalization:
    def test_affine_arithmetic(self):
        stats = (-1.0, 3.0)
        assert normalize_components(1.0, stats) == pytest.approx(0.5, abs=0)
        assert rescale_components(0.5, stats) == pytest.approx(1.0, abs=0)
        assert rescale_components(0.0, stats) == -1.0
        assert rescale_components(1.0, stats) == 3.0

    def test_train_extrema_map_to_unit_interval(self):
        ds = normalize(generate_dataset(phis=PHI_GRID[:2], instances=8, ratios=(0.1,), seed=2))
        comps = np.concatenate([chi_to_image(r.noisy).reshape(-1) for r in ds.split_records("train")])
        normed = normalize_components(comps, ds.stats)
        assert normed.min() == pytest.approx(0.0, abs=1e-15)
        assert normed.max() == pytest.approx(1.0, abs=1e-15)

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(16, 16, 2))
        stats = (-0.37, 1.12)
        back = rescale_components(normalize_components(x, stats), stats)
        assert np.max(np.abs(back - x)) <= 1e-15

    def test_stats_from_train_split_only(self):
        ds = generate_dataset(phis=PHI_GRID[:2], instances=10, ratios=(0.1,), seed=6)
        ds = normalize(ds)
        train_comps = np.concatenate(
            [chi_to_image(r.noisy).reshape(-1) for r in ds.split_records("train")]
        )
        assert ds.stats == (float(train_comps.min()), float(train_comps.max()))

    def test_degenerate_dataset_rejected(self):
        ds = generate_dataset(phis=PHI_GRID[:1], instances=2, ratios=(1.0,), seed=1)
        for rec in ds.records:
            rec.noisy.chi = np.zeros((16, 16), dtype=complex)
        with pytest.raises(ValueError):
            normalize(ds)

    def test_image_chi_roundtrip(self):
        rng = np.random.default_rng(15)
        chi = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
        assert np.array_equal(image_to_chi(chi_to_image(chi)), chi)


class TestSerialization:
    def _hashdir(self, path):
        out = {}
        for name in sorted(os.listdir(path)):
            with open(os.path.join(path, name), "rb") as fh:
                out[name] = hashlib.sha256(fh.read()).hexdigest()
        return out

    def test_dataset_roundtrip_bitexact(self, tmp_path):
        ds = normalize(generate_dataset(phis=PHI_GRID[:2], instances=6, ratios=(1.0, 0.1), seed=77))
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        save_dataset(ds, d1)
        save_dataset(load_dataset(d1), d2)
        assert self._hashdir(d1) == self._hashdir(d2)

    def test_identical_seed_identical_bytes(self, tmp_path):
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        for d in (d1, d2):
            save_dataset(
                normalize(generate_dataset(phis=PHI_GRID[:1], instances=6, ratios=(0.5,), seed=42)), d
            )
        assert self._hashdir(d1) == self._hashdir(d2)

    def test_counts_csv_roundtrip(self, tmp_path):
        table = sample_counts(expected_counts(ideal_chi(np.pi / 4), 0.5), 1234)
        p = tmp_path / "counts.csv"
        save_counts_csv(table, p)
        back = load_counts_csv(p)
        assert np.array_equal(back.counts, table.counts)
        assert np.allclose(back.expected, table.expected)
        assert back.n_per_basis == table.n_per_basis
        assert back.seed == 1234
        assert back.signal_ratio == 0.5

    def test_counts_csv_malformed_row_reports_line(self, tmp_path):
        table = sample_counts(expected_counts(ideal_chi(np.pi / 4), 1.0), 5)
        p = tmp_path / "counts.csv"
        save_counts_csv(table, p)
        lines = p.read_text().splitlines()
        lines[10] = "not,a,valid,row"
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(CountsParseError) as err:
            load_counts_csv(p)
        assert err.value.line == 11
