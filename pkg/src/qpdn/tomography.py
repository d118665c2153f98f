"""Simulated process-tomography experiment for the control-phase channel.

The experiment prepares 16 product input states, applies the channel, and
measures 36 product projectors grouped into 9 complete bases of 4 outcomes.
Counts follow Poisson statistics around ``N * p`` where ``N = 2000 * r`` is
the per-basis resource and ``p`` the Born probability.

Two reconstruction routes are provided and kept equivalent:

* ``chi_from_lambda`` follows the textbook chain: per-input output-state
  estimation, expansion coefficients ``lambda``, and contraction with the
  pseudo-inverse ``tau`` of the basis-change tensor ``beta``.
* ``chi_least_squares`` solves the single 576x256 linear least-squares
  problem in the real Hermitian parameterization directly.

Index conventions (fixed, also used by the dataset files):

* input index ``j = 4*j1 + j2`` over single-qubit states ``(|0>, |1>, |+>, |+i>)``
* projector index ``l = 4*b + o`` with basis ``b = 3*b1 + b2`` over
  single-qubit measurement bases ``(Z, X, Y)`` and outcome ``o = 2*o1 + o2``
* dataset record index iterates phi (outer), then signal ratio, then instance
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .quantum import (
    PAULI_2Q,
    PHI_GRID,
    ProcessMatrix,
    fmt17,
    hermitize,
    ideal_chi,
    process_fidelity,
)

SCHEMA_VERSION = 1
RNG_SCHEME = "SeedSequence(master_seed, spawn_key=(record_index,)) -> Philox4x64 counts stream"
BASE_COUNTS = 2000.0
SPLIT_FRACTIONS = {"train": 0.75, "val": 0.10, "test": 0.15}
SPLIT_ORDER = ("train", "val", "test")


class CountsParseError(ValueError):
    """Malformed counts file; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# state and projector sets

_KETS = {
    "0": np.array([1.0, 0.0], dtype=complex),
    "1": np.array([0.0, 1.0], dtype=complex),
    "+": np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0),
    "-": np.array([1.0, -1.0], dtype=complex) / np.sqrt(2.0),
    "+i": np.array([1.0, 1.0j], dtype=complex) / np.sqrt(2.0),
    "-i": np.array([1.0, -1.0j], dtype=complex) / np.sqrt(2.0),
}

INPUT_STATE_LABELS = ("0", "1", "+", "+i")
MEASUREMENT_BASES = (("0", "1"), ("+", "-"), ("+i", "-i"))  # Z, X, Y


def two_qubit_projector(label1: str, label2: str) -> np.ndarray:
    ket = np.kron(_KETS[label1], _KETS[label2])
    return np.outer(ket, ket.conj())


@dataclass(frozen=True)
class StateBasis:
    """The 16 input states and 36 measurement projectors of the experiment."""

    inputs: np.ndarray
    projectors: np.ndarray
    input_labels: tuple
    projector_labels: tuple

    @classmethod
    def build(cls) -> "StateBasis":
        inputs = []
        in_labels = []
        for s1 in INPUT_STATE_LABELS:
            for s2 in INPUT_STATE_LABELS:
                inputs.append(two_qubit_projector(s1, s2))
                in_labels.append(f"{s1},{s2}")
        projectors = []
        proj_labels = []
        for b1 in MEASUREMENT_BASES:
            for b2 in MEASUREMENT_BASES:
                for o1 in b1:
                    for o2 in b2:
                        projectors.append(two_qubit_projector(o1, o2))
                        proj_labels.append(f"{o1},{o2}")
        return cls(
            inputs=np.stack(inputs),
            projectors=np.stack(projectors),
            input_labels=tuple(in_labels),
            projector_labels=tuple(proj_labels),
        )


_DEFAULT_BASIS: StateBasis | None = None


def default_basis() -> StateBasis:
    global _DEFAULT_BASIS
    if _DEFAULT_BASIS is None:
        _DEFAULT_BASIS = StateBasis.build()
    return _DEFAULT_BASIS


# ---------------------------------------------------------------------------
# Hermitian parameterization helpers

def hermitian_basis(d: int) -> np.ndarray:
    """Orthonormal (Hilbert-Schmidt) basis of d x d Hermitian matrices.

    Order: the d diagonal units, then for each i<j the symmetric and the
    antisymmetric combination.
    """
    mats = []
    for i in range(d):
        m = np.zeros((d, d), dtype=complex)
        m[i, i] = 1.0
        mats.append(m)
    for i in range(d):
        for j in range(i + 1, d):
            m = np.zeros((d, d), dtype=complex)
            m[i, j] = m[j, i] = 1.0 / np.sqrt(2.0)
            mats.append(m)
            m = np.zeros((d, d), dtype=complex)
            m[i, j] = -1.0j / np.sqrt(2.0)
            m[j, i] = 1.0j / np.sqrt(2.0)
            mats.append(m)
    return np.stack(mats)


def herm_to_vec(m: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.einsum("cij,ij->c", basis.conj(), m).real


def vec_to_herm(x: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.einsum("c,cij->ij", x, basis)


# ---------------------------------------------------------------------------
# precomputed experiment geometry

class ExperimentDesign:
    """Linear maps tying a process matrix to the 576 observable probabilities.

    ``coeff[i]`` is the 16x16 Hermitian matrix with
    ``p_i = sum_mn coeff[i, m, n] * chi_mn`` for row ``i = 36*j + l``.
    """

    def __init__(self, basis: StateBasis):
        self.basis = basis
        rho = basis.inputs
        proj = basis.projectors
        # K[m, n, j] = A_m rho_j A_n^dagger
        t1 = np.einsum("mab,jbc->mjac", PAULI_2Q, rho)
        k = np.einsum("mjac,ndc->mnjad", t1, PAULI_2Q.conj())
        # coeff[j, l, m, n] = Tr[P_l K_mnj]
        coeff = np.einsum("lda,mnjad->jlmn", proj, k)
        self.coeff = coeff.reshape(576, 16, 16)
        self.herm16 = hermitian_basis(16)
        self.design = np.einsum("imn,cmn->ic", self.coeff, self.herm16).real
        self.design_pinv = np.linalg.pinv(self.design)
        # per-input output-state design over the d=4 Hermitian basis
        self.herm4 = hermitian_basis(4)
        self.state_design = np.einsum("lab,cba->lc", proj, self.herm4).real
        self.state_design_pinv = np.linalg.pinv(self.state_design)
        self.gram = np.einsum("kab,lba->kl", rho, rho)  # HS inner products, Hermitian inputs

    def probabilities(self, chi: np.ndarray) -> np.ndarray:
        """Born probabilities of all 576 (input, projector) pairs, shape (16, 36)."""
        p = np.einsum("imn,mn->i", self.coeff, chi).real
        return p.reshape(16, 36)

    def expand_in_inputs(self, m: np.ndarray) -> np.ndarray:
        """Coefficients c with ``m = sum_k c_k rho_k`` over the input-state basis."""
        b = np.einsum("kba,ba->k", self.basis.inputs.conj(), m)
        return np.linalg.solve(self.gram, b)


_DEFAULT_DESIGN: ExperimentDesign | None = None


def design(basis: StateBasis | None = None) -> ExperimentDesign:
    global _DEFAULT_DESIGN
    if basis is None or basis is default_basis():
        if _DEFAULT_DESIGN is None:
            _DEFAULT_DESIGN = ExperimentDesign(default_basis())
        return _DEFAULT_DESIGN
    return ExperimentDesign(basis)


# ---------------------------------------------------------------------------
# count tables

@dataclass
class CountTable:
    """Expected and sampled coincidence counts, indexed (input j, projector l)."""

    expected: np.ndarray | None
    counts: np.ndarray | None
    n_per_basis: float
    signal_ratio: float
    phi: float | None = None
    seed: int | None = None

    @property
    def sigma(self) -> np.ndarray:
        """Poisson standard deviation of each expected count."""
        if self.expected is None:
            raise ValueError("expected counts not set")
        return np.sqrt(self.expected)


def expected_counts(chi, r: float, basis: StateBasis | None = None) -> CountTable:
    """Expected counts ``N * Tr[P_l eps_chi(rho_j)]`` with ``N = 2000 * r``."""
    if r <= 0:
        raise ValueError("signal ratio must be positive")
    if isinstance(chi, ProcessMatrix):
        arr, phi, label = chi.chi, chi.phi, chi.label
    else:
        arr, phi, label = np.asarray(chi, dtype=complex), None, "noisy"
    n = BASE_COUNTS * r
    p = design(basis).probabilities(arr)
    if label == "theoretical" and (p.min() < -1e-8 or p.max() > 1 + 1e-8):
        raise ValueError(f"non-physical probability range [{p.min()}, {p.max()}] from theoretical chi")
    if p.min() < -1e-8 or p.max() > 1 + 1e-8:
        warnings.warn("clipping non-physical probabilities from noisy process matrix")
    p = np.clip(p, 0.0, None)
    return CountTable(expected=n * p, counts=None, n_per_basis=n, signal_ratio=r, phi=phi)


def sample_counts(table: CountTable, seed: int) -> CountTable:
    """Draw exact Poisson counts around the expected values.

    The stream is a Philox4x64 generator keyed by ``seed``; identical seeds
    reproduce identical counts bit-for-bit.
    """
    if table.expected is None:
        raise ValueError("expected counts not set")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    counts = rng.poisson(table.expected)
    return replace(table, counts=counts.astype(np.int64), seed=int(seed))


def noiseless_counts(table: CountTable) -> CountTable:
    """Treat the expected values themselves as observed counts."""
    if table.expected is None:
        raise ValueError("expected counts not set")
    return replace(table, counts=table.expected.copy(), seed=None)


# ---------------------------------------------------------------------------
# reconstruction: beta/tau route

@dataclass
class BetaTensor:
    """Basis-change tensor ``A_m rho_j A_n^† = sum_k beta[m,n,j,k] rho_k``.

    ``tau`` is the Moore-Penrose pseudo-inverse of the 256x256 flattening
    ``B[(j,k), (m,n)]``.
    """

    beta: np.ndarray
    tau: np.ndarray


def beta_tensor(basis: StateBasis | None = None, pauli: np.ndarray | None = None) -> BetaTensor:
    des = design(basis)
    rho = des.basis.inputs
    ops = PAULI_2Q if pauli is None else pauli
    t1 = np.einsum("mab,jbc->mjac", ops, rho)
    k = np.einsum("mjac,ndc->mnjad", t1, ops.conj())
    # rhs[k, (m,n,j)] = Tr[rho_k^dagger K_mnj]
    rhs = np.einsum("kba,mnjba->kmnj", rho.conj(), k).reshape(16, -1)
    beta = np.linalg.solve(des.gram, rhs).reshape(16, 16, 16, 16)
    beta = np.moveaxis(beta, 0, -1)  # -> [m, n, j, k]
    flat = beta.transpose(2, 3, 0, 1).reshape(256, 256)
    tau = np.linalg.pinv(flat)
    return BetaTensor(beta=beta, tau=tau)


def lambda_from_counts(table: CountTable, basis: StateBasis | None = None) -> np.ndarray:
    """Expansion coefficients ``eps(rho_j) = sum_k lambda[j,k] rho_k`` from counts.

    For each input the output density matrix is estimated by linear least
    squares over the 36 projector probabilities, solved in the real vector
    space of Hermitian matrices, then expanded over the input basis.
    """
    if table.counts is None:
        raise ValueError("counts not set")
    if table.n_per_basis <= 0:
        raise ValueError("n_per_basis must be positive")
    des = design(basis)
    p_hat = np.asarray(table.counts, dtype=float) / table.n_per_basis
    lam = np.zeros((16, 16), dtype=complex)
    for j in range(16):
        x = des.state_design_pinv @ p_hat[j]
        sigma = vec_to_herm(x, des.herm4)
        lam[j] = des.expand_in_inputs(sigma)
    return lam


def chi_from_lambda(lam: np.ndarray, beta: BetaTensor) -> ProcessMatrix:
    """Contract ``chi_mn = sum_jk tau[(m,n),(j,k)] lambda[j,k]`` and symmetrize."""
    lam = np.asarray(lam, dtype=complex)
    if lam.shape != (16, 16):
        raise ValueError(f"lambda must be 16x16, got {lam.shape}")
    chi = (beta.tau @ lam.reshape(256)).reshape(16, 16)
    return ProcessMatrix(chi=hermitize(chi), label="noisy")


# ---------------------------------------------------------------------------
# reconstruction: direct least squares

def chi_least_squares(table: CountTable, basis: StateBasis | None = None) -> ProcessMatrix:
    """Least-squares process matrix over the Hermitian parameterization.

    All 576 probabilities enter one linear problem; the result is Hermitian
    by construction.  An all-zero table yields the (zero) least-norm
    solution, flagged degenerate.
    """
    if table.counts is None:
        raise ValueError("counts not set")
    des = design(basis)
    p_hat = (np.asarray(table.counts, dtype=float) / table.n_per_basis).reshape(576)
    x = des.design_pinv @ p_hat
    chi = vec_to_herm(x, des.herm16)
    degenerate = not np.any(np.asarray(table.counts) != 0)
    if degenerate:
        warnings.warn("all counts zero; least-norm (zero) reconstruction")
    return ProcessMatrix(
        chi=chi,
        phi=table.phi,
        signal_ratio=table.signal_ratio,
        label="noisy",
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# dataset generation

@dataclass
class Record:
    """One simulated tomography experiment paired with its ground truth."""

    noisy: ProcessMatrix
    target: ProcessMatrix
    phi: float
    signal_ratio: float
    instance: int
    split: str
    record_index: int
    seed: int


@dataclass
class Dataset:
    records: list
    phi_grid: np.ndarray
    ratios: tuple
    instances: int
    master_seed: int
    stats: tuple | None = None  # (m, M) over train-split noisy components
    schema_version: int = SCHEMA_VERSION

    def split_records(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def slice(self, split: str | None = None, phi: float | None = None, ratio: float | None = None) -> list:
        out = self.records
        if split is not None:
            out = [r for r in out if r.split == split]
        if phi is not None:
            out = [r for r in out if abs(r.phi - phi) < 1e-12]
        if ratio is not None:
            out = [r for r in out if abs(r.signal_ratio - ratio) < 1e-12]
        return out


def split_sizes(n: int) -> dict:
    """Largest-remainder 75/10/15 split; ties favour train, then val."""
    floors = {name: int(n * frac) for name, frac in SPLIT_FRACTIONS.items()}
    leftover = n - sum(floors.values())
    remainders = sorted(
        SPLIT_ORDER,
        key=lambda name: (-(n * SPLIT_FRACTIONS[name] - floors[name]), SPLIT_ORDER.index(name)),
    )
    for name in remainders[:leftover]:
        floors[name] += 1
    return floors


def derive_record_seed(master_seed: int, record_index: int) -> int:
    """Documented splittable scheme: one child SeedSequence per record."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(record_index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def plan_records(phis, instances: int, ratios) -> list:
    """Deterministic (phi, ratio, instance, split, record_index) generation plan."""
    plan = []
    idx = 0
    for phi in phis:
        for r in ratios:
            sizes = split_sizes(instances)
            marks = ["train"] * sizes["train"] + ["val"] * sizes["val"] + ["test"] * sizes["test"]
            for inst in range(instances):
                plan.append((float(phi), float(r), inst, marks[inst], idx))
                idx += 1
    return plan


def generate_dataset(phis=None, instances: int = 500, ratios=(1.0, 0.5, 0.1), seed: int = 0) -> Dataset:
    """Simulate the full noisy-process dataset.

    For every (phi, ratio, instance) a count table is sampled with its own
    derived seed and reconstructed by :func:`chi_least_squares`.  The split
    assignment is stratified per (phi, ratio) cell.
    """
    if phis is None:
        phis = PHI_GRID
    phis = np.asarray(phis, dtype=float)
    if len(phis) == 0:
        raise ValueError("phi grid must be non-empty")
    if instances < 1:
        raise ValueError("instances must be >= 1")
    expected_cache = {}
    targets = {float(phi): ideal_chi(float(phi)) for phi in phis}
    records = []
    for phi, r, inst, split, idx in plan_records(phis, instances, ratios):
        key = (phi, r)
        if key not in expected_cache:
            expected_cache[key] = expected_counts(targets[phi], r)
        rec_seed = derive_record_seed(seed, idx)
        table = sample_counts(expected_cache[key], rec_seed)
        noisy = chi_least_squares(table)
        records.append(
            Record(
                noisy=noisy,
                target=targets[phi],
                phi=phi,
                signal_ratio=r,
                instance=inst,
                split=split,
                record_index=idx,
                seed=rec_seed,
            )
        )
    return Dataset(
        records=records,
        phi_grid=phis,
        ratios=tuple(float(r) for r in ratios),
        instances=instances,
        master_seed=int(seed),
    )


def table_for_record(dataset: Dataset, record: Record) -> CountTable:
    """Regenerate the exact count table behind a dataset record."""
    expected = expected_counts(record.target, record.signal_ratio)
    return sample_counts(expected, record.seed)


# ---------------------------------------------------------------------------
# normalization (matrix components <-> unit interval)

def chi_to_image(chi) -> np.ndarray:
    """View a process matrix as a 16x16x2 real image (re, im channels)."""
    arr = chi.chi if isinstance(chi, ProcessMatrix) else np.asarray(chi, dtype=complex)
    return np.stack([arr.real, arr.imag], axis=-1)


def image_to_chi(img: np.ndarray) -> np.ndarray:
    out = np.empty(img.shape[:-1], dtype=complex)
    out.real = img[..., 0]
    out.imag = img[..., 1]
    return out


def normalize(dataset: Dataset) -> Dataset:
    """Attach global min/max stats computed over the train-split noisy matrices.

    The same (m, M) pair is reused for validation, test and inference so no
    information leaks out of the training fold.
    """
    train = dataset.split_records("train")
    if not train:
        raise ValueError("dataset has no train records")
    lo = np.inf
    hi = -np.inf
    for rec in train:
        img = chi_to_image(rec.noisy)
        lo = min(lo, float(img.min()))
        hi = max(hi, float(img.max()))
    if not hi > lo:
        raise ValueError("degenerate normalization: all components equal")
    return replace(dataset, stats=(lo, hi))


def normalize_components(x: np.ndarray, stats: tuple) -> np.ndarray:
    """Componentwise affine map of matrix entries onto [0, 1]."""
    m, big = stats
    return (np.asarray(x, dtype=float) - m) / (big - m)


def rescale_components(y: np.ndarray, stats: tuple) -> np.ndarray:
    """Inverse of :func:`normalize_components`."""
    m, big = stats
    return m + np.asarray(y, dtype=float) * (big - m)


def records_to_arrays(records, stats: tuple) -> tuple:
    """Normalized (noisy, target) image stacks for a list of records."""
    x = np.stack([normalize_components(chi_to_image(r.noisy), stats) for r in records])
    y = np.stack([normalize_components(chi_to_image(r.target), stats) for r in records])
    return x, y


# ---------------------------------------------------------------------------
# serialization

def _component_columns(prefix: str) -> list:
    cols = []
    for i in range(16):
        for j in range(16):
            cols.append(f"{prefix}_{i:02d}_{j:02d}_re")
            cols.append(f"{prefix}_{i:02d}_{j:02d}_im")
    return cols


def save_dataset(dataset: Dataset, out_dir) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    split_counts = {name: len(dataset.split_records(name)) for name in SPLIT_ORDER}
    manifest = {
        "schema_version": dataset.schema_version,
        "master_seed": dataset.master_seed,
        "phi_grid_radians": [fmt17(v) for v in dataset.phi_grid],
        "ratios": [fmt17(v) for v in dataset.ratios],
        "instances": dataset.instances,
        "split_counts": split_counts,
        "normalization": None
        if dataset.stats is None
        else {"m": fmt17(dataset.stats[0]), "M": fmt17(dataset.stats[1])},
        "rng_scheme": RNG_SCHEME,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    header = ["phi_radians", "phi_degrees", "signal_ratio", "instance_id"]
    header += _component_columns("noisy") + _component_columns("target")
    for split in SPLIT_ORDER:
        with open(os.path.join(out_dir, f"{split}.csv"), "w") as fh:
            fh.write(",".join(header) + "\n")
            for rec in dataset.split_records(split):
                cells = [
                    fmt17(rec.phi),
                    fmt17(np.degrees(rec.phi)),
                    fmt17(rec.signal_ratio),
                    str(rec.instance),
                ]
                for arr in (rec.noisy.chi, rec.target.chi):
                    flat = chi_to_image(arr).reshape(-1)
                    cells.extend(fmt17(v) for v in flat)
                fh.write(",".join(cells) + "\n")


def load_dataset(in_dir) -> Dataset:
    import os

    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {manifest.get('schema_version')}")
    phi_grid = np.array([float(v) for v in manifest["phi_grid_radians"]])
    ratios = tuple(float(v) for v in manifest["ratios"])
    stats = manifest.get("normalization")
    if stats is not None:
        stats = (float(stats["m"]), float(stats["M"]))
    plan = plan_records(phi_grid, manifest["instances"], ratios)
    plan_index = {(round(p, 15), round(r, 15), inst): (split, idx) for p, r, inst, split, idx in plan}
    master_seed = int(manifest["master_seed"])
    records = []
    targets = {}
    for split in SPLIT_ORDER:
        path = os.path.join(in_dir, f"{split}.csv")
        with open(path) as fh:
            next(fh)  # header
            for line in fh:
                cells = line.rstrip("\n").split(",")
                phi = float(cells[0])
                ratio = float(cells[2])
                inst = int(cells[3])
                comps = np.array([float(v) for v in cells[4:]])
                noisy = image_to_chi(comps[:512].reshape(16, 16, 2))
                target = image_to_chi(comps[512:].reshape(16, 16, 2))
                key = (round(phi, 15), round(ratio, 15), inst)
                stored_split, idx = plan_index[key]
                if stored_split != split:
                    raise ValueError(f"record {key} found in split {split}, expected {stored_split}")
                tkey = round(phi, 15)
                if tkey not in targets:
                    targets[tkey] = ProcessMatrix(chi=target, phi=phi, label="theoretical")
                records.append(
                    Record(
                        noisy=ProcessMatrix(chi=noisy, phi=phi, signal_ratio=ratio, label="noisy"),
                        target=targets[tkey],
                        phi=phi,
                        signal_ratio=ratio,
                        instance=inst,
                        split=split,
                        record_index=idx,
                        seed=derive_record_seed(master_seed, idx),
                    )
                )
    records.sort(key=lambda r: r.record_index)
    return Dataset(
        records=records,
        phi_grid=phi_grid,
        ratios=ratios,
        instances=manifest["instances"],
        master_seed=master_seed,
        stats=stats,
    )


# ---------------------------------------------------------------------------
# counts file

def save_counts_csv(table: CountTable, path) -> None:
    with open(path, "w") as fh:
        fh.write("input_index,projector_index,expected,count,n_per_basis,seed\n")
        seed = "" if table.seed is None else str(table.seed)
        for j in range(16):
            for l in range(36):
                expected = "" if table.expected is None else fmt17(table.expected[j, l])
                count = "" if table.counts is None else fmt17(table.counts[j, l])
                fh.write(f"{j},{l},{expected},{count},{fmt17(table.n_per_basis)},{seed}\n")


def load_counts_csv(path) -> CountTable:
    expected = np.zeros((16, 36))
    counts = np.zeros((16, 36))
    have_expected = np.zeros((16, 36), dtype=bool)
    have_counts = np.zeros((16, 36), dtype=bool)
    n_per_basis = None
    seed = None
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("input_index"):
            raise CountsParseError("missing header row", 1)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 6:
                raise CountsParseError(f"expected 6 columns, got {len(cells)}", lineno)
            try:
                j = int(cells[0])
                l = int(cells[1])
            except ValueError as exc:
                raise CountsParseError(str(exc), lineno) from None
            if not (0 <= j < 16 and 0 <= l < 36):
                raise CountsParseError(f"index ({j}, {l}) out of range", lineno)
            try:
                if cells[2]:
                    expected[j, l] = float(cells[2])
                    have_expected[j, l] = True
                if cells[3]:
                    counts[j, l] = float(cells[3])
                    have_counts[j, l] = True
                n_per_basis = float(cells[4])
                if cells[5]:
                    seed = int(cells[5])
            except ValueError as exc:
                raise CountsParseError(str(exc), lineno) from None
    if n_per_basis is None:
        raise CountsParseError("no data rows", 2)
    if have_counts.any() and not have_counts.all():
        raise CountsParseError("incomplete count column", 2)
    r = n_per_basis / BASE_COUNTS
    return CountTable(
        expected=expected if have_expected.all() else None,
        counts=counts if have_counts.all() else None,
        n_per_basis=n_per_basis,
        signal_ratio=r,
        seed=seed,
    )
