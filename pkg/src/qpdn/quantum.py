"""Two-qubit operator algebra: Pauli basis, control-phase channel, process matrices.

Conventions used throughout the package:

* Single-qubit Pauli operators are the unnormalized ``{I, X, Y, Z}``.
* The two-qubit operator basis is ``A[m] = kron(P[a], P[b])`` with
  ``m = 4*a + b``, so ``Tr[A[m]^† A[n]] = 4 δ_mn`` and ``A[0]`` is the
  identity.  With this convention the process matrix of a unitary channel
  is rank-1 with unit trace.
* Process matrices are 16x16 complex arrays indexed by ``(m, n)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

HERMITIAN_TOL = 1e-12

_I = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)

PAULI_1Q = np.stack([_I, _X, _Y, _Z])

#: the 16 two-qubit Pauli products A[m], m = 4a + b
PAULI_2Q = np.stack([np.kron(PAULI_1Q[a], PAULI_1Q[b]) for a in range(4) for b in range(4)])

PAULI_LABELS = [f"{p}{q}" for p in "IXYZ" for q in "IXYZ"]

#: the 16 channel-parameter values of the experimental grid, radians
PHI_GRID = np.array(
    [
        np.pi / 6,
        np.pi / 4,
        np.pi / 3,
        np.pi / 2,
        2 * np.pi / 3,
        3 * np.pi / 4,
        5 * np.pi / 6,
        np.pi,
        7 * np.pi / 6,
        5 * np.pi / 4,
        4 * np.pi / 3,
        3 * np.pi / 2,
        5 * np.pi / 3,
        7 * np.pi / 4,
        11 * np.pi / 6,
        2 * np.pi,
    ]
)

VALID_LABELS = ("theoretical", "noisy", "mle", "denoised")


class DegenerateMatrixError(ValueError):
    """Raised when an operation receives a matrix it cannot meaningfully process."""


def fmt17(v: float) -> str:
    """Canonical 17-significant-digit rendering (negative zero folded to zero)."""
    return f"{float(v) + 0.0:.17g}"


def dagger(m: np.ndarray) -> np.ndarray:
    return m.conj().T


def hermitize(m: np.ndarray) -> np.ndarray:
    """Average a square matrix with its conjugate transpose."""
    return 0.5 * (m + m.conj().T)


def is_hermitian(m: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return bool(np.max(np.abs(m - m.conj().T)) <= tol)


@dataclass
class ProcessMatrix:
    """A 16x16 process matrix in the two-qubit Pauli-product basis.

    ``chi`` is complex, indexed ``(m, n)`` in :data:`PAULI_2Q` order.  The
    optional metadata records where the matrix came from: the channel angle
    ``phi`` (radians), the signal ratio ``signal_ratio`` (counts scale), and
    a provenance ``label``.
    """

    chi: np.ndarray
    phi: float | None = None
    signal_ratio: float | None = None
    label: str = "theoretical"
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.chi = np.asarray(self.chi, dtype=complex)
        if self.chi.shape != (16, 16):
            raise ValueError(f"chi must be 16x16, got {self.chi.shape}")
        if self.label not in VALID_LABELS:
            raise ValueError(f"unknown label {self.label!r}")

    @property
    def trace(self) -> float:
        return float(np.trace(self.chi).real)

    def as_array(self) -> np.ndarray:
        return self.chi

    def validate(self, tol: float = HERMITIAN_TOL) -> None:
        """Check the hermiticity contract; raises on violation."""
        if not is_hermitian(self.chi, tol):
            raise ValueError(f"{self.label} process matrix is not Hermitian within {tol}")


def _chi_of(obj) -> np.ndarray:
    return obj.chi if isinstance(obj, ProcessMatrix) else np.asarray(obj, dtype=complex)


def cp_unitary(phi: float) -> np.ndarray:
    """Control-phase gate ``diag(1, 1, 1, e^{-i phi})``."""
    if not np.isfinite(phi):
        raise ValueError("phi must be finite")
    return np.diag([1.0, 1.0, 1.0, np.exp(-1j * phi)]).astype(complex)


def unitary_decomposition(u: np.ndarray) -> np.ndarray:
    """Coefficients a with ``u = sum_m a[m] A[m]`` in the Pauli-product basis."""
    return np.einsum("mji,ij->m", PAULI_2Q.conj(), u) / 4.0


def ideal_chi(phi: float) -> ProcessMatrix:
    """Theoretical process matrix of the control-phase channel at angle ``phi``.

    For a unitary channel the matrix is the rank-1 outer product of the
    Pauli decomposition coefficients, hence Hermitian, PSD and trace-1.
    """
    a = unitary_decomposition(cp_unitary(phi))
    chi = np.outer(a, a.conj())
    return ProcessMatrix(chi=chi, phi=float(phi), label="theoretical")


def apply_channel(chi, rho: np.ndarray) -> np.ndarray:
    """Channel action ``sum_mn chi_mn A_m rho A_n^†`` on a 4x4 density matrix."""
    chi = _chi_of(chi)
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError(f"rho must be 4x4, got {rho.shape}")
    if not is_hermitian(rho, 1e-10):
        raise ValueError("rho must be Hermitian within 1e-10")
    if abs(np.trace(rho).real - 1.0) > 1e-10:
        raise ValueError("rho must have unit trace within 1e-10")
    return np.einsum("mn,mab,bc,ndc->ad", chi, PAULI_2Q, rho, PAULI_2Q.conj())


def born_probability(chi, rho_in: np.ndarray, projector: np.ndarray) -> float:
    """Detection probability ``Tr[Π ε_chi(ρ_in)]``, clamped to be non-negative.

    Values escaping ``[0, 1]`` by more than 1e-10 indicate a non-physical
    process matrix; a warning is emitted and the value is clipped.
    """
    p = float(np.trace(projector @ apply_channel(chi, rho_in)).real)
    if p < -1e-10 or p > 1.0 + 1e-10:
        warnings.warn(f"Born probability {p} outside [0, 1]; non-physical process input")
    return float(min(max(p, 0.0), 1.0))


def psd_project(m):
    """Project a Hermitian matrix onto the PSD cone, preserving its trace.

    Negative eigenvalues are clamped to zero and the result is rescaled to
    the input trace.  An input whose spectrum is entirely non-positive has
    no meaningful projection: a zero matrix is returned and, for
    :class:`ProcessMatrix` inputs, flagged via ``degenerate``.
    """
    arr = _chi_of(m)
    arr = hermitize(arr)
    trace_in = float(np.trace(arr).real)
    vals, vecs = np.linalg.eigh(arr)
    clipped = np.clip(vals, 0.0, None)
    total = clipped.sum()
    degenerate = False
    if total <= 0.0:
        warnings.warn("psd_project: spectrum entirely non-positive; returning zero matrix")
        out = np.zeros_like(arr)
        degenerate = True
    else:
        out = (vecs * clipped) @ vecs.conj().T
        out = hermitize(out)
        if trace_in > 0.0:
            out *= trace_in / total
        else:
            # no positive mass to rescale to; keep the clipped matrix
            degenerate = True
    if isinstance(m, ProcessMatrix):
        return ProcessMatrix(
            chi=out, phi=m.phi, signal_ratio=m.signal_ratio, label=m.label, degenerate=degenerate
        )
    return out


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def process_fidelity(a, b) -> float:
    """Uhlmann-form overlap of two process matrices, normalized to [0, 1].

    ``F = Tr[sqrt(sqrt(A) B sqrt(A))]^2 / (Tr A · Tr B)`` with both inputs
    PSD-projected first, so ``F(x, x) = 1`` for any Hermitian input.
    Eigenvalues of the inner product matrix below the floating-point noise
    floor are discarded before the square root, which is not Lipschitz at
    zero and would otherwise inflate rank-deficient overlaps by ~1e-8.
    """
    pa = psd_project(_chi_of(a))
    pb = psd_project(_chi_of(b))
    ta = float(np.trace(pa).real)
    tb = float(np.trace(pb).real)
    if ta <= 0.0 or tb <= 0.0:
        raise DegenerateMatrixError("process_fidelity: zero-trace input")
    ra = _sqrtm_psd(pa)
    mid = hermitize(ra @ pb @ ra)
    vals = np.linalg.eigvalsh(mid)
    tol = mid.shape[0] * np.finfo(float).eps * max(float(vals.max()), 0.0)
    vals = np.where(vals > tol, vals, 0.0)
    return float(np.sum(np.sqrt(vals)) ** 2 / (ta * tb))


# ---------------------------------------------------------------------------
# chi matrix file format: 16 rows x 32 columns, re/im interleaved, row-major

def save_chi_csv(pm: ProcessMatrix | np.ndarray, path) -> None:
    chi = _chi_of(pm)
    with open(path, "w") as fh:
        if isinstance(pm, ProcessMatrix):
            parts = []
            if pm.phi is not None:
                parts.append(f"phi={fmt17(pm.phi)}")
            if pm.signal_ratio is not None:
                parts.append(f"r={fmt17(pm.signal_ratio)}")
            parts.append(f"label={pm.label}")
            fh.write("# chi " + " ".join(parts) + "\n")
        for row in chi:
            cells = []
            for z in row:
                cells.append(fmt17(z.real))
                cells.append(fmt17(z.imag))
            fh.write(",".join(cells) + "\n")


def load_chi_csv(path) -> ProcessMatrix:
    phi = None
    ratio = None
    label = "noisy"
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if token.startswith("phi="):
                        phi = float(token[4:])
                    elif token.startswith("r="):
                        ratio = float(token[2:])
                    elif token.startswith("label="):
                        label = token[6:]
                continue
            vals = [float(x) for x in line.split(",")]
            if len(vals) != 32:
                raise ValueError(f"chi CSV row must have 32 columns, got {len(vals)}")
            rows.append([complex(vals[2 * i], vals[2 * i + 1]) for i in range(16)])
    if len(rows) != 16:
        raise ValueError(f"chi CSV must have 16 rows, got {len(rows)}")
    return ProcessMatrix(chi=np.array(rows), phi=phi, signal_ratio=ratio, label=label)
