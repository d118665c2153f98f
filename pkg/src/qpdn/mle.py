"""Maximum-likelihood process reconstruction.

The 16x16 process matrix is parameterized through an upper-triangular
factor ``T(t)`` with 256 real parameters so that
``chi(t) = T^† T / Tr[T^† T]`` is Hermitian, PSD and trace-1 for every
finite ``t``.  The objective is the Gaussian log-likelihood of the observed
counts with the Poisson variance taken from the model prediction,
``sigma_i^2 = max(nbar_i, sigma_floor)``.

Parameter layout: ``t[0..15]`` are the diagonal entries, followed by
row-wise upper off-diagonals as (re, im) pairs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize

from .quantum import ProcessMatrix
from .tomography import CountTable, StateBasis, chi_least_squares, design
from .quantum import psd_project

DIM = 16
N_PARAMS = DIM * DIM

_OFF_I, _OFF_J = np.triu_indices(DIM, k=1)


def t_to_T(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.shape != (N_PARAMS,):
        raise ValueError(f"t must have {N_PARAMS} entries, got {t.shape}")
    T = np.zeros((DIM, DIM), dtype=complex)
    T[np.arange(DIM), np.arange(DIM)] = t[:DIM]
    T[_OFF_I, _OFF_J] = t[DIM::2] + 1j * t[DIM + 1 :: 2]
    return T


def T_to_t(T: np.ndarray) -> np.ndarray:
    t = np.zeros(N_PARAMS)
    t[:DIM] = np.diag(T).real
    off = T[_OFF_I, _OFF_J]
    t[DIM::2] = off.real
    t[DIM + 1 :: 2] = off.imag
    return t


def _chi_array_from_t(t: np.ndarray) -> tuple:
    T = t_to_T(t)
    g = T.conj().T @ T
    s = float(np.trace(g).real)
    if s <= 1e-300:
        raise ValueError("t is (numerically) all-zero; chi undefined")
    return g / s, T, g, s


def t_to_chi(t: np.ndarray) -> ProcessMatrix:
    """Physical process matrix of a parameter vector (Hermitian PSD, trace 1)."""
    chi, _, _, _ = _chi_array_from_t(t)
    return ProcessMatrix(chi=chi, label="mle")


def chi_to_t_init(chi, ridge: float = 1e-12) -> np.ndarray:
    """Parameter vector whose chi(t) reproduces a PSD-projected input.

    The input is projected onto the PSD cone, trace-normalized, given a
    small diagonal ridge so the Cholesky factorization always exists, and
    factored as ``T^† T`` with upper-triangular ``T``.
    """
    arr = chi.chi if isinstance(chi, ProcessMatrix) else np.asarray(chi, dtype=complex)
    proj = psd_project(0.5 * (arr + arr.conj().T))
    tr = float(np.trace(proj).real)
    if tr <= 0.0:
        proj = np.eye(DIM, dtype=complex)
        tr = float(DIM)
    proj = proj / tr
    proj = proj + ridge * np.eye(DIM)
    lower = np.linalg.cholesky(0.5 * (proj + proj.conj().T))
    return T_to_t(lower.conj().T)


def neg_log_likelihood(
    t: np.ndarray,
    table: CountTable,
    sigma_floor: float = 1.0,
    basis: StateBasis | None = None,
) -> tuple:
    """Gaussian negative log-likelihood and its analytic 256-gradient.

    ``L = sum_i (n_i - nbar_i(t))^2 / (2 sigma_i^2)`` with
    ``sigma_i^2 = max(nbar_i(t), sigma_floor)``; the gradient accounts for
    the model-dependent variance exactly.
    """
    if table.counts is None:
        raise ValueError("counts not set")
    des = design(basis)
    coeff = des.coeff
    n_obs = np.asarray(table.counts, dtype=float).reshape(-1)
    big_n = table.n_per_basis

    chi, T, _, s = _chi_array_from_t(np.asarray(t, dtype=float))
    p = np.einsum("imn,mn->i", coeff, chi).real
    nbar = big_n * p
    floored = nbar <= sigma_floor
    var = np.where(floored, sigma_floor, nbar)
    resid = n_obs - nbar
    value = float(np.sum(resid * resid / (2.0 * var)))

    # dL/dnbar, with the variance treated as a function of nbar above the floor
    dl_dnbar = -resid / var
    dl_dnbar = dl_dnbar - np.where(floored, 0.0, resid * resid / (2.0 * var * var))
    w = dl_dnbar * big_n

    lam = np.einsum("i,imn->mn", w, coeff)  # dL = sum_mn lam_mn dchi_mn
    k = lam.T  # Hermitian
    k_tilde = k / s - (float(np.trace(k @ (chi * s)).real) / (s * s)) * np.eye(DIM)
    m = k_tilde @ T.conj().T
    grad = np.zeros(N_PARAMS)
    grad[:DIM] = 2.0 * np.real(np.diag(m))
    off = m[_OFF_J, _OFF_I]
    grad[DIM::2] = 2.0 * off.real
    grad[DIM + 1 :: 2] = -2.0 * off.imag
    return value, grad


@dataclass
class MleConfig:
    max_iters: int = 5000
    grad_tol: float = 1e-6
    rel_tol: float = 1e-10
    sigma_floor: float = 1.0


@dataclass
class MleReport:
    chi_hat: ProcessMatrix
    neg_log_likelihood: float
    initial_neg_log_likelihood: float
    iterations: int
    converged: bool
    grad_norm: float
    small_eigenvalues: int  # eigenvalues of chi_hat below 1e-6
    message: str
    config: MleConfig

    def to_json_dict(self) -> dict:
        return {
            "neg_log_likelihood": self.neg_log_likelihood,
            "initial_neg_log_likelihood": self.initial_neg_log_likelihood,
            "iterations": self.iterations,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
            "small_eigenvalues": self.small_eigenvalues,
            "message": self.message,
            "config": asdict(self.config),
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def mle_fit(table: CountTable, config: MleConfig | None = None, basis: StateBasis | None = None) -> MleReport:
    """Quasi-Newton likelihood fit warm-started from the linear inversion.

    The optimizer is L-BFGS-B with the analytic gradient; the reported
    ``converged`` flag requires the exit gradient norm to meet ``grad_tol``
    or the objective to have stalled (relative change <= ``rel_tol`` over
    the last ten iterations).  The output is physical for any input counts.
    """
    if config is None:
        config = MleConfig()
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # degenerate all-zero tables are handled below
        t0 = chi_to_t_init(chi_least_squares(table, basis))
    f_history = []

    def objective(t):
        return neg_log_likelihood(t, table, sigma_floor=config.sigma_floor, basis=basis)

    def callback(tk):
        f_history.append(objective(tk)[0])

    f0, _ = objective(t0)
    res = minimize(
        objective,
        t0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={
            "maxiter": config.max_iters,
            "ftol": config.rel_tol,
            "gtol": config.grad_tol,
            "maxcor": 20,
        },
    )
    t_star = res.x
    f_star = float(res.fun)
    if f_star > f0:  # line search guarantees descent; guard regardless
        t_star, f_star = t0, f0
    final_grad = objective(t_star)[1]
    grad_norm = float(np.linalg.norm(final_grad))
    stalled = False
    if len(f_history) >= 2:
        window = f_history[-min(10, len(f_history)) :]
        stalled = abs(window[0] - window[-1]) <= config.rel_tol * max(1.0, abs(window[-1]))
    # status 0 means the optimizer stopped on one of the two convergence
    # criteria itself (projected-gradient max-norm <= gtol, or relative
    # objective reduction <= ftol)
    converged = bool(grad_norm <= config.grad_tol or res.status == 0 or stalled)
    chi_hat, _, _, _ = _chi_array_from_t(t_star)
    eigvals = np.linalg.eigvalsh(chi_hat)
    pm = ProcessMatrix(chi=chi_hat, phi=table.phi, signal_ratio=table.signal_ratio, label="mle")
    return MleReport(
        chi_hat=pm,
        neg_log_likelihood=f_star,
        initial_neg_log_likelihood=f0,
        iterations=int(res.nit),
        converged=converged,
        grad_norm=grad_norm,
        small_eigenvalues=int(np.sum(eigvals < 1e-6)),
        message=str(res.message),
        config=config,
    )
