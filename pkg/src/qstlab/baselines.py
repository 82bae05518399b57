"""Classical reconstruction baselines: LRE and iterative MLE.

LRE solves the least-squares linear inversion in an orthonormal Pauli-string
basis and projects the eigenvalues onto the probability simplex to make the
estimate physical. MLE runs a diluted R-rho-R likelihood ascent, which is
monotone in log-likelihood by construction.
"""

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from .measurements import PAULI, MeasurementError, MeasurementSet, measurement_set


@dataclass(frozen=True)
class LinearSystem:
    """Design matrix A[i, j] = Tr(O_i B_j) over the Pauli-string basis."""

    design: np.ndarray  # (M, d^2) real
    basis: np.ndarray  # (d^2, dim, dim) Hermitian, Hilbert-Schmidt orthonormal


def pauli_basis(n_qubits: int) -> np.ndarray:
    """Orthonormal Hermitian basis {sigma-string / sqrt(d)}, identity first."""
    dim = 2**n_qubits
    mats = []
    for labels in itertools.product("IXYZ", repeat=n_qubits):
        m = np.ones((1, 1), dtype=complex)
        for lab in labels:
            m = np.kron(m, PAULI[lab])
        mats.append(m / np.sqrt(dim))
    return np.stack(mats)


@functools.lru_cache(maxsize=8)
def linear_system(scheme: str, n_qubits: int) -> LinearSystem:
    ms = measurement_set(scheme, n_qubits)
    basis = pauli_basis(n_qubits)
    design = np.einsum("mij,bji->mb", ms.operators, basis).real
    return LinearSystem(design, basis)


def project_to_simplex(w: np.ndarray) -> np.ndarray:
    """Euclidean projection of a real vector onto {w >= 0, sum w = 1}."""
    u = np.sort(w)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, w.size + 1)
    valid = u + (1 - css) / ks > 0
    k = ks[valid][-1]
    tau = (css[k - 1] - 1) / k
    return np.clip(w - tau, 0.0, None)


def make_physical(rho_raw: np.ndarray) -> np.ndarray:
    """Closest physical state for fixed eigenvectors: simplex-project spectrum."""
    rho_raw = 0.5 * (rho_raw + rho_raw.conj().T)
    w, v = np.linalg.eigh(rho_raw)
    w = project_to_simplex(w)
    rho = (v * w) @ v.conj().T
    return 0.5 * (rho + rho.conj().T)


def _unmasked_rows(ms: MeasurementSet, mask) -> np.ndarray:
    masked = set(int(g) for g in mask)
    keep = [g for g in range(ms.n_groups) if g not in masked]
    if not keep:
        raise MeasurementError("cannot reconstruct with every group masked")
    return np.concatenate([np.arange(ms.n_operators)[ms.group_slice(g)] for g in keep])


def lre_reconstruct(f: np.ndarray, ms: MeasurementSet, mask=()) -> np.ndarray:
    """Least-squares inversion on unmasked rows + physical projection.

    With fewer than d^2 unmasked operators the pseudoinverse gives the
    minimum-norm solution (under-determined regime).
    """
    f = np.asarray(f, dtype=float)
    if f.size == 0:
        raise MeasurementError("empty frequency vector")
    rows = _unmasked_rows(ms, mask)
    if f.shape == (ms.n_operators,):
        f = f[rows]
    elif f.shape != (rows.size,):
        raise MeasurementError(f"frequency length {f.size} matches neither M nor M-m")
    system = linear_system(ms.scheme, ms.n_qubits)
    theta, *_ = np.linalg.lstsq(system.design[rows], f, rcond=None)
    rho_raw = np.einsum("b,bij->ij", theta, system.basis)
    return make_physical(rho_raw)


def log_likelihood(f_rows: np.ndarray, p_rows: np.ndarray) -> float:
    """Sum over unmasked outcomes of f_i ln p_i (probability-floored)."""
    return float(np.sum(f_rows * np.log(np.maximum(p_rows, 1e-15))))


def mle_reconstruct(
    f: np.ndarray,
    ms: MeasurementSet,
    mask=(),
    max_iters: int = 5000,
    tol: float = 1e-10,
    return_info: bool = False,
):
    """Likelihood-monotone R-rho-R iteration with dilution fallback.

    R = sum f_i/p_i O_i over the unmasked rows (scaled by group count). Each
    step first attempts the full update rho <- N[R rho R]; if that would
    lower the log-likelihood it falls back to the diluted form
    N[(I + eps R) rho (I + eps R)], halving eps until the likelihood is
    non-decreasing. Stops at |dL| < tol or max_iters.

    The iteration is warm-started from the LRE solution blended with a tiny
    multiple of I/d (full rank, since R-rho-R cannot grow the rank of a
    rank-deficient iterate). The likelihood is concave in rho, so the start
    only affects iteration count, never the optimum; near-boundary states
    converge orders of magnitude faster than from I/d.
    """
    f = np.asarray(f, dtype=float)
    if f.size == 0:
        raise MeasurementError("empty frequency vector")
    rows = _unmasked_rows(ms, mask)
    if f.shape == (ms.n_operators,):
        f = f[rows]
    elif f.shape != (rows.size,):
        raise MeasurementError(f"frequency length {f.size} matches neither M nor M-m")
    ops = ms.operators[rows]
    n_groups = rows.size // ms.group_size
    dim = ms.dim

    rho = (1 - 1e-6) * lre_reconstruct(f, ms, mask) + 1e-6 * np.eye(dim) / dim
    probs = np.einsum("kij,ji->k", ops, rho).real
    ll = log_likelihood(f, probs)
    ll_history = [ll]
    iters = 0
    for iters in range(1, max_iters + 1):
        ratio = f / np.maximum(probs, 1e-15)
        r_op = np.einsum("k,kij->ij", ratio, ops) / n_groups
        r_op = 0.5 * (r_op + r_op.conj().T)

        def attempt(step):
            cand = step @ rho @ step.conj().T
            cand /= np.trace(cand).real
            cand_probs = np.einsum("kij,ji->k", ops, cand).real
            return cand, cand_probs, log_likelihood(f, cand_probs)

        cand, cand_probs, cand_ll = attempt(r_op)
        if cand_ll < ll - 1e-12:
            eps = 1.0
            accepted = False
            while eps > 1e-8:
                cand, cand_probs, cand_ll = attempt(np.eye(dim) + eps * r_op)
                if cand_ll >= ll - 1e-12:
                    accepted = True
                    break
                eps /= 2
            if not accepted:
                break
        delta = cand_ll - ll
        rho, probs, ll = cand, cand_probs, cand_ll
        ll_history.append(ll)
        if abs(delta) < tol:
            break
    rho = 0.5 * (rho + rho.conj().T)
    # Clamp eigenvalue roundoff so the output always validates as a state.
    w, v = np.linalg.eigh(rho)
    w = np.clip(w, 0.0, None)
    w /= w.sum()
    rho = (v * w) @ v.conj().T
    rho = 0.5 * (rho + rho.conj().T)
    if return_info:
        return rho, {
            "iterations": iters,
            "log_likelihood": ll,
            "ll_history": ll_history,
        }
    return rho
