"""Quantum properties and reconstruction metrics.

Six state properties (purity, entropy, coherence, entanglement entropy,
negativity, concurrence) plus fidelity / log-infidelity / MSE. Matrix
functions go through Hermitian eigendecompositions with eigenvalue clamping
for robustness near rank deficiency.

The bipartition for entanglement measures is A = first floor(n/2) qubits.
"""

import numpy as np

from .measurements import PAULI
from .states import StateError, check_density_matrix

PURE_STATE_PURITY_TOL = 1e-6

# mu-vector property orderings used across the package.
PURE_PROPERTIES = ("coherence", "entanglement_entropy", "negativity")
MIXED_PROPERTIES = (
    "purity",
    "entropy",
    "coherence",
    "entanglement_entropy",
    "negativity",
    "concurrence",
)


def _n_qubits(rho: np.ndarray) -> int:
    n = int(round(np.log2(rho.shape[0])))
    if 2**n != rho.shape[0]:
        raise StateError(f"dimension {rho.shape[0]} is not a power of 2")
    return n


def _split(rho: np.ndarray) -> tuple[int, int]:
    """Dimensions (dA, dB) of the half-split bipartition."""
    n = _n_qubits(rho)
    if n < 2:
        raise StateError("bipartite measures need at least 2 qubits")
    n_a = n // 2
    return 2**n_a, 2 ** (n - n_a)


def _eigvals(rho: np.ndarray) -> np.ndarray:
    return np.clip(np.linalg.eigvalsh(rho), 0.0, None)


def _entropy_of_spectrum(w: np.ndarray) -> float:
    w = w[w > 1e-12]
    return float(-(w * np.log(w)).sum())


def purity(rho: np.ndarray) -> float:
    return float(np.trace(rho @ rho).real)


def von_neumann_entropy(rho: np.ndarray) -> float:
    return _entropy_of_spectrum(_eigvals(rho))


def coherence(rho: np.ndarray) -> float:
    """Relative entropy of coherence: S(diag(rho)) - S(rho)."""
    diag = np.clip(np.diagonal(rho).real, 0.0, None)
    return max(0.0, _entropy_of_spectrum(diag) - von_neumann_entropy(rho))


def partial_trace_b(rho: np.ndarray, d_a: int, d_b: int) -> np.ndarray:
    return rho.reshape(d_a, d_b, d_a, d_b).trace(axis1=1, axis2=3)


def partial_trace_a(rho: np.ndarray, d_a: int, d_b: int) -> np.ndarray:
    return rho.reshape(d_a, d_b, d_a, d_b).trace(axis1=0, axis2=2)


def entanglement_entropy(rho: np.ndarray) -> float:
    """Entropy of the reduced state after tracing out subsystem B."""
    d_a, d_b = _split(rho)
    return von_neumann_entropy(partial_trace_b(rho, d_a, d_b))


def negativity(rho: np.ndarray) -> float:
    """(||rho^{Gamma_A}||_1 - 1) / 2 for the half-split bipartition."""
    d_a, d_b = _split(rho)
    pt = rho.reshape(d_a, d_b, d_a, d_b).transpose(2, 1, 0, 3).reshape(rho.shape)
    trace_norm = np.abs(np.linalg.eigvalsh(pt)).sum()
    return max(0.0, float((trace_norm - 1) / 2))


def _sqrtm_psd(rho: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(rho)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def concurrence(rho: np.ndarray) -> float:
    """Wootters concurrence for 2 qubits; generalized form for pure n > 2.

    The generalized multiqubit form sqrt(2 (1 - Tr(Tr_A(rho)^2))) is only
    defined for pure states; mixed input with n > 2 raises.
    """
    n = _n_qubits(rho)
    if n == 2:
        yy = np.kron(PAULI["Y"], PAULI["Y"])
        # The Wootters lambdas are the singular values of
        # sqrt(rho) (sy x sy) sqrt(rho*): SVD resolves the near-zero ones to
        # machine precision, unlike sqrt of eigenvalues of the product.
        a = _sqrtm_psd(rho) @ yy @ _sqrtm_psd(rho.conj())
        lam = np.linalg.svd(a, compute_uv=False)
        return max(0.0, float(lam[0] - lam[1] - lam[2] - lam[3]))
    if purity(rho) < 1 - PURE_STATE_PURITY_TOL:
        raise StateError("generalized concurrence is only defined for pure states")
    d_a, d_b = _split(rho)
    red = partial_trace_b(rho, d_a, d_b)
    return float(np.sqrt(max(0.0, 2 * (1 - purity(red)))))


_PROPERTY_FUNCS = {
    "purity": purity,
    "entropy": von_neumann_entropy,
    "coherence": coherence,
    "entanglement_entropy": entanglement_entropy,
    "negativity": negativity,
    "concurrence": concurrence,
}


def property_vector(rho: np.ndarray, names=PURE_PROPERTIES) -> np.ndarray:
    """Ordered property vector mu for the given selection."""
    return np.array([_PROPERTY_FUNCS[name](rho) for name in names])


def fidelity(rho: np.ndarray, rho_hat: np.ndarray) -> float:
    """F = |Tr sqrt(sqrt(rho) rho_hat sqrt(rho))|, clamped to [0, 1]."""
    rho = check_density_matrix(rho)
    rho_hat = np.asarray(rho_hat)
    if rho.shape != rho_hat.shape:
        raise StateError(f"dimension mismatch: {rho.shape} vs {rho_hat.shape}")
    sq = _sqrtm_psd(rho)
    inner = sq @ rho_hat @ sq
    w = np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.conj().T)), 0.0, None)
    return float(min(1.0, np.sqrt(w).sum()))


def infidelity(rho: np.ndarray, rho_hat: np.ndarray) -> float:
    return max(1e-16, 1.0 - fidelity(rho, rho_hat))


def log_infidelity(rho: np.ndarray, rho_hat: np.ndarray) -> float:
    """log10(1 - F), with 1 - F floored at 1e-16."""
    return float(np.log10(infidelity(rho, rho_hat)))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))
