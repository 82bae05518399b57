"""Random and structured quantum states, plus the Cholesky vector encoding.

Density matrices are plain complex numpy arrays; `check_density_matrix`
enforces the physicality contract (Hermitian, unit trace, PSD) that every
generator and reconstructor in this package must satisfy.
"""

import numpy as np

HERMITICITY_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = -1e-10

# Jitter added before Cholesky so rank-deficient (e.g. pure) states factor.
CHOLESKY_JITTER = 1e-10

MAX_QUBITS = 12


class StateError(ValueError):
    """Invalid state, dimension, or degenerate input."""


def _check_n_qubits(n_qubits: int, low: int = 1, high: int = MAX_QUBITS) -> int:
    if not low <= n_qubits <= high:
        raise StateError(f"n_qubits must be in [{low}, {high}], got {n_qubits}")
    return 2**n_qubits


def is_density_matrix(rho: np.ndarray) -> bool:
    try:
        check_density_matrix(rho)
    except StateError:
        return False
    return True


def check_density_matrix(rho: np.ndarray) -> np.ndarray:
    """Validate Hermiticity, unit trace and positivity; returns rho."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise StateError(f"density matrix must be square, got shape {rho.shape}")
    if np.abs(rho - rho.conj().T).max() > HERMITICITY_TOL:
        raise StateError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > TRACE_TOL:
        raise StateError(f"trace is {np.trace(rho)}, expected 1")
    if np.linalg.eigvalsh(rho).min() < PSD_TOL:
        raise StateError("density matrix has a negative eigenvalue")
    return rho


def haar_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary via QR of a complex Ginibre matrix.

    The phases of R's diagonal are folded into Q so the distribution is
    exactly Haar rather than QR-convention dependent.
    """
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    diag = np.diagonal(r)
    return q * (diag / np.abs(diag))


def haar_pure_state(n_qubits: int, seed: int) -> np.ndarray:
    """Rank-1 state U|0...0><0...0|U† with U Haar-random."""
    dim = _check_n_qubits(n_qubits)
    rng = np.random.default_rng(seed)
    psi = haar_unitary(dim, rng)[:, 0]
    rho = np.outer(psi, psi.conj())
    # Symmetrize away last-ulp asymmetry from the outer product.
    return 0.5 * (rho + rho.conj().T)


def ginibre_mixed_state(n_qubits: int, seed: int) -> np.ndarray:
    """Hilbert-Schmidt random mixed state rho = G G† / Tr(G G†)."""
    dim = _check_n_qubits(n_qubits)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    rho = g @ g.conj().T
    rho /= np.trace(rho).real
    return 0.5 * (rho + rho.conj().T)


def _check_unitaries(rotations, n_qubits: int) -> list[np.ndarray]:
    rotations = [np.asarray(u, dtype=complex) for u in rotations]
    if len(rotations) != n_qubits:
        raise StateError(f"expected {n_qubits} local rotations, got {len(rotations)}")
    for u in rotations:
        if u.shape != (2, 2) or np.abs(u @ u.conj().T - np.eye(2)).max() > 1e-12:
            raise StateError("local rotation is not a 2x2 unitary")
    return rotations


def ghz_w_state(kind: str, n_qubits: int, local_rotations=None) -> np.ndarray:
    """Locally rotated GHZ or W state as a rank-1 density matrix.

    GHZ: (|0..0> + |1..1>)/sqrt(2);  W: uniform superposition of the n
    weight-1 computational basis states. Each qubit i is rotated by the
    given 2x2 unitary (identity if omitted).
    """
    dim = _check_n_qubits(n_qubits, low=2)
    if local_rotations is None:
        local_rotations = [np.eye(2)] * n_qubits
    rotations = _check_unitaries(local_rotations, n_qubits)

    psi = np.zeros(dim, dtype=complex)
    if kind.upper() == "GHZ":
        psi[0] = psi[dim - 1] = 1 / np.sqrt(2)
    elif kind.upper() == "W":
        for i in range(n_qubits):
            psi[1 << (n_qubits - 1 - i)] = 1 / np.sqrt(n_qubits)
    else:
        raise StateError(f"kind must be 'GHZ' or 'W', got {kind!r}")

    u_total = rotations[0]
    for u in rotations[1:]:
        u_total = np.kron(u_total, u)
    psi = u_total @ psi
    rho = np.outer(psi, psi.conj())
    return 0.5 * (rho + rho.conj().T)


def cholesky_vector(rho: np.ndarray) -> np.ndarray:
    """Encode a density matrix as a real vector of length d^2.

    rho is factored as L L† with L lower triangular (positive real diagonal);
    the vector packs [diag(L), Re(strict lower), Im(strict lower)], row-major.
    Rank-deficient states receive a tiny diagonal jitter so the factorization
    exists; `vector_to_density` re-normalizes the trace.
    """
    rho = check_density_matrix(rho)
    dim = rho.shape[0]
    L = np.linalg.cholesky(rho + CHOLESKY_JITTER * np.eye(dim))
    lower_i, lower_j = np.tril_indices(dim, k=-1)
    return np.concatenate([
        np.diagonal(L).real,
        L[lower_i, lower_j].real,
        L[lower_i, lower_j].imag,
    ])


def vector_to_density(nu: np.ndarray) -> np.ndarray:
    """Decode a real d^2-vector into a valid density matrix L L† / Tr."""
    nu = np.asarray(nu, dtype=float)
    dim = int(round(np.sqrt(nu.size)))
    if dim * dim != nu.size:
        raise StateError(f"vector length {nu.size} is not a perfect square")
    if not np.any(nu):
        raise StateError("all-zero Cholesky vector is degenerate")
    n_off = dim * (dim - 1) // 2
    L = np.zeros((dim, dim), dtype=complex)
    np.fill_diagonal(L, nu[:dim])
    lower_i, lower_j = np.tril_indices(dim, k=-1)
    L[lower_i, lower_j] = nu[dim:dim + n_off] + 1j * nu[dim + n_off:]
    rho = L @ L.conj().T
    rho /= np.trace(rho).real
    return 0.5 * (rho + rho.conj().T)
