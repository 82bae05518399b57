"""POVM construction, Born probabilities, finite-shot sampling and masking.

Operators are organized in detector groups: each group is a complete
measurement (projectors summing to identity) realizable in one experimental
setting. Shots (n_t) and masks both act at group granularity.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

PROJECTOR_TOL = 1e-12


class MeasurementError(ValueError):
    """Invalid measurement set, probabilities, or mask."""


# Single-qubit Pauli eigenvectors, columns ordered (+1, -1) eigenvalue.
_EIGVECS = {
    "X": np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2),
    "Y": np.array([[1, 1], [1j, -1j]], dtype=complex) / np.sqrt(2),
    "Z": np.array([[1, 0], [0, 1]], dtype=complex),
}
PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def flatten_operator(op: np.ndarray) -> np.ndarray:
    """Complex d x d operator -> real vector of length 2 d^2 (Re then Im)."""
    return np.concatenate([op.real.ravel(), op.imag.ravel()])


def unflatten_operator(row: np.ndarray) -> np.ndarray:
    """Inverse of `flatten_operator`."""
    dim = int(round(np.sqrt(row.size // 2)))
    if 2 * dim * dim != row.size:
        raise MeasurementError(f"row length {row.size} is not 2*d^2")
    half = dim * dim
    return (row[:half] + 1j * row[half:]).reshape(dim, dim)


@dataclass(frozen=True)
class PovmGroup:
    """One complete detector setting: projectors summing to identity."""

    projectors: np.ndarray  # (group_size, dim, dim) complex
    label: int

    def __post_init__(self):
        total = self.projectors.sum(axis=0)
        dim = self.projectors.shape[1]
        if np.abs(total - np.eye(dim)).max() > PROJECTOR_TOL:
            raise MeasurementError(f"group {self.label} does not sum to identity")
        for proj in self.projectors:
            if np.linalg.eigvalsh(proj).min() < -PROJECTOR_TOL:
                raise MeasurementError(f"group {self.label} has a non-PSD element")


@dataclass(frozen=True)
class MeasurementSet:
    """Ordered detector groups plus the flattened real operator matrix."""

    n_qubits: int
    scheme: str  # "cube" or "nn"
    groups: list[PovmGroup]
    group_size: int
    operator_matrix: np.ndarray = field(init=False)  # (M, 2 d^2)
    operators: np.ndarray = field(init=False)  # (M, dim, dim)

    def __post_init__(self):
        ops = np.concatenate([g.projectors for g in self.groups], axis=0)
        object.__setattr__(self, "operators", ops)
        object.__setattr__(
            self, "operator_matrix", np.stack([flatten_operator(op) for op in ops])
        )

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_operators(self) -> int:
        return self.n_groups * self.group_size

    def group_slice(self, g: int) -> slice:
        return slice(g * self.group_size, (g + 1) * self.group_size)


def cube_measurement(n_qubits: int) -> MeasurementSet:
    """Tensor-product Pauli-eigenbasis measurement: 3^n groups of 2^n.

    Group order follows itertools.product over basis letters (X, Y, Z) per
    qubit; outcomes within a group follow the product of (+, -) eigenvectors.
    """
    if not 1 <= n_qubits <= 6:
        raise MeasurementError(f"cube measurement supports 1..6 qubits, got {n_qubits}")
    groups = []
    for label, bases in enumerate(itertools.product("XYZ", repeat=n_qubits)):
        projectors = []
        for outcomes in itertools.product(range(2), repeat=n_qubits):
            vec = np.ones(1, dtype=complex)
            for basis, outcome in zip(bases, outcomes):
                vec = np.kron(vec, _EIGVECS[basis][:, outcome])
            projectors.append(np.outer(vec, vec.conj()))
        groups.append(PovmGroup(np.stack(projectors), label))
    return MeasurementSet(n_qubits, "cube", groups, 2**n_qubits)


def nn_pauli_measurement(n_qubits: int) -> MeasurementSet:
    """Two-qubit Pauli measurements on nearest-neighbor pairs.

    For each adjacent pair (i, i+1) and each of the 9 two-qubit basis
    choices, one group of 4 projectors acting as the two-qubit eigenprojector
    tensored with identity elsewhere: (n-1)*9 groups of fixed size 4.
    """
    if n_qubits < 2:
        raise MeasurementError(f"nn scheme needs >= 2 qubits, got {n_qubits}")
    dim = 2**n_qubits
    groups = []
    label = 0
    for pair in range(n_qubits - 1):
        left = np.eye(2**pair, dtype=complex)
        right = np.eye(2 ** (n_qubits - pair - 2), dtype=complex)
        for bases in itertools.product("XYZ", repeat=2):
            projectors = []
            for outcomes in itertools.product(range(2), repeat=2):
                vec = np.kron(
                    _EIGVECS[bases[0]][:, outcomes[0]], _EIGVECS[bases[1]][:, outcomes[1]]
                )
                proj2 = np.outer(vec, vec.conj())
                projectors.append(np.kron(np.kron(left, proj2), right))
            groups.append(PovmGroup(np.stack(projectors), label))
            label += 1
    ms = MeasurementSet(n_qubits, "nn", groups, 4)
    assert ms.operators.shape == ((n_qubits - 1) * 9 * 4, dim, dim)
    return ms


def measurement_set(scheme: str, n_qubits: int) -> MeasurementSet:
    if scheme == "cube":
        return cube_measurement(n_qubits)
    if scheme == "nn":
        return nn_pauli_measurement(n_qubits)
    raise MeasurementError(f"unknown scheme {scheme!r}")


def born_probabilities(rho: np.ndarray, ms: MeasurementSet) -> np.ndarray:
    """p_i = Tr(O_i rho), clamped to [0, 1] against roundoff negativity."""
    rho = np.asarray(rho)
    if rho.shape != (ms.dim, ms.dim):
        raise MeasurementError(
            f"state shape {rho.shape} does not match measurement dim {ms.dim}"
        )
    p = np.einsum("kij,ji->k", ms.operators, rho).real
    if p.min() < -1e-12 or p.max() > 1 + 1e-12:
        raise MeasurementError("Born probabilities far outside [0, 1]")
    return np.clip(p, 0.0, 1.0)


def _check_group_normalized(p: np.ndarray, ms: MeasurementSet, tol: float = 1e-9):
    if p.shape != (ms.n_operators,):
        raise MeasurementError(f"probability vector length {p.shape} != {ms.n_operators}")
    sums = p.reshape(ms.n_groups, ms.group_size).sum(axis=1)
    if np.abs(sums - 1).max() > tol:
        raise MeasurementError("probabilities are not normalized within each group")


def sample_frequencies(
    p: np.ndarray, ms: MeasurementSet, n_t: int, seed: int
) -> np.ndarray:
    """One multinomial draw of n_t shots per group; f_i = n_i / n_t."""
    if n_t < 1:
        raise MeasurementError(f"n_t must be positive, got {n_t}")
    _check_group_normalized(p, ms)
    rng = np.random.default_rng(seed)
    pg = p.reshape(ms.n_groups, ms.group_size)
    pg = pg / pg.sum(axis=1, keepdims=True)
    counts = rng.multinomial(n_t, pg)
    return counts.ravel() / n_t


def apply_mask(f: np.ndarray, ms: MeasurementSet, masked_groups) -> tuple:
    """Drop whole detector groups from a frequency vector.

    Returns (f_tilde, O_tilde, missing_O): surviving frequencies and operator
    rows in original relative order, plus the flattened rows of the masked
    operators (used downstream as remedy-token inputs).
    """
    masked = sorted(set(int(g) for g in masked_groups))
    if any(g < 0 or g >= ms.n_groups for g in masked):
        raise MeasurementError(f"mask indices out of range: {masked}")
    if len(masked) == ms.n_groups:
        raise MeasurementError("cannot mask every group")
    f = np.asarray(f, dtype=float)
    if f.shape != (ms.n_operators,):
        raise MeasurementError(f"frequency vector length {f.size} != {ms.n_operators}")
    keep = [g for g in range(ms.n_groups) if g not in masked]
    keep_rows = np.concatenate([np.arange(ms.n_operators)[ms.group_slice(g)] for g in keep])
    if masked:
        drop_rows = np.concatenate(
            [np.arange(ms.n_operators)[ms.group_slice(g)] for g in masked]
        )
        missing = ms.operator_matrix[drop_rows]
    else:
        missing = np.empty((0, ms.operator_matrix.shape[1]))
    return f[keep_rows], ms.operator_matrix[keep_rows], missing


def sample_masked_groups(
    ms: MeasurementSet, n_masked_groups: int, rng: np.random.Generator
) -> tuple:
    """Uniformly choose masked group indices without replacement."""
    if not 0 <= n_masked_groups < ms.n_groups:
        raise MeasurementError(
            f"need 0 <= masked groups < {ms.n_groups}, got {n_masked_groups}"
        )
    return tuple(sorted(rng.choice(ms.n_groups, size=n_masked_groups, replace=False)))


@dataclass(frozen=True)
class MeasurementRecord:
    """Per-state measurement data: true p, sampled f, mask, and ground truth."""

    p: np.ndarray
    f: np.ndarray
    n_t: int
    mask: tuple  # sorted masked group indices
    nu: np.ndarray
    mu: np.ndarray
