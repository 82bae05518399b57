"""Dataset generation and the QSTD binary file format.

Each sample stores the ground-truth Cholesky vector nu, the true Born
probabilities p, and the property vector mu. Frequencies are never stored:
they are regenerated on the fly from p given (n_t, seed), which keeps files
small while matching the shot-noise model. A companion .meta.txt records the
generator configuration.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import properties as qprops
from .measurements import measurement_set, born_probabilities
from .seeding import derive_seed
from .states import (
    cholesky_vector,
    ghz_w_state,
    ginibre_mixed_state,
    haar_pure_state,
    haar_unitary,
)

DATASET_MAGIC = b"QSTD"
DATASET_VERSION = 1
_SCHEME_TAGS = {"cube": 0, "nn": 1}
_SCHEME_NAMES = {v: k for k, v in _SCHEME_TAGS.items()}

FAMILIES = ("pure", "mixed", "ghz", "w")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    n_qubits: int
    scheme: str
    nu: np.ndarray  # (N, d^2)
    p: np.ndarray  # (N, M)
    mu: np.ndarray  # (N, k)

    @property
    def n_samples(self) -> int:
        return self.nu.shape[0]

    @property
    def k_properties(self) -> int:
        return self.mu.shape[1]


def _make_state(family: str, n_qubits: int, seed: int) -> np.ndarray:
    if family == "pure":
        return haar_pure_state(n_qubits, seed)
    if family == "mixed":
        return ginibre_mixed_state(n_qubits, seed)
    if family in ("ghz", "w"):
        rng = np.random.default_rng(seed)
        rotations = [haar_unitary(2, rng) for _ in range(n_qubits)]
        return ghz_w_state(family.upper(), n_qubits, rotations)
    raise DatasetError(f"unknown state family {family!r}")


def property_names(family: str):
    """Pure-family states use the 3-property vector, mixed the full 6."""
    return qprops.MIXED_PROPERTIES if family == "mixed" else qprops.PURE_PROPERTIES


def generate_dataset(
    family: str, scheme: str, n_qubits: int, count: int, seed: int
) -> Dataset:
    """Deterministic sample-indexed generation from one master seed."""
    if family not in FAMILIES:
        raise DatasetError(f"family must be one of {FAMILIES}, got {family!r}")
    ms = measurement_set(scheme, n_qubits)
    names = property_names(family)
    nu = np.empty((count, ms.dim**2))
    p = np.empty((count, ms.n_operators))
    mu = np.empty((count, len(names)))
    for i in range(count):
        rho = _make_state(family, n_qubits, derive_seed(seed, f"state/{family}", i))
        nu[i] = cholesky_vector(rho)
        p[i] = born_probabilities(rho, ms)
        mu[i] = qprops.property_vector(rho, names)
    return Dataset(n_qubits, scheme, nu, p, mu)


def write_dataset(ds: Dataset, path, metadata: dict = None):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(struct.pack("<I", ds.n_qubits))
        fh.write(struct.pack("<B", _SCHEME_TAGS[ds.scheme]))
        fh.write(struct.pack("<I", ds.p.shape[1]))
        fh.write(struct.pack("<I", ds.k_properties))
        fh.write(struct.pack("<Q", ds.n_samples))
        for i in range(ds.n_samples):
            fh.write(ds.nu[i].astype("<f8").tobytes())
            fh.write(ds.p[i].astype("<f8").tobytes())
            fh.write(ds.mu[i].astype("<f8").tobytes())
    tmp.rename(path)
    if metadata is not None:
        meta_path = path.with_suffix(path.suffix + ".meta.txt")
        lines = [f"{key}={value}" for key, value in sorted(metadata.items())]
        meta_path.write_text("\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise DatasetError(f"{path} is not a QSTD dataset")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != DATASET_VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        (n_qubits,) = struct.unpack("<I", fh.read(4))
        (scheme_tag,) = struct.unpack("<B", fh.read(1))
        (n_ops,) = struct.unpack("<I", fh.read(4))
        (k,) = struct.unpack("<I", fh.read(4))
        (count,) = struct.unpack("<Q", fh.read(8))
        d2 = (2**n_qubits) ** 2
        per_sample = d2 + n_ops + k
        data = np.frombuffer(fh.read(8 * per_sample * count), dtype="<f8")
        if data.size != per_sample * count:
            raise DatasetError(f"{path} is truncated")
    data = data.reshape(count, per_sample)
    return Dataset(
        n_qubits,
        _SCHEME_NAMES[scheme_tag],
        data[:, :d2].copy(),
        data[:, d2 : d2 + n_ops].copy(),
        data[:, d2 + n_ops :].copy(),
    )


def train_test_split(ds: Dataset, test_fraction: float = 0.1) -> tuple:
    """Deterministic tail split (generation order is already random)."""
    n_test = max(1, int(round(ds.n_samples * test_fraction)))
    n_train = ds.n_samples - n_test
    head = Dataset(ds.n_qubits, ds.scheme, ds.nu[:n_train], ds.p[:n_train], ds.mu[:n_train])
    tail = Dataset(ds.n_qubits, ds.scheme, ds.nu[n_train:], ds.p[n_train:], ds.mu[n_train:])
    return head, tail
