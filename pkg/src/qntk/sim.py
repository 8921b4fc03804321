"""Statevector core: Pauli algebra, gate application, expectations, Haar sampling.

Conventions fixed here and used everywhere else:

* Basis indices are little-endian: qubit ``q`` is bit ``q`` of the basis
  index, so ``|i>`` assigns qubit 0 the least significant bit.
* Pauli rotations use the convention ``exp(+i * theta * P)`` for a Pauli
  string ``P``, applied in closed form ``cos(theta)*I + i*sin(theta)*P``.
* All amplitudes are complex128; operations return new arrays and never
  mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np

# Full N x N matrices are only ever materialized below this dimension.
MAX_DENSE_DIM = 4096

PAULI_LABELS = "IXYZ"

_PAULI_1Q = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    "Y": np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    "Z": np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
}


class DimensionError(ValueError):
    """Raised when qubit counts or matrix dimensions disagree."""


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Child RNG for task ``index``, decorrelated from all other indices.

    Used to split one experiment seed into independent per-run / per-sample
    streams so parallel execution order cannot change results.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def normal_draws(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Gaussian N(0, sigma^2) draws via inverse CDF of the uniform stream.

    The inverse-transform construction pins the draw sequence to the raw
    uniform stream of ``rng``, keeping traces reproducible across platforms.
    """
    from scipy.special import ndtri

    if sigma == 0.0:
        return np.zeros(size)
    u = rng.random(size)
    # rng.random() can return 0.0 (prob 2^-53), where ndtri diverges.
    u = np.clip(u, 1e-300, None)
    return sigma * ndtri(u)


@dataclass(frozen=True)
class PauliString:
    """Tensor product of single-qubit Paulis, e.g. ``factors="XIZY"``.

    ``factors[q]`` is the label acting on qubit ``q``. The operator is
    Hermitian and unitary (``P^2 = I``); its trace vanishes unless every
    factor is the identity.
    """

    n_qubits: int
    factors: str

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError("n_qubits must be >= 1")
        if len(self.factors) != self.n_qubits:
            raise DimensionError(
                f"factors has length {len(self.factors)}, expected {self.n_qubits}"
            )
        bad = set(self.factors) - set(PAULI_LABELS)
        if bad:
            raise ValueError(f"invalid Pauli labels: {sorted(bad)}")

    @classmethod
    def identity(cls, n_qubits: int) -> "PauliString":
        return cls(n_qubits, "I" * n_qubits)

    @classmethod
    def single(cls, n_qubits: int, qubit: int, label: str) -> "PauliString":
        """Pauli ``label`` on one wire, identity elsewhere."""
        if not 0 <= qubit < n_qubits:
            raise ValueError(f"qubit {qubit} out of range for {n_qubits} qubits")
        factors = ["I"] * n_qubits
        factors[qubit] = label
        return cls(n_qubits, "".join(factors))

    @property
    def is_identity(self) -> bool:
        return set(self.factors) == {"I"}

    @cached_property
    def _action(self) -> tuple[int, np.ndarray]:
        """Precomputed (flip mask, per-basis-state phase) for fast apply."""
        dim = 1 << self.n_qubits
        idx = np.arange(dim)
        flip = 0
        phase = np.ones(dim, dtype=complex)
        for q, f in enumerate(self.factors):
            if f == "I":
                continue
            bit = (idx >> q) & 1
            if f == "X":
                flip |= 1 << q
            elif f == "Y":
                flip |= 1 << q
                phase = phase * np.where(bit == 0, 1.0j, -1.0j)
            else:  # Z
                phase = phase * (1.0 - 2.0 * bit)
        return flip, phase

    def apply(self, amplitudes: np.ndarray) -> np.ndarray:
        """Return ``P @ amplitudes`` in O(N)."""
        flip, phase = self._action
        out = np.empty_like(amplitudes)
        out[np.arange(len(amplitudes)) ^ flip] = phase * amplitudes
        return out

    def to_matrix(self) -> np.ndarray:
        dim = 1 << self.n_qubits
        if dim > MAX_DENSE_DIM:
            raise ValueError(f"dense matrix of dim {dim} exceeds guard {MAX_DENSE_DIM}")
        m = np.ones((1, 1), dtype=complex)
        # kron(P_q, m) keeps qubit q on the more significant bit of the
        # growing index, matching the little-endian convention.
        for q in range(self.n_qubits):
            m = np.kron(_PAULI_1Q[self.factors[q]], m)
        return m


@dataclass(frozen=True)
class PauliSum:
    """Real linear combination of Pauli strings (Hermitian by construction)."""

    n_qubits: int
    terms: tuple[tuple[float, PauliString], ...]

    def __post_init__(self):
        for coeff, string in self.terms:
            if string.n_qubits != self.n_qubits:
                raise DimensionError("all terms must act on the same qubit count")
            if not np.isfinite(coeff):
                raise ValueError("coefficients must be finite")

    @classmethod
    def from_pairs(cls, n_qubits: int, pairs) -> "PauliSum":
        return cls(n_qubits, tuple((float(c), p) for c, p in pairs))

    def apply(self, amplitudes: np.ndarray) -> np.ndarray:
        out = np.zeros_like(amplitudes)
        for coeff, string in self.terms:
            out += coeff * string.apply(amplitudes)
        return out

    def to_matrix(self) -> np.ndarray:
        dim = 1 << self.n_qubits
        if dim > MAX_DENSE_DIM:
            raise ValueError(f"dense matrix of dim {dim} exceeds guard {MAX_DENSE_DIM}")
        m = np.zeros((dim, dim), dtype=complex)
        for coeff, string in self.terms:
            m += coeff * string.to_matrix()
        return m


@dataclass(frozen=True)
class DenseOperator:
    """Explicit N x N operator with optional unitarity/hermiticity contracts.

    Flags are validated at construction: ``is_unitary`` requires
    ``U U^dag = I`` within 1e-10, ``is_hermitian`` requires ``M = M^dag``
    within 1e-12.
    """

    n_qubits: int
    matrix: np.ndarray
    is_unitary: bool = False
    is_hermitian: bool = False

    def __post_init__(self):
        dim = 1 << self.n_qubits
        mat = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", mat)
        if mat.shape != (dim, dim):
            raise DimensionError(f"matrix shape {mat.shape} != ({dim}, {dim})")
        if self.is_unitary:
            err = np.max(np.abs(mat @ mat.conj().T - np.eye(dim)))
            if err > 1e-10:
                raise ValueError(f"matrix flagged unitary but ||UU^dag - I|| = {err:.3g}")
        if self.is_hermitian:
            err = np.max(np.abs(mat - mat.conj().T))
            if err > 1e-12:
                raise ValueError(f"matrix flagged hermitian but ||M - M^dag|| = {err:.3g}")

    @classmethod
    def identity(cls, n_qubits: int) -> "DenseOperator":
        return cls(n_qubits, np.eye(1 << n_qubits, dtype=complex),
                   is_unitary=True, is_hermitian=True)


Operator = Union[PauliString, PauliSum, DenseOperator]


@dataclass
class StateVector:
    """Normalized pure state over ``2**n_qubits`` little-endian basis states."""

    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        self.amplitudes = amps
        if amps.shape != (1 << self.n_qubits,):
            raise DimensionError(
                f"amplitude vector of length {amps.shape} for {self.n_qubits} qubits"
            )
        norm_sq = float(np.vdot(amps, amps).real)
        if abs(norm_sq - 1.0) > 1e-10:
            raise ValueError(f"state not normalized: |psi|^2 = {norm_sq!r}")

    @classmethod
    def zero_state(cls, n_qubits: int) -> "StateVector":
        amps = np.zeros(1 << n_qubits, dtype=complex)
        amps[0] = 1.0
        return cls(n_qubits, amps)

    def copy(self) -> "StateVector":
        return StateVector(self.n_qubits, self.amplitudes.copy())

    def norm_sq(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)


def rotate_amplitudes(amplitudes: np.ndarray, pauli: PauliString, theta: float) -> np.ndarray:
    """``exp(i * theta * P) @ amplitudes`` via the closed form, O(N)."""
    return np.cos(theta) * amplitudes + 1.0j * np.sin(theta) * pauli.apply(amplitudes)


def apply_pauli_rotation(state: StateVector, pauli: PauliString, theta: float) -> StateVector:
    """Apply ``exp(i * theta * P)`` to a state."""
    if state.n_qubits != pauli.n_qubits:
        raise DimensionError(
            f"state has {state.n_qubits} qubits, Pauli string has {pauli.n_qubits}"
        )
    return StateVector(state.n_qubits, rotate_amplitudes(state.amplitudes, pauli, theta))


def apply_block(amplitudes: np.ndarray, block: np.ndarray, wires: tuple[int, ...],
                n_qubits: int) -> np.ndarray:
    """Apply a ``2^m x 2^m`` matrix on ``m`` wires of an ``n_qubits`` register.

    Block indices are little-endian in wire order: ``wires[0]`` is the least
    significant bit of the block index.
    """
    m = len(wires)
    if len(set(wires)) != m or any(not 0 <= q < n_qubits for q in wires):
        raise DimensionError(f"invalid wires {wires} for {n_qubits} qubits")
    tensor = amplitudes.reshape([2] * n_qubits)
    # Axis n-1-q holds qubit q; put wire axes first, most significant wire
    # leading, so a reshape yields rows indexed by the block convention.
    axes = [n_qubits - 1 - q for q in reversed(wires)]
    rest = [a for a in range(n_qubits) if a not in axes]
    perm = axes + rest
    tensor = np.transpose(tensor, perm).reshape(1 << m, -1)
    tensor = block @ tensor
    inv = np.argsort(perm)
    return np.transpose(tensor.reshape([2] * n_qubits), inv).reshape(-1)


def apply_dense(state: StateVector, u: DenseOperator) -> StateVector:
    """Apply a full-register dense unitary."""
    if not u.is_unitary:
        raise ValueError("apply_dense requires an operator flagged unitary")
    if u.n_qubits != state.n_qubits:
        raise DimensionError(
            f"state has {state.n_qubits} qubits, operator has {u.n_qubits}"
        )
    return StateVector(state.n_qubits, u.matrix @ state.amplitudes)


def apply_operator(op: Operator, amplitudes: np.ndarray) -> np.ndarray:
    """``O @ amplitudes`` for any supported observable representation."""
    if isinstance(op, (PauliString, PauliSum)):
        return op.apply(amplitudes)
    return op.matrix @ amplitudes


def operator_qubits(op: Operator) -> int:
    return op.n_qubits


def is_hermitian_operator(op: Operator) -> bool:
    if isinstance(op, (PauliString, PauliSum)):
        return True
    return op.is_hermitian


def expectation(state: StateVector, op: Operator) -> float:
    """Real expectation value ``<psi|O|psi>`` of a Hermitian operator.

    The imaginary residue of the raw inner product must stay below 1e-10;
    anything larger indicates a non-Hermitian operator or a bug upstream.
    """
    if not is_hermitian_operator(op):
        raise ValueError("expectation requires a Hermitian operator")
    if operator_qubits(op) != state.n_qubits:
        raise DimensionError(
            f"state has {state.n_qubits} qubits, operator has {operator_qubits(op)}"
        )
    raw = np.vdot(state.amplitudes, apply_operator(op, state.amplitudes))
    if abs(raw.imag) > 1e-10:
        raise ValueError(f"imaginary residue {raw.imag:.3g} exceeds 1e-10")
    return float(raw.real)


def haar_matrix(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed ``dim x dim`` unitary via QR of a complex Ginibre matrix.

    The R-diagonal phase correction removes the sign/phase ambiguity of the
    QR factorization, which would otherwise bias the distribution.
    """
    z = (rng.standard_normal((dim, dim)) + 1.0j * rng.standard_normal((dim, dim)))
    z /= np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def haar_unitary(n_qubits: int, seed) -> DenseOperator:
    """Seeded Haar-random unitary on the full register.

    ``seed`` may be an integer or a ``numpy.random.Generator``; identical
    integer seeds produce bit-identical samples.
    """
    dim = 1 << n_qubits
    if dim > MAX_DENSE_DIM:
        raise ValueError(f"dim {dim} exceeds dense guard {MAX_DENSE_DIM}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return DenseOperator(n_qubits, haar_matrix(dim, rng), is_unitary=True)


def trace_powers(op: Operator) -> tuple[float, float, float]:
    """Exact ``(Tr O, Tr O^2, Tr O^4)`` of a Hermitian operator.

    Pauli strings are handled algebraically; sums and dense operators go
    through an explicit matrix under the dense-dimension guard.
    """
    if not is_hermitian_operator(op):
        raise ValueError("trace_powers requires a Hermitian operator")
    dim = 1 << op.n_qubits
    if isinstance(op, PauliString):
        if op.is_identity:
            return float(dim), float(dim), float(dim)
        return 0.0, float(dim), float(dim)
    mat = op.to_matrix() if isinstance(op, PauliSum) else op.matrix
    tr1 = complex(np.trace(mat))
    m2 = mat @ mat
    tr2 = complex(np.trace(m2))
    tr4 = complex(np.trace(m2 @ m2))
    for t in (tr1, tr2, tr4):
        if abs(t.imag) > 1e-9:
            raise ValueError(f"trace has imaginary residue {t.imag:.3g}")
    return tr1.real, tr2.real, tr4.real
