"""Layered variational circuits: randomized construction, evaluation, splitting.

A circuit is an ordered list of layers; layer ``l`` applies the Pauli
rotation ``exp(i * theta_l * P_l)`` first and then a fixed entangling
unitary ``W_l``. Layer 1 acts first on the state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sim import (
    DenseOperator,
    DimensionError,
    PauliString,
    StateVector,
    apply_block,
    haar_matrix,
    rotate_amplitudes,
)

# Dense N x N layer matrices (split_at, serialization checks) only below this.
MAX_DENSE_QUBITS = 10


@dataclass(frozen=True)
class AnsatzLayer:
    """One layer: rotation generator plus a fixed unitary block on ``wires``."""

    generator: PauliString
    wires: tuple[int, ...]
    block: np.ndarray

    def __post_init__(self):
        dim = 1 << len(self.wires)
        block = np.asarray(self.block, dtype=complex)
        object.__setattr__(self, "block", block)
        if block.shape != (dim, dim):
            raise DimensionError(f"block shape {block.shape} != ({dim}, {dim})")
        if np.max(np.abs(block @ block.conj().T - np.eye(dim))) > 1e-10:
            raise ValueError("layer block is not unitary")
        if self.generator.is_identity:
            raise ValueError("layer generator must be a non-identity Pauli string")


@dataclass(frozen=True)
class LayeredAnsatz:
    n_qubits: int
    layers: tuple[AnsatzLayer, ...]
    construction_seed: int | None = None

    def __post_init__(self):
        for layer in self.layers:
            if layer.generator.n_qubits != self.n_qubits:
                raise DimensionError("generator qubit count mismatch")
            if any(not 0 <= q < self.n_qubits for q in layer.wires):
                raise DimensionError(f"wires {layer.wires} out of range")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layer_unitary(self, index: int) -> DenseOperator:
        """Dense full-register matrix of the fixed block of layer ``index`` (0-based)."""
        if self.n_qubits > MAX_DENSE_QUBITS:
            raise ValueError(f"dense layer matrices limited to {MAX_DENSE_QUBITS} qubits")
        layer = self.layers[index]
        dim = 1 << self.n_qubits
        cols = [apply_block(col, layer.block, layer.wires, self.n_qubits)
                for col in np.eye(dim, dtype=complex)]
        return DenseOperator(self.n_qubits, np.stack(cols, axis=1), is_unitary=True)

    def to_json_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            flat = layer.block.reshape(-1)
            layers.append({
                "generator": layer.generator.factors,
                "wires": list(layer.wires),
                "block": [[float(c.real), float(c.imag)] for c in flat],
            })
        return {
            "format": "qntk-ansatz",
            "version": 1,
            "n_qubits": self.n_qubits,
            "n_layers": self.n_layers,
            "seed": self.construction_seed,
            "layers": layers,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "LayeredAnsatz":
        if data.get("format") != "qntk-ansatz":
            raise ValueError("not an ansatz document")
        n = int(data["n_qubits"])
        layers = []
        for entry in data["layers"]:
            wires = tuple(int(q) for q in entry["wires"])
            dim = 1 << len(wires)
            flat = np.array([re + 1.0j * im for re, im in entry["block"]])
            layers.append(AnsatzLayer(
                generator=PauliString(n, entry["generator"]),
                wires=wires,
                block=flat.reshape(dim, dim),
            ))
        seed = data.get("seed")
        return cls(n, tuple(layers), None if seed is None else int(seed))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path) -> "LayeredAnsatz":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def build_randomized_hwe(n_qubits: int, n_layers: int, seed: int) -> LayeredAnsatz:
    """Randomized hardware-efficient circuit, deterministic given ``seed``.

    Layer ``l`` rotates a uniformly random single-qubit Pauli (X, Y or Z) on
    wire ``l mod n_qubits`` and follows it with a Haar-random two-qubit
    unitary on a random nearest-neighbour pair of the ring (a Haar
    single-qubit unitary when ``n_qubits == 1``). The ring topology keeps
    every wire entangled at the circuit boundaries, which matters for how
    fast the ensemble approaches 2-design statistics at small depth.
    """
    if n_qubits < 1 or n_layers < 1:
        raise ValueError("need n_qubits >= 1 and n_layers >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    for ell in range(n_layers):
        label = "XYZ"[rng.integers(3)]
        generator = PauliString.single(n_qubits, ell % n_qubits, label)
        if n_qubits == 1:
            wires: tuple[int, ...] = (0,)
            block = haar_matrix(2, rng)
        else:
            n_pairs = n_qubits if n_qubits > 2 else 1
            low = int(rng.integers(0, n_pairs))
            wires = (low, (low + 1) % n_qubits)
            block = haar_matrix(4, rng)
        layers.append(AnsatzLayer(generator=generator, wires=wires, block=block))
    return LayeredAnsatz(n_qubits, tuple(layers), construction_seed=int(seed))


def random_angles(n_layers: int, rng: np.random.Generator) -> np.ndarray:
    """Default initialization: i.i.d. uniform on [0, 2*pi)."""
    return rng.uniform(0.0, 2.0 * np.pi, size=n_layers)


def check_angles(ansatz: LayeredAnsatz, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (ansatz.n_layers,):
        raise DimensionError(
            f"angle vector of shape {theta.shape} for {ansatz.n_layers} layers"
        )
    return theta


def forward_amplitudes(ansatz: LayeredAnsatz, theta: np.ndarray,
                       amplitudes: np.ndarray) -> np.ndarray:
    """Raw-amplitude circuit application (rotation then block, per layer)."""
    amps = amplitudes
    for layer, angle in zip(ansatz.layers, theta):
        amps = rotate_amplitudes(amps, layer.generator, angle)
        amps = apply_block(amps, layer.block, layer.wires, ansatz.n_qubits)
    return amps


def evaluate(ansatz: LayeredAnsatz, theta, psi0: StateVector) -> StateVector:
    """Apply the full circuit at angles ``theta`` to ``psi0``."""
    if psi0.n_qubits != ansatz.n_qubits:
        raise DimensionError(
            f"state has {psi0.n_qubits} qubits, ansatz has {ansatz.n_qubits}"
        )
    theta = check_angles(ansatz, theta)
    return StateVector(ansatz.n_qubits, forward_amplitudes(ansatz, theta, psi0.amplitudes))


def _dense_layer_product(ansatz: LayeredAnsatz, theta: np.ndarray,
                         start: int, stop: int) -> np.ndarray:
    """Dense matrix of layers ``start..stop-1`` (0-based, application order)."""
    dim = 1 << ansatz.n_qubits
    if ansatz.n_qubits > MAX_DENSE_QUBITS:
        raise ValueError(f"dense products limited to {MAX_DENSE_QUBITS} qubits")
    total = np.eye(dim, dtype=complex)
    for ell in range(start, stop):
        layer = ansatz.layers[ell]
        rot = (np.cos(theta[ell]) * np.eye(dim, dtype=complex)
               + 1.0j * np.sin(theta[ell]) * layer.generator.to_matrix())
        total = ansatz.layer_unitary(ell).matrix @ rot @ total
    return total


def split_at(ansatz: LayeredAnsatz, theta, ell: int) -> tuple[DenseOperator, DenseOperator]:
    """Split the circuit after layer ``ell`` (1-based).

    Returns ``(front, back)`` where ``front`` contains layers 1..ell
    (rotations included), ``back`` contains layers ell+1..L, and
    ``back @ front`` reproduces the full circuit matrix.
    """
    theta = check_angles(ansatz, theta)
    if not 1 <= ell <= ansatz.n_layers:
        raise ValueError(f"layer index {ell} outside 1..{ansatz.n_layers}")
    front = _dense_layer_product(ansatz, theta, 0, ell)
    back = _dense_layer_product(ansatz, theta, ell, ansatz.n_layers)
    return (DenseOperator(ansatz.n_qubits, front, is_unitary=True),
            DenseOperator(ansatz.n_qubits, back, is_unitary=True))
