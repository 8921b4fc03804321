"""Residual error, exact gradients, tangent kernel and meta-kernel.

The residual is ``eps(theta) = <psi0| U(theta)^dag O U(theta) |psi0> - target``
with scalar loss ``eps^2 / 2``. The tangent kernel is the squared gradient
norm ``sum_l (d eps / d theta_l)^2``; it sets the linearized decay rate of
gradient descent on the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ansatz import LayeredAnsatz, check_angles, forward_amplitudes
from .sim import (
    DimensionError,
    Operator,
    PauliString,
    StateVector,
    apply_block,
    apply_operator,
    is_hermitian_operator,
    operator_qubits,
    rotate_amplitudes,
)

# Shift angle for exp(i*theta*P) gates with P^2 = I: the residual is a
# degree-1 trigonometric polynomial in 2*theta, so a +-pi/4 shift pair
# reproduces the derivative exactly, with unit prefactor.
SHIFT = np.pi / 4.0

# Meta-kernel cost grows as L^2 circuit pairs; refuse silly sizes.
META_KERNEL_MAX_LAYERS = 256
META_KERNEL_MAX_QUBITS = 6


@dataclass(frozen=True)
class ResidualContext:
    """Everything the residual depends on besides the angles."""

    ansatz: LayeredAnsatz
    psi0: StateVector
    observable: Operator
    target: float

    def __post_init__(self):
        if not is_hermitian_operator(self.observable):
            raise ValueError("observable must be Hermitian")
        if operator_qubits(self.observable) != self.ansatz.n_qubits:
            raise DimensionError("observable qubit count mismatch")
        if self.psi0.n_qubits != self.ansatz.n_qubits:
            raise DimensionError("initial state qubit count mismatch")
        if not np.isfinite(self.target):
            raise ValueError("target must be finite")


def _expectation_from_amps(ctx: ResidualContext, amps: np.ndarray) -> float:
    raw = np.vdot(amps, apply_operator(ctx.observable, amps))
    if abs(raw.imag) > 1e-10:
        raise ValueError(f"imaginary residue {raw.imag:.3g} exceeds 1e-10")
    return float(raw.real)


def residual(ctx: ResidualContext, theta) -> float:
    """Residual training error at angles ``theta``."""
    theta = check_angles(ctx.ansatz, theta)
    amps = forward_amplitudes(ctx.ansatz, theta, ctx.psi0.amplitudes)
    return _expectation_from_amps(ctx, amps) - ctx.target


def loss(ctx: ResidualContext, theta) -> float:
    """Scalar mean-square loss ``eps^2 / 2``."""
    eps = residual(ctx, theta)
    return 0.5 * eps * eps


def residual_and_grad(ctx: ResidualContext, theta) -> tuple[float, np.ndarray]:
    """Residual and its exact gradient in one forward plus one adjoint pass.

    The adjoint pass back-propagates ``O|psi>`` through the circuit; each
    layer costs O(N) work, so the full gradient is O(L*N) rather than the
    O(L^2*N) of per-parameter re-simulation.
    """
    ansatz = ctx.ansatz
    theta = check_angles(ansatz, theta)
    n = ansatz.n_qubits
    psi = forward_amplitudes(ansatz, theta, ctx.psi0.amplitudes)
    opsi = apply_operator(ctx.observable, psi)
    raw = np.vdot(psi, opsi)
    if abs(raw.imag) > 1e-10:
        raise ValueError(f"imaginary residue {raw.imag:.3g} exceeds 1e-10")
    eps = float(raw.real) - ctx.target

    grad = np.empty(ansatz.n_layers)
    forward = psi
    backward = opsi
    for ell in range(ansatz.n_layers - 1, -1, -1):
        layer = ansatz.layers[ell]
        block_dag = layer.block.conj().T
        forward = apply_block(forward, block_dag, layer.wires, n)
        backward = apply_block(backward, block_dag, layer.wires, n)
        # d eps / d theta_l = 2 Re[i <backward| P |forward>] at this cut.
        grad[ell] = -2.0 * np.imag(np.vdot(backward, layer.generator.apply(forward)))
        forward = rotate_amplitudes(forward, layer.generator, -theta[ell])
        backward = rotate_amplitudes(backward, layer.generator, -theta[ell])
    return eps, grad


def grad_analytic(ctx: ResidualContext, theta) -> np.ndarray:
    """Exact gradient of the residual with respect to every angle."""
    _, grad = residual_and_grad(ctx, theta)
    return grad


def grad_param_shift(ctx: ResidualContext, theta, ell: int) -> float:
    """Shift-rule derivative for layer ``ell`` (1-based).

    Exact for generators with a +-1 spectrum:
    ``eps(theta + pi/4 e_l) - eps(theta - pi/4 e_l)``.
    """
    theta = check_angles(ctx.ansatz, theta)
    if not 1 <= ell <= ctx.ansatz.n_layers:
        raise ValueError(f"layer index {ell} outside 1..{ctx.ansatz.n_layers}")
    generator = ctx.ansatz.layers[ell - 1].generator
    if not isinstance(generator, PauliString):
        raise ValueError("shift rule requires a Pauli-string generator")
    plus = theta.copy()
    plus[ell - 1] += SHIFT
    minus = theta.copy()
    minus[ell - 1] -= SHIFT
    return residual(ctx, plus) - residual(ctx, minus)


def param_shift_gradient(ctx: ResidualContext, theta) -> np.ndarray:
    """Full gradient via the shift rule; the independent check path for
    :func:`grad_analytic`."""
    theta = check_angles(ctx.ansatz, theta)
    return np.array([grad_param_shift(ctx, theta, ell + 1)
                     for ell in range(ctx.ansatz.n_layers)])


def tangent_kernel(ctx: ResidualContext, theta) -> float:
    """Squared gradient norm; non-negative, zero iff the gradient vanishes."""
    grad = grad_analytic(ctx, theta)
    return float(grad @ grad)


def hessian_param_shift(ctx: ResidualContext, theta) -> np.ndarray:
    """Full Hessian of the residual by a double shift rule.

    Each pair (l1, l2) takes four circuit evaluations; the matrix is
    symmetric by construction, so only the upper triangle is evaluated.
    """
    theta = check_angles(ctx.ansatz, theta)
    n_layers = ctx.ansatz.n_layers
    hess = np.empty((n_layers, n_layers))
    for l1 in range(n_layers):
        for l2 in range(l1, n_layers):
            pp = theta.copy(); pp[l1] += SHIFT; pp[l2] += SHIFT
            pm = theta.copy(); pm[l1] += SHIFT; pm[l2] -= SHIFT
            mp = theta.copy(); mp[l1] -= SHIFT; mp[l2] += SHIFT
            mm = theta.copy(); mm[l1] -= SHIFT; mm[l2] -= SHIFT
            value = (residual(ctx, pp) - residual(ctx, pm)
                     - residual(ctx, mp) + residual(ctx, mm))
            hess[l1, l2] = value
            hess[l2, l1] = value
    return hess


def meta_kernel(ctx: ResidualContext, theta) -> float:
    """Second-order kernel correction ``g^T H g`` with the exact gradient ``g``.

    Diagnostics path only: O(L^2) circuit pairs, guarded to modest sizes.
    """
    if ctx.ansatz.n_layers > META_KERNEL_MAX_LAYERS:
        raise ValueError(f"meta_kernel limited to {META_KERNEL_MAX_LAYERS} layers")
    if ctx.ansatz.n_qubits > META_KERNEL_MAX_QUBITS:
        raise ValueError(f"meta_kernel limited to {META_KERNEL_MAX_QUBITS} qubits")
    theta = check_angles(ctx.ansatz, theta)
    grad = grad_analytic(ctx, theta)
    hess = hessian_param_shift(ctx, theta)
    return float(grad @ hess @ grad)
