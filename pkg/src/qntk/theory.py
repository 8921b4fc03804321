"""Closed-form predictions for kernel-governed gradient-descent dynamics.

All formulas are functions of the layer count ``L``, the Hilbert-space
dimension ``N``, the observable traces ``Tr(O)``, ``Tr(O^2)``, ``Tr(O^4)``,
the learning rate ``eta``, the injected angle-noise scale ``sigma_theta``
and the initial residual ``eps0``. Out-of-validity regimes are returned as
flagged values (``nan`` / ``inf``) rather than exceptions so parameter
sweeps can traverse them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict


def average_kernel(n_layers: int, tr_o: float, tr_o2: float, dim: int) -> float:
    """Ensemble-average tangent kernel for fully randomized circuits.

    ``L * (N * Tr(O^2) - Tr(O)^2) * 2 / ((N + 1) * (N^2 - 1))``.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    return (n_layers * (dim * tr_o2 - tr_o ** 2)
            * 2.0 / ((dim + 1) * (dim ** 2 - 1)))


def average_kernel_large_n(n_layers: int, tr_o2: float, dim: int) -> float:
    """Large-dimension limit ``2 * L * Tr(O^2) / N^2`` of :func:`average_kernel`."""
    return 2.0 * n_layers * tr_o2 / dim ** 2


def kernel_std(n_layers: int, tr_o2: float, tr_o4: float, dim: int) -> float:
    """Large-N standard deviation of the kernel over the circuit ensemble:
    ``sqrt(L)/N^2 * sqrt(8*Tr(O^2)^2 + 12*Tr(O^4))``."""
    return (math.sqrt(n_layers) / dim ** 2
            * math.sqrt(8.0 * tr_o2 ** 2 + 12.0 * tr_o4))


def kernel_std_ratio(n_layers: int, tr_o: float, tr_o2: float, tr_o4: float,
                     dim: int) -> float:
    """Relative kernel fluctuation; decays as ``1/sqrt(L)``."""
    kbar = average_kernel(n_layers, tr_o, tr_o2, dim)
    if kbar == 0.0:
        return math.inf
    return kernel_std(n_layers, tr_o2, tr_o4, dim) / kbar


def meta_kernel_std(n_layers: int, tr_o2: float, dim: int) -> float:
    """Large-N standard deviation of the meta-kernel:
    ``sqrt(32) * L / N^3 * Tr(O^2)^(3/2)``. Its ensemble mean is zero."""
    return math.sqrt(32.0) * n_layers / dim ** 3 * tr_o2 ** 1.5


def decay_prediction(eps0: float, eta: float, kernel: float, t: int) -> float:
    """Frozen-kernel residual after ``t`` steps: ``(1 - eta*K)^t * eps0``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    return (1.0 - eta * kernel) ** t * eps0


def decay_is_divergent(eta: float, kernel: float) -> bool:
    """True when the per-step factor exceeds 1 in magnitude."""
    return abs(1.0 - eta * kernel) > 1.0


def noise_plateau(eta: float, kernel: float, sigma_theta: float) -> float:
    """Late-time mean-square residual floor ``sigma^2 / (eta * (2 - eta*K))``.

    Returns ``nan`` outside the convergent window ``0 < eta*K < 2``.
    """
    if not plateau_converges(eta, kernel):
        return math.nan
    return sigma_theta ** 2 / (eta * (2.0 - eta * kernel))


def plateau_converges(eta: float, kernel: float) -> bool:
    return 0.0 < eta * kernel < 2.0


def noisy_mean_square(eps0: float, eta: float, kernel: float, sigma_theta: float,
                      t: int) -> float:
    """Noise-averaged squared residual after ``t`` steps.

    ``(1-eta*K)^(2t) * (eps0^2 - P) + P`` with plateau ``P``; exact at
    ``t = 0`` and reduces to the squared frozen-kernel decay at zero noise.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    a2t = (1.0 - eta * kernel) ** (2 * t)
    if sigma_theta == 0.0:
        return a2t * eps0 ** 2
    plateau = sigma_theta ** 2 / (eta * (2.0 - eta * kernel))
    return a2t * (eps0 ** 2 - plateau) + plateau


def late_time_abs_mean(eta: float, kernel: float, sigma_theta: float) -> float:
    """Half-normal mean of the late-time residual:
    ``sqrt(2/pi) * sigma / sqrt(2*eta - eta^2*K)``."""
    denom = 2.0 * eta - eta ** 2 * kernel
    if denom <= 0.0:
        return math.nan
    return math.sqrt(2.0 / math.pi) * sigma_theta / math.sqrt(denom)


def late_time_abs_std(eta: float, kernel: float, sigma_theta: float) -> float:
    """Half-normal standard deviation of the late-time residual magnitude."""
    denom = 2.0 * eta - eta ** 2 * kernel
    if denom <= 0.0:
        return math.nan
    scale = sigma_theta / math.sqrt(denom)
    return scale * math.sqrt(1.0 - 2.0 / math.pi)


def noise_crossover_time(eps0: float, eta: float, kernel: float,
                         sigma_theta: float) -> float:
    """Step count where accumulated noise matches the decaying residual.

    ``log(sigma / sqrt(2*eps0^2*eta - eps0^2*eta^2*K + sigma^2)) / log(1 - eta*K)``.
    Returns ``inf`` for zero noise and ``nan`` outside ``0 < eta*K < 1``.
    """
    if sigma_theta < 0.0:
        raise ValueError("sigma_theta must be >= 0")
    if sigma_theta == 0.0:
        return math.inf
    if not 0.0 < eta * kernel < 1.0:
        return math.nan
    inner = 2.0 * eps0 ** 2 * eta - eps0 ** 2 * eta ** 2 * kernel + sigma_theta ** 2
    return math.log(sigma_theta / math.sqrt(inner)) / math.log(1.0 - eta * kernel)


def precision_log_gain(eta: float, n_layers: int, tr_o2: float, dim: int,
                       steps: float) -> float:
    """Predicted ``log(eps(0)/eps(T))`` after ``steps`` iterations:
    ``2 * eta * L * Tr(O^2) * T / N^2``."""
    return 2.0 * eta * n_layers * tr_o2 * steps / dim ** 2


def steps_for_target_error(eta: float, n_layers: int, tr_o2: float, dim: int,
                           eps_ratio: float) -> float:
    """Inverse of :func:`precision_log_gain`: steps to reach a relative
    residual ``eps_ratio``."""
    if not 0.0 < eps_ratio <= 1.0:
        raise ValueError("eps_ratio must lie in (0, 1]")
    return dim ** 2 * math.log(1.0 / eps_ratio) / (2.0 * eta * n_layers * tr_o2)


@dataclass
class TheoryReport:
    """Bundle of the closed-form quantities for one configuration."""

    avg_kernel: float
    kernel_std: float
    meta_kernel_std: float
    eta: float
    n_layers: int
    dim: int
    tr_o: float
    tr_o2: float
    tr_o4: float
    sigma_theta: float
    eps0: float

    def __post_init__(self):
        if self.avg_kernel < 0.0 or self.kernel_std < 0.0:
            raise ValueError("kernel statistics must be non-negative")
        if self.dim < 2 or (self.dim & (self.dim - 1)) != 0:
            raise ValueError("dim must be a power of two >= 2")

    def to_json_dict(self) -> dict:
        return asdict(self)


def report_for(n_layers: int, dim: int, traces: tuple[float, float, float],
               eta: float, sigma_theta: float = 0.0, eps0: float = 1.0) -> TheoryReport:
    tr_o, tr_o2, tr_o4 = traces
    return TheoryReport(
        avg_kernel=average_kernel(n_layers, tr_o, tr_o2, dim),
        kernel_std=kernel_std(n_layers, tr_o2, tr_o4, dim),
        meta_kernel_std=meta_kernel_std(n_layers, tr_o2, dim),
        eta=eta,
        n_layers=n_layers,
        dim=dim,
        tr_o=tr_o,
        tr_o2=tr_o2,
        tr_o4=tr_o4,
        sigma_theta=sigma_theta,
        eps0=eps0,
    )


@dataclass
class ConcentrationResult:
    """Outcome of the two validity conditions for the frozen-kernel picture.

    ``ratio1`` is the relative kernel fluctuation (small iff many layers);
    ``ratio2`` is ``eta * sqrt(Tr(O^2)) / N * eps0`` (small iff the learning
    rate keeps the second-order step correction negligible). A condition
    passes when its ratio is at most ``threshold``; raw margins are always
    reported because the cutoff is a convention, not a theorem.
    """

    ratio1: float
    passed1: bool
    ratio2: float
    passed2: bool
    threshold: float

    def to_json_dict(self) -> dict:
        return asdict(self)


def concentration_check(report: TheoryReport, threshold: float = 0.1) -> ConcentrationResult:
    ratio1 = (math.inf if report.avg_kernel == 0.0
              else report.kernel_std / report.avg_kernel)
    ratio2 = report.eta * math.sqrt(report.tr_o2) / report.dim * abs(report.eps0)
    return ConcentrationResult(
        ratio1=ratio1,
        passed1=ratio1 <= threshold,
        ratio2=ratio2,
        passed2=ratio2 <= threshold,
        threshold=threshold,
    )
