"""Tangent-kernel analysis toolkit for layered variational quantum circuits.

Simulates circuits of the form ``prod_l W_l exp(i theta_l P_l)`` (fixed
entangling unitaries interleaved with Pauli rotations), computes residual
errors and their tangent-kernel diagnostics, predicts gradient-descent
dynamics with and without injected angle noise, and runs the matching
wide-MLP experiments on the classical side.
"""

__version__ = "0.1.0"

from .sim import (
    DenseOperator,
    DimensionError,
    PauliString,
    PauliSum,
    StateVector,
    apply_dense,
    apply_pauli_rotation,
    expectation,
    haar_unitary,
    trace_powers,
)
from .ansatz import LayeredAnsatz, build_randomized_hwe, evaluate, random_angles, split_at
from .gradients import (
    ResidualContext,
    grad_analytic,
    grad_param_shift,
    hessian_param_shift,
    loss,
    meta_kernel,
    residual,
    tangent_kernel,
)
from .theory import (
    ConcentrationResult,
    TheoryReport,
    average_kernel,
    average_kernel_large_n,
    concentration_check,
    decay_prediction,
    kernel_std,
    kernel_std_ratio,
    late_time_abs_mean,
    meta_kernel_std,
    noise_crossover_time,
    noise_plateau,
    noisy_mean_square,
    precision_log_gain,
    steps_for_target_error,
)
from .dynamics import (
    EnsembleResult,
    TrainConfig,
    TrainingTrace,
    ensemble_train,
    gd_step,
    laziness_report,
    train,
)
from .classical import (
    MLP,
    forward,
    gradient_variance_sweep,
    ntk_fluctuation_sweep,
    ntk_matrix,
    ntk_train,
    output_jacobian,
)
