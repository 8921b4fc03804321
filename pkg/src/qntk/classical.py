"""Wide-MLP companion experiments: gradient variance, NTK, frozen-kernel training.

Mirrors the circuit-side analysis on a fully-connected network with fan-in
scaled Gaussian initialization (weight variance ``c_w / fan_in``, bias
variance ``c_b``). At large width the per-parameter gradients shrink while
the neural tangent kernel stays finite, so training still converges fast.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sim import derive_rng

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 / np.cosh(z) ** 2),
    "linear": (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass
class MLP:
    """Fully-connected network storing weights ``W[l]: (n_l, n_{l-1})``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    c_w: float = 1.0
    c_b: float = 0.0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise ValueError("bias length must match layer output width")

    @classmethod
    def init(cls, widths: Sequence[int], seed, activation: str = "tanh",
             c_w: float = 1.0, c_b: float = 0.0) -> "MLP":
        """Sample a network with layer sizes ``widths = [n0, n1, ..., nL]``."""
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(c_w / fan_in))
            if c_b > 0.0:
                biases.append(rng.standard_normal(fan_out) * np.sqrt(c_b))
            else:
                biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases, activation=activation,
                   c_w=c_w, c_b=c_b)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "MLP":
        return MLP(weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases],
                   activation=self.activation, c_w=self.c_w, c_b=self.c_b)

    def sigma(self, z: np.ndarray) -> np.ndarray:
        return _ACTIVATIONS[self.activation][0](z)

    def sigma_prime(self, z: np.ndarray) -> np.ndarray:
        return _ACTIVATIONS[self.activation][1](z)


def forward(mlp: MLP, x: np.ndarray) -> list[np.ndarray]:
    """All preactivations ``z^(1..L)`` for inputs ``x`` of shape (samples, n0)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != mlp.weights[0].shape[1]:
        raise ValueError(f"input dim {x.shape[1]} != network input {mlp.weights[0].shape[1]}")
    pre = []
    act = x
    for w, b in zip(mlp.weights, mlp.biases):
        z = act @ w.T + b
        pre.append(z)
        act = mlp.sigma(z)
    return pre


def output_jacobian(mlp: MLP, x: np.ndarray, layer: int) -> np.ndarray:
    """``dz^(L) / dz^(layer)`` with shape (samples, n_L, n_layer), layer 1-based.

    Accumulated by the backward recursion through ``W^(l+1)`` and the
    activation derivative, starting from the identity at the output layer.
    """
    if not 1 <= layer <= mlp.depth:
        raise ValueError(f"layer {layer} outside 1..{mlp.depth}")
    pre = forward(mlp, x)
    samples = pre[0].shape[0]
    n_out = mlp.weights[-1].shape[0]
    jac = np.broadcast_to(np.eye(n_out), (samples, n_out, n_out)).copy()
    for ell in range(mlp.depth - 1, layer - 1, -1):
        # jac: (S, n_L, n_{ell+1}) -> (S, n_L, n_ell)
        jac = (jac @ mlp.weights[ell]) * mlp.sigma_prime(pre[ell - 1])[:, None, :]
    return jac


def ntk_matrix(mlp: MLP, x: np.ndarray) -> np.ndarray:
    """Tangent-kernel Gram matrix over all (sample, output) pairs.

    Entry ((a,i),(b,j)) is the parameter-space inner product of the output
    gradients; rows are flattened sample-major. Symmetric and PSD.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pre = forward(mlp, x)
    samples = x.shape[0]
    n_out = mlp.weights[-1].shape[0]
    size = samples * n_out
    h = np.zeros((size, size))
    act_prev = x
    for ell in range(1, mlp.depth + 1):
        jac = output_jacobian(mlp, x, ell)  # (S, n_L, n_ell)
        overlap = np.einsum("sij,tkj->sitk", jac, jac)
        inner = act_prev @ act_prev.T  # (S, S)
        h += (overlap * (1.0 + inner)[:, None, :, None]).reshape(size, size)
        act_prev = mlp.sigma(pre[ell - 1])
    return h


def _backprop(mlp: MLP, x: np.ndarray, eps: np.ndarray,
              pre: list[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of the summed-square loss ``0.5*sum(eps^2)`` w.r.t. W and b."""
    grads_w = [None] * mlp.depth
    grads_b = [None] * mlp.depth
    delta = eps  # (S, n_L)
    for ell in range(mlp.depth - 1, -1, -1):
        act_prev = x if ell == 0 else mlp.sigma(pre[ell - 1])
        grads_w[ell] = delta.T @ act_prev
        grads_b[ell] = delta.sum(axis=0)
        if ell > 0:
            delta = (delta @ mlp.weights[ell]) * mlp.sigma_prime(pre[ell - 1])
    return grads_w, grads_b


@dataclass
class MLPTrainTrace:
    """History of a full-batch gradient-descent run."""

    eps: np.ndarray              # (steps+1, samples*n_out)
    ntk_initial: np.ndarray
    ntk_drift: float             # ||H(T) - H(0)||_F / ||H(0)||_F
    weight_displacement: float   # ||W(T) - W(0)|| / ||W(0)||, all layers stacked
    diverged: bool

    @property
    def steps(self) -> int:
        return len(self.eps) - 1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(("step", "eps", "loss", "kernel", "max_dtheta"))
            for t in range(len(self.eps)):
                norm = float(np.linalg.norm(self.eps[t]))
                writer.writerow([t, f"{norm:.17g}", f"{0.5 * norm ** 2:.17g}",
                                 "nan", "nan"])


def ntk_train(mlp: MLP, x: np.ndarray, y: np.ndarray, eta: float,
              steps: int) -> MLPTrainTrace:
    """Full-batch gradient descent on the mean-square loss over (x, y).

    Mutates a copy of ``mlp``. Stops early and flags divergence when the
    loss exceeds 1e6.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] > 32:
        raise ValueError("small-dataset trainer: at most 32 samples")
    net = mlp.copy()
    w0_stack = np.concatenate([w.reshape(-1) for w in net.weights])
    h0 = ntk_matrix(net, x)
    eps_hist = []
    diverged = False
    for t in range(steps + 1):
        pre = forward(net, x)
        eps = pre[-1] - y
        eps_hist.append(eps.reshape(-1).copy())
        if 0.5 * float(np.sum(eps ** 2)) > 1e6:
            diverged = True
            break
        if t == steps:
            break
        grads_w, grads_b = _backprop(net, x, eps, pre)
        for ell in range(net.depth):
            net.weights[ell] -= eta * grads_w[ell]
            net.biases[ell] -= eta * grads_b[ell]
    h_final = ntk_matrix(net, x)
    wt_stack = np.concatenate([w.reshape(-1) for w in net.weights])
    return MLPTrainTrace(
        eps=np.array(eps_hist),
        ntk_initial=h0,
        ntk_drift=float(np.linalg.norm(h_final - h0) / np.linalg.norm(h0)),
        weight_displacement=float(np.linalg.norm(wt_stack - w0_stack)
                                  / np.linalg.norm(w0_stack)),
        diverged=diverged,
    )


def _loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) vs log(x); nan for fewer than 2 points."""
    if len(xs) < 2:
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(ys), 1)[0])


@dataclass
class VarianceSweepResult:
    widths: list[int]
    variances: list[float]          # Monte Carlo estimates of E[(dz/dz)^2]
    predicted: list[float]          # c_w^(depth) / width, exact for linear nets
    mean_abs_z: list[float]         # |mean of dz/dz| in units of its SE
    slope: float                    # fitted d log(var) / d log(width)


def gradient_variance_sweep(widths: Sequence[int], trials: int, seed: int,
                            hidden_depth: int = 3, activation: str = "linear",
                            c_w: float = 1.0, input_dim: int = 8) -> VarianceSweepResult:
    """Estimate how the output-to-hidden-layer gradient scales with width.

    For each width, samples ``trials`` networks with hidden layers of that
    width, measures ``dz^(L)/dz^(1)`` at a fixed input, and fits the
    log-log slope of the variance against width. Fan-in scaling makes the
    prediction ``c_w^depth / width`` exact for linear activations.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials per width")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, input_dim))
    variances, predicted, mean_ratio = [], [], []
    for idx, width in enumerate(widths):
        arch = [input_dim] + [int(width)] * hidden_depth + [1]
        sub_rng = derive_rng(seed, idx)
        samples = np.empty(trials)
        entry_means = np.empty(trials)
        for trial in range(trials):
            net = MLP.init(arch, sub_rng, activation=activation, c_w=c_w)
            jac = output_jacobian(net, x, 1)[0, 0]  # (width,)
            samples[trial] = float(np.mean(jac ** 2))
            entry_means[trial] = float(np.mean(jac))
        variances.append(float(samples.mean()))
        predicted.append(c_w ** hidden_depth / width)
        se = float(entry_means.std(ddof=1) / np.sqrt(trials))
        mean_ratio.append(abs(float(entry_means.mean())) / se if se > 0 else 0.0)
    slope = _loglog_slope(widths, variances)
    return VarianceSweepResult(
        widths=[int(w) for w in widths],
        variances=variances,
        predicted=predicted,
        mean_abs_z=mean_ratio,
        slope=slope,
    )


@dataclass
class FluctuationSweepResult:
    widths: list[int]
    ratios: list[float]   # ||H_i - mean H||_rms / ||mean H||_F per width
    slope: float


def ntk_fluctuation_sweep(widths: Sequence[int], n_inits: int, seed: int,
                          n_samples: int = 8, input_dim: int = 4,
                          hidden_depth: int = 2,
                          activation: str = "tanh") -> FluctuationSweepResult:
    """Relative NTK fluctuation across random initializations, per width."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, input_dim))
    ratios = []
    for idx, width in enumerate(widths):
        arch = [input_dim] + [int(width)] * hidden_depth + [1]
        sub_rng = derive_rng(seed, idx)
        mats = np.array([ntk_matrix(MLP.init(arch, sub_rng, activation=activation), x)
                         for _ in range(n_inits)])
        mean = mats.mean(axis=0)
        fluct = float(np.sqrt(np.mean(np.sum((mats - mean) ** 2, axis=(1, 2)))))
        ratios.append(fluct / float(np.linalg.norm(mean)))
    return FluctuationSweepResult(widths=[int(w) for w in widths],
                                  ratios=ratios, slope=_loglog_slope(widths, ratios))
