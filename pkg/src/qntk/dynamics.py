"""Gradient-descent training with optional Gaussian angle noise.

The update is ``theta <- theta - eta * eps * grad(eps) + xi`` with
``xi ~ N(0, sigma_theta^2)`` drawn i.i.d. per angle and per step. Noise
models imprecision in measuring and writing back the angles; it enters the
update directly, not the gradient estimate. Angles are never wrapped
modulo 2*pi so displacement diagnostics stay meaningful.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .gradients import ResidualContext, residual, residual_and_grad
from .sim import derive_rng, normal_draws

TRACE_COLUMNS = ("step", "eps", "loss", "kernel", "max_dtheta")


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    steps: int
    sigma_theta: float = 0.0
    seed: int = 0
    record_k_every: int = 1
    keep_theta: bool = False
    max_steps_guard: int = 10 ** 6

    def __post_init__(self):
        if self.eta < 0.0 or not np.isfinite(self.eta):
            raise ValueError("eta must be finite and >= 0")
        if self.sigma_theta < 0.0 or not np.isfinite(self.sigma_theta):
            raise ValueError("sigma_theta must be finite and >= 0")
        if not 0 <= self.steps <= self.max_steps_guard:
            raise ValueError(f"steps must lie in [0, {self.max_steps_guard}]")
        if self.record_k_every < 1:
            raise ValueError("record_k_every must be >= 1")


@dataclass
class StepRecord:
    eps_before: float
    eps_after: float
    kernel: float
    max_dtheta: float


@dataclass
class TrainingTrace:
    """Per-step history of one run.

    Arrays have length ``steps + 1`` and are indexed by step. ``kernel`` is
    ``nan`` on steps where it was not sampled (the final step is always
    sampled); ``max_dtheta[t]`` is the largest deterministic angle update of
    the step leaving ``t`` (``nan`` on the final row, where no update
    happens). Noise kicks are excluded from ``max_dtheta`` so it measures
    gradient-driven motion only.
    """

    eps: np.ndarray
    loss: np.ndarray
    kernel: np.ndarray
    max_dtheta: np.ndarray
    theta0: np.ndarray
    theta_final: np.ndarray
    theta_history: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return len(self.eps) - 1

    @property
    def final_kernel(self) -> float:
        return float(self.kernel[-1])

    def recorded_kernel_mean(self) -> float:
        values = self.kernel[np.isfinite(self.kernel)]
        return float(values.mean())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(TRACE_COLUMNS)
            for t in range(len(self.eps)):
                writer.writerow([
                    t,
                    _fmt(self.eps[t]),
                    _fmt(self.loss[t]),
                    _fmt(self.kernel[t]),
                    _fmt(self.max_dtheta[t]),
                ])

    def summary_dict(self) -> dict:
        return {
            "steps": self.steps,
            "eps0": float(self.eps[0]),
            "eps_final": float(self.eps[-1]),
            "loss_final": float(self.loss[-1]),
            "kernel_initial": float(self.kernel[0]),
            "kernel_final": self.final_kernel,
            "max_update": float(np.nanmax(self.max_dtheta)) if self.steps else 0.0,
            "displacement": float(np.linalg.norm(self.theta_final - self.theta0)),
        }


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def gd_step(ctx: ResidualContext, theta, cfg: TrainConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, StepRecord]:
    """One gradient-descent step; returns the new angles and a record."""
    theta = np.asarray(theta, dtype=float)
    eps, grad = residual_and_grad(ctx, theta)
    if not np.all(np.isfinite(grad)):
        raise RuntimeError(
            f"non-finite gradient at eps={eps!r}, |theta|_max={np.max(np.abs(theta))!r}"
        )
    kernel = float(grad @ grad)
    update = -cfg.eta * eps * grad
    new_theta = theta + update
    if cfg.sigma_theta > 0.0:
        new_theta = new_theta + normal_draws(rng, len(theta), cfg.sigma_theta)
    record = StepRecord(
        eps_before=eps,
        eps_after=residual(ctx, new_theta),
        kernel=kernel,
        max_dtheta=float(np.max(np.abs(update))) if len(update) else 0.0,
    )
    return new_theta, record


def train(ctx: ResidualContext, theta0, cfg: TrainConfig) -> TrainingTrace:
    """Run ``cfg.steps`` updates from ``theta0``; deterministic given the seed."""
    theta = np.asarray(theta0, dtype=float).copy()
    rng = np.random.default_rng(cfg.seed)
    steps = cfg.steps
    eps_hist = np.empty(steps + 1)
    kernel_hist = np.full(steps + 1, np.nan)
    dtheta_hist = np.full(steps + 1, np.nan)
    theta_hist = np.empty((steps + 1, len(theta))) if cfg.keep_theta else None

    for t in range(steps):
        eps, grad = residual_and_grad(ctx, theta)
        if not np.all(np.isfinite(grad)):
            raise RuntimeError(f"non-finite gradient at step {t}")
        eps_hist[t] = eps
        if t % cfg.record_k_every == 0:
            kernel_hist[t] = grad @ grad
        update = -cfg.eta * eps * grad
        dtheta_hist[t] = np.max(np.abs(update)) if len(update) else 0.0
        if theta_hist is not None:
            theta_hist[t] = theta
        theta = theta + update
        if cfg.sigma_theta > 0.0:
            theta = theta + normal_draws(rng, len(theta), cfg.sigma_theta)

    eps_final, grad_final = residual_and_grad(ctx, theta)
    eps_hist[steps] = eps_final
    kernel_hist[steps] = grad_final @ grad_final
    if theta_hist is not None:
        theta_hist[steps] = theta
    return TrainingTrace(
        eps=eps_hist,
        loss=0.5 * eps_hist ** 2,
        kernel=kernel_hist,
        max_dtheta=dtheta_hist,
        theta0=np.asarray(theta0, dtype=float).copy(),
        theta_final=theta,
        theta_history=theta_hist,
    )


@dataclass
class RunResult:
    run_index: int
    seed: int
    trace: TrainingTrace


@dataclass
class EnsembleResult:
    """Statistics of independent training repetitions.

    ``mean_abs_final`` and ``std_final`` summarize the final residual across
    runs; ``final_kernels`` holds the last-step kernel of each run, the
    quantity the late-time noise formulas are evaluated with.
    """

    runs: list[RunResult]

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    @property
    def final_eps(self) -> np.ndarray:
        return np.array([run.trace.eps[-1] for run in self.runs])

    @property
    def final_kernels(self) -> np.ndarray:
        return np.array([run.trace.final_kernel for run in self.runs])

    @property
    def mean_abs_final(self) -> float:
        return float(np.mean(np.abs(self.final_eps)))

    @property
    def std_final(self) -> float:
        return float(np.std(self.final_eps, ddof=1))

    def run_summaries(self) -> list[dict]:
        out = []
        for run in self.runs:
            summary = run.trace.summary_dict()
            summary["run"] = run.run_index
            summary["seed"] = run.seed
            out.append(summary)
        return out


def _run_member(args) -> RunResult:
    build, cfg, index = args
    ctx, theta0 = build(index)
    child_seed = int(derive_rng(cfg.seed, index).integers(2 ** 63))
    run_cfg = replace(cfg, seed=child_seed)
    return RunResult(run_index=index, seed=child_seed, trace=train(ctx, theta0, run_cfg))


def ensemble_train(build: Callable[[int], tuple[ResidualContext, np.ndarray]],
                   cfg: TrainConfig, n_runs: int, n_jobs: int = 1) -> EnsembleResult:
    """Train ``n_runs`` members with per-run derived noise seeds.

    ``build(i)`` supplies the context and initial angles of member ``i``;
    passing a constant builder reproduces the repeated-experiment protocol
    where only the injected noise differs between runs. Results are
    independent of ``n_jobs``.
    """
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    tasks = [(build, cfg, i) for i in range(n_runs)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(_run_member, tasks))
    else:
        runs = [_run_member(task) for task in tasks]
    return EnsembleResult(runs=runs)


@dataclass
class LazinessReport:
    """Contrast between per-angle motion and loss-level progress."""

    max_update: float
    displacement: float
    eps_ratio: float
    dim: int

    def to_json_dict(self) -> dict:
        return {
            "max_update": self.max_update,
            "displacement": self.displacement,
            "eps_ratio": self.eps_ratio,
            "dim": self.dim,
        }


def laziness_report(trace: TrainingTrace, dim: int) -> LazinessReport:
    """Summarize how little the angles moved relative to the residual drop."""
    if trace.steps == 0:
        max_update = 0.0
    else:
        max_update = float(np.nanmax(trace.max_dtheta))
    eps0 = trace.eps[0]
    ratio = float(abs(trace.eps[-1] / eps0)) if eps0 != 0.0 else 0.0
    return LazinessReport(
        max_update=max_update,
        displacement=float(np.linalg.norm(trace.theta_final - trace.theta0)),
        eps_ratio=ratio,
        dim=dim,
    )
