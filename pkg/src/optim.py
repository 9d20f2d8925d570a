"""Adam, the linear learning-rate schedule and a finite-difference gradient check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .utils.logger import get_logger
from .utils.validators import first_non_finite

logger = get_logger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


class OptimizerError(ValueError):
    """Raised for non-finite gradients, shape mismatches and non-deterministic losses."""
    pass


@dataclass(frozen=True)
class LinearSchedule:
    start_factor: float = 1.0
    end_factor: float = 0.1
    total_iters: int = 1000

    def __post_init__(self) -> None:
        if not 0 < self.end_factor <= self.start_factor:
            raise OptimizerError(f"need 0 < end_factor <= start_factor, got {self.end_factor}, {self.start_factor}")
        if self.total_iters < 1:
            raise OptimizerError(f"total_iters must be at least 1, got {self.total_iters}")


def schedule_factor(iteration: int, sched: LinearSchedule) -> float:
    """Linear interpolation from ``start_factor`` to ``end_factor``, clamped after ``total_iters``."""
    if iteration < 0:
        raise OptimizerError(f"iteration cannot be negative, got {iteration}")
    t = min(iteration, sched.total_iters)
    # weighted form hits both endpoints and the midpoint exactly
    return ((sched.total_iters - t) * sched.start_factor + t * sched.end_factor) / sched.total_iters


@dataclass
class ParamGroup:
    name: str
    params: dict[str, np.ndarray]
    lr: float


@dataclass
class AdamState:
    """Moments per parameter, the step counter and the parameter groups."""

    groups: list[ParamGroup]
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPSILON
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen = set()
        for group in self.groups:
            for name, value in group.params.items():
                if name in seen:
                    raise OptimizerError(f"parameter {name} appears in more than one group")
                seen.add(name)
                self.first_moment.setdefault(name, np.zeros_like(value, dtype=np.float64))
                self.second_moment.setdefault(name, np.zeros_like(value, dtype=np.float64))


def adam_step(state: AdamState, grads: Mapping[str, np.ndarray], factor: float = 1.0) -> None:
    """One bias-corrected Adam update, in place, with ``lr = group.lr * factor``.

    Raises
    ------
    OptimizerError
        If a gradient is missing, mis-shaped or non-finite. Nothing is
        updated in that case.
    """
    for group in state.groups:
        for name, value in group.params.items():
            if name not in grads:
                raise OptimizerError(f"no gradient for parameter {name}")
            grad = grads[name]
            if grad.shape != value.shape:
                raise OptimizerError(f"gradient for {name} has shape {grad.shape}, parameter has {value.shape}")
            bad = first_non_finite(grad)
            if bad is not None:
                raise OptimizerError(f"non-finite gradient for {name} at flat index {bad}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for group in state.groups:
        lr = group.lr * factor
        for name, value in group.params.items():
            grad = grads[name]
            m = state.first_moment[name]
            v = state.second_moment[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * grad
            v *= state.beta2
            v += (1.0 - state.beta2) * grad * grad
            value -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


@dataclass
class TensorCheck:
    name: str
    checked: int
    max_rel_error: float
    mean_rel_error: float
    max_abs_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def format(self) -> str:
        lines = [f"{'tensor':<24} {'coords':>7} {'max rel':>11} {'mean rel':>11}"]
        for t in self.tensors:
            lines.append(f"{t.name:<24} {t.checked:>7d} {t.max_rel_error:>11.3e} {t.mean_rel_error:>11.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g}): {verdict}")
        return "\n".join(lines)


def gradcheck(
    loss_fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    h: float = 1e-6,
    tolerance: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` is re-evaluated after perturbing one coordinate of
    ``params`` in place; the coordinate is restored afterwards. Tensors with
    more than ``max_coords`` entries are checked on a seeded sample.

    The relative error is ``|a - n| / max(|a|, |n|, floor)``, so gradients
    below ``floor`` are compared in absolute terms: with the defaults an
    absolute error under ``tolerance * floor`` (1e-7) always passes. Losses
    whose gradients are that small need a smaller ``floor``; ``max_abs_error``
    in the report shows the absolute scale either way.
    """
    baseline = loss_fn(params)
    repeat = loss_fn(params)
    if baseline != repeat:
        raise OptimizerError(f"loss is not deterministic: {baseline!r} then {repeat!r}")

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, value in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64).ravel()
        flat = value.reshape(-1)
        if value.size and not np.shares_memory(flat, value):
            raise OptimizerError(f"parameter {name} is not contiguous; cannot perturb in place")
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = np.sort(rng.choice(value.size, size=max_coords, replace=False))
        rel = np.zeros(len(coords))
        diff = np.zeros(len(coords))
        for slot, index in enumerate(coords):
            old = flat[index]
            flat[index] = old + h
            plus_value = flat[index]
            f_plus = loss_fn(params)
            flat[index] = old - h
            minus_value = flat[index]
            f_minus = loss_fn(params)
            flat[index] = old
            numeric = (f_plus - f_minus) / (plus_value - minus_value)
            diff[slot] = abs(analytic[index] - numeric)
            rel[slot] = diff[slot] / max(abs(analytic[index]), abs(numeric), floor)
        report.tensors.append(
            TensorCheck(
                name=name,
                checked=len(coords),
                max_rel_error=float(rel.max()) if len(rel) else 0.0,
                mean_rel_error=float(rel.mean()) if len(rel) else 0.0,
                max_abs_error=float(diff.max()) if len(diff) else 0.0,
            )
        )
        logger.debug("gradcheck %s: %d coords, max rel %.3e", name, len(coords), report.tensors[-1].max_rel_error)
    return report
