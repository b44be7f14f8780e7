"""Central-difference checking of vector-Jacobian products."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class DiffOp:
    """A differentiable operation: ``forward(*args)`` and ``vjp(g, *args)``.

    ``vjp`` returns one cotangent per argument, each shaped like it.
    """

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Sequence[np.ndarray]]


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    argument_index: int


class GradientError(ArithmeticError):
    pass


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(op: DiffOp, point: Sequence, epsilon: float = 1e-5, seed: int = 0) -> GradReport:
    """Compare ``op.vjp`` against central differences along random probes.

    One output cotangent ``u`` and one input direction ``v_k`` per argument
    are drawn from ``seed``; the analytic value ``<vjp(u)_k, v_k>`` is
    compared with ``(<u, f(x + eps v_k)> - <u, f(x - eps v_k)>) / 2 eps``.
    The report carries the worst relative error and the argument it came from.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    args = [np.array(a, dtype=np.float64) for a in point]
    rng = np.random.default_rng(seed)
    y = np.asarray(op.forward(*args), dtype=np.float64)
    u = rng.standard_normal(y.shape)
    grads = op.vjp(u, *args)
    if len(grads) != len(args):
        raise ValueError(f"{op.name}: vjp returned {len(grads)} cotangents for {len(args)} arguments")

    worst, worst_arg = 0.0, -1
    for k, (a, ga) in enumerate(zip(args, grads)):
        ga = np.asarray(ga, dtype=np.float64)
        if ga.shape != a.shape:
            raise ValueError(f"{op.name}: cotangent {k} has shape {ga.shape}, argument has {a.shape}")
        v = rng.standard_normal(a.shape)
        analytic = float(np.sum(ga * v))
        plus = list(args)
        minus = list(args)
        plus[k] = a + epsilon * v
        minus[k] = a - epsilon * v
        fp = float(np.sum(u * op.forward(*plus)))
        fm = float(np.sum(u * op.forward(*minus)))
        numeric = (fp - fm) / (2.0 * epsilon)
        if not np.isfinite(analytic):
            raise GradientError(f"{op.name}: non-finite analytic gradient for argument {k}")
        if not np.isfinite(numeric):
            raise GradientError(f"{op.name}: non-finite numeric gradient for argument {k}")
        err = _rel(analytic, numeric)
        if err > worst or worst_arg < 0:
            worst, worst_arg = err, k
    return GradReport(op.name, worst, max(worst_arg, 0))
