"""Finite-difference verification of analytic gradients.

Checks are only meaningful at 64-bit: the graph under test must live in a
float64 parameter store. The scalar objective is a projection of the graph
outputs, ``phi = sum(out * proj)``, with a seeded random projection (or all
ones on request); central differences use step ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Graph

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
REL_ERR_FLOOR = 1e-8  # delta in max(|a|, |n|, delta)
MAX_INDICES = 200     # subsampled check indices per tensor


@dataclass
class GradCheckReport:
    tol: float
    h: float
    param_errors: dict[str, float] = field(default_factory=dict)
    input_errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self):
        items = list(self.param_errors.items()) + list(self.input_errors.items())
        return sorted(items, key=lambda kv: -kv[1])

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for _, e in self.worst)

    def summary(self) -> str:
        lines = [f"grad check: tol={self.tol:g} h={self.h:g} "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.worst[:10]:
            flag = "" if err <= self.tol else "   <-- exceeds tol"
            lines.append(f"  {name}: max rel err {err:.3e}{flag}")
        return "\n".join(lines)


def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), REL_ERR_FLOOR)


def _sample_indices(size, rng):
    if size <= MAX_INDICES:
        return np.arange(size)
    return rng.choice(size, size=MAX_INDICES, replace=False)


def grad_check(graph: Graph, *inputs, h=DEFAULT_H, tol=DEFAULT_TOL, seed=0,
               mode="train", projection="random") -> GradCheckReport:
    """Compare analytic gradients of a projected output against central differences.

    Covers every trainable parameter of the graph and every input, each on a
    subsampled index set. Normalization statistics are held deterministic:
    the graph runs in the requested mode with ``update_stats=False``.
    """
    store = graph.store
    if store.dtype != np.float64:
        raise ValueError("grad_check requires a float64 parameter store")
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    def run():
        out = graph.forward(*inputs, mode=mode, update_stats=False, check_finite=False)
        return out if isinstance(out, tuple) else (out,)

    outs = run()
    projs = [
        np.ones_like(o) if projection == "ones" else rng.standard_normal(o.shape)
        for o in outs
    ]

    def phi():
        return sum(float((o * p).sum()) for o, p in zip(run(), projs))

    pnames = graph.param_names(trainable_only=True)
    store.zero_grads()
    _, tape = graph.forward(*inputs, mode=mode, update_stats=False,
                            want_tape=True, check_finite=False)
    input_grads = graph.backward(tape, [p.copy() for p in projs])

    report = GradCheckReport(tol=tol, h=h)
    for name in pnames:
        arr = store[name]
        analytic = store.grad(name).copy()
        worst = 0.0
        flat = arr.reshape(-1)
        for idx in _sample_indices(flat.size, rng):
            keep = flat[idx]
            flat[idx] = keep + h
            fp = phi()
            flat[idx] = keep - h
            fm = phi()
            flat[idx] = keep
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, rel_err(analytic.reshape(-1)[idx], numeric))
        report.param_errors[name] = worst
    for i, x in enumerate(inputs):
        analytic = input_grads[i]
        worst = 0.0
        flat = x.reshape(-1)
        for idx in _sample_indices(flat.size, rng):
            keep = flat[idx]
            flat[idx] = keep + h
            fp = phi()
            flat[idx] = keep - h
            fm = phi()
            flat[idx] = keep
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, rel_err(analytic.reshape(-1)[idx], numeric))
        report.input_errors[f"input[{i}]"] = worst
    return report


def check_loss_gradient(value_and_grad, args, wrt, h=DEFAULT_H, tol=DEFAULT_TOL,
                        seed=0) -> float:
    """Finite-difference check for a scalar loss callable.

    ``value_and_grad(*args)`` must return ``(value, grad)`` with ``grad``
    shaped like ``args[wrt]``. Returns the max relative error over a
    subsampled index set.
    """
    rng = np.random.default_rng(seed)
    args = [np.asarray(a, dtype=np.float64) if isinstance(a, np.ndarray) else a
            for a in args]
    _, grad = value_and_grad(*args)
    flat = args[wrt].reshape(-1)
    worst = 0.0
    for idx in _sample_indices(flat.size, rng):
        keep = flat[idx]
        flat[idx] = keep + h
        fp = value_and_grad(*args)[0]
        flat[idx] = keep - h
        fm = value_and_grad(*args)[0]
        flat[idx] = keep
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(grad.reshape(-1)[idx], numeric))
    return worst
