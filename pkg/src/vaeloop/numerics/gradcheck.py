"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape


@dataclass
class GradCheckReport:
    checked: int = 0
    worst_abs: float = 0.0
    failures: list = field(default_factory=list)   # (name, index, numeric, analytic)

    @property
    def ok(self):
        return not self.failures


def numeric_gradient(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def check_gradients(loss_fn, params, h=1e-5, rtol=1e-4, atol=1e-6):
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``params`` maps names to Tensors that ``loss_fn`` reads; an entry fails
    when ``|numeric - analytic| > atol + rtol * |numeric|``.
    """
    with Tape() as tape:
        loss = loss_fn()
    leaves = list(params.values())
    analytic = tape.backward(loss, wrt=leaves)
    f = lambda: loss_fn().item()  # noqa: E731
    report = GradCheckReport()
    for name, p in params.items():
        num = numeric_gradient(f, p.data, h)
        ana = analytic[p]
        err = np.abs(num - ana)
        report.checked += err.size
        report.worst_abs = max(report.worst_abs, float(err.max(initial=0.0)))
        for idx in zip(*np.nonzero(err > atol + rtol * np.abs(num))):
            report.failures.append((name, idx, float(num[idx]), float(ana[idx])))
    return report
