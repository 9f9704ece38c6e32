"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, weighted_sum


@dataclass
class GradcheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    worst: tuple = ()  # (tensor name, flat index)
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures and self.max_rel_error < self.tolerance


def _rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def _floor(grad, rel=1e-3, absolute=1e-6):
    # coordinates far below the tensor's gradient scale are judged against that scale
    return max(absolute, rel * float(np.abs(grad).max(initial=0.0)))


def gradcheck(fn, inputs, tolerance=1e-4, step=1e-4, max_coords=None, seed=0):
    """Compare analytic and numeric gradients of ``fn`` w.r.t. ``inputs``.

    ``fn`` maps nothing to a Tensor, reading the tensors in ``inputs``
    (a ``{name: Tensor}`` dict) by closure; every input must be float64.
    A non-scalar output is reduced with fixed random weights so that every
    output element participates. ``max_coords`` caps the number of
    perturbed coordinates per input (sampled without replacement).

    The relative error of a coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-3 * max|analytic of that tensor|, 1e-6)``.
    """
    rng = np.random.default_rng(seed)
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 inputs; {name} is {t.dtype}")

    probe = fn()
    weights = None if probe.data.size == 1 else rng.standard_normal(probe.shape)

    def scalar():
        out = fn()
        return out if weights is None else weighted_sum(out, weights)

    for t in inputs.values():
        t.grad = None
        t.requires_grad = True
    scalar().backward()
    analytic = {}
    failures = []
    for name, t in inputs.items():
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            failures.append((name, bad, "non-finite analytic gradient"))
        analytic[name] = g.copy()

    worst_err, worst_at, count = 0.0, (), 0
    for name, t in inputs.items():
        floor = _floor(analytic[name])
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(scalar().data)
            flat[i] = orig - step
            f_minus = float(scalar().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            if not np.isfinite(numeric):
                failures.append((name, int(i), "non-finite numeric gradient"))
                continue
            err = _rel_error(analytic[name].reshape(-1)[i], numeric, floor)
            count += 1
            if err > worst_err:
                worst_err, worst_at = err, (name, int(i))
    return GradcheckReport(worst_err, tolerance, count, worst_at, failures)


def f64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
