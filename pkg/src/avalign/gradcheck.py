"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, get_default_dtype, zero_grad

# denominators below this are treated as absolute error
REL_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def __str__(self) -> str:
        lines = [f"grad_check tol={self.tol:g} worst={self.worst:.3e} {'PASS' if self.passed else 'FAIL'}"]
        for k, v in sorted(self.max_rel_error.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {k}: {v:.3e}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numerical_gradient(f, param, eps: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``param.data``.

    ``entries`` optionally restricts the flat indices perturbed; the rest of
    the returned array is NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = float(f().data)
        flat[i] = old - eps
        fm = float(f().data)
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(param.shape)


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-4, max_entries=None, rng=None) -> GradCheckReport:
    """Compare :func:`backward` against central differences.

    ``f`` rebuilds the graph from scratch and returns a scalar tensor;
    ``params`` is a mapping name -> Parameter (or an iterable of them).
    With ``max_entries`` only that many random entries per parameter are
    perturbed.
    """
    if get_default_dtype() != np.float64:
        raise RuntimeError("grad_check requires float64 mode")
    if not isinstance(params, dict):
        params = {getattr(p, "name", str(i)): p for i, p in enumerate(params)}
    rng = rng or np.random.default_rng(0)
    zero_grad(params.values())
    loss = f()
    backward(loss)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else np.array(p.grad, dtype=np.float64)
        entries = None
        if max_entries is not None and p.data.size > max_entries:
            entries = rng.choice(p.data.size, size=max_entries, replace=False)
        numeric = numerical_gradient(f, p, eps, entries)
        sel = ~np.isnan(numeric)
        report.max_rel_error[name] = relative_error(analytic[sel], numeric[sel])
    zero_grad(params.values())
    return report
