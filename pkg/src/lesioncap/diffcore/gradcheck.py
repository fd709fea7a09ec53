"""Central-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .array import DiffArray, backward

# tolerance constants shared by every gradient test
GRADCHECK_STEP = 1e-5
GRADCHECK_TOL = 1e-4
# magnitudes below this are compared on an absolute scale
GRADCHECK_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    passed: bool
    message: str = ""


def numerical_grad(f: Callable[[DiffArray], DiffArray], x: np.ndarray, h: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(DiffArray(x)).data)
        flat[i] = orig - h
        fm = float(f(DiffArray(x)).data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def grad_check(f: Callable[[DiffArray], DiffArray], x, h: float = GRADCHECK_STEP,
               tol: float = GRADCHECK_TOL) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    xd = np.array(x.data if isinstance(x, DiffArray) else x, dtype=np.float64, copy=True)
    leaf = DiffArray(xd.copy(), requires_grad=True)
    y = f(leaf)
    if y.size != 1:
        raise ValueError(f"f must return a scalar, got shape {y.shape}")
    backward(y)
    analytic = np.zeros_like(xd) if leaf.grad is None else leaf.grad.astype(np.float64)
    numeric = numerical_grad(f, xd, h)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        return GradCheckReport(float("inf"), float("inf"), -1, False,
                               "non-finite gradient encountered")
    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRADCHECK_FLOOR)
    rel = abs_err / scale
    worst = int(rel.argmax()) if rel.size else -1
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(
        max_rel_error=max_rel,
        max_abs_error=float(abs_err.max()) if abs_err.size else 0.0,
        worst_index=worst,
        passed=max_rel <= tol,
    )
