"""Matrix-free conjugate gradient and the diagonal-shift schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b, tol: float = 1e-6,
                       max_iterations: int = 1000, x0=None) -> CgResult:
    """Solve A x = b for Hermitian positive definite A given only ``matvec``.

    ``tol`` is relative to ||b||.
    """
    b = np.asarray(b, dtype=np.complex128)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CgResult(np.zeros_like(b), 0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.complex128)
    r = b - matvec(x) if x0 is not None else b.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    target = (tol * bnorm) ** 2
    for it in range(1, max_iterations + 1):
        if rr <= target:
            return CgResult(x, it - 1, np.sqrt(rr) / bnorm, True)
        Ap = matvec(p)
        pAp = np.vdot(p, Ap).real
        if pAp <= 0:
            break
        step = rr / pAp
        x = x + step * p
        r = r - step * Ap
        rr_new = np.vdot(r, r).real
        p = r + (rr_new / rr) * p
        rr = rr_new
    else:
        it = max_iterations
    return CgResult(x, it, np.sqrt(rr) / bnorm, bool(rr <= target))


def diagonal_shift(step: int, initial: float, decay: float, floor: float) -> float:
    """max(initial * decay**step, floor)."""
    return max(initial * decay ** step, floor)
