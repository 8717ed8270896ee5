"""Limited-memory BFGS with a backtracking line search.

The objective may return ``inf`` (folded mesh); such trial points are treated
as failed Armijo checks and the step is halved.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    status: str  # "converged", "max_iter", "stalled"


def _two_loop(grad, s_hist, y_hist):
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append((rho, a))
    s, y = s_hist[-1], y_hist[-1]
    q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def minimize_lbfgs(fun, x0, memory=10, max_iter=20, initial_step=1.0, gtol=1e-9, ftol=1e-13,
                   c1=1e-4, max_backtracks=40) -> LBFGSResult:
    """Minimize ``fun`` starting at ``x0``.

    ``fun(x)`` returns ``(value, gradient)``; the gradient may be ``None`` when
    the value is infinite. ``initial_step`` bounds the largest coordinate change
    of the first (steepest-descent) step. The returned point never has a larger
    objective than ``x0``.
    """
    shape = np.shape(x0)
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    f, g = fun(x.reshape(shape))
    if not np.isfinite(f):
        raise ValueError("L-BFGS started at a point with non-finite objective")
    g = np.asarray(g, dtype=np.float64).ravel()
    n_eval = 1
    s_hist, y_hist = [], []
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        gmax = np.max(np.abs(g)) if g.size else 0.0
        if gmax <= gtol:
            status = "converged"
            it -= 1
            break
        if s_hist:
            d = _two_loop(g, s_hist, y_hist)
            slope = np.dot(g, d)
            if not slope < 0:
                s_hist.clear()
                y_hist.clear()
        if not s_hist:
            d = -g * (initial_step / gmax)
            slope = np.dot(g, d)
        t = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + t * d
            f_new, g_new = fun(x_new.reshape(shape))
            n_eval += 1
            if np.isfinite(f_new) and f_new <= f + c1 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            status = "stalled"
            it -= 1
            break
        g_new = np.asarray(g_new, dtype=np.float64).ravel()
        s = x_new - x
        y = g_new - g
        if np.dot(s, y) > 1e-12 * np.dot(y, y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        if decrease <= ftol * max(1.0, abs(f)):
            status = "converged"
            break
    return LBFGSResult(x.reshape(shape), float(f), g.reshape(shape), it, n_eval, status)
