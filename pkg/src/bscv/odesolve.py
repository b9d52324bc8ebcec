"""Adaptive embedded Runge-Kutta integration (Dormand-Prince 5(4)).

Small self-contained solver for the non-stiff turnover dynamics used
here; local error is controlled to atol + rtol*|y| per step.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class StepSizeUnderflow(RuntimeError):
    pass


class NonFiniteState(RuntimeError):
    pass


# Dormand-Prince 5(4) tableau; 5th-order solution is propagated, the
# embedded 4th-order solution provides the error estimate.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_ERR = _B5 - _B4

_MAX_STEPS = 200_000
_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    t0: float,
    y0: Sequence[float],
    t_eval: Sequence[float],
    rtol: float = 1e-8,
    atol: float = 1e-10,
) -> np.ndarray:
    """Integrate y' = rhs(t, y) from t0, returning y at each t_eval.

    t_eval must be sorted ascending with t_eval[0] >= t0. Steps are
    clipped to land exactly on every requested output time.
    """
    y = np.asarray(y0, dtype=float).copy()
    t_eval = np.asarray(t_eval, dtype=float)
    if t_eval.size == 0:
        return np.empty((0, y.size))
    if np.any(np.diff(t_eval) < 0):
        raise ValueError("t_eval must be sorted ascending")
    if t_eval[0] < t0:
        raise ValueError("t_eval must not precede t0")

    out = np.empty((t_eval.size, y.size))
    t = t0
    span = max(t_eval[-1] - t0, 1e-12)
    h = span / 100.0
    k0 = np.asarray(rhs(t, y), dtype=float)
    next_idx = 0
    # emit any outputs that coincide with t0
    while next_idx < t_eval.size and t_eval[next_idx] <= t0:
        out[next_idx] = y
        next_idx += 1

    k = np.empty((7, y.size))
    for _ in range(_MAX_STEPS):
        if next_idx >= t_eval.size:
            return out
        h = min(h, t_eval[-1] - t)
        # land exactly on the next output time
        if t + h >= t_eval[next_idx]:
            h = t_eval[next_idx] - t
        if h <= 1e-14 * span:
            # degenerate step: the target time equals t within precision
            if abs(t_eval[next_idx] - t) <= 1e-12 * span:
                out[next_idx] = y
                next_idx += 1
                h = span / 100.0
                continue
            raise StepSizeUnderflow(f"step size underflow at t={t}")

        k[0] = k0
        for i in range(1, 7):
            yi = y + h * (k[:i].T @ _A[i])
            k[i] = rhs(t + _C[i] * h, yi)
        y_new = y + h * (k.T @ _B5)
        if not np.all(np.isfinite(y_new)):
            raise NonFiniteState(f"non-finite state at t={t + h}")
        err = h * (k.T @ _ERR)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))

        if err_norm <= 1.0:
            t = t + h
            y = y_new
            k0 = k[6]  # FSAL
            while next_idx < t_eval.size and t_eval[next_idx] <= t + 1e-12 * span:
                out[next_idx] = y
                next_idx += 1
            factor = _MAX_FACTOR if err_norm == 0.0 else _SAFETY * err_norm ** -0.2
        else:
            factor = max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)
        h = h * min(_MAX_FACTOR, max(_MIN_FACTOR, factor))

    raise StepSizeUnderflow("step budget exhausted before reaching final output time")
