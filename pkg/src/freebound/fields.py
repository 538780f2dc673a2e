"""Scalar state functions (discount rate, running profit) with jit twins."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from numba import njit


@dataclass(frozen=True)
class ScalarField:
    """A function of the state with a scalar jit version for path kernels."""

    vec: Callable[[np.ndarray], np.ndarray]
    jit: Callable[[float], float]
    is_constant: bool = False
    const_value: float = 0.0


@lru_cache(maxsize=None)
def constant_field(value: float) -> ScalarField:
    value = float(value)

    @njit(cache=True)
    def f(x):
        return value

    return ScalarField(
        vec=lambda x: np.full_like(np.asarray(x, dtype=float), value),
        jit=f,
        is_constant=True,
        const_value=value,
    )


def field_from_table(xs: np.ndarray, ys: np.ndarray) -> ScalarField:
    xs = np.asarray(xs, dtype=float)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if xs.ndim != 1 or xs.shape != ys.shape or len(xs) < 2:
        raise ValueError("table needs matching 1-d arrays of length >= 2")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("table abscissae must be strictly increasing")
    lo = float(xs[0])
    h = float(xs[1] - xs[0])
    if not np.allclose(np.diff(xs), h, rtol=1e-9):
        raise ValueError("table abscissae must be uniform")
    n = len(xs)

    @njit(cache=True)
    def f(x):
        pos = (x - lo) / h
        if pos <= 0.0:
            return ys[0]
        if pos >= n - 1:
            return ys[n - 1]
        i = int(pos)
        w = pos - i
        return ys[i] * (1.0 - w) + ys[i + 1] * w

    def vec(x):
        return np.interp(np.asarray(x, dtype=float), xs, ys)

    return ScalarField(vec=vec, jit=f)


def field_from_callable(fn: Callable, window: tuple[float, float],
                        n_tab: int = 4097) -> ScalarField:
    """Tabulate a plain callable so kernels get a jit-compatible version."""
    xs = np.linspace(window[0], window[1], n_tab)
    return ScalarField(vec=lambda x: np.asarray(fn(np.asarray(x, dtype=float)),
                                                dtype=float),
                       jit=field_from_table(xs, fn(xs)).jit)
