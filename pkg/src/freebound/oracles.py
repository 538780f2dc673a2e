"""Independent reference values used to cross-check the PDE and MC paths.

Nothing here shares code with the solvers: the binomial tree prices the
American put by backward induction on a recombining lattice, and the analytic
formulas come from classical Brownian identities.
"""

from __future__ import annotations

import math

import numpy as np


def binomial_american_put(y0: float, strike: float, rate: float, sigma: float,
                          horizon: float, steps: int = 10_000) -> float:
    """Cox-Ross-Rubinstein price of the American put."""
    dt = horizon / steps
    u = math.exp(sigma * math.sqrt(dt))
    d = 1.0 / u
    disc = math.exp(-rate * dt)
    p = (math.exp(rate * dt) - d) / (u - d)
    if not 0.0 < p < 1.0:
        raise ValueError("risk-neutral probability outside (0, 1); reduce dt")
    j = np.arange(steps + 1)
    prices = y0 * u ** (2 * j - steps)
    values = np.maximum(strike - prices, 0.0)
    for n in range(steps - 1, -1, -1):
        values = disc * (p * values[1:n + 2] + (1.0 - p) * values[:n + 1])
        prices = prices[1:n + 2] * d
        np.maximum(values, strike - prices, out=values)
    return float(values[0])


def bm_quadratic_value(t: float, x: float, horizon: float, sigma: float = 1.0) -> float:
    """E[(x + sigma B_{T-t})^2] = x^2 + sigma^2 (T - t)."""
    return x * x + sigma**2 * (horizon - t)


def bm_local_time_mean(t: float, sigma: float = 1.0) -> float:
    """E[L^0_t] for dX = sigma dB started at 0: sigma * sqrt(2 t / pi)."""
    return sigma * math.sqrt(2.0 * t / math.pi)


def killed_bm_density(t, x0: float, y, lo: float, hi: float, sigma: float = 1.0,
                      n_images: int = 20):
    """Transition density of sigma*BM killed at the ends of (lo, hi), by images."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    width = hi - lo
    var = sigma**2 * t
    dens = np.zeros(np.broadcast(t, y).shape)
    for n in range(-n_images, n_images + 1):
        shift = 2.0 * n * width
        dens = dens + (np.exp(-((y - x0 + shift) ** 2) / (2.0 * var))
                       - np.exp(-((y + x0 - 2.0 * lo + shift) ** 2) / (2.0 * var)))
    return dens / np.sqrt(2.0 * math.pi * var)


def killed_bm_local_time_mean(horizon: float, x0: float, z: float, lo: float,
                              hi: float, sigma: float = 1.0, rate: float = 0.0,
                              n_quad: int = 4001) -> float:
    """E of the (discounted) local time at z up to exit from (lo, hi) or horizon.

    Equals sigma^2 * int_0^T exp(-rate*s) p_kill(s, x0, z) ds for constant rate.
    """
    s = np.linspace(0.0, horizon, n_quad)[1:]
    vals = killed_bm_density(s, x0, z, lo, hi, sigma)
    vals = np.concatenate(([0.0], np.exp(-rate * s) * vals))
    from scipy.integrate import simpson

    return sigma**2 * float(simpson(vals, x=np.linspace(0.0, horizon, n_quad)))
