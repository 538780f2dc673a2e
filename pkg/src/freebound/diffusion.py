"""One-dimensional diffusions: natural-scale reduction, densities, path sampling.

A diffusion dY = alpha(Y) dt + beta(Y) dB on an interval is reduced to its
driftless form dX = sigma(X) dB by the strictly increasing scale change
X = S(Y), where S'(y) = exp(-int 2 alpha / beta^2).  Brownian motion and
geometric Brownian motion carry closed-form scale maps and transition
densities; anything else goes through high-resolution quadrature of S'.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from numba import njit
from scipy.integrate import cumulative_simpson
from scipy.interpolate import PchipInterpolator

from . import rng
from .errors import CoefficientDomainError, NumericError, UnsupportedFamilyError

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class DiffusionSpec:
    """Drifted SDE dY = drift_alpha(Y) dt + vol_beta(Y) dB on an open interval."""

    drift_alpha: Callable[[np.ndarray], np.ndarray]
    vol_beta: Callable[[np.ndarray], np.ndarray]
    interval: tuple[float, float]
    family: Optional[str] = None
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ScaleMap:
    """Strictly increasing map S with inverse and derivative, all vectorized."""

    forward: Callable
    inverse: Callable
    derivative: Callable
    is_identity: bool = False


def identity_scale() -> ScaleMap:
    ident = lambda y: np.asarray(y, dtype=float) + 0.0
    one = lambda y: np.ones_like(np.asarray(y, dtype=float))
    return ScaleMap(forward=ident, inverse=ident, derivative=one, is_identity=True)


class TransitionDensity:
    """Lebesgue transition density p(t, x, y) with the speed-measure variant.

    The speed-measure density is p_hat(t, x, y) = 0.5 * sigma(y)^2 * p(t, x, y)
    and is symmetric in (x, y).
    """

    def __init__(self, lebesgue_fn, sigma_fn):
        self._lebesgue = lebesgue_fn
        self._sigma = sigma_fn

    def lebesgue(self, t, x, y):
        return self._lebesgue(t, x, y)

    def speed(self, t, x, y):
        y = np.asarray(y, dtype=float)
        return 0.5 * self._sigma(y) ** 2 * self._lebesgue(t, x, y)


@dataclass(frozen=True, eq=False)
class NaturalScaleDiffusion:
    """Driftless diffusion dX = sigma(X) dB on the open interval I = scale(I_hat)."""

    sigma: Callable[[np.ndarray], np.ndarray]
    interval: tuple[float, float]
    scale_map: ScaleMap
    sigma_jit: Callable[[float], float]
    density: Optional[TransitionDensity] = None
    name: str = "custom"


# ---------------------------------------------------------------------------
# family constructors


def bm_spec(sigma: float = 1.0) -> DiffusionSpec:
    if sigma <= 0.0:
        raise CoefficientDomainError("bm requires sigma > 0")
    return DiffusionSpec(
        drift_alpha=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
        vol_beta=lambda y, s=sigma: np.full_like(np.asarray(y, dtype=float), s),
        interval=(-math.inf, math.inf),
        family="bm",
        params={"sigma": float(sigma)},
    )


def gbm_spec(r: float, sigma: float) -> DiffusionSpec:
    """dY = r Y dt + sigma Y dB on (0, inf)."""
    if sigma <= 0.0:
        raise CoefficientDomainError("gbm requires sigma > 0")
    return DiffusionSpec(
        drift_alpha=lambda y, r_=float(r): r_ * np.asarray(y, dtype=float),
        vol_beta=lambda y, s=float(sigma): s * np.asarray(y, dtype=float),
        interval=(0.0, math.inf),
        family="gbm",
        params={"r": float(r), "sigma": float(sigma)},
    )


@lru_cache(maxsize=None)
def _const_jit(c: float):
    @njit(cache=True)
    def f(x):
        return c

    return f


@lru_cache(maxsize=None)
def _linear_jit(c: float):
    @njit(cache=True)
    def f(x):
        return c * x

    return f


def _table_jit(x_lo: float, h: float, values: np.ndarray):
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = values.shape[0]

    @njit(cache=True)
    def f(x):
        pos = (x - x_lo) / h
        if pos <= 0.0:
            return values[0]
        if pos >= n - 1:
            return values[n - 1]
        i = int(pos)
        w = pos - i
        return values[i] * (1.0 - w) + values[i + 1] * w

    return f


def _gaussian_density(sig: float):
    def p(t, x, y):
        t = np.asarray(t, dtype=float)
        sd = sig * np.sqrt(t)
        z = (np.asarray(y, dtype=float) - np.asarray(x, dtype=float)) / sd
        return np.exp(-0.5 * z * z) / (sd * _SQRT_2PI)

    return p


def _gbm_scale_density(r: float, sigma_amb: float, scale: ScaleMap):
    """Density of X = S(Y) where Y is log-normal; change of variables through S."""
    mu_log = r - 0.5 * sigma_amb**2

    def p(t, x, y):
        t = np.asarray(t, dtype=float)
        y0 = scale.inverse(x)
        y1 = scale.inverse(y)
        sd = sigma_amb * np.sqrt(t)
        z = (np.log(y1 / y0) - mu_log * t) / sd
        p_y = np.exp(-0.5 * z * z) / (y1 * sd * _SQRT_2PI)
        # dY/dX along the inverse scale map
        jac = 1.0 / scale.derivative(y1)
        return p_y * np.abs(jac)

    return p


def _quadrature_scale(spec: DiffusionSpec, window: tuple[float, float], anchor: float,
                      n_grid: int = 8193) -> ScaleMap:
    lo, hi = window
    grid = np.linspace(lo, hi, n_grid)
    if not (lo < anchor < hi):
        raise NumericError(f"anchor {anchor} outside quadrature window {window}")
    beta = np.asarray(spec.vol_beta(grid), dtype=float)
    if np.any(~np.isfinite(beta)) or np.any(beta <= 0.0):
        raise CoefficientDomainError(
            "vol_beta must be finite and > 0 on the quadrature window"
        )
    integrand = 2.0 * np.asarray(spec.drift_alpha(grid), dtype=float) / beta**2

    def cumulative(vals, xs):
        out = cumulative_simpson(vals, x=xs, initial=0.0)
        return out

    phi = cumulative(integrand, grid)
    # self-convergence check against half resolution stands in for adaptivity
    phi_half = cumulative(integrand[::2], grid[::2])
    err = np.max(np.abs(phi[::2] - phi_half) / (1.0 + np.abs(phi[::2])))
    if not np.isfinite(err) or err > 1e-9:
        raise NumericError(
            f"scale-function quadrature failed to converge (rel err {err:.3e})"
        )
    i_anchor = int(np.argmin(np.abs(grid - anchor)))
    phi = phi - phi[i_anchor]
    s_prime = np.exp(-phi)
    if np.any(~np.isfinite(s_prime)):
        raise NumericError("scale density overflow; shrink the window or move anchor")
    s_vals = cumulative(s_prime, grid)
    s_vals = s_vals - s_vals[i_anchor]

    fwd = PchipInterpolator(grid, s_vals)
    der = PchipInterpolator(grid, s_prime)
    inv0 = PchipInterpolator(s_vals, grid)

    def forward(y):
        return fwd(np.asarray(y, dtype=float))

    def derivative(y):
        return der(np.asarray(y, dtype=float))

    def inverse(x):
        x = np.asarray(x, dtype=float)
        y = inv0(x)
        for _ in range(3):  # Newton polish to machine precision
            y = y - (fwd(y) - x) / der(y)
        return y

    return ScaleMap(forward=forward, inverse=inverse, derivative=derivative)


def build_natural_scale(spec: DiffusionSpec, window: Optional[tuple[float, float]] = None,
                        anchor: Optional[float] = None) -> NaturalScaleDiffusion:
    """Reduce a drifted SDE to natural scale.

    Closed forms are used for the registered "bm" and "gbm" families; other
    specs need a compact `window` inside the state interval over which the
    scale function is computed by quadrature (anchor defaults to its midpoint).
    """
    if spec.family == "bm":
        s = spec.params["sigma"]
        return NaturalScaleDiffusion(
            sigma=lambda x, s_=s: np.full_like(np.asarray(x, dtype=float), s_),
            interval=(-math.inf, math.inf),
            scale_map=identity_scale(),
            sigma_jit=_const_jit(s),
            density=TransitionDensity(
                _gaussian_density(s),
                lambda y, s_=s: np.full_like(np.asarray(y, dtype=float), s_),
            ),
            name="bm",
        )

    if spec.family == "gbm":
        r = spec.params["r"]
        sig = spec.params["sigma"]
        d = 2.0 * r / sig**2
        if d == 0.0:
            scale = identity_scale()
            c = sig
            interval = (0.0, math.inf)
        elif d == 1.0:
            scale = ScaleMap(
                forward=lambda y: np.log(np.asarray(y, dtype=float)),
                inverse=lambda x: np.exp(np.asarray(x, dtype=float)),
                derivative=lambda y: 1.0 / np.asarray(y, dtype=float),
            )
            c = None  # sigma_X is the constant sig
            interval = (-math.inf, math.inf)
        else:
            one_m_d = 1.0 - d
            scale = ScaleMap(
                forward=lambda y, a=one_m_d: np.asarray(y, dtype=float) ** a / a,
                inverse=lambda x, a=one_m_d: (a * np.asarray(x, dtype=float)) ** (1.0 / a),
                derivative=lambda y, d_=d: np.asarray(y, dtype=float) ** (-d_),
            )
            c = one_m_d * sig
            interval = (0.0, math.inf) if d < 1.0 else (-math.inf, 0.0)

        if c is None:
            sigma_fn = lambda x, s_=sig: np.full_like(np.asarray(x, dtype=float), s_)
            sigma_jit = _const_jit(sig)
        else:
            sigma_fn = lambda x, c_=c: c_ * np.asarray(x, dtype=float)
            sigma_jit = _linear_jit(c)
        density = TransitionDensity(_gbm_scale_density(r, sig, scale), sigma_fn)
        return NaturalScaleDiffusion(
            sigma=sigma_fn,
            interval=interval,
            scale_map=scale,
            sigma_jit=sigma_jit,
            density=density,
            name="gbm",
        )

    # generic spec via quadrature
    if window is None:
        raise NumericError("quadrature-based scale reduction needs a compact window")
    lo, hi = window
    if anchor is None:
        anchor = 0.5 * (lo + hi)
    scale = _quadrature_scale(spec, window, anchor)

    def sigma_fn(x):
        y = scale.inverse(x)
        return scale.derivative(y) * np.asarray(spec.vol_beta(y), dtype=float)

    x_lo = float(scale.forward(lo))
    x_hi = float(scale.forward(hi))
    xs = np.linspace(x_lo, x_hi, 4097)
    sig_tab = np.asarray(sigma_fn(xs), dtype=float)
    if np.any(~np.isfinite(sig_tab)) or np.any(sig_tab <= 0.0):
        raise CoefficientDomainError("transformed sigma must be finite and > 0")
    return NaturalScaleDiffusion(
        sigma=sigma_fn,
        interval=(x_lo, x_hi),
        scale_map=scale,
        sigma_jit=_table_jit(x_lo, xs[1] - xs[0], sig_tab),
        density=None,
        name=spec.family or "custom",
    )


def transition_density(diff: NaturalScaleDiffusion, t, x, y):
    """Lebesgue transition density p(t, x, y); registered families only."""
    if diff.density is None:
        raise UnsupportedFamilyError(
            f"no analytic transition density for family '{diff.name}'"
        )
    return diff.density.lebesgue(t, x, y)


def speed_density(diff: NaturalScaleDiffusion, t, x, y):
    """Density with respect to the speed measure: 0.5 sigma(y)^2 p(t, x, y)."""
    if diff.density is None:
        raise UnsupportedFamilyError(
            f"no analytic transition density for family '{diff.name}'"
        )
    return diff.density.speed(t, x, y)


# ---------------------------------------------------------------------------
# path sampling


@dataclass(frozen=True)
class PathSample:
    paths: np.ndarray       # (n_paths, n_steps + 1)
    absorbed: np.ndarray    # bool per path: hit the guard interval
    dt: float
    guard: tuple[float, float]


@njit(cache=True)
def _euler_store(sigma, x0, dt, n_steps, n_paths, seed, g_lo, g_hi, out, absorbed):
    sq = math.sqrt(dt)
    for p in range(n_paths):
        key = rng.path_key(seed, p)
        x = x0
        out[p, 0] = x
        stopped = False
        k = 0
        while k < n_steps:
            z0, z1 = rng.normal_pair(key, k)
            for z in (z0, z1):
                if k >= n_steps:
                    break
                if not stopped:
                    x = x + sigma(x) * sq * z
                    if x <= g_lo:
                        x = g_lo
                        stopped = True
                    elif x >= g_hi:
                        x = g_hi
                        stopped = True
                out[p, k + 1] = x
                k += 1
        absorbed[p] = stopped


@njit(cache=True)
def _euler_terminal(sigma, x0, dt, n_steps, n_paths, seed, g_lo, g_hi, out, absorbed):
    sq = math.sqrt(dt)
    for p in range(n_paths):
        key = rng.path_key(seed, p)
        x = x0
        stopped = False
        k = 0
        while k < n_steps:
            z0, z1 = rng.normal_pair(key, k)
            for z in (z0, z1):
                if k >= n_steps:
                    break
                if not stopped:
                    x = x + sigma(x) * sq * z
                    if x <= g_lo:
                        x = g_lo
                        stopped = True
                    elif x >= g_hi:
                        x = g_hi
                        stopped = True
                k += 1
        out[p] = x
        absorbed[p] = stopped


def _default_guard(diff: NaturalScaleDiffusion, x0: float) -> tuple[float, float]:
    lo, hi = diff.interval
    g_lo = lo if math.isfinite(lo) else -1e300
    g_hi = hi if math.isfinite(hi) else 1e300
    # keep strictly inside a finite interval; endpoints are never evaluated
    if math.isfinite(lo):
        g_lo = lo + 1e-10 * max(1.0, abs(x0))
    if math.isfinite(hi):
        g_hi = hi - 1e-10 * max(1.0, abs(x0))
    return g_lo, g_hi


def sample_paths(diff: NaturalScaleDiffusion, x0: float, horizon: float, dt: float,
                 n_paths: int, seed: int, guard: Optional[tuple[float, float]] = None
                 ) -> PathSample:
    """Euler paths of dX = sigma(X) dB, absorbed (and flagged) at the guard."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    g_lo, g_hi = guard if guard is not None else _default_guard(diff, x0)
    if not (g_lo < x0 < g_hi):
        raise ValueError("x0 must lie strictly inside the guard interval")
    n_steps = int(round(horizon / dt))
    out = np.empty((n_paths, n_steps + 1))
    absorbed = np.zeros(n_paths, dtype=np.bool_)
    _euler_store(diff.sigma_jit, x0, dt, n_steps, n_paths, seed, g_lo, g_hi,
                 out, absorbed)
    return PathSample(paths=out, absorbed=absorbed, dt=dt, guard=(g_lo, g_hi))


def sample_terminal(diff: NaturalScaleDiffusion, x0: float, horizon: float, dt: float,
                    n_paths: int, seed: int,
                    guard: Optional[tuple[float, float]] = None):
    """Terminal values only (memory-light variant of sample_paths)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    g_lo, g_hi = guard if guard is not None else _default_guard(diff, x0)
    n_steps = int(round(horizon / dt))
    out = np.empty(n_paths)
    absorbed = np.zeros(n_paths, dtype=np.bool_)
    _euler_terminal(diff.sigma_jit, x0, dt, n_steps, n_paths, seed, g_lo, g_hi,
                    out, absorbed)
    return out, absorbed


def sample_terminal_spec(spec: DiffusionSpec, y0: float, horizon: float, dt: float,
                         n_paths: int, seed: int, guard: tuple[float, float]):
    """Euler terminal values of the drifted SDE (used by the transform-consistency test)."""
    alpha_v = spec.drift_alpha
    beta_v = spec.vol_beta
    lo, hi = guard
    ys = np.linspace(lo, hi, 4097)
    a_tab = np.asarray(alpha_v(ys), dtype=float)
    b_tab = np.asarray(beta_v(ys), dtype=float)
    if np.any(b_tab <= 0.0):
        raise CoefficientDomainError("vol_beta must be > 0 on the guard interval")
    a_jit = _table_jit(lo, ys[1] - ys[0], a_tab)
    b_jit = _table_jit(lo, ys[1] - ys[0], b_tab)
    n_steps = int(round(horizon / dt))
    out = np.empty(n_paths)
    absorbed = np.zeros(n_paths, dtype=np.bool_)

    @njit(cache=True)
    def run(out, absorbed):
        sq = math.sqrt(dt)
        for p in range(n_paths):
            key = rng.path_key(seed, p)
            y = y0
            stopped = False
            k = 0
            while k < n_steps:
                z0, z1 = rng.normal_pair(key, k)
                for z in (z0, z1):
                    if k >= n_steps:
                        break
                    if not stopped:
                        y = y + a_jit(y) * dt + b_jit(y) * sq * z
                        if y <= lo:
                            y = lo
                            stopped = True
                        elif y >= hi:
                            y = hi
                            stopped = True
                    k += 1
            out[p] = y
            absorbed[p] = stopped

    run(out, absorbed)
    return out, absorbed
