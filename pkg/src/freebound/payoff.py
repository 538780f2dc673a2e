"""Gain functions as convex differences, and the signed measure they induce.

A gain g is held as (value, left-derivative, second-derivative density, atoms):
the atoms are the kinks of g, with mass equal to the jump of g'.  Together with
the diffusion coefficient, a discount rate r and an optional running profit h
the gain induces the signed measure

    density(z) = g''_ac(z) + 2 sigma(z)^-2 (h(z) - r(z) g(z)),   atoms of g''

whose sign regions (and atoms) drive the stopping geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from scipy.integrate import quad

from .diffusion import NaturalScaleDiffusion
from .errors import ConstructionError, DomainError
from .fields import ScalarField

Atom = tuple[float, float]


@dataclass(frozen=True)
class SmoothPiece:
    """Twice-differentiable description of g on one inter-kink interval."""

    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    second: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ConvexDiffGain:
    eval: Callable[[np.ndarray], np.ndarray]
    left_deriv: Callable[[np.ndarray], np.ndarray]
    second_density: Callable[[np.ndarray], np.ndarray]
    atoms: tuple[Atom, ...]
    eval_jit: Optional[Callable[[float], float]] = None
    second_density_jit: Optional[Callable[[float], float]] = None
    name: str = "custom"

    def second_measure_of_interval(self, a: float, b: float) -> float:
        """g''([a, b)) from density + atoms (left-closed, right-open)."""
        dens, _ = quad(lambda z: float(self.second_density(z)), a, b,
                       points=[loc for loc, _ in self.atoms if a < loc < b],
                       limit=200)
        return dens + sum(m for loc, m in self.atoms if a <= loc < b)


def gain_from_kinks(pieces: Sequence[SmoothPiece],
                    kinks: Sequence[tuple[float, float, float]],
                    *, jit_eval=None, jit_second=None,
                    name: str = "custom", slope_tol: float = 1e-8) -> ConvexDiffGain:
    """Assemble a gain from smooth pieces separated by kinks.

    kinks are (location, left-slope, right-slope), sorted by location; piece i
    covers the interval left of kink i.  Slopes must match the adjacent piece
    derivatives at each junction.
    """
    kinks = sorted(kinks, key=lambda k: k[0])
    if len(pieces) != len(kinks) + 1:
        raise ConstructionError(
            f"need {len(kinks) + 1} pieces for {len(kinks)} kinks, got {len(pieces)}"
        )
    for i, (loc, left_slope, right_slope) in enumerate(kinks):
        dl = float(pieces[i].deriv(loc))
        dr = float(pieces[i + 1].deriv(loc))
        if abs(dl - left_slope) > slope_tol * (1.0 + abs(left_slope)):
            raise ConstructionError(
                f"kink at {loc}: piece left-derivative {dl} != declared {left_slope}"
            )
        if abs(dr - right_slope) > slope_tol * (1.0 + abs(right_slope)):
            raise ConstructionError(
                f"kink at {loc}: piece right-derivative {dr} != declared {right_slope}"
            )
    locs = np.array([k[0] for k in kinks])
    atoms = tuple((float(loc), float(rs - ls)) for loc, ls, rs in kinks)

    def piece_index_left(x):
        # piece containing x when approaching from the left: kink points belong
        # to the piece on their left, giving a left-continuous derivative
        return np.searchsorted(locs, np.asarray(x, dtype=float), side="left")

    def piece_index(x):
        return np.searchsorted(locs, np.asarray(x, dtype=float), side="right")

    def dispatch(x, idx_fn, attr):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        idx = idx_fn(x)
        out = np.empty_like(x)
        for i, piece in enumerate(pieces):
            m = idx == i
            if np.any(m):
                out[m] = getattr(piece, attr)(x[m])
        return out[0] if scalar else out

    gain_eval = lambda x: dispatch(x, piece_index, "eval")
    left_deriv = lambda x: dispatch(x, piece_index_left, "deriv")
    second_density = lambda x: dispatch(x, piece_index, "second")
    return ConvexDiffGain(eval=gain_eval, left_deriv=left_deriv,
                          second_density=second_density, atoms=atoms,
                          eval_jit=jit_eval, second_density_jit=jit_second,
                          name=name)


# ---------------------------------------------------------------------------
# named gain families


@lru_cache(maxsize=None)
def straddle_gain(strike: float) -> ConvexDiffGain:
    k = float(strike)

    @njit(cache=True)
    def g(x):
        return abs(x - k)

    @njit(cache=True)
    def gpp(x):
        return 0.0

    pieces = [
        SmoothPiece(lambda x: k - np.asarray(x, float),
                    lambda x: -np.ones_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float))),
        SmoothPiece(lambda x: np.asarray(x, float) - k,
                    lambda x: np.ones_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float))),
    ]
    return gain_from_kinks(pieces, [(k, -1.0, 1.0)], jit_eval=g, jit_second=gpp,
                           name="straddle")


@lru_cache(maxsize=None)
def neg_straddle_fee_gain(strike: float, fee: float) -> ConvexDiffGain:
    """Cancellable straddle seen from the stopper: g(x) = -|x - K| - fee."""
    k, eta = float(strike), float(fee)

    @njit(cache=True)
    def g(x):
        return -abs(x - k) - eta

    @njit(cache=True)
    def gpp(x):
        return 0.0

    pieces = [
        SmoothPiece(lambda x: np.asarray(x, float) - k - eta,
                    lambda x: np.ones_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float))),
        SmoothPiece(lambda x: k - np.asarray(x, float) - eta,
                    lambda x: -np.ones_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float))),
    ]
    return gain_from_kinks(pieces, [(k, 1.0, -1.0)], jit_eval=g, jit_second=gpp,
                           name="neg-straddle-fee")


def put_transformed_params(strike: float, d: float) -> tuple[float, float, float]:
    """(exponent, transformed strike K', kink location K-bar) of the scaled put."""
    beta = 1.0 / (1.0 - d)
    k_prime = strike * (1.0 - d) ** (-beta)
    k_bar = k_prime ** (1.0 - d)
    return beta, k_prime, k_bar


@lru_cache(maxsize=None)
def put_transformed_gain(strike: float, d: float) -> ConvexDiffGain:
    """American put payoff mapped through the natural-scale change of variables.

    For dY = rY dt + sigma Y dB with d = 2 r / sigma^2 < 1 the scaled payoff is
    g(x) = (K' - x^beta)^+ with beta = 1/(1-d); its kink sits at K-bar = S(K).
    """
    if not d < 1.0:
        raise ConstructionError("put-transformed requires d = 2r/sigma^2 < 1")
    beta, k_prime, k_bar = put_transformed_params(float(strike), float(d))
    coef = beta * (beta - 1.0)

    @njit(cache=True)
    def g(x):
        if x >= k_bar:
            return 0.0
        return k_prime - x**beta

    @njit(cache=True)
    def gpp(x):
        if x >= k_bar:
            return 0.0
        return -coef * x ** (beta - 2.0)

    pieces = [
        SmoothPiece(lambda x: k_prime - np.asarray(x, float) ** beta,
                    lambda x: -beta * np.asarray(x, float) ** (beta - 1.0),
                    lambda x: -coef * np.asarray(x, float) ** (beta - 2.0)),
        SmoothPiece(lambda x: np.zeros_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float))),
    ]
    left_slope = -beta * k_bar ** (beta - 1.0)
    return gain_from_kinks(pieces, [(k_bar, left_slope, 0.0)], jit_eval=g,
                           jit_second=gpp, name="put-transformed")


@lru_cache(maxsize=None)
def call_gain(strike: float) -> ConvexDiffGain:
    k = float(strike)

    @njit(cache=True)
    def g(x):
        return max(x - k, 0.0)

    @njit(cache=True)
    def gpp(x):
        return 0.0

    pieces = [
        SmoothPiece(lambda x: np.zeros_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float))),
        SmoothPiece(lambda x: np.asarray(x, float) - k,
                    lambda x: np.ones_like(np.asarray(x, float)),
                    lambda x: np.zeros_like(np.asarray(x, float))),
    ]
    return gain_from_kinks(pieces, [(k, 0.0, 1.0)], jit_eval=g, jit_second=gpp,
                           name="call")


@lru_cache(maxsize=None)
def linear_gain(slope: float, intercept: float = 0.0) -> ConvexDiffGain:
    a, b = float(slope), float(intercept)

    @njit(cache=True)
    def g(x):
        return a * x + b

    @njit(cache=True)
    def gpp(x):
        return 0.0

    piece = SmoothPiece(lambda x: a * np.asarray(x, float) + b,
                        lambda x: np.full_like(np.asarray(x, float), a),
                        lambda x: np.zeros_like(np.asarray(x, float)))
    return gain_from_kinks([piece], [], jit_eval=g, jit_second=gpp, name="linear")


@lru_cache(maxsize=None)
def quadratic_gain(coef: float = 1.0) -> ConvexDiffGain:
    a = float(coef)

    @njit(cache=True)
    def g(x):
        return a * x * x

    @njit(cache=True)
    def gpp(x):
        return 2.0 * a

    piece = SmoothPiece(lambda x: a * np.asarray(x, float) ** 2,
                        lambda x: 2.0 * a * np.asarray(x, float),
                        lambda x: np.full_like(np.asarray(x, float), 2.0 * a))
    return gain_from_kinks([piece], [], jit_eval=g, jit_second=gpp, name="quadratic")


def gain_from_table(xs: np.ndarray, ys: np.ndarray) -> ConvexDiffGain:
    """Piecewise-linear gain through tabulated points; every interior node is a kink."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) < 2 or np.any(np.diff(xs) <= 0):
        raise ConstructionError("table needs strictly increasing abscissae")
    slopes = np.diff(ys) / np.diff(xs)

    def gain_eval(x):
        return np.interp(np.asarray(x, dtype=float), xs, ys)

    def left_deriv(x):
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.searchsorted(xs, x, side="left") - 1, 0, len(slopes) - 1)
        return slopes[idx]

    def second_density(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    atoms = tuple((float(xs[i]), float(slopes[i] - slopes[i - 1]))
                  for i in range(1, len(slopes))
                  if abs(slopes[i] - slopes[i - 1]) > 0.0)
    return ConvexDiffGain(eval=gain_eval, left_deriv=left_deriv,
                          second_density=second_density, atoms=atoms,
                          name="custom-table")


GAIN_FAMILIES = {
    "straddle": lambda p: straddle_gain(p["K"]),
    "neg-straddle-fee": lambda p: neg_straddle_fee_gain(p["K"], p["eta0"]),
    "put-transformed": lambda p: put_transformed_gain(
        p["K"], p["D"] if "D" in p else 2.0 * p["r"] / p["sigma"] ** 2
    ),
    "call": lambda p: call_gain(p["K"]),
    "linear": lambda p: linear_gain(p.get("slope", 1.0), p.get("intercept", 0.0)),
    "quadratic": lambda p: quadratic_gain(p.get("coef", 1.0)),
    "custom-table": lambda p: gain_from_table(np.asarray(p["x"]), np.asarray(p["g"])),
}


# ---------------------------------------------------------------------------
# the signed measure and its sign regions


@dataclass(frozen=True, eq=False)
class SignedMeasureRepr:
    """Signed measure as absolutely continuous density plus finitely many atoms."""

    density: Callable[[np.ndarray], np.ndarray]
    atoms: tuple[Atom, ...]
    domain: tuple[float, float]
    density_jit: Optional[Callable[[float], float]] = None

    def interval_mass(self, a: float, b: float) -> float:
        """Measure of [a, b): integral of the density plus atom masses inside."""
        dens, _ = quad(lambda z: float(self.density(z)), a, b,
                       points=[loc for loc, _ in self.atoms if a < loc < b],
                       limit=200)
        return dens + sum(m for loc, m in self.atoms if a <= loc < b)

    def positive_atoms(self) -> tuple[Atom, ...]:
        return tuple((loc, m) for loc, m in self.atoms if m > 0.0)

    def negative_atoms(self) -> tuple[Atom, ...]:
        return tuple((loc, m) for loc, m in self.atoms if m < 0.0)


def build_measure(gain: ConvexDiffGain, diff: NaturalScaleDiffusion, r: ScalarField,
                  h: Optional[ScalarField] = None,
                  sample_window: Optional[tuple[float, float]] = None
                  ) -> SignedMeasureRepr:
    """Signed measure combining g'' with the discount (and running-profit) terms."""
    if sample_window is None:
        lo = min((loc for loc, _ in gain.atoms), default=0.0) - 1.0
        hi = max((loc for loc, _ in gain.atoms), default=0.0) + 1.0
        d_lo, d_hi = diff.interval
        lo = max(lo, d_lo + 1e-6 * (1.0 + abs(d_lo)) if math.isfinite(d_lo) else lo)
        hi = min(hi, d_hi - 1e-6 * (1.0 + abs(d_hi)) if math.isfinite(d_hi) else hi)
        sample_window = (lo, hi)
    probes = np.linspace(sample_window[0], sample_window[1], 257)
    r_vals = np.asarray(r.vec(probes), dtype=float)
    if np.any(r_vals < 0.0):
        raise DomainError("discount rate must be nonnegative on the sampled window")
    sig_vals = np.asarray(diff.sigma(probes), dtype=float)
    if np.any(sig_vals <= 0.0):
        raise DomainError("sigma must be strictly positive on the sampled window")

    h_vec = h.vec if h is not None else None

    def density(z):
        z = np.asarray(z, dtype=float)
        sig2 = np.asarray(diff.sigma(z), dtype=float) ** 2
        extra = -np.asarray(r.vec(z), dtype=float) * np.asarray(gain.eval(z), dtype=float)
        if h_vec is not None:
            extra = extra + np.asarray(h_vec(z), dtype=float)
        return np.asarray(gain.second_density(z), dtype=float) + 2.0 * extra / sig2

    density_jit = None
    if gain.second_density_jit is not None and gain.eval_jit is not None:
        gpp_j = gain.second_density_jit
        g_j = gain.eval_jit
        r_j = r.jit
        sig_j = diff.sigma_jit
        if h is None:

            @njit(cache=True)
            def density_jit(z):
                s = sig_j(z)
                return gpp_j(z) - 2.0 * r_j(z) * g_j(z) / (s * s)

        else:
            h_j = h.jit

            @njit(cache=True)
            def density_jit(z):
                s = sig_j(z)
                return gpp_j(z) + 2.0 * (h_j(z) - r_j(z) * g_j(z)) / (s * s)

    return SignedMeasureRepr(density=density, atoms=gain.atoms,
                             domain=diff.interval, density_jit=density_jit)


class RegionLabel(IntEnum):
    NULL = 0
    POS0 = 1
    NEG0 = 2
    ATOM_POS = 3
    ATOM_NEG = 4


@dataclass(frozen=True)
class HahnClassification:
    x: np.ndarray
    labels: np.ndarray  # RegionLabel values, aligned with x
    window: float

    def label_at(self, xq: float) -> RegionLabel:
        i = int(np.argmin(np.abs(self.x - xq)))
        return RegionLabel(int(self.labels[i]))

    def neg0_runs(self) -> list[tuple[int, int]]:
        """Maximal index runs labeled NEG0 (inclusive bounds)."""
        runs = []
        start = None
        for i, lab in enumerate(self.labels):
            if lab == RegionLabel.NEG0:
                if start is None:
                    start = i
            else:
                if start is not None:
                    runs.append((start, i - 1))
                    start = None
        if start is not None:
            runs.append((start, len(self.labels) - 1))
        return runs

    def is_neg0_slice(self, i0: int, i1: int) -> bool:
        return bool(np.all(self.labels[i0:i1 + 1] == RegionLabel.NEG0))


def classify_regions(mu: SignedMeasureRepr, grid: np.ndarray, window: float,
                     n_samples: int = 17) -> HahnClassification:
    """Label each grid node by the local sign behaviour of the measure.

    A node is POS0 (NEG0) when the density stays above +tol (below -tol) on the
    surrounding window, atom sites excluded; atom nodes are labeled by the sign
    of their mass.  Everything else is NULL.
    """
    grid = np.asarray(grid, dtype=float)
    if len(grid) > 1:
        min_cell = float(np.min(np.diff(grid)))
        if window < min_cell:
            raise ValueError("window must span at least one grid cell")
    lo, hi = mu.domain
    atom_locs = np.array([loc for loc, _ in mu.atoms])
    labels = np.full(len(grid), int(RegionLabel.NULL), dtype=np.int64)

    atom_idx: dict[int, float] = {}
    for loc, mass in mu.atoms:
        i = int(np.argmin(np.abs(grid - loc)))
        if abs(grid[i] - loc) <= 1e-12 * (1.0 + abs(loc)):
            atom_idx[i] = mass

    offsets = np.linspace(-window, window, n_samples)
    for i, xi in enumerate(grid):
        if i in atom_idx:
            labels[i] = int(RegionLabel.ATOM_POS if atom_idx[i] > 0
                            else RegionLabel.ATOM_NEG)
            continue
        pts = xi + offsets
        pts = pts[(pts > lo) & (pts < hi)]
        if atom_locs.size:
            keep = np.ones(len(pts), dtype=bool)
            for loc in atom_locs:
                keep &= np.abs(pts - loc) > 1e-9 * (1.0 + abs(loc))
            pts = pts[keep]
        if pts.size == 0:
            continue
        vals = np.asarray(mu.density(pts), dtype=float)
        tol = max(1e-12, 1e-8 * float(np.max(np.abs(vals))))
        if np.all(vals > tol):
            labels[i] = int(RegionLabel.POS0)
        elif np.all(vals < -tol):
            labels[i] = int(RegionLabel.NEG0)
    return HahnClassification(x=grid, labels=labels, window=float(window))
