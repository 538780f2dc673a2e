"""Monte Carlo engine for discounted local times along Euler paths.

Supports two estimators of the discounted local time at a level z:

* OCCUPATION: the shrinking-band kernel (1/2 eps) int 1{|X-z|<eps} sigma^2 ds
  with eps = eps0 * sqrt(dt);
* TANAKA: the pathwise |X-z| decomposition, with each step contributing the
  expected local time of the Brownian bridge between consecutive states, which
  repairs the O(sqrt(dt)) bias from unseen intra-step crossings.

On top of these sit the pathwise identity check that ties the discounted gain
increment to the measure-weighted local-time integral, the small-time and
density bounds for local-time means, and the time-Lipschitz bound obtained by
quadrature of the speed-measure transition density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy.integrate import quad

from . import rng
from .diffusion import NaturalScaleDiffusion, speed_density
from .errors import SimulationError, UnsupportedFamilyError
from .fields import ScalarField
from .fdsolver import ValueSurface
from .payoff import ConvexDiffGain, SignedMeasureRepr

_SQRT_PI_OVER_2 = math.sqrt(math.pi / 2.0)

# Estimator-bias allowances per unit sqrt(dt), calibrated once on the Brownian
# analytic benchmarks (see tests/test_localtime.py) and frozen here.
BIAS_SQRT_DT = {
    "occupation": 0.55,
    "tanaka": 0.35,
    "lagrange": 0.60,
}


@dataclass(frozen=True)
class StoppingRule:
    """Stop at the first exit from (lo, hi), capped at t_max."""

    t_max: float
    lo: float = -math.inf
    hi: float = math.inf

    @staticmethod
    def fixed(t: float) -> "StoppingRule":
        return StoppingRule(t_max=t)

    @staticmethod
    def exit_interval(lo: float, hi: float, t_max: float) -> "StoppingRule":
        return StoppingRule(t_max=t_max, lo=lo, hi=hi)


@dataclass(frozen=True)
class LocalTimeEstimate:
    value: float
    stderr: float
    method: str
    n_paths: int
    dt: float
    seed: int
    z: float


@njit(cache=True, inline="always")
def _bridge_local_time(a, b, z, var):
    """E[local time at z] of a Brownian bridge from a to b with variance var."""
    gamma = abs(a - z) + abs(b - z)
    if gamma * gamma > 128.0 * var:  # contribution below ~1e-13 of scale
        return 0.0
    d = b - a
    return (_SQRT_PI_OVER_2 * math.sqrt(var)
            * math.exp(d * d / (2.0 * var))
            * math.erfc(gamma / math.sqrt(2.0 * var)))


@njit(cache=True)
def _kernel_local_time(sigma, r_fn, r_const, x0, z, dt, check_steps, lo, hi,
                       n_paths, seed, eps0, occ_out, tan_out):
    sq = math.sqrt(dt)
    eps = eps0 * sq
    n_checks = check_steps.shape[0]
    n_steps = check_steps[n_checks - 1]
    use_const = r_const == r_const  # not NaN
    dfac = math.exp(-r_const * dt) if use_const else 1.0
    for p in range(n_paths):
        key = rng.path_key(seed, p)
        x = x0
        disc = 1.0
        occ = 0.0
        tan = 0.0
        stopped = x <= lo or x >= hi
        ci = 0
        k = 0
        while k < n_steps:
            z0, z1 = rng.normal_pair(key, k)
            for zdraw in (z0, z1):
                if k >= n_steps:
                    break
                while ci < n_checks and check_steps[ci] == k:
                    occ_out[p, ci] = occ
                    tan_out[p, ci] = tan
                    ci += 1
                if not stopped:
                    sig = sigma(x)
                    v = sig * sig * dt
                    if abs(x - z) < eps:
                        occ += disc * sig * sig * dt / (2.0 * eps)
                    x_new = x + sig * sq * zdraw
                    tan += disc * _bridge_local_time(x, x_new, z, v)
                    if use_const:
                        disc *= dfac
                    else:
                        disc *= math.exp(-r_fn(x) * dt)
                    x = x_new
                    if x <= lo or x >= hi:
                        stopped = True
                k += 1
        while ci < n_checks:
            occ_out[p, ci] = occ
            tan_out[p, ci] = tan
            ci += 1


@njit(cache=True)
def _kernel_lagrange(sigma, r_fn, r_const, g_fn, mud, atom_locs, atom_masses,
                     x0, dt, n_steps, lo, hi, n_paths, seed, lhs_out, rhs_out):
    sq = math.sqrt(dt)
    n_atoms = atom_locs.shape[0]
    use_const = r_const == r_const
    dfac = math.exp(-r_const * dt) if use_const else 1.0
    g0 = g_fn(x0)
    for p in range(n_paths):
        key = rng.path_key(seed, p)
        x = x0
        disc = 1.0
        occ = 0.0
        atom_lt = np.zeros(n_atoms)
        stopped = x <= lo or x >= hi
        k = 0
        while k < n_steps and not stopped:
            z0, z1 = rng.normal_pair(key, k)
            for zdraw in (z0, z1):
                if k >= n_steps or stopped:
                    break
                sig = sigma(x)
                v = sig * sig * dt
                occ += disc * mud(x) * sig * sig * dt
                x_new = x + sig * sq * zdraw
                for a in range(n_atoms):
                    atom_lt[a] += disc * _bridge_local_time(x, x_new,
                                                            atom_locs[a], v)
                if use_const:
                    disc *= dfac
                else:
                    disc *= math.exp(-r_fn(x) * dt)
                x = x_new
                if x <= lo or x >= hi:
                    stopped = True
                k += 1
        acc = occ
        for a in range(n_atoms):
            acc += atom_masses[a] * atom_lt[a]
        lhs_out[p] = disc * g_fn(x) - g0
        rhs_out[p] = 0.5 * acc


@njit(cache=True)
def _kernel_occupation_grid(sigma, r_fn, r_const, x0, dt, n_steps, lo, hi,
                            z_lo, dz, n_z, n_paths, seed, eps0, out):
    """Occupation-kernel local time at a uniform grid of levels, one exit rule."""
    sq = math.sqrt(dt)
    eps = eps0 * sq
    use_const = r_const == r_const
    dfac = math.exp(-r_const * dt) if use_const else 1.0
    for p in range(n_paths):
        key = rng.path_key(seed, p)
        x = x0
        disc = 1.0
        stopped = x <= lo or x >= hi
        k = 0
        while k < n_steps and not stopped:
            z0, z1 = rng.normal_pair(key, k)
            for zdraw in (z0, z1):
                if k >= n_steps or stopped:
                    break
                sig = sigma(x)
                pos = (x - z_lo) / dz
                iz = int(pos + 0.5)
                if 0 <= iz < n_z and abs(x - (z_lo + iz * dz)) < eps:
                    out[p, iz] += disc * sig * sig * dt / (2.0 * eps)
                x = x + sig * sq * zdraw
                if use_const:
                    disc *= dfac
                else:
                    disc *= math.exp(-r_fn(0.0 if use_const else x) * dt)
                if x <= lo or x >= hi:
                    stopped = True
                k += 1


@njit(cache=True)
def _kernel_roundtrip(sigma, r_fn, r_const, mud, atom_locs, atom_masses,
                      w_vals, w_tgrid_dt, w_xgrid, mask, t0_index, x0, dt,
                      n_steps, lo, hi, stop_at_mask, n_paths, seed,
                      val_out, lag_out):
    """Discounted surface value (+ running measure integral) at s ^ tau.

    tau is the first entry of (t0 + s, X_s) into the mask region when
    stop_at_mask is set, else the fixed horizon n_steps * dt; the surface value
    is bilinearly interpolated on its own grid.
    """
    sq = math.sqrt(dt)
    n_atoms = atom_locs.shape[0]
    nx = w_xgrid.shape[0]
    nt_rows = w_vals.shape[0]
    use_const = r_const == r_const
    dfac = math.exp(-r_const * dt) if use_const else 1.0
    for p in range(n_paths):
        key = rng.path_key(seed, p)
        x = x0
        disc = 1.0
        occ = 0.0
        atom_lt = np.zeros(n_atoms)
        k = 0
        done = False
        while not done:
            t_abs = t0_index * w_tgrid_dt + k * dt
            row = int(t_abs / w_tgrid_dt + 0.5)
            if row > nt_rows - 1:
                row = nt_rows - 1
            # nearest x node for the mask lookup
            i_lo = 0
            i_hi = nx - 1
            while i_hi - i_lo > 1:
                mid = (i_lo + i_hi) // 2
                if w_xgrid[mid] <= x:
                    i_lo = mid
                else:
                    i_hi = mid
            i_near = i_lo if x - w_xgrid[i_lo] <= w_xgrid[i_hi] - x else i_hi
            hit = stop_at_mask and mask[row, i_near]
            if hit or k >= n_steps or x <= lo or x >= hi:
                # bilinear value at (t_abs, x)
                r0 = int(t_abs / w_tgrid_dt)
                if r0 > nt_rows - 2:
                    r0 = nt_rows - 2
                wt = t_abs / w_tgrid_dt - r0
                if wt < 0.0:
                    wt = 0.0
                if wt > 1.0:
                    wt = 1.0
                wx = (x - w_xgrid[i_lo]) / (w_xgrid[i_hi] - w_xgrid[i_lo])
                if wx < 0.0:
                    wx = 0.0
                if wx > 1.0:
                    wx = 1.0
                v00 = w_vals[r0, i_lo]
                v01 = w_vals[r0, i_hi]
                v10 = w_vals[r0 + 1, i_lo]
                v11 = w_vals[r0 + 1, i_hi]
                val = ((1.0 - wt) * ((1.0 - wx) * v00 + wx * v01)
                       + wt * ((1.0 - wx) * v10 + wx * v11))
                acc = occ
                for a in range(n_atoms):
                    acc += atom_masses[a] * atom_lt[a]
                val_out[p] = disc * val
                lag_out[p] = 0.5 * acc
                done = True
                continue
            z0, z1 = rng.normal_pair(key, k)
            sig = sigma(x)
            v = sig * sig * dt
            occ += disc * mud(x) * sig * sig * dt
            x_new = x + sig * sq * z0
            for a in range(n_atoms):
                atom_lt[a] += disc * _bridge_local_time(x, x_new, atom_locs[a], v)
            if use_const:
                disc *= dfac
            else:
                disc *= math.exp(-r_fn(x) * dt)
            x = x_new
            k += 1


@njit(cache=True)
def _zero_fn(x):
    return 0.0


def _r_parts(r: ScalarField):
    if r.is_constant:
        return r.jit, r.const_value
    return r.jit, math.nan


def _mean_stderr(vals: np.ndarray) -> tuple[float, float]:
    if np.any(~np.isfinite(vals)):
        raise SimulationError("non-finite per-path statistic")
    n = len(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def local_time_paths(diff: NaturalScaleDiffusion, x0: float, z: float,
                     r: ScalarField, rule: StoppingRule, dt: float,
                     n_paths: int, seed: int, at_times: Sequence[float],
                     eps0: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-path discounted local-time estimates at the requested times.

    Returns (occupation, tanaka) arrays of shape (n_paths, len(at_times)); the
    stopping rule freezes accumulation on exit.
    """
    times = sorted(at_times)
    check_steps = np.array([int(round(min(t, rule.t_max) / dt)) for t in times],
                           dtype=np.int64)
    r_jit, r_const = _r_parts(r)
    occ = np.zeros((n_paths, len(times)))
    tan = np.zeros((n_paths, len(times)))
    _kernel_local_time(diff.sigma_jit, r_jit, r_const, x0, z, dt, check_steps,
                       rule.lo, rule.hi, n_paths, seed, eps0, occ, tan)
    return occ, tan


def estimate_local_time(diff: NaturalScaleDiffusion, x0: float, z: float,
                        r: ScalarField, rule: StoppingRule, dt: float,
                        n_paths: int, seed: int, method: str = "occupation",
                        eps0: float = 0.5) -> LocalTimeEstimate:
    """Mean discounted local time at level z up to the stopping rule."""
    if method not in ("occupation", "tanaka"):
        raise ValueError("method must be 'occupation' or 'tanaka'")
    if not (rule.lo < z < rule.hi):
        # paths never reach z before stopping: exactly zero
        return LocalTimeEstimate(0.0, 0.0, method, n_paths, dt, seed, z)
    occ, tan = local_time_paths(diff, x0, z, r, rule, dt, n_paths, seed,
                                at_times=[rule.t_max], eps0=eps0)
    vals = occ[:, 0] if method == "occupation" else tan[:, 0]
    mean, stderr = _mean_stderr(vals)
    return LocalTimeEstimate(mean, stderr, method, n_paths, dt, seed, z)


@dataclass(frozen=True)
class LagrangeReport:
    lhs: float
    rhs: float
    gap: float
    stderr: float
    bias_allowance: float
    n_paths: int
    dt: float
    seed: int

    def passes(self, n_sigma: float = 3.0) -> bool:
        return abs(self.gap) <= n_sigma * self.stderr + self.bias_allowance


def verify_lagrange(diff: NaturalScaleDiffusion, gain: ConvexDiffGain,
                    measure: SignedMeasureRepr, r: ScalarField, x0: float,
                    rule: StoppingRule, dt: float, n_paths: int, seed: int
                    ) -> LagrangeReport:
    """Check the pathwise identity: discounted gain increment vs local-time integral.

    Both sides run on the same paths, so the paired gap has only the
    discretization bias and the zero-mean martingale part.
    """
    if gain.eval_jit is None or measure.density_jit is None:
        raise ValueError("gain and measure need jit callables for the MC kernel")
    n_steps = int(round(rule.t_max / dt))
    if n_steps == 0:
        return LagrangeReport(0.0, 0.0, 0.0, 0.0, 0.0, n_paths, dt, seed)
    atom_locs = np.array([loc for loc, _ in measure.atoms], dtype=np.float64)
    atom_masses = np.array([m for _, m in measure.atoms], dtype=np.float64)
    r_jit, r_const = _r_parts(r)
    lhs = np.empty(n_paths)
    rhs = np.empty(n_paths)
    _kernel_lagrange(diff.sigma_jit, r_jit, r_const, gain.eval_jit,
                     measure.density_jit, atom_locs, atom_masses, x0, dt,
                     n_steps, rule.lo, rule.hi, n_paths, seed, lhs, rhs)
    gap = lhs - rhs
    mean_gap, stderr = _mean_stderr(gap)
    scale = max(1.0, float(np.max(np.abs(atom_masses))) if atom_masses.size else 1.0)
    allowance = BIAS_SQRT_DT["lagrange"] * math.sqrt(dt) * scale
    return LagrangeReport(float(lhs.mean()), float(rhs.mean()), mean_gap,
                          stderr, allowance, n_paths, dt, seed)


def verify_positivity(diff: NaturalScaleDiffusion, x0: float,
                      window: tuple[float, float], horizon: float, dt: float,
                      n_paths: int, seed: int, n_z: int = 21,
                      r: Optional[ScalarField] = None, eps0: float = 0.5
                      ) -> list[LocalTimeEstimate]:
    """Occupation-kernel local-time means on a z-grid, stopped at window exit."""
    from .fields import constant_field

    r = r if r is not None else constant_field(0.0)
    lo, hi = window
    zs = np.linspace(lo, hi, n_z + 2)[1:-1]
    dz = float(zs[1] - zs[0])
    if eps0 * math.sqrt(dt) >= 0.5 * dz:
        raise ValueError("occupation band overlaps adjacent levels; lower dt or n_z")
    n_steps = int(round(horizon / dt))
    r_jit, r_const = _r_parts(r)
    out = np.zeros((n_paths, len(zs)))
    _kernel_occupation_grid(diff.sigma_jit, r_jit, r_const, x0, dt, n_steps,
                            lo, hi, float(zs[0]), dz, len(zs), n_paths, seed,
                            eps0, out)
    estimates = []
    for j, z in enumerate(zs):
        mean, stderr = _mean_stderr(out[:, j])
        estimates.append(LocalTimeEstimate(mean, stderr, "occupation", n_paths,
                                           dt, seed, float(z)))
    return estimates


@dataclass(frozen=True)
class LipschitzReport:
    t1: float
    t2: float
    x: float
    observed: float
    bound: float
    quad_tol: float

    def passes(self, grid_tol: float = 1e-10) -> bool:
        return -grid_tol <= self.observed <= self.bound + self.quad_tol


def verify_time_lipschitz(diff: NaturalScaleDiffusion, measure: SignedMeasureRepr,
                          surface: ValueSurface, x: float, t1: float, t2: float,
                          quad_tol: float = 1e-6) -> LipschitzReport:
    """v(t1,x) - v(t2,x) against the quadrature bound on the positive part.

    The bound integrates twice the speed-measure transition density against
    the positive part of the measure over time-to-maturity in [T-t2, T-t1].
    """
    if diff.density is None:
        raise UnsupportedFamilyError("time-Lipschitz bound needs a registered density")
    if not t1 < t2:
        raise ValueError("need t1 < t2")
    horizon = surface.grid.horizon
    observed = surface.value_at(t1, x) - surface.value_at(t2, x)
    lo, hi = surface.grid.truncation
    pos_atoms = measure.positive_atoms()

    def time_slice(s: float) -> float:
        total = 0.0
        dens_pos = lambda z: max(float(measure.density(z)), 0.0)
        probe = np.linspace(lo, hi, 33)
        if np.any(np.asarray(measure.density(probe)) > 0):
            val, _ = quad(lambda z: 2.0 * float(speed_density(diff, s, x, z))
                          * dens_pos(z), lo, hi, limit=200,
                          epsabs=quad_tol / max(horizon, 1.0))
            total += val
        for loc, mass in pos_atoms:
            total += 2.0 * float(speed_density(diff, s, x, loc)) * mass
        return total

    bound, _ = quad(time_slice, horizon - t2, horizon - t1, limit=200,
                    epsabs=quad_tol)
    return LipschitzReport(t1=t1, t2=t2, x=x, observed=float(observed),
                           bound=float(bound), quad_tol=quad_tol)


@dataclass(frozen=True)
class RoundtripReport:
    start_value: float
    mc_value: float
    stderr: float
    gap: float                 # mc - start (<= allowance expected)
    stopped_at_mask: bool
    n_paths: int


def value_roundtrip(diff: NaturalScaleDiffusion, r: ScalarField,
                    surface: ValueSurface, t0: float, x0: float, s: float,
                    dt: float, n_paths: int, seed: int,
                    stop_at_mask: bool = True,
                    measure: Optional[SignedMeasureRepr] = None,
                    use_gain_gap: bool = False,
                    gain: Optional[ConvexDiffGain] = None) -> RoundtripReport:
    """MC mean of the discounted surface value at s ^ tau* against v(t0, x0).

    With stop_at_mask the paths stop on first entry into the exercise mask and
    the stopped discounted value should match v(t0, x0) (martingale); without
    it the fixed-horizon mean can only fall below (supermartingale).  When
    `use_gain_gap` is set the surface excess over the gain is transported
    instead, together with the running local-time integral of the measure.
    """
    grid = surface.grid
    if use_gain_gap:
        if measure is None or gain is None:
            raise ValueError("gain-gap transport needs the measure and the gain")
        w_vals = surface.v - surface.g_values[None, :]
        atom_locs = np.array([loc for loc, _ in measure.atoms])
        atom_masses = np.array([m for _, m in measure.atoms])
        mud = measure.density_jit
        start = surface.value_at(t0, x0) - float(gain.eval(x0))
    else:
        w_vals = surface.v
        atom_locs = np.zeros(0)
        atom_masses = np.zeros(0)
        mud = _zero_fn
        start = surface.value_at(t0, x0)
    t0_index = int(round(t0 / grid.dt))
    n_steps = int(round(min(s, grid.horizon - t0) / dt))
    r_jit, r_const = _r_parts(r)
    val = np.empty(n_paths)
    lag = np.empty(n_paths)
    lo, hi = grid.truncation
    _kernel_roundtrip(diff.sigma_jit, r_jit, r_const, mud, atom_locs,
                      atom_masses, np.ascontiguousarray(w_vals), grid.dt,
                      grid.x, surface.exercise_mask, t0_index, x0, dt, n_steps,
                      lo, hi, stop_at_mask, n_paths, seed, val, lag)
    total = val + lag
    mean, stderr = _mean_stderr(total)
    return RoundtripReport(start_value=start, mc_value=mean, stderr=stderr,
                           gap=mean - start, stopped_at_mask=stop_at_mask,
                           n_paths=n_paths)
