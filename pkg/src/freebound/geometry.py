"""Stopping-set geometry: the space-parametrized boundary and its features.

The boundary c(x) is the earliest grid time from which the exercise mask stays
on through maturity (the mask is an up-set in time, so this is well defined
after repairing isolated glitches).  On windows where the gain-induced measure
is strictly negative, c is unimodal: strictly decreasing to a minimizer
interval, then strictly increasing; local inverses give the familiar
time-parametrized boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataQualityError, InversionError, PreconditionError
from .fdsolver import ValueSurface
from .payoff import HahnClassification, RegionLabel


@dataclass(frozen=True)
class BoundaryFeature:
    kind: str                      # "BAY" or "SPIKE"
    location: float
    evidence: dict


@dataclass
class MonotoneSegment:
    i0: int
    i1: int
    direction: str                 # "down" or "up"
    strict: bool


@dataclass
class BoundaryProfile:
    x: np.ndarray
    c: np.ndarray                  # earliest stopping time per node, in [0, T]
    horizon: float
    dt: float
    repaired_nodes: int = 0
    features: list = field(default_factory=list)
    minimizer_interval: Optional[tuple[float, float]] = None
    monotone_segments: list = field(default_factory=list)
    b1: Optional[tuple[np.ndarray, np.ndarray]] = None   # decreasing-c inverse
    b2: Optional[tuple[np.ndarray, np.ndarray]] = None   # increasing-c inverse

    def index_of(self, xq: float) -> int:
        return int(np.argmin(np.abs(self.x - xq)))


def extract_boundary(surface: ValueSurface, max_repair_fraction: float = 1e-3
                     ) -> BoundaryProfile:
    """Earliest stopping time per x node, enforcing the up-set property.

    Isolated mask-on glitches before the final stopped block are repaired
    toward continuation and counted; too many repairs reject the surface.
    """
    mask = surface.exercise_mask
    t = surface.grid.t
    nt = surface.grid.nt
    repaired = 0
    c = np.empty(surface.grid.nx)
    for i in range(surface.grid.nx):
        col = mask[:, i]
        false_idx = np.where(~col)[0]
        start = false_idx[-1] + 1 if false_idx.size else 0
        repaired += int(np.count_nonzero(col[:start]))
        c[i] = t[start] if start <= nt else t[nt]
    if repaired > max_repair_fraction * mask.size:
        raise DataQualityError(
            f"{repaired} up-set violations exceed {max_repair_fraction:.1%} of "
            f"{mask.size} nodes; solver output rejected")
    return BoundaryProfile(x=surface.grid.x.copy(), c=c, horizon=float(t[-1]),
                           dt=surface.grid.dt, repaired_nodes=repaired)


def detect_features(profile: BoundaryProfile, regions: HahnClassification,
                    spike_window: int = 3) -> BoundaryProfile:
    """Record continuation bays at positive atoms and stopping spikes at negative ones.

    A bay is an atom column that never stops before maturity while early
    stopping resumes on both sides; the flank search walks outward because the
    grid keeps c = T on a sleeve of width ~ sigma * sqrt(dt) around the atom
    (the first backward step already lifts the value there).  A spike is an
    atom column that stops strictly before maturity while every node in the
    flanking window never stops early.
    """
    T, dt = profile.horizon, profile.dt
    feats = []
    n = len(profile.x)

    def first_early_stop(i: int, step: int):
        j = i + step
        while 0 < j < n - 1:
            if profile.c[j] < T - dt:
                return j
            j += step
        return None

    for i, lab in enumerate(regions.labels):
        if lab == RegionLabel.ATOM_POS:
            if not 0 < i < n - 1 or profile.c[i] < T:
                continue
            jl = first_early_stop(i, -1)
            jr = first_early_stop(i, +1)
            if jl is not None and jr is not None:
                feats.append(BoundaryFeature(
                    kind="BAY", location=float(profile.x[i]),
                    evidence={"c_atom": float(profile.c[i]),
                              "c_left": float(profile.c[jl]),
                              "c_right": float(profile.c[jr]),
                              "flank_width_left": i - jl,
                              "flank_width_right": jr - i}))
        elif lab == RegionLabel.ATOM_NEG:
            lo = max(i - spike_window, 0)
            hi = min(i + spike_window, n - 1)
            flank = np.concatenate((profile.c[lo:i], profile.c[i + 1:hi + 1]))
            if profile.c[i] < T and np.all(flank >= T):
                feats.append(BoundaryFeature(
                    kind="SPIKE", location=float(profile.x[i]),
                    evidence={"c_atom": float(profile.c[i]),
                              "flank_window": spike_window,
                              "flank_min_c": float(np.min(flank))}))
    profile.features = feats
    return profile


@dataclass(frozen=True)
class MonotonicityReport:
    a_star: float
    b_star: float
    i_a: int
    i_b: int
    strict_down: bool
    strict_up: bool
    flat_at_zero: bool


def check_monotonicity(profile: BoundaryProfile, regions: HahnClassification,
                       window: tuple[float, float]) -> MonotonicityReport:
    """Minimizer interval and strict-monotonicity flags of c on a NEG0 window."""
    i_lo = profile.index_of(window[0])
    i_hi = profile.index_of(window[1])
    if i_hi <= i_lo:
        raise PreconditionError("window does not span any grid nodes")
    if not regions.is_neg0_slice(i_lo, i_hi):
        raise PreconditionError("window is not entirely inside a NEG0 region")
    c = profile.c[i_lo:i_hi + 1]
    cmin = np.min(c)
    at_min = np.where(np.abs(c - cmin) <= 1e-14 * (1.0 + abs(cmin)))[0]
    i_a, i_b = int(at_min[0]), int(at_min[-1])
    dt = profile.dt
    tol = 1e-9 * dt

    def strictly(seg: np.ndarray, sign: float) -> bool:
        if len(seg) < 2:
            return True
        steps = sign * np.diff(seg)
        return bool(np.all(steps >= dt - tol))

    strict_down = strictly(c[: i_a + 1], -1.0)
    strict_up = strictly(c[i_b:], +1.0)
    flat_at_zero = bool(i_a < i_b and cmin <= tol)
    if i_a > 0:
        profile.monotone_segments.append(
            MonotoneSegment(i_lo, i_lo + i_a, "down", strict_down))
    if i_b < len(c) - 1:
        profile.monotone_segments.append(
            MonotoneSegment(i_lo + i_b, i_hi, "up", strict_up))
    profile.minimizer_interval = (float(profile.x[i_lo + i_a]),
                                  float(profile.x[i_lo + i_b]))
    return MonotonicityReport(a_star=float(profile.x[i_lo + i_a]),
                              b_star=float(profile.x[i_lo + i_b]),
                              i_a=i_lo + i_a, i_b=i_lo + i_b,
                              strict_down=strict_down, strict_up=strict_up,
                              flat_at_zero=flat_at_zero)


def _invert_segment(profile: BoundaryProfile, seg: MonotoneSegment
                    ) -> tuple[np.ndarray, np.ndarray]:
    x = profile.x[seg.i0:seg.i1 + 1]
    c = profile.c[seg.i0:seg.i1 + 1]
    if seg.direction == "down":
        x, c = x[::-1], c[::-1]
    if np.any(np.diff(c) < 0):
        raise InversionError("c is not monotone on the claimed segment")
    t_nodes = np.arange(math.ceil(c[0] / profile.dt),
                        math.floor(c[-1] / profile.dt) + 1) * profile.dt
    t_nodes = t_nodes[(t_nodes >= c[0]) & (t_nodes < profile.horizon)]
    if t_nodes.size == 0:
        return np.empty(0), np.empty(0)
    b = np.interp(t_nodes, c, x)
    db = np.diff(b)
    if db.size and not (np.all(db >= -1e-12) or np.all(db <= 1e-12)):
        raise InversionError("inverted boundary is not monotone")
    return t_nodes, b


def invert_boundary(profile: BoundaryProfile) -> BoundaryProfile:
    """Populate b1 (from the decreasing-c segment) and b2 (increasing) per time node.

    Returns empty arrays for a segment whose c never crosses below the horizon.
    """
    for seg in profile.monotone_segments:
        if not seg.strict:
            continue
        t_b, b = _invert_segment(profile, seg)
        if seg.direction == "down":
            profile.b1 = (t_b, b)
        else:
            profile.b2 = (t_b, b)
    return profile


def resolvable_strict_window(profile: BoundaryProfile, atom_loc: float,
                             side: str, tau_cap: float,
                             outer: Optional[float] = None) -> tuple[float, float]:
    """x-window on one side of an atom where per-node strictness is resolvable.

    Within tau_cap of maturity the boundary sweeps more than one cell per time
    step, so adjacent nodes can share c; the window stops where c first drops
    below T - tau_cap when walking away from the atom.
    """
    i_atom = profile.index_of(atom_loc)
    step = -1 if side == "below" else +1
    j = i_atom + step
    n = len(profile.x)
    while 0 < j < n - 1 and profile.c[j] > profile.horizon - tau_cap:
        j += step
    if not 0 < j < n - 1:
        raise PreconditionError("no resolvable window on this side of the atom")
    inner = float(profile.x[j])
    if outer is None:
        outer = float(profile.x[1] if side == "below" else profile.x[-2])
    return (min(inner, outer), max(inner, outer))


@dataclass(frozen=True)
class BoundaryPointCheck:
    t: float
    x_boundary: float
    dv_dx_jump: float          # one-sided dv/dx gap minus the g' gap
    dv_dt_jump: float          # one-sided dv/dt across the boundary
    dv_dt_continuation: float  # dv/dt one node inside the continuation region


def smooth_fit_check(surface: ValueSurface, profile: BoundaryProfile,
                     window: tuple[float, float], times: Sequence[float],
                     gain_left_deriv=None) -> list[BoundaryPointCheck]:
    """Gap of one-sided derivative approximations across the boundary.

    At each requested time the boundary column pair is located inside the
    window; the reported x-gap is the jump of one-sided dv/dx minus the jump
    of g' (zero when g is C1 there), and the t-gap is the one-sided dv/dt on
    the continuation side (the stopping side is exactly zero).
    """
    t_grid = surface.grid.t
    x = surface.grid.x
    mask = surface.exercise_mask
    v = surface.v
    dt = surface.grid.dt
    i_lo = int(np.searchsorted(x, window[0], side="left"))
    i_hi = int(np.searchsorted(x, window[1], side="right")) - 1
    checks = []
    for t_req in times:
        k = int(np.clip(round(t_req / dt), 1, surface.grid.nt - 1))
        row = mask[k, i_lo:i_hi + 1]
        flips = np.where(row[:-1] != row[1:])[0]
        if flips.size == 0:
            continue
        j = i_lo + int(flips[0])  # j stopped/continuation transition pair
        stopped_left = bool(row[int(flips[0])])
        # one-sided x-derivatives straddling the (j, j+1) cell
        d_left = (v[k, j] - v[k, j - 1]) / (x[j] - x[j - 1])
        d_right = (v[k, j + 2] - v[k, j + 1]) / (x[j + 2] - x[j + 1])
        if gain_left_deriv is not None:
            gp_left = float(gain_left_deriv(x[j]))
            gp_right = float(gain_left_deriv(x[j + 1]))
        else:
            gp_left = gp_right = 0.0
        gap_x = (d_right - d_left) - (gp_right - gp_left)
        # one-sided t-derivatives on each side
        i_stop, i_cont = (j, j + 1) if stopped_left else (j + 1, j)
        dt_stop = (v[k + 1, i_stop] - v[k, i_stop]) / dt
        dt_cont = (v[k + 1, i_cont] - v[k, i_cont]) / dt
        checks.append(BoundaryPointCheck(
            t=float(t_grid[k]), x_boundary=float(0.5 * (x[j] + x[j + 1])),
            dv_dx_jump=float(gap_x), dv_dt_jump=float(dt_cont - dt_stop),
            dv_dt_continuation=float(dt_cont)))
    return checks
