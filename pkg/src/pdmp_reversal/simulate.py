"""Path simulation by hazard inversion, path reversal and exact occupation times.

Random streams: every path owns a PCG64 generator. A batch with root seed s
spawns child seeds with ``numpy.random.SeedSequence(s).spawn(n)``; each
child's first 64-bit state word is the path seed recorded in the trajectory,
so any single path can be regenerated from its own seed.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .errors import ExplosionError
from .model import _flow_unchecked, hazard_inverse, hit_time, travel_time

JUMP = "jump"
FORCED = "forced"
ATOM_ENTER = "atom_enter"
ATOM_EXIT = "atom_exit"
KINDS = (JUMP, FORCED, ATOM_ENTER, ATOM_EXIT)

DEFAULT_MAX_EVENTS = 10_000_000
STATIONARY = "stationary"


@dataclass(frozen=True, slots=True)
class JumpEvent:
    """One event at ``time``: ``pre`` is the left limit W, ``post`` the new state Q.

    Continuous atom transitions (the flow reaching a holding state, or leaving
    it without a jump) carry ``pre == post``.
    """

    time: float
    pre: float
    post: float
    kind: str = JUMP

    @property
    def forced(self):
        return self.kind == FORCED

    @property
    def is_jump(self):
        return self.pre != self.post

    @property
    def voluntary(self):
        """A jump triggered by the interior intensity (possibly landing on an atom)."""
        return self.kind in (JUMP, ATOM_ENTER) and self.pre != self.post


@dataclass(frozen=True)
class Trajectory:
    start_state: float
    end_state: float
    horizon: float
    events: tuple
    atom_intervals: tuple = ()  # (location, entry time, exit time)
    seed: Optional[int] = None
    boundary: Optional[float] = None
    passive_boundary: Optional[float] = None
    reversed: bool = False
    model: object = field(default=None, compare=False, repr=False)

    @property
    def n_events(self):
        return len(self.events)

    def starts_in_atom(self):
        return any(enter == 0.0 for _, enter, _ in self.atom_intervals)


def sample_first_jump(model, x, rng):
    """(time, forced) of the first jump from x; time is inf if none ever happens."""
    y = hazard_inverse(model, x, rng.exponential())
    if y is None:
        tau = hit_time(model, x)
        return tau, math.isfinite(tau)
    return travel_time(model, x, y), False


def draw_stationary(density, rng):
    """Initial state from a GridDensity: (state, in_atom). Atoms are tried first."""
    u = rng.random()
    for loc, mass in density.atoms:
        if u < mass:
            return float(loc), True
        u -= mass
    x = np.asarray(density.grid, dtype=float)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (density.values[1:] + density.values[:-1]) * np.diff(x))])
    v = rng.random() * cum[-1]
    i = int(np.clip(np.searchsorted(cum, v, side="right") - 1, 0, len(x) - 2))
    # invert the piecewise linear density exactly within the cell
    a, b, h = density.values[i], density.values[i + 1], x[i + 1] - x[i]
    rem = v - cum[i]
    slope = (b - a) / h
    if abs(slope) * h < 1e-12 * max(a, 1e-300):
        s = rem / a if a > 0 else 0.5 * h
    else:
        disc = max(a * a + 2.0 * slope * rem, 0.0)
        s = 2.0 * rem / (a + math.sqrt(disc)) if a + math.sqrt(disc) > 0 else 0.5 * h
    return float(min(x[i] + s, x[i + 1])), False


def simulate_path(model, init, T, seed, density=None, max_events=DEFAULT_MAX_EVENTS):
    """Simulate on [0, T] from ``init`` (a state, or ``"stationary"`` with a density)."""
    if not T > 0:
        raise ValueError("horizon must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    if isinstance(init, str):
        if init != STATIONARY or density is None:
            raise ValueError("stationary initialization needs init='stationary' and a density")
        x, in_atom = draw_stationary(density, rng)
    else:
        x = float(init)
        atom = model.atom_at(x)
        in_atom = atom is not None and x == model.boundary_point
    start = x
    t = 0.0
    events = []
    intervals = []
    entered = 0.0
    b = model.boundary_point
    while True:
        if len(events) > max_events:
            raise ExplosionError(f"more than {max_events} events before T={T} (reached t={t})")
        if in_atom:
            atom = model.atom_at(x)
            hold = rng.exponential(1.0 / atom.exit_rate)
            if t + hold >= T:
                intervals.append((x, entered, T))
                break
            t += hold
            post = float(model.kernel.sample(x, rng))
            events.append(JumpEvent(t, x, post, ATOM_EXIT))
            intervals.append((x, entered, t))
            x, in_atom = post, False
            continue
        y = hazard_inverse(model, x, rng.exponential())
        if y is None:
            dt = hit_time(model, x)
            if t + dt >= T:
                x = _flow_unchecked(model, x, T - t)
                break
            t += dt
            if model.atom_at(b) is not None:
                events.append(JumpEvent(t, b, b, ATOM_ENTER))
                x, in_atom, entered = b, True, t
            else:
                post = float(model.boundary_kernel.sample(b, rng))
                events.append(JumpEvent(t, b, post, FORCED))
                x = post
            continue
        dt = travel_time(model, x, y)
        if t + dt >= T:
            x = _flow_unchecked(model, x, T - t)
            break
        t += dt
        post = float(model.kernel.sample(y, rng))
        events.append(JumpEvent(t, float(y), post, JUMP))
        x = post
    return Trajectory(
        start_state=start,
        end_state=float(x),
        horizon=float(T),
        events=tuple(events),
        atom_intervals=tuple(intervals),
        seed=seed,
        boundary=b,
        passive_boundary=model.passive_point,
        model=model,
    )


def path_seeds(seed, n_paths):
    """Per-path 64-bit seeds derived from one root seed."""
    children = np.random.SeedSequence(seed).spawn(n_paths)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def simulate_batch(model, n_paths, T, seed, init=STATIONARY, density=None, threads=1,
                   max_events=DEFAULT_MAX_EVENTS):
    """Independent paths in seed order; ``threads`` only affects wall time."""
    seeds = path_seeds(seed, n_paths)

    def one(s):
        return simulate_path(model, init, T, s, density=density, max_events=max_events)

    if threads and threads > 1 and n_paths > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


_MIRROR_KIND = {ATOM_ENTER: ATOM_EXIT, ATOM_EXIT: ATOM_ENTER}


def reverse_path(traj):
    """The path of X*_t = X_{(T-t)-}.

    An event at u becomes an event at T - u with pre and post swapped. A jump
    of the reversed path is forced when it starts on the reversed boundary,
    which is the upstream endpoint of the original flow.
    """
    T = traj.horizon
    new_boundary = traj.passive_boundary
    events = []
    for e in reversed(traj.events):
        kind = _MIRROR_KIND.get(e.kind)
        if kind is None:
            kind = FORCED if new_boundary is not None and e.post == new_boundary else JUMP
        events.append(JumpEvent(T - e.time, e.post, e.pre, kind))
    intervals = tuple((loc, T - out, T - into) for loc, into, out in reversed(traj.atom_intervals))
    return Trajectory(
        start_state=traj.end_state,
        end_state=traj.start_state,
        horizon=T,
        events=tuple(events),
        atom_intervals=intervals,
        seed=traj.seed,
        boundary=new_boundary,
        passive_boundary=traj.boundary,
        reversed=not traj.reversed,
        model=traj.model,
    )


def flow_pieces(traj):
    """Arrays (t0, t1, x0, x1, in_atom) describing the path between events."""
    n = len(traj.events) + 1
    t0 = np.empty(n)
    t1 = np.empty(n)
    x0 = np.empty(n)
    x1 = np.empty(n)
    atom = np.zeros(n, dtype=bool)
    t, x, held = 0.0, traj.start_state, traj.starts_in_atom()
    for i, e in enumerate(traj.events):
        t0[i], t1[i], x0[i], x1[i], atom[i] = t, e.time, x, e.pre, held
        if e.kind == ATOM_ENTER:
            held = True
        elif e.kind == ATOM_EXIT:
            held = False
        t, x = e.time, e.post
    t0[-1], t1[-1], x0[-1], x1[-1], atom[-1] = t, traj.horizon, x, traj.end_state, held
    return t0, t1, x0, x1, atom


def sample_states(traj, times):
    """X_t at the given times (right-continuous), by flowing from the last event.

    Reversed paths are evaluated through their forward path at T - t, so
    they are exact away from event times."""
    times = np.asarray(times, dtype=float)
    if traj.reversed:
        return sample_states(reverse_path(traj), traj.horizon - times)
    t0, t1, x0, x1, atom = flow_pieces(traj)
    k = np.clip(np.searchsorted(t0, times, side="right") - 1, 0, len(t0) - 1)
    out = np.empty(len(times))
    for i, (j, t) in enumerate(zip(k, times)):
        out[i] = x0[j] if atom[j] or t == t0[j] else _flow_unchecked(traj.model, x0[j], t - t0[j])
    return out


def _potential_differences(model, lo, hi, edges):
    """Matrix of times spent by each monotone piece [lo_j, hi_j] in each cell."""
    P = model.drift.potential
    clipped = np.clip(edges[None, :], lo[:, None], hi[:, None])
    if P is not None:
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = np.asarray(P(clipped), dtype=float)
        return np.abs(np.diff(vals, axis=1))
    out = np.zeros((len(lo), len(edges) - 1))
    for j in range(len(lo)):
        for i in range(len(edges) - 1):
            a, b = clipped[j, i], clipped[j, i + 1]
            if b > a:
                out[j, i] = integrate.quad(lambda u: 1.0 / abs(float(model.r(u))), a, b, limit=200)[0]
    return out


@dataclass
class Occupation:
    """Time spent per cell; ``atoms`` maps atom location to holding time."""

    edges: np.ndarray
    times: np.ndarray
    atoms: dict
    outside: float
    total: float

    def density(self):
        """Normalized histogram density over the cells (atoms excluded from mass)."""
        return self.times / self.total / np.diff(self.edges)


def occupation_measure(traj, grid):
    """Exact time spent in each cell of ``grid`` (cell edges) by the path."""
    edges = np.asarray(grid, dtype=float)
    t0, t1, x0, x1, atom = flow_pieces(traj)
    dur = t1 - t0
    atoms = {}
    for loc, into, out in traj.atom_intervals:
        atoms[loc] = atoms.get(loc, 0.0) + (out - into)
    flow = ~atom & (dur > 0)
    lo, hi = np.minimum(x0[flow], x1[flow]), np.maximum(x0[flow], x1[flow])
    mat = _potential_differences(traj.model, lo, hi, edges) if flow.any() else np.zeros((0, len(edges) - 1))
    times = np.array([math.fsum(c) for c in mat.T]) if len(mat) else np.zeros(len(edges) - 1)
    inside = math.fsum(times)
    outside = max(math.fsum(dur[flow]) - inside, 0.0)
    return Occupation(edges, times, atoms, outside, traj.horizon)


def merge_occupations(parts):
    """Exact (order-independent) sum of per-path occupation histograms."""
    parts = list(parts)
    edges = parts[0].edges
    times = np.array([math.fsum(c) for c in zip(*(p.times for p in parts))])
    locs = sorted({k for p in parts for k in p.atoms})
    atoms = {k: math.fsum(p.atoms.get(k, 0.0) for p in parts) for k in locs}
    return Occupation(
        edges, times, atoms, math.fsum(p.outside for p in parts), math.fsum(p.total for p in parts)
    )


def _fmt(v):
    return "%.17g" % v


def trajectory_csv(traj):
    """CSV text with header ``t,kind,pre,post``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "kind", "pre", "post"])
    for e in traj.events:
        w.writerow([_fmt(e.time), e.kind, _fmt(e.pre), _fmt(e.post)])
    return buf.getvalue()


def trajectory_meta(traj):
    """JSON-ready metadata that, with the CSV, reconstructs the trajectory."""
    return {
        "seed": traj.seed,
        "horizon": traj.horizon,
        "start_state": traj.start_state,
        "end_state": traj.end_state,
        "boundary": traj.boundary,
        "passive_boundary": traj.passive_boundary,
        "reversed": traj.reversed,
        "atom_intervals": [list(iv) for iv in traj.atom_intervals],
        "n_events": traj.n_events,
        "n_forced": sum(e.forced for e in traj.events),
    }


def read_trajectory(text, meta, model=None):
    rows = list(csv.DictReader(io.StringIO(text)))
    events = []
    for r in rows:
        if r["kind"] not in KINDS:
            raise ValueError(f"unknown event kind {r['kind']!r}")
        events.append(JumpEvent(float(r["t"]), float(r["pre"]), float(r["post"]), r["kind"]))
    return Trajectory(
        start_state=float(meta["start_state"]),
        end_state=float(meta["end_state"]),
        horizon=float(meta["horizon"]),
        events=tuple(events),
        atom_intervals=tuple(tuple(float(v) for v in iv) for iv in meta.get("atom_intervals", [])),
        seed=meta.get("seed"),
        boundary=meta.get("boundary"),
        passive_boundary=meta.get("passive_boundary"),
        reversed=bool(meta.get("reversed", False)),
        model=model,
    )
