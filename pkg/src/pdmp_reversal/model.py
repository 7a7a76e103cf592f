"""One-dimensional PDMP models: state space, drift, intensity and jump kernel.

A model is immutable once built. Flow, travel time and hazard computations use
closed forms where the model supplies them (time and hazard potentials) and fall
back on adaptive integration otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize

from .errors import BoundaryCrossedError, ModelSpecError

INCREASING = "increasing"
DECREASING = "decreasing"

FLOW_RTOL = 1e-10
FLOW_ATOL = 1e-12
HIT_TOL = 1e-12


@dataclass(frozen=True)
class Atom:
    """A holding state: the process sits at ``location`` for an Exp(exit_rate) time."""

    location: float
    exit_rate: float


@dataclass(frozen=True)
class StateSpace:
    lower: float = -math.inf
    upper: float = math.inf
    active_boundary: bool = False
    atoms: tuple = ()

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ModelSpecError(f"state space needs lower < upper, got [{self.lower}, {self.upper}]")
        for a in self.atoms:
            if not self.lower <= a.location <= self.upper:
                raise ModelSpecError(f"atom at {a.location} lies outside [{self.lower}, {self.upper}]")

    def contains(self, x):
        return self.lower <= x <= self.upper


@dataclass(frozen=True)
class DriftField:
    """Drift r(x) together with optional closed forms.

    ``potential`` is a time potential P with P' = 1/r oriented so that it grows
    along the flow: the travel time from x to a downstream y is P(y) - P(x).
    """

    rate: Callable
    orientation: str = INCREASING
    flow: Optional[Callable] = None
    potential: Optional[Callable] = None
    potential_inv: Optional[Callable] = None
    derivative: Optional[Callable] = None

    def __post_init__(self):
        if self.orientation not in (INCREASING, DECREASING):
            raise ModelSpecError(f"unknown orientation {self.orientation!r}")

    @property
    def sign(self):
        return 1.0 if self.orientation == INCREASING else -1.0


def _no_atoms(z):
    return ()


@dataclass(frozen=True)
class JumpKernel:
    """Jump law mu_z: an absolutely continuous part plus optional point masses.

    ``density(z, y)`` and ``cdf(z, y) = mu_z((-inf, y])`` broadcast over arrays.
    ``point_masses(z)`` returns ``((location, mass), ...)`` for the singular part.
    """

    density: Callable
    cdf: Callable
    sampler: Callable
    point_masses: Callable = _no_atoms
    support: Optional[Callable] = None
    description: str = ""

    def sample(self, z, rng):
        return self.sampler(z, rng)

    def has_density(self):
        return self.support is not None


@dataclass(frozen=True)
class PdmpModel:
    """Complete description of a one-dimensional PDMP.

    ``hazard_potential`` H satisfies H' = lambda/|r| oriented along the flow, so
    the cumulative hazard between x and a downstream y is H(y) - H(x).
    ``window`` is an optional finite truncation hint for grid solvers.
    """

    name: str
    space: StateSpace
    drift: DriftField
    intensity: Callable
    kernel: JumpKernel
    boundary_kernel: Optional[JumpKernel] = None
    hazard_potential: Optional[Callable] = None
    hazard_potential_inv: Optional[Callable] = None
    window: Optional[tuple] = None
    zoo: Optional[object] = field(default=None, compare=False)

    def __post_init__(self):
        b = self._boundary_end()
        if self.space.active_boundary:
            if not math.isfinite(b):
                raise ModelSpecError("an active boundary must be a finite endpoint in the flow direction")
            if self.boundary_kernel is None and self.atom_at(b) is None:
                raise ModelSpecError("active boundary needs a boundary kernel or a holding atom")
        elif self.boundary_kernel is not None:
            raise ModelSpecError("boundary kernel given but the boundary is not active")
        for a in self.space.atoms:
            if a.location != self.boundary_point:
                raise ModelSpecError("holding atoms are only supported at the active boundary")
            if not a.exit_rate > 0:
                raise ModelSpecError("atom exit rate must be positive")

    def _boundary_end(self):
        return self.space.upper if self.increasing else self.space.lower

    @property
    def increasing(self):
        return self.drift.orientation == INCREASING

    @property
    def boundary_point(self):
        """Active boundary point (gamma), or None."""
        return self._boundary_end() if self.space.active_boundary else None

    @property
    def passive_point(self):
        """Finite endpoint upstream of the flow (the reversed active boundary candidate)."""
        p = self.space.lower if self.increasing else self.space.upper
        return p if math.isfinite(p) else None

    def atom_at(self, location):
        for a in self.space.atoms:
            if a.location == location:
                return a
        return None

    def r(self, x):
        return self.drift.rate(x)

    def lam(self, x):
        return self.intensity(x)

    def r_prime(self, x):
        if self.drift.derivative is not None:
            return self.drift.derivative(x)
        x = np.asarray(x, dtype=float)
        h = 1e-4 * np.maximum(1.0, np.abs(x))
        r = self.drift.rate
        return (-r(x + 2 * h) + 8 * r(x + h) - 8 * r(x - h) + r(x - 2 * h)) / (12 * h)

    def with_name(self, name):
        return replace(self, name=name)


def _numeric_flow(model, x, t):
    sol = integrate.solve_ivp(
        lambda _t, y: [float(model.r(y[0]))],
        (0.0, t),
        [x],
        method="RK45",
        rtol=FLOW_RTOL,
        atol=FLOW_ATOL,
    )
    if not sol.success:
        raise RuntimeError(f"flow integration failed: {sol.message}")
    return float(sol.y[0, -1])


def _flow_unchecked(model, x, t):
    d = model.drift
    if d.flow is not None:
        return float(d.flow(x, t))
    if d.potential is not None and d.potential_inv is not None:
        return float(d.potential_inv(d.potential(x) + t))
    return _numeric_flow(model, x, t)


def flow_advance(model, x, t):
    """Position phi(x, t) of the deterministic flow started in x."""
    if t == 0:
        return float(x)
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    tau = hit_time(model, x)
    if t >= tau:
        raise BoundaryCrossedError(f"flow from {x} reaches the boundary at t={tau} < {t}", tau)
    return _flow_unchecked(model, x, t)


def hit_time(model, x):
    """Time tau(x) for the flow from x to reach the active boundary (inf if none)."""
    b = model.boundary_point
    if b is None:
        return math.inf
    if x == b:
        return 0.0
    d = model.drift
    if d.potential is not None:
        return float(d.potential(b) - d.potential(x))
    # bracket by doubling, then bisect on the numerically integrated flow
    s = d.sign

    def past(t):
        try:
            y = _numeric_flow(model, x, t)
        except RuntimeError:
            return True
        return s * (y - b) >= 0

    hi = 1.0
    while not past(hi):
        hi *= 2.0
        if hi > 1e12:
            return math.inf
    lo = 0.0
    while hi - lo > HIT_TOL * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if past(mid):
            hi = mid
        else:
            lo = mid
        if abs(_numeric_flow(model, x, lo) - b) <= HIT_TOL:
            break
    return hi


def travel_time(model, x, y):
    """Time t(x, y) the flow needs from x to y; inf if y is not downstream."""
    s = model.drift.sign
    if s * (y - x) < 0:
        return math.inf
    if x == y:
        return 0.0
    d = model.drift
    if d.potential is not None:
        return float(d.potential(y) - d.potential(x))
    val, _ = integrate.quad(lambda u: 1.0 / abs(float(model.r(u))), min(x, y), max(x, y), limit=200)
    return val


def _hazard_between(model, x, y):
    """Integral of lambda/|r| along the flow from x to the downstream point y."""
    if x == y:
        return 0.0
    if model.hazard_potential is not None:
        return float(model.hazard_potential(y) - model.hazard_potential(x))
    lo, hi = min(x, y), max(x, y)
    val, _ = integrate.quad(
        lambda u: float(model.lam(u)) / abs(float(model.r(u))), lo, hi, limit=200, epsabs=1e-12, epsrel=1e-12
    )
    return val


def cumulative_hazard(model, x, t):
    """H(t | x): integrated intensity along the flow from x during [0, t]."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    if t == 0:
        return 0.0
    tau = hit_time(model, x)
    if t > tau:
        raise BoundaryCrossedError(f"hazard requested past the boundary time {tau}", tau)
    y = model.boundary_point if t == tau else _flow_unchecked(model, x, t)
    return _hazard_between(model, x, y)


def hazard_inverse(model, x, e):
    """Downstream state y with hazard(x -> y) = e, or None if the boundary (or
    the end of the state space) comes first."""
    end = model.boundary_point
    if end is None:
        end = model.space.upper if model.increasing else model.space.lower
    if model.hazard_potential is not None and model.hazard_potential_inv is not None:
        target = model.hazard_potential(x) + e
        if math.isfinite(end) and target >= model.hazard_potential(end):
            return None
        return float(model.hazard_potential_inv(target))
    s = model.drift.sign
    if math.isfinite(end):
        if _hazard_between(model, x, end) <= e:
            return None
        hi = end
    else:
        step = 1.0
        hi = x + s * step
        while _hazard_between(model, x, hi) < e:
            step *= 2.0
            hi = x + s * step
            if step > 1e15:
                return None
    return optimize.brentq(lambda y: _hazard_between(model, x, y) - e, min(x, hi), max(x, hi), xtol=1e-14, rtol=4 * np.finfo(float).eps)


def mirror_model(model):
    """The same process observed through x -> -x.

    The mirrored model has the opposite orientation; densities, rates and
    travel times transform isometrically.
    """
    d = model.drift
    k = model.kernel

    def mirror_kernel(kern):
        if kern is None:
            return None

        def cdf(z, y, _k=kern):
            # P(-Y <= y) = 1 - P(Y < -y) = 1 - cdf(-z, -y) + mass at -y
            z, y = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(y, dtype=float))
            out = 1.0 - np.asarray(_k.cdf(-z, -y), dtype=float)
            if _k.point_masses is not _no_atoms:
                extra = np.zeros(z.shape)
                for ix in np.ndindex(z.shape):
                    extra[ix] = sum(m for loc, m in _k.point_masses(-z[ix]) if loc == -y[ix])
                out = out + extra
            return out

        sup = None
        if kern.support is not None:

            def sup(z, _k=kern):
                lo, hi = _k.support(-z)
                return -hi, -lo

        return JumpKernel(
            density=lambda z, y, _k=kern: _k.density(-np.asarray(z), -np.asarray(y)),
            cdf=cdf,
            sampler=lambda z, rng, _k=kern: -_k.sample(-z, rng),
            point_masses=lambda z, _k=kern: tuple((-loc, m) for loc, m in _k.point_masses(-z)),
            support=sup,
            description=f"mirror of {kern.description}",
        )

    drift = DriftField(
        rate=lambda y: -np.asarray(d.rate(-np.asarray(y))),
        orientation=DECREASING if model.increasing else INCREASING,
        flow=None if d.flow is None else (lambda y, t: -d.flow(-y, t)),
        potential=None if d.potential is None else (lambda y: d.potential(-np.asarray(y))),
        potential_inv=None if d.potential_inv is None else (lambda s: -np.asarray(d.potential_inv(s))),
        derivative=None if d.derivative is None else (lambda y: d.derivative(-np.asarray(y))),
    )
    space = StateSpace(
        lower=-model.space.upper,
        upper=-model.space.lower,
        active_boundary=model.space.active_boundary,
        atoms=tuple(Atom(-a.location, a.exit_rate) for a in model.space.atoms),
    )
    H, Hinv = model.hazard_potential, model.hazard_potential_inv
    return PdmpModel(
        name=f"mirror({model.name})",
        space=space,
        drift=drift,
        intensity=lambda y: model.intensity(-np.asarray(y)),
        kernel=mirror_kernel(k),
        boundary_kernel=mirror_kernel(model.boundary_kernel),
        hazard_potential=None if H is None else (lambda y: H(-np.asarray(y))),
        hazard_potential_inv=None if Hinv is None else (lambda h: -np.asarray(Hinv(h))),
        window=None if model.window is None else (-model.window[1], -model.window[0]),
        zoo=None,
    )


@dataclass(frozen=True)
class Diagnostic:
    check: str
    status: str  # "pass", "warn", "fail" or "assumed"
    detail: str = ""


def sample_points(model, k=7):
    """A few interior states used by the diagnostic checks."""
    lo, hi = model.window if model.window is not None else (model.space.lower, model.space.upper)
    lo = lo if math.isfinite(lo) else (hi - 10.0 if math.isfinite(hi) else -5.0)
    hi = hi if math.isfinite(hi) else lo + 10.0
    return list(np.linspace(lo, hi, k + 2)[1:-1])


def kernel_mass(model, kern, z):
    """Total mass of mu_z: integrated density plus point masses."""
    total = sum(m for _, m in kern.point_masses(z))
    if kern.support is not None:
        lo, hi = kern.support(z)
        lo, hi = max(lo, model.space.lower), min(hi, model.space.upper)
        if hi > lo:
            val, _ = integrate.quad(
                lambda y: float(kern.density(z, y)), lo, hi, limit=400, epsabs=1e-13, epsrel=1e-12
            )
            total += val
    return total


def validate_model(model, tol=1e-8):
    """Run the checkable model conditions; returns a list of Diagnostic."""
    out = []
    pts = sample_points(model)

    bad = [(z, kernel_mass(model, model.kernel, z)) for z in pts]
    bad = [(z, m) for z, m in bad if abs(m - 1.0) > tol]
    out.append(
        Diagnostic("kernel_normalization", "fail" if bad else "pass", "; ".join(f"mass {m:.6g} at {z:.4g}" for z, m in bad))
    )

    zero = [z for z in pts if any(loc == z and m > 0 for loc, m in model.kernel.point_masses(z))]
    out.append(Diagnostic("no_zero_jumps", "fail" if zero else "pass", ", ".join(map(str, zero))))

    nonint = []
    for z in pts:
        try:
            eps = min(1e-3, 0.5 * hit_time(model, z))
            if not math.isfinite(cumulative_hazard(model, z, eps)):
                nonint.append(z)
        except (ValueError, ZeroDivisionError, integrate.IntegrationWarning):
            nonint.append(z)
    out.append(Diagnostic("hazard_local_integrability", "fail" if nonint else "pass", ", ".join(map(str, nonint))))

    d = model.drift
    if d.flow is not None or d.potential is not None:
        worst = 0.0
        for z in pts:
            tau = hit_time(model, z)
            s, t = (0.3, 0.45) if not math.isfinite(tau) else (0.3 * tau, 0.45 * tau)
            a = _flow_unchecked(model, _flow_unchecked(model, z, t), s)
            b = _flow_unchecked(model, z, s + t)
            worst = max(worst, abs(a - b))
        out.append(Diagnostic("flow_property", "pass" if worst <= 1e-10 else "fail", f"max residual {worst:.3g}"))
    else:
        out.append(Diagnostic("flow_property", "pass", "numerical flow"))

    lo, hi = pts[0], pts[-1]
    grid = np.linspace(lo, hi, 401)
    r = np.asarray(model.r(grid), dtype=float) * d.sign
    i = int(np.argmin(r))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(lambda u: float(model.r(u)) * d.sign, bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-12})
    rmin = min(float(r.min()), float(res.fun))
    sign_ok = rmin > 1e-8 * float(np.max(np.abs(r)))
    out.append(
        Diagnostic("drift_sign", "pass" if sign_ok else "warn", "" if sign_ok else f"r vanishes or has wrong sign in [{lo:.4g}, {hi:.4g}]")
    )

    out.append(Diagnostic("stationary_existence", "assumed", "existence of a stationary law is not checked"))
    out.append(Diagnostic("no_boundary_cascade", "assumed", "jumps from the boundary are assumed not to cascade"))
    return out
