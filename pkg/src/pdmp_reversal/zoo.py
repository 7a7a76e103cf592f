"""Named models with closed forms: renewal age, generalized TCP, state-independent
jumps, reflected M/G/1 workload, and a saturating drift with a forced boundary.

Custom models can also be assembled from expression strings for use by the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import integrate, optimize, special, stats

from .errors import ModelSpecError
from .model import DECREASING, INCREASING, Atom, DriftField, JumpKernel, PdmpModel, StateSpace


@dataclass(frozen=True)
class Lifetime:
    """A positive continuous distribution F used for renewal gaps or service times."""

    name: str
    params: Mapping = field(default_factory=dict)

    FAMILIES = {
        "exp": ("rate",),
        "gamma": ("shape", "rate"),
        "weibull": ("shape", "scale"),
        "halfnormal": ("mean",),
    }

    def __post_init__(self):
        if self.name not in self.FAMILIES:
            raise ModelSpecError(f"unknown lifetime family {self.name!r}; valid: {sorted(self.FAMILIES)}")
        want = set(self.FAMILIES[self.name])
        if set(self.params) != want:
            raise ModelSpecError(f"lifetime {self.name!r} needs parameters {sorted(want)}, got {sorted(self.params)}")
        if any(not float(v) > 0 for v in self.params.values()):
            raise ModelSpecError(f"lifetime parameters must be positive: {dict(self.params)}")
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        name = obj.pop("name", None)
        return cls(name, obj)

    def to_json(self):
        return {"name": self.name, **self.params}

    @property
    def dist(self):
        p = self.params
        if self.name == "exp":
            return stats.expon(scale=1.0 / p["rate"])
        if self.name == "gamma":
            return stats.gamma(p["shape"], scale=1.0 / p["rate"])
        if self.name == "weibull":
            return stats.weibull_min(p["shape"], scale=p["scale"])
        return stats.halfnorm(scale=p["mean"] * math.sqrt(math.pi / 2.0))

    @property
    def rate(self):
        return self.params["rate"] if self.name == "exp" else None

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.name == "exp":
            return np.where(x >= 0, self.rate * np.exp(-self.rate * np.maximum(x, 0.0)), 0.0)
        return self.dist.pdf(x)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.name == "exp":
            return np.where(x > 0, -np.expm1(-self.rate * np.maximum(x, 0.0)), 0.0)
        return self.dist.cdf(x)

    def sf(self, x):
        return 1.0 - self.cdf(x) if self.name != "exp" else np.where(
            np.asarray(x) > 0, np.exp(-self.rate * np.maximum(np.asarray(x, dtype=float), 0.0)), 1.0
        )

    def logsf(self, x):
        if self.name == "exp":
            return -self.rate * np.maximum(np.asarray(x, dtype=float), 0.0)
        return self.dist.logsf(x)

    def hazard(self, x):
        if self.name == "exp":
            return np.full(np.shape(x), self.rate) if np.ndim(x) else self.rate
        return np.exp(self.dist.logpdf(x) - self.dist.logsf(x))

    def isf_log(self, logq):
        """Inverse survival at probability exp(logq)."""
        if self.name == "exp":
            return -np.asarray(logq) / self.rate
        return self.dist.isf(np.exp(logq))

    def mean(self):
        return 1.0 / self.rate if self.name == "exp" else float(self.dist.mean())

    def sample(self, rng):
        if self.name == "exp":
            return rng.exponential(1.0 / self.rate)
        return float(self.dist.ppf(rng.random()))


@dataclass(frozen=True)
class ZooSpec:
    variant: str
    params: Mapping = field(default_factory=dict)


DEFAULTS = {
    "renewal_age": {"F": {"name": "exp", "rate": 1.0}},
    "tcp": {"alpha": 0.0, "beta_exp": 0.0, "g": 1.0, "lam0": 1.0, "r0": 1.0},
    "indep_jumps": {"lam0": 1.0, "r0": 1.0, "upper": 10.0},
    "reflected_mg1": {"lam0": 1.0, "F": {"name": "exp", "rate": 2.0}},
    "saturating": {"ceiling": 4.0, "gamma": 2.0, "lam0": 1.0, "jump_rate": 1.0},
}

DESCRIPTIONS = {
    "renewal_age": "age of a renewal process: r=1, lambda = hazard of F, jumps to 0",
    "tcp": "r = r0 x^alpha, lambda = lam0 x^beta_exp, multiplicative jumps x U^(1/g)",
    "indep_jumps": "r = r0, lambda = lam0, jumps uniform on [0, upper], forced at upper",
    "reflected_mg1": "M/G/1 workload: r = -1, Poisson(lam0) arrivals of F-sized work, holding at 0",
    "saturating": "r = ceiling - x, lambda = lam0, Exp(jump_rate) downward jumps, forced at gamma",
}


def zoo_spec(variant, params=None):
    """ZooSpec with defaults filled in; lifetime dicts become Lifetime objects."""
    if variant not in DEFAULTS:
        raise ModelSpecError(f"unknown zoo model {variant!r}; valid: {sorted(DEFAULTS)}")
    merged = dict(DEFAULTS[variant])
    params = dict(params or {})
    unknown = set(params) - set(merged)
    if unknown:
        raise ModelSpecError(f"unknown parameters for {variant}: {sorted(unknown)}")
    merged.update(params)
    for k, v in merged.items():
        if k == "F":
            merged[k] = v if isinstance(v, Lifetime) else Lifetime.from_json(v)
        else:
            merged[k] = float(v)
    return ZooSpec(variant, merged)


def _power(x, e):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, np.power(np.maximum(x, 1e-300), e), 0.0 if e > 0 else (1.0 if e == 0 else np.inf))


def _delta_kernel(point):
    point = float(point)
    return JumpKernel(
        density=lambda z, y: np.zeros(np.broadcast(np.asarray(z), np.asarray(y)).shape),
        cdf=lambda z, y: np.broadcast_to(np.where(np.asarray(y, dtype=float) >= point, 1.0, 0.0),
                                         np.broadcast(np.asarray(z), np.asarray(y)).shape).copy(),
        sampler=lambda z, rng: point,
        point_masses=lambda z: ((point, 1.0),),
        support=None,
        description=f"point mass at {point}",
    )


def _scale_kernel(g):
    """Multiplicative jumps x -> x U^(1/g): mu_x((0, y]) = (y/x)^g."""

    def density(z, y):
        z, y = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(y, dtype=float))
        ok = (y >= 0) & (y < z)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = g * np.power(np.where(ok, y, 1.0), g - 1.0) / np.power(np.where(ok, z, 1.0), g)
        return np.where(ok, val, 0.0)

    def cdf(z, y):
        z, y = np.broadcast_arrays(np.asarray(z, dtype=float), np.asarray(y, dtype=float))
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.clip(np.where(z > 0, y / np.where(z > 0, z, 1.0), 1.0), 0.0, 1.0)
        return np.where(y <= 0, 0.0, frac**g)

    return JumpKernel(
        density=density,
        cdf=cdf,
        sampler=lambda z, rng: z * rng.random() ** (1.0 / g),
        support=lambda z: (0.0, z),
        description=f"x -> x U^(1/{g})",
    )


def _shift_kernel(F, direction):
    """Additive jumps y = z + direction * S with S ~ F."""
    s = float(direction)

    def density(z, y):
        return F.pdf(s * (np.asarray(y, dtype=float) - np.asarray(z, dtype=float)))

    def cdf(z, y):
        d = np.asarray(y, dtype=float) - np.asarray(z, dtype=float)
        return F.cdf(d) if s > 0 else F.sf(-d)

    def support(z):
        return (z, math.inf) if s > 0 else (-math.inf, z)

    return JumpKernel(
        density=density,
        cdf=cdf,
        sampler=lambda z, rng: z + s * F.sample(rng),
        support=support,
        description=f"x -> x {'+' if s > 0 else '-'} {F.name}",
    )


def _uniform_kernel(lo, hi):
    w = hi - lo
    return JumpKernel(
        density=lambda z, y: np.where((np.asarray(y) >= lo) & (np.asarray(y) <= hi), 1.0 / w, 0.0)
        * np.ones(np.broadcast(np.asarray(z), np.asarray(y)).shape),
        cdf=lambda z, y: np.clip((np.asarray(y, dtype=float) - lo) / w, 0.0, 1.0)
        * np.ones(np.broadcast(np.asarray(z), np.asarray(y)).shape),
        sampler=lambda z, rng: lo + w * rng.random(),
        support=lambda z: (lo, hi),
        description=f"uniform on [{lo}, {hi}]",
    )


def _build_renewal(p):
    F = p["F"]
    drift = DriftField(
        rate=lambda x: np.ones(np.shape(x)) if np.ndim(x) else 1.0,
        orientation=INCREASING,
        potential=lambda x: x,
        potential_inv=lambda s: s,
        derivative=lambda x: np.zeros(np.shape(x)) if np.ndim(x) else 0.0,
    )
    return dict(
        space=StateSpace(0.0, math.inf),
        drift=drift,
        intensity=F.hazard,
        kernel=_delta_kernel(0.0),
        hazard_potential=lambda x: -F.logsf(x),
        hazard_potential_inv=lambda h: F.isf_log(-np.asarray(h)),
    )


def _tcp_exponents(p):
    a, b = p["alpha"], p["beta_exp"]
    return a, b, b - a + 1.0


def _build_tcp(p):
    a, b, k = _tcp_exponents(p)
    lam0, r0, g = p["lam0"], p["r0"], p["g"]
    if not b > a - 1:
        raise ModelSpecError(f"tcp requires beta_exp > alpha - 1 (got beta_exp={b}, alpha={a})")
    if a > 1:
        raise ModelSpecError("tcp requires alpha <= 1 (larger alpha explodes in finite time)")
    if min(lam0, r0, g) <= 0:
        raise ModelSpecError("tcp requires lam0, r0, g > 0")
    if a == 1:
        P = lambda x: np.log(np.asarray(x, dtype=float)) / r0  # noqa: E731
        Pinv = lambda s: np.exp(r0 * np.asarray(s))  # noqa: E731
    else:
        P = lambda x: _power(x, 1.0 - a) / (r0 * (1.0 - a))  # noqa: E731
        Pinv = lambda s: _power(np.asarray(s) * r0 * (1.0 - a), 1.0 / (1.0 - a))  # noqa: E731
    c = lam0 / (r0 * k)
    drift = DriftField(
        rate=lambda x: r0 * _power(x, a),
        orientation=INCREASING,
        potential=P,
        potential_inv=Pinv,
        derivative=lambda x: r0 * a * _power(x, a - 1.0) if a != 0 else np.zeros(np.shape(x)),
    )
    return dict(
        space=StateSpace(0.0, math.inf),
        drift=drift,
        intensity=lambda x: lam0 * _power(x, b),
        kernel=_scale_kernel(g),
        hazard_potential=lambda x: c * _power(x, k),
        hazard_potential_inv=lambda h: _power(np.asarray(h) / c, 1.0 / k),
    )


def _build_indep(p):
    lam0, r0, b = p["lam0"], p["r0"], p["upper"]
    if min(lam0, r0, b) <= 0:
        raise ModelSpecError("indep_jumps requires lam0, r0, upper > 0")
    kern = _uniform_kernel(0.0, b)
    drift = DriftField(
        rate=lambda x: r0 * np.ones(np.shape(x)) if np.ndim(x) else r0,
        orientation=INCREASING,
        potential=lambda x: np.asarray(x) / r0,
        potential_inv=lambda s: r0 * np.asarray(s),
        derivative=lambda x: np.zeros(np.shape(x)) if np.ndim(x) else 0.0,
    )
    return dict(
        space=StateSpace(0.0, b, active_boundary=True),
        drift=drift,
        intensity=lambda x: lam0 * np.ones(np.shape(x)) if np.ndim(x) else lam0,
        kernel=kern,
        boundary_kernel=kern,
        hazard_potential=lambda x: lam0 * np.asarray(x) / r0,
        hazard_potential_inv=lambda h: r0 * np.asarray(h) / lam0,
        window=(0.0, b),
    )


def _build_mg1(p):
    lam0, F = p["lam0"], p["F"]
    rho = lam0 * F.mean()
    if lam0 <= 0:
        raise ModelSpecError("reflected_mg1 requires lam0 > 0")
    if not rho < 1:
        raise ModelSpecError(f"reflected_mg1 requires rho = lam0 * mean(F) < 1 (got {rho})")
    drift = DriftField(
        rate=lambda x: -np.ones(np.shape(x)) if np.ndim(x) else -1.0,
        orientation=DECREASING,
        potential=lambda x: -np.asarray(x),
        potential_inv=lambda s: -np.asarray(s),
        derivative=lambda x: np.zeros(np.shape(x)) if np.ndim(x) else 0.0,
    )
    return dict(
        space=StateSpace(0.0, math.inf, active_boundary=True, atoms=(Atom(0.0, lam0),)),
        drift=drift,
        intensity=lambda x: lam0 * np.ones(np.shape(x)) if np.ndim(x) else lam0,
        kernel=_shift_kernel(F, +1),
        hazard_potential=lambda x: -lam0 * np.asarray(x),
        hazard_potential_inv=lambda h: -np.asarray(h) / lam0,
    )


def _build_saturating(p):
    a, gam, lam0, th = p["ceiling"], p["gamma"], p["lam0"], p["jump_rate"]
    if not gam < a:
        raise ModelSpecError("saturating requires gamma < ceiling")
    if min(lam0, th) <= 0:
        raise ModelSpecError("saturating requires lam0, jump_rate > 0")
    kern = _shift_kernel(Lifetime("exp", {"rate": th}), -1)
    P = lambda x: -np.log(a - np.asarray(x, dtype=float))  # noqa: E731
    Pinv = lambda s: a - np.exp(-np.asarray(s, dtype=float))  # noqa: E731
    drift = DriftField(
        rate=lambda x: a - np.asarray(x, dtype=float),
        orientation=INCREASING,
        flow=lambda x, t: a - (a - x) * math.exp(-t),
        potential=P,
        potential_inv=Pinv,
        derivative=lambda x: -np.ones(np.shape(x)) if np.ndim(x) else -1.0,
    )
    return dict(
        space=StateSpace(-math.inf, gam, active_boundary=True),
        drift=drift,
        intensity=lambda x: lam0 * np.ones(np.shape(x)) if np.ndim(x) else lam0,
        kernel=kern,
        boundary_kernel=kern,
        hazard_potential=lambda x: lam0 * P(x),
        hazard_potential_inv=lambda h: Pinv(np.asarray(h) / lam0),
    )


_BUILDERS = {
    "renewal_age": _build_renewal,
    "tcp": _build_tcp,
    "indep_jumps": _build_indep,
    "reflected_mg1": _build_mg1,
    "saturating": _build_saturating,
}


def zoo_build(spec):
    """Fully wired PdmpModel for a ZooSpec (or a variant name with defaults)."""
    if isinstance(spec, str):
        spec = zoo_spec(spec)
    parts = _BUILDERS[spec.variant](spec.params)
    return PdmpModel(name=spec.variant, zoo=spec, **parts)


# ---------------------------------------------------------------- closed forms


def tcp_density_constants(p):
    """(C, a, c, k) with density C x^a exp(-c x^k)."""
    al, _, k = _tcp_exponents(p)
    a = p["g"] - al
    c = p["lam0"] / (p["r0"] * k)
    s = (a + 1.0) / k
    C = k * c**s / special.gamma(s)
    return C, a, c, k


def closed_form_density(spec, x):
    """Stationary density values where a closed form exists, else None.

    Returns (values, atoms) with atoms a list of (location, mass).
    """
    p = spec.params
    x = np.asarray(x, dtype=float)
    if spec.variant == "renewal_age":
        F = p["F"]
        return F.sf(x) / F.mean(), []
    if spec.variant == "tcp":
        C, a, c, k = tcp_density_constants(p)
        return C * _power(x, a) * np.exp(-c * _power(x, k)), []
    if spec.variant == "indep_jumps":
        lam0, r0, b = p["lam0"], p["r0"], p["upper"]
        q = lam0 / r0
        xi = lam0 * b / (b - (1.0 - math.exp(-q * b)) / q)
        return np.where((x >= 0) & (x <= b), xi / (lam0 * b) * -np.expm1(-q * x), 0.0), []
    if spec.variant == "reflected_mg1" and p["F"].name == "exp":
        lam0, mu = p["lam0"], p["F"].rate
        rho = lam0 / mu
        return lam0 * (1.0 - rho) * np.exp(-(mu - lam0) * x), [(0.0, 1.0 - rho)]
    return None


def closed_form_tail_point(spec, tail):
    """A point beyond which the stationary law has mass ``tail`` (None if unknown)."""
    p = spec.params
    if spec.variant == "tcp":
        C, a, c, k = tcp_density_constants(p)
        return float((special.gammainccinv((a + 1.0) / k, tail) / c) ** (1.0 / k))
    if spec.variant == "renewal_age":
        F = p["F"]
        m = F.mean()
        if F.name == "exp":
            return -math.log(tail) / F.rate
        f = lambda u: integrate.quad(lambda s: float(F.sf(s)), u, np.inf)[0] / m - tail  # noqa: E731
        hi = float(F.dist.isf(tail))
        while f(hi) > 0:
            hi *= 2.0
        return optimize.brentq(f, 0.0, hi, xtol=1e-10)
    if spec.variant == "reflected_mg1" and p["F"].name == "exp":
        lam0, mu = p["lam0"], p["F"].rate
        return math.log(lam0 / mu / tail) / (mu - lam0)
    return None


def tcp_reversed_intensity(p, x):
    """lambda*(x) = r0 g x^(alpha - 1) for the tcp model."""
    return p["r0"] * p["g"] * _power(x, p["alpha"] - 1.0)


def tcp_reversed_survival(p, x, y):
    """mu*_x((y, inf)) for y >= x: exp(c (x^k - y^k))."""
    _, _, k = _tcp_exponents(p)
    c = p["lam0"] / (p["r0"] * k)
    return np.exp(c * (_power(x, k) - _power(y, k)))


# ---------------------------------------------------------------- custom models


CUSTOM_KEYS = {"lower", "upper", "boundary", "drift", "intensity", "kernel", "window", "name"}
KERNEL_FAMILIES = {
    "exp_down": ("rate",),
    "exp_up": ("rate",),
    "uniform_scale": ("g",),
    "uniform": ("lo", "hi"),
    "to_point": ("point",),
}


def _expr(text):
    import sympy

    x = sympy.Symbol("x")
    try:
        expr = sympy.sympify(text, locals={"x": x})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ModelSpecError(f"cannot parse expression {text!r}: {exc}") from exc
    if expr.free_symbols - {x}:
        raise ModelSpecError(f"expression {text!r} may only use the variable x")
    f = sympy.lambdify(x, expr, "numpy")
    df = sympy.lambdify(x, sympy.diff(expr, x), "numpy")

    def vec(fn):
        def call(u):
            u = np.asarray(u, dtype=float)
            out = np.asarray(fn(u), dtype=float)
            return np.broadcast_to(out, u.shape).copy() if u.ndim else float(out)

        return call

    return vec(f), vec(df)


def custom_model(spec):
    """Model from a JSON-style dict with expression strings in x.

    Keys: lower, upper, boundary (bool), drift, intensity, kernel
    ({"family": ..., params}), optional window [lo, hi] and name.
    """
    unknown = set(spec) - CUSTOM_KEYS
    if unknown:
        raise ModelSpecError(f"unknown custom model keys: {sorted(unknown)}")
    for key in ("drift", "intensity", "kernel"):
        if key not in spec:
            raise ModelSpecError(f"custom model needs {key!r}")
    r, dr = _expr(str(spec["drift"]))
    lam, _ = _expr(str(spec["intensity"]))
    kspec = dict(spec["kernel"])
    fam = kspec.pop("family", None)
    if fam not in KERNEL_FAMILIES:
        raise ModelSpecError(f"unknown kernel family {fam!r}; valid: {sorted(KERNEL_FAMILIES)}")
    if set(kspec) != set(KERNEL_FAMILIES[fam]):
        raise ModelSpecError(f"kernel {fam!r} needs {KERNEL_FAMILIES[fam]}")
    kspec = {k: float(v) for k, v in kspec.items()}
    if fam == "exp_down":
        kern = _shift_kernel(Lifetime("exp", {"rate": kspec["rate"]}), -1)
    elif fam == "exp_up":
        kern = _shift_kernel(Lifetime("exp", {"rate": kspec["rate"]}), +1)
    elif fam == "uniform_scale":
        kern = _scale_kernel(kspec["g"])
    elif fam == "uniform":
        kern = _uniform_kernel(kspec["lo"], kspec["hi"])
    else:
        kern = _delta_kernel(kspec["point"])
    lower = float(spec.get("lower", -math.inf))
    upper = float(spec.get("upper", math.inf))
    boundary = bool(spec.get("boundary", False))
    probe = [v for v in (lower, upper) if math.isfinite(v)]
    mid = 0.5 * (lower + upper) if len(probe) == 2 else (probe[0] + (1.0 if probe[0] == lower else -1.0) if probe else 0.0)
    orientation = INCREASING if r(mid) > 0 else DECREASING
    window = spec.get("window")
    return PdmpModel(
        name=str(spec.get("name", "custom")),
        space=StateSpace(lower, upper, active_boundary=boundary),
        drift=DriftField(rate=r, orientation=orientation, derivative=dr),
        intensity=lam,
        kernel=kern,
        boundary_kernel=kern if boundary else None,
        window=None if window is None else (float(window[0]), float(window[1])),
    )
