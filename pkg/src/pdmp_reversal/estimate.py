"""Estimators from trajectories and the empirical reversal comparison.

Sums over paths are accumulated exactly (``fractions.Fraction``) before a
single rounding, so estimates from merged batches are bit-identical to
estimates from the concatenated batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats
from scipy.interpolate import CubicSpline

from ._grid import GridQuadrature, locate
from .simulate import FORCED, flow_pieces, occupation_measure, reverse_path
from .stationary import embedded_laws, point_sources

DEFAULT_LEVEL = 0.01


@dataclass
class ComparisonReport:
    """One statistical check: pass iff value <= critical_value."""

    target: str
    statistic: str  # "KS", "L1" or "rate_z_score"
    value: float
    critical_value: float
    n_effective: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _report(target, statistic, value, critical, n_eff, **details):
    value = float(value)
    return ComparisonReport(target, statistic, value, float(critical), float(n_eff),
                            bool(value <= critical), details)


def _exact_sum(values):
    return sum((Fraction(float(v)) for v in values), Fraction(0))


def _poisson_ci(count, exposure, level):
    """Garwood interval for a Poisson rate."""
    count = np.asarray(count, dtype=float)
    a = level / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = np.where(count > 0, stats.chi2.ppf(a, 2 * count) / 2.0, 0.0) / exposure
        hi = stats.chi2.ppf(1 - a, 2 * count + 2) / 2.0 / exposure
    return lo, hi


# ---------------------------------------------------------------- intensity


@dataclass
class IntensityEstimate:
    """Voluntary jump counts and exact occupation times per cell."""

    edges: np.ndarray
    counts: np.ndarray
    occupation: list  # exact Fractions per cell
    level: float = DEFAULT_LEVEL

    @property
    def time(self):
        return np.array([float(t) for t in self.occupation])

    @property
    def occupied(self):
        return self.time > 0

    @property
    def rate(self):
        t = self.time
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(t > 0, self.counts / np.where(t > 0, t, 1.0), np.nan)

    def ci(self):
        t = self.time
        lo, hi = _poisson_ci(self.counts, np.where(t > 0, t, np.nan), self.level)
        return lo, hi

    def merge(self, other):
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("cannot merge estimates on different cells")
        return IntensityEstimate(self.edges, self.counts + other.counts,
                                 [a + b for a, b in zip(self.occupation, other.occupation)], self.level)


def _voluntary_pre_states(traj):
    return np.array([e.pre for e in traj.events if e.voluntary], dtype=float)


def estimate_intensity(trajs, edges, level=DEFAULT_LEVEL):
    """lambda-hat per cell = voluntary jumps from the cell / time in the cell.

    Cells with zero occupation have NaN rate (see ``occupied``).
    """
    edges = np.asarray(edges, dtype=float)
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    occ = [Fraction(0)] * (len(edges) - 1)
    for tr in trajs:
        pre = _voluntary_pre_states(tr)
        inside = (pre >= edges[0]) & (pre < edges[-1])
        counts += np.bincount(np.searchsorted(edges, pre[inside], side="right") - 1,
                              minlength=len(edges) - 1).astype(np.int64)
        o = occupation_measure(tr, edges)
        occ = [a + Fraction(float(t)) for a, t in zip(occ, o.times)]
    return IntensityEstimate(edges, counts, occ, level)


def _hazard_primitive(rev, lo, hi, scale=1.0):
    """Spline of Phi(u) = int_lo^u scale * lambda*(v) / |r(v)| dv over [lo, hi]."""
    x = rev.grid
    i0 = max(int(locate(x, lo)[0]) - 2, 0)
    i1 = min(int(locate(x, hi)[0]) + 2, len(x) - 1)
    xs = x[i0 : i1 + 1]
    lam = np.nan_to_num(rev.lambda_star[i0 : i1 + 1])
    r = np.abs(np.asarray(rev.forward.r(xs), dtype=float)) * np.ones(len(xs))
    phi = GridQuadrature(xs).cumulative(scale * lam / r)
    return CubicSpline(xs, phi)


def realized_compensator(trajs, edges, rev, scale=1.0):
    """Exact-sum of int lambda*(X_t) dt per cell along the flow of each path."""
    edges = np.asarray(edges, dtype=float)
    phi = _hazard_primitive(rev, edges[0], edges[-1], scale)
    out = [Fraction(0)] * (len(edges) - 1)
    for tr in trajs:
        t0, t1, x0, x1, atom = flow_pieces(tr)
        keep = ~atom & (t1 > t0)
        lo, hi = np.minimum(x0[keep], x1[keep]), np.maximum(x0[keep], x1[keep])
        c = phi(np.clip(edges[None, :], lo[:, None], hi[:, None]))
        per = np.diff(c, axis=1)
        out = [a + Fraction(math.fsum(col)) for a, col in zip(out, per.T)]
    return np.array([float(v) for v in out])


# ---------------------------------------------------------------- kernel


@dataclass
class KernelEstimate:
    """Row-normalized histogram of (pre, post) over voluntary jumps."""

    from_edges: np.ndarray
    to_edges: np.ndarray
    counts: np.ndarray
    pre: np.ndarray
    post: np.ndarray

    @property
    def rows(self):
        tot = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, self.counts / np.where(tot > 0, tot, 1), np.nan)


def estimate_kernel(trajs, from_edges, to_edges=None):
    from_edges = np.asarray(from_edges, dtype=float)
    to_edges = from_edges if to_edges is None else np.asarray(to_edges, dtype=float)
    pre, post = [], []
    for tr in trajs:
        for e in tr.events:
            if e.voluntary:
                pre.append(e.pre)
                post.append(e.post)
    pre, post = np.array(pre, dtype=float), np.array(post, dtype=float)
    counts, _, _ = np.histogram2d(pre, post, bins=[from_edges, to_edges])
    return KernelEstimate(from_edges, to_edges, counts.astype(np.int64), pre, post)


# ---------------------------------------------------------------- boundary


@dataclass
class BoundaryRate:
    rate: float
    ci: tuple
    count: int
    total_time: float
    per_path_se: float
    by_location: dict


def estimate_boundary_rate(trajs, level=DEFAULT_LEVEL):
    """Forced jumps per unit time with a Poisson CI; ``per_path_se`` is the
    between-path standard error, valid without the Poisson assumption."""
    trajs = list(trajs)
    per_path, by_loc = [], {}
    for tr in trajs:
        n = 0
        for e in tr.events:
            if e.kind == FORCED:
                n += 1
                by_loc[e.pre] = by_loc.get(e.pre, 0) + 1
        per_path.append(n)
    count = int(sum(per_path))
    total = float(_exact_sum(tr.horizon for tr in trajs))
    if total <= 0:
        return BoundaryRate(0.0, (0.0, 0.0), 0, 0.0, float("nan"), {})
    lo, hi = _poisson_ci(count, total, level)
    if len(trajs) > 1:
        r = np.array(per_path, dtype=float) / np.array([tr.horizon for tr in trajs])
        se = float(np.std(r, ddof=1) / math.sqrt(len(trajs)))
    else:
        se = float("nan")
    return BoundaryRate(count / total, (float(lo), float(hi)), count, total, se,
                        {k: by_loc[k] for k in sorted(by_loc)})


# ---------------------------------------------------------------- analytic reversed laws


def _gauss_segments(a, b, panels, order):
    """Nodes/weights, shape (len(a), panels*order), for int_a^b (a <= b)."""
    t, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, 1.0, panels + 1)
    s = ((edges[:-1, None] + edges[1:, None]) / 2 + (edges[1:, None] - edges[:-1, None]) / 2 * t[None, :]).ravel()
    ws = (np.diff(edges)[:, None] / 2 * w[None, :]).ravel()
    L = (b - a)[:, None]
    return a[:, None] + L * s[None, :], L * ws[None, :]


def reversed_conditional_cdf(rev, x, y, panels=24, order=8, chunk=4000):
    """mu*_x((-inf, y]) at arbitrary (x, y) pairs, from the forward flux.

    Returns (cdf_before, cdf_at): the CDF just below y and at y, which differ
    when a point source of the forward process sits at y.
    """
    model, dens = rev.forward, rev.density
    lo, hi = float(rev.grid[0]), float(rev.grid[-1])
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    srcs = point_sources(model, dens)

    def flux(z, xx):
        lam = np.asarray(model.lam(z), dtype=float)
        with np.errstate(all="ignore"):
            v = lam * dens(z) * np.asarray(model.kernel.density(z, xx), dtype=float)
        return np.nan_to_num(v, nan=0.0, posinf=0.0, neginf=0.0)

    def integral(a, b, xx):
        a, b = np.asarray(a, dtype=float), np.maximum(np.asarray(b, dtype=float), a)
        z, w = _gauss_segments(a, b, panels, order)
        return (flux(z, xx[:, None]) * w).sum(axis=1)

    before = np.empty(len(x))
    at = np.empty(len(x))
    for s in range(0, len(x), chunk):
        xx, yy = x[s : s + chunk], np.clip(y[s : s + chunk], lo, hi)
        lo_arr = np.full(len(xx), lo)
        xc = np.clip(xx, lo, hi)
        total = integral(lo_arr, xc, xx) + integral(xc, np.full(len(xx), hi), xx)
        part = integral(lo_arr, np.minimum(xc, yy), xx) + integral(xc, np.maximum(xc, yy), xx)
        pb, pa = np.zeros(len(xx)), np.zeros(len(xx))
        for src in srcs:
            f = src.flux * np.asarray(src.kernel.density(src.location, xx), dtype=float)
            total = total + f
            pb = pb + f * (src.location < yy)
            pa = pa + f * (src.location <= yy)
        before[s : s + chunk] = (part + pb) / total
        at[s : s + chunk] = (part + pa) / total
    return before, at


def _grid_cdf(x, dens, pts):
    q = GridQuadrature(x)
    cum = q.cumulative(dens)
    tot = cum[-1] + sum(pts.values())

    def cdf(y, strict=False):
        out = np.interp(y, x, cum, left=0.0, right=cum[-1])
        for b, m in pts.items():
            out = out + m * ((y > b) if strict else (y >= b))
        return out / tot

    return cdf


def _pit(before, at, rng):
    return before + rng.random(len(before)) * (at - before)


# ---------------------------------------------------------------- effective sample size


def effective_sample_size(series, max_lag=200):
    """n / tau with tau from pooled within-path autocorrelations, truncated at
    the first non-positive pair sum (initial positive sequence)."""
    series = [np.asarray(s, dtype=float) for s in series if len(s) > 1]
    n = sum(len(s) for s in series)
    if n == 0:
        return 0.0
    mean = np.concatenate(series).mean()
    c0 = sum(float(((s - mean) ** 2).sum()) for s in series) / n
    if c0 <= 0:
        return float(n)
    rho = []
    for k in range(1, max_lag + 1):
        num = sum(float(((s[:-k] - mean) * (s[k:] - mean)).sum()) for s in series if len(s) > k)
        rho.append(num / n / c0)
    tau = 1.0
    for k in range(0, len(rho) - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2 * pair
    return float(n / max(tau, 1.0))


# ---------------------------------------------------------------- comparison


@dataclass
class CompareConfig:
    level: float = DEFAULT_LEVEL
    n_cells: int = 20
    central: tuple = (0.005, 0.995)
    lambda_scale: float = 1.0  # >1 gives the must-fail control
    seed: int = 0
    min_compensator: float = 20.0


def _intensity_check(rev_trajs, rev, cfg, alpha):
    dens = rev.density
    qs = np.linspace(cfg.central[0], cfg.central[1], cfg.n_cells + 1)
    edges = np.unique(dens.quantile(qs))
    est = estimate_intensity(rev_trajs, edges, cfg.level)
    comp = realized_compensator(rev_trajs, edges, rev, cfg.lambda_scale)
    use = comp >= cfg.min_compensator
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(use, (est.counts - comp) / np.sqrt(np.where(use, comp, 1.0)), 0.0)
    # cells where lambda* vanishes must see no jumps at all
    stray = int(est.counts[comp == 0].sum())
    value = float(np.max(np.abs(z), initial=0.0))
    if stray:
        value = math.inf
    n_cells = max(int(use.sum()), 1)
    crit = stats.norm.isf(alpha / (2 * n_cells))
    return _report("lambda_star", "rate_z_score", value, crit, int(est.counts.sum()),
                   cells=n_cells, stray_jumps=stray, lambda_scale=cfg.lambda_scale,
                   edges=edges.tolist(), counts=est.counts.tolist(), compensator=comp.tolist())


def _kernel_check(rev_trajs, rev, rng, alpha):
    pre, post = [], []
    for tr in rev_trajs:
        for e in tr.events:
            if e.voluntary:
                pre.append(e.pre)
                post.append(e.post)
    if not pre:
        return None
    b, a = reversed_conditional_cdf(rev, np.array(pre), np.array(post))
    u = _pit(b, a, rng)
    ks = stats.kstest(u, "uniform")
    crit = stats.kstwo.isf(alpha, len(u))
    return _report("kernel_star", "KS", ks.statistic, crit, len(u))


def _boundary_kernel_checks(rev_trajs, rev, rng, alpha):
    out = []
    for loc, _rate in rev.sigma_star:
        land = np.array([e.post for tr in rev_trajs for e in tr.events if e.kind == FORCED and e.pre == loc])
        if len(land) == 0:
            continue
        dens, pts = rev.boundary_kernel_star[loc]
        cdf = _grid_cdf(rev.grid, dens, pts)
        u = _pit(cdf(land, strict=True), cdf(land), rng)
        ks = stats.kstest(u, "uniform")
        out.append(_report(f"boundary_kernel_star@{loc:g}", "KS", ks.statistic,
                           stats.kstwo.isf(alpha, len(u)), len(u)))
    return out


def _boundary_rate_check(rev_trajs, rev, alpha):
    br = estimate_boundary_rate(rev_trajs)
    target = sum(m for _, m in rev.sigma_star)
    if target == 0:
        return _report("sigma_star", "rate_z_score", math.inf if br.count else 0.0,
                       stats.norm.isf(alpha / 2), br.count, estimate=br.rate, expected=0.0)
    se = br.per_path_se if np.isfinite(br.per_path_se) and br.per_path_se > 0 else math.sqrt(target / br.total_time)
    z = abs(br.rate - target) / se
    return _report("sigma_star", "rate_z_score", z, stats.norm.isf(alpha / 2), br.count,
                   estimate=br.rate, expected=target, se=se)


def _pre_jump_check(rev_trajs, rev, rng, alpha):
    law = embedded_laws(rev.density, rev.forward).after
    pts = {float(loc): m for loc, m in law.atoms}
    cdf = _grid_cdf(law.grid, law.values, pts)
    series = []
    for tr in rev_trajs:
        w = np.array([e.pre for e in tr.events if e.is_jump], dtype=float)
        if len(w):
            series.append(_pit(cdf(w, strict=True), cdf(w), rng))
    if not series:
        return None
    u = np.concatenate(series)
    n_eff = effective_sample_size(series)
    d = stats.kstest(u, "uniform").statistic
    crit = stats.kstwo.isf(alpha, max(int(n_eff), 1))
    return _report("pre_jump_vs_pi_Q", "KS", d, crit, n_eff, n_jumps=len(u))


def compare_reversed(trajs_forward, rev, config=None):
    """Reverse each forward path and test it against the analytic reversal.

    Checks: lambda* (per-cell realized-compensator z-scores), mu* (PIT + KS),
    reversed boundary laws and rates, and the reversed pre-jump law against
    the forward post-jump law pi_Q. The level is split evenly (Bonferroni)
    over the checks that apply.
    """
    cfg = config or CompareConfig()
    rev_trajs = [reverse_path(t) for t in trajs_forward]
    rng = np.random.default_rng(cfg.seed)
    n_checks = 3 + len(rev.sigma_star)  # lambda*, mu*, sigma*, pre-jump, per-boundary laws
    if any(e.voluntary for tr in rev_trajs for e in tr.events):
        n_checks += 1
    alpha = cfg.level / n_checks
    out = [_intensity_check(rev_trajs, rev, cfg, alpha)]
    k = _kernel_check(rev_trajs, rev, rng, alpha)
    if k is not None:
        out.append(k)
    out.extend(_boundary_kernel_checks(rev_trajs, rev, rng, alpha))
    out.append(_boundary_rate_check(rev_trajs, rev, alpha))
    p = _pre_jump_check(rev_trajs, rev, rng, alpha)
    if p is not None:
        out.append(p)
    for r in out:
        r.details.update(level=cfg.level, correction="bonferroni", n_checks=n_checks, per_check_level=alpha)
    return out
