"""Parameters of the time-reversed process and numerical checks of the
reversal identities.

Everything is expressed through the jump flux J(y, x) = lambda(x) nu'(x) mu'_x(y)
of the forward process: the reversed process jumps from y to x at exactly
that rate per unit time, so

    lambda*(y) nu'(y)  = int J(y, x) dx + sum_b s_b mu'_b(y)
    mu*'_y(x)          = J(y, x) / (lambda*(y) nu'(y))
    mu*_y({b})         = s_b mu'_b(y) / (lambda*(y) nu'(y))

with s_b the forward point sources (boundary hits with a boundary kernel,
atom exits). Forward jumps that land on a point w with positive probability
become forced jumps of the reversed process at w.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._grid import derivative_matrix, interval_split_weights, locate, one_sided, one_sided_operator, split_matrix
from .model import Diagnostic, mirror_model
from .stationary import (
    GridDensity,
    embedded_laws,
    kernel_density_matrix,
    kernel_point_masses,
    l1_distance,
    point_sources,
    solve_stationary_grid,
)

MASK_REL = 1e-12


@dataclass
class ResidualReport:
    check: str
    max_abs: float
    max_rel: float
    nodes_flagged: int = 0
    details: dict = field(default_factory=dict)

    def to_json(self):
        out = asdict(self)
        out["details"] = _jsonable(self.details)
        return out


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


@dataclass
class ReversedPdmp:
    """Reversed-process parameters on the grid of ``density``.

    ``kernel_star[i, j]`` is mu*'_{x_i}(x_j); rows where lambda* vanishes
    are NaN. ``point_jump_star`` maps a landing point b to mu*_x({b}) on the
    grid, and ``sigma_star`` lists (location, rate) of reversed forced jumps
    with the matching laws in ``boundary_kernel_star``.
    """

    forward: object
    density: GridDensity
    lambda_star: np.ndarray
    jump_rate_density: np.ndarray  # lambda* nu'
    kernel_star: np.ndarray
    point_jump_star: dict
    sigma_star: list
    boundary_kernel_star: dict
    xi_norm: float
    flux: np.ndarray  # J[y, x], pre-jump x to post-jump y
    flux_limits_x: tuple
    flux_limits_y: tuple
    flagged: np.ndarray
    diagnostics: list = field(default_factory=list)

    @property
    def grid(self):
        return self.density.grid

    @property
    def boundary_jump_star(self):
        out = np.zeros(len(self.grid))
        for v in self.point_jump_star.values():
            out = out + v
        return out

    def drift_star(self, x):
        return -np.asarray(self.forward.r(x), dtype=float)


def _nodes(model, density):
    x = density.grid
    lam = np.asarray(model.lam(x), dtype=float) * np.ones(len(x))
    return x, density.values, lam, density.quad


def _mask(p):
    return p > MASK_REL * float(np.max(p))


def _jump_flux(model, density):
    """J[y, x] = lambda(x) p(x) mu'_x(y), plus its one-sided diagonal limits
    along x (NaN where the product of limits is not trustworthy) and along y."""
    x, p, lam, _ = _nodes(model, density)
    w = lam * p
    J = (kernel_density_matrix(model.kernel, x) * w[:, None]).T
    lo, hi = one_sided(model.kernel.density, x, source=True)
    bad = ~_mask(w)  # 0 * singular limit: extrapolate instead
    lx = (np.where(bad, np.nan, w * lo), np.where(bad, np.nan, w * hi))
    ly = tuple(w * v for v in one_sided(model.kernel.density, x, source=False))
    return J, lx, ly


def _reversed_numerator(model, density, J=None, limits=(None, None)):
    x, p, lam, q = _nodes(model, density)
    if J is None:
        J, limits, _ = _jump_flux(model, density)
    N = split_matrix(q, J, *limits).sum(axis=1)
    for s in point_sources(model, density):
        N = N + s.flux * np.asarray(s.kernel.density(s.location, x), dtype=float)
    return N


def reversed_intensity_kernel_ratio(model, density):
    """lambda* on the grid from the reversed jump flux; NaN where nu' vanishes."""
    N = _reversed_numerator(model, density)
    p = density.values
    ok = _mask(p)
    out = np.full(len(p), np.nan)
    out[ok] = N[ok] / p[ok]
    return out


def _derivative_increasing(model, x, p):
    dp = derivative_matrix(x) @ p
    r = np.asarray(model.r(x), dtype=float) * np.ones(len(x))
    lam = np.asarray(model.lam(x), dtype=float) * np.ones(len(x))
    rp = np.asarray(model.r_prime(x), dtype=float) * np.ones(len(x))
    ok = _mask(p)
    out = np.full(len(x), np.nan)
    out[ok] = lam[ok] + rp[ok] + r[ok] * dp[ok] / p[ok]
    return out


def reversed_intensity_derivative(model, density):
    """lambda + r' + r nu''/nu' (increasing frame; decreasing drifts are mirrored)."""
    x, p = density.grid, density.values
    if model.increasing:
        return _derivative_increasing(model, x, p)
    return _derivative_increasing(mirror_model(model), -x[::-1], p[::-1])[::-1]


def _landing_points(model, density):
    """{node: (flux landing there, lambda p share per node, {source location: flux})}."""
    x, p, lam, q = _nodes(model, density)
    out = {}
    for k, masses in kernel_point_masses(model.kernel, x, x).items():
        share = lam * p * masses
        out[k] = [float(q.full @ share), share, {}]
    for s in point_sources(model, density):
        for loc, m in s.kernel.point_masses(s.location):
            k = int(locate(x, loc)[0])
            entry = out.setdefault(k, [0.0, np.zeros(len(x)), {}])
            entry[0] += s.flux * m
            entry[2][s.location] = entry[2].get(s.location, 0.0) + s.flux * m
    return out


def reversed_kernel(model, density, N=None):
    """(kernel_star, point_jump_star) on the grid."""
    x, p, lam, q = _nodes(model, density)
    J, lx, ly = _jump_flux(model, density)
    if N is None:
        N = _reversed_numerator(model, density, J, lx)
    ok = N > MASK_REL * max(float(np.max(N)), 1e-300)
    K = np.full(J.shape, np.nan)
    K[ok] = J[ok] / N[ok, None]
    pts = {}
    for s in point_sources(model, density):
        v = np.full(len(x), np.nan)
        v[ok] = s.flux * np.asarray(s.kernel.density(s.location, x), dtype=float)[ok] / N[ok]
        pts[s.location] = v
    return K, pts


def reversed_boundary_mass(model, density):
    """[(w, sigma*({w}))] for points where forward jumps land with positive probability."""
    x = density.grid
    return [(float(x[k]), v[0]) for k, v in sorted(_landing_points(model, density).items()) if v[0] > 0]


def derive_reversed(model, density):
    """All reversed parameters plus structural diagnostics."""
    x, p, lam, q = _nodes(model, density)
    J, lx, ly = _jump_flux(model, density)
    N = _reversed_numerator(model, density, J, lx)
    lam_star = np.full(len(x), np.nan)
    ok = _mask(p)
    lam_star[ok] = N[ok] / p[ok]
    K, pts = reversed_kernel(model, density, N)
    landing = _landing_points(model, density)
    sigma, bkern = [], {}
    diags = []
    w = model.passive_point
    for k, (flux, share, from_src) in sorted(landing.items()):
        if flux <= 0:
            continue
        loc = float(x[k])
        sigma.append((loc, flux))
        bkern[loc] = (share / flux, {b: m / flux for b, m in from_src.items()})
        if w is None or abs(loc - w) > 1e-12 * max(1.0, abs(w)):
            diags.append(Diagnostic("proper_reversal", "fail", f"post-jump atom at {loc} is not on the upstream endpoint"))
    xi = float(q.full @ (lam * p)) + sum(s.flux for s in point_sources(model, density))
    if np.any(N[ok] < -1e-10 * np.max(np.abs(N))):
        diags.append(Diagnostic("lambda_star_sign", "fail", "negative reversed intensity"))
    return ReversedPdmp(
        forward=model,
        density=density,
        lambda_star=lam_star,
        jump_rate_density=N,
        kernel_star=K,
        point_jump_star=pts,
        sigma_star=sigma,
        boundary_kernel_star=bkern,
        xi_norm=xi,
        flux=J,
        flux_limits_x=lx,
        flux_limits_y=ly,
        flagged=~ok,
        diagnostics=diags,
    )


# ---------------------------------------------------------------- checks


def kernel_row_mass(rev):
    """Total mass of mu*_x for every node (NaN where undefined)."""
    q = rev.density.quad
    N = rev.jump_rate_density
    with np.errstate(invalid="ignore", divide="ignore"):
        body = split_matrix(q, rev.flux, *rev.flux_limits_x).sum(axis=1) / N
    return body + rev.boundary_jump_star


def _snap(x, a, b):
    i, j = locate(x, [a, b])
    return int(i), int(j)


def default_rectangles(density, n_a=5, n_b=4):
    qa = density.quantile(np.linspace(0, 1, n_a + 1))
    qb = density.quantile(np.linspace(0, 1, n_b + 1))
    qa[0] = qb[0] = density.grid[0]
    qa[-1] = qb[-1] = density.grid[-1]
    return [((qa[i], qa[i + 1]), (qb[j], qb[j + 1])) for i in range(n_a) for j in range(n_b)]


def _interval_mass(kern, z, c, d):
    """mu_z([c, d]) on arrays z."""
    m = np.asarray(kern.cdf(z, d), dtype=float) - np.asarray(kern.cdf(z, c), dtype=float)
    at_c = np.array([sum(mm for loc, mm in kern.point_masses(float(zz)) if loc == c) for zz in np.atleast_1d(z)])
    return m + (at_c if np.ndim(z) else at_c[0])


def duality_residual(model, density, rectangles=None, rev=None):
    """Compare pi(A, B) with pi*(B, A) on rectangles, and the embedded laws."""
    rev = rev or derive_reversed(model, density)
    x, p, lam, q = _nodes(model, density)
    rects = list(rectangles) if rectangles is not None else default_rectangles(density)
    rects.append(((x[0], x[-1]), (x[0], x[-1])))
    srcs = point_sources(model, density)
    xi = rev.xi_norm
    N = rev.jump_rate_density
    xi_star = float(q.full @ N) + sum(m for _, m in rev.sigma_star)
    worst, rows = 0.0, []
    for (a0, a1), (b0, b1) in rects:
        ia, ib = _snap(x, a0, a1)
        ic, id_ = _snap(x, b0, b1)
        A, B = (x[ia], x[ib]), (x[ic], x[id_])
        # forward: pre-jump in A, post-jump in B
        muB = _interval_mass(model.kernel, x, B[0], B[1])
        fwd = q.weights(ia, ib, splits=(ic, id_)) @ (lam * p * muB)
        fwd += sum(s.flux * float(_interval_mass(s.kernel, s.location, B[0], B[1])) for s in srcs
                   if A[0] <= s.location <= A[1])
        # reversed: pre-jump in B, post-jump in A
        WL, WR = interval_split_weights(q, ia, ib)
        inner = one_sided_operator(x, WL, WR, rev.flux, *rev.flux_limits_x).sum(axis=1)
        for b, v in rev.point_jump_star.items():
            if A[0] <= b <= A[1]:
                inner = inner + np.nan_to_num(v) * N
        bwd = q.weights(ic, id_, splits=(ia, ib)) @ inner
        for loc, rate in rev.sigma_star:
            if B[0] <= loc <= B[1]:
                dens, pts = rev.boundary_kernel_star[loc]
                mass = q.weights(ia, ib) @ dens + sum(m for b, m in pts.items() if A[0] <= b <= A[1])
                bwd += rate * mass
        diff = abs(fwd / xi - bwd / xi_star)
        worst = max(worst, diff)
        rows.append({"A": list(A), "B": list(B), "forward": fwd / xi, "reversed": bwd / xi_star, "diff": diff})
    emb = embedded_laws(density, model)
    pi_w_star = GridDensity(x, N / xi_star, [(loc, m / xi_star) for loc, m in rev.sigma_star])
    # reversed post-jump law: flux into x from all reversed jumps
    qs_vals = split_matrix(q, rev.flux.T, *rev.flux_limits_y).sum(axis=1)
    q_atoms = {}
    for s in srcs:
        q_atoms[s.location] = q_atoms.get(s.location, 0.0) + s.flux * float(
            q.full @ np.asarray(s.kernel.density(s.location, x), dtype=float))
    for loc, rate in rev.sigma_star:
        dens, pts = rev.boundary_kernel_star[loc]
        qs_vals = qs_vals + rate * dens
        for b, m in pts.items():
            q_atoms[b] = q_atoms.get(b, 0.0) + rate * m
    pi_q_star = GridDensity(x, qs_vals / xi_star, [(b, m / xi_star) for b, m in sorted(q_atoms.items()) if m > 0])
    l1_qw = l1_distance(_snap_atoms(emb.after, x), _snap_atoms(pi_w_star, x))
    l1_wq = l1_distance(_snap_atoms(emb.before, x), _snap_atoms(pi_q_star, x))
    return ResidualReport(
        "duality",
        worst,
        worst,
        int(rev.flagged.sum()),
        {"rectangles": rows, "l1_piQ_piWstar": l1_qw, "l1_piW_piQstar": l1_wq, "xi": xi, "xi_star": xi_star},
    )


def _snap_atoms(d, x):
    atoms = {}
    for loc, m in d.atoms:
        k = float(x[int(locate(x, loc)[0])])
        atoms[k] = atoms.get(k, 0.0) + m
    return GridDensity(x, d.values, sorted(atoms.items()))


@dataclass(frozen=True)
class TestFunction:
    __test__ = False  # not a pytest class

    name: str
    f: object
    df: object


def default_battery():
    """x, x^2, e^-x, sin x and pairwise products with e^-x and sin x."""
    e, s, c = np.exp, np.sin, np.cos
    return [
        TestFunction("x", lambda u: u, lambda u: np.ones_like(u)),
        TestFunction("x^2", lambda u: u**2, lambda u: 2 * u),
        TestFunction("exp(-x)", lambda u: e(-u), lambda u: -e(-u)),
        TestFunction("sin(x)", s, c),
        TestFunction("x exp(-x)", lambda u: u * e(-u), lambda u: (1 - u) * e(-u)),
        TestFunction("x sin(x)", lambda u: u * s(u), lambda u: s(u) + u * c(u)),
        TestFunction("exp(-x) sin(x)", lambda u: e(-u) * s(u), lambda u: e(-u) * (c(u) - s(u))),
    ]


def _generator_parts(model, density, rev):
    x, p, lam, q = _nodes(model, density)
    D = kernel_density_matrix(model.kernel, x)
    Dw = split_matrix(q, D, *one_sided(model.kernel.density, x, source=False))
    pm = kernel_point_masses(model.kernel, x, x)
    Jw = split_matrix(q, rev.flux, *rev.flux_limits_x)
    return x, p, lam, q, Dw, pm, Jw


def adjoint_residual(model, density, f, g, rev=None, parts=None):
    """|LHS - RHS| / (1 + |LHS|) for the adjoint generator identity."""
    rev = rev or derive_reversed(model, density)
    x, p, lam, q, Dw, pm, Jw = parts or _generator_parts(model, density, rev)
    r = np.asarray(model.r(x), dtype=float) * np.ones(len(x))
    fx, gx = f.f(x), g.f(x)
    mu_f = Dw @ fx + sum(masses * fx[k] for k, masses in pm.items())
    lhs = q.full @ (gx * (r * f.df(x) - lam * fx) * p) + q.full @ (gx * lam * p * mu_f)
    for s in point_sources(model, density):
        b = s.location
        mb = q.full @ (np.asarray(s.kernel.density(b, x), dtype=float) * fx)
        mb += sum(m * float(f.f(np.array(loc))) for loc, m in s.kernel.point_masses(b))
        lhs += s.flux * float(g.f(np.array(b))) * (mb - float(f.f(np.array(b))))
    N = rev.jump_rate_density
    Jg = Jw @ gx
    for b, v in rev.point_jump_star.items():
        Jg = Jg + np.nan_to_num(v) * N * float(g.f(np.array(b)))
    rhs = q.full @ (fx * (-r * g.df(x)) * p) - q.full @ (fx * gx * N) + q.full @ (fx * Jg)
    for loc, rate in rev.sigma_star:
        dens, pts = rev.boundary_kernel_star[loc]
        mg = q.full @ (dens * gx) + sum(m * float(g.f(np.array(b))) for b, m in pts.items())
        rhs += rate * float(f.f(np.array(loc))) * (mg - float(g.f(np.array(loc))))
    return abs(lhs - rhs) / (1.0 + abs(lhs)), lhs, rhs


def adjoint_report(model, density, battery=None, rev=None):
    rev = rev or derive_reversed(model, density)
    parts = _generator_parts(model, density, rev)
    battery = battery or default_battery()
    worst_rel, worst_abs, rows = 0.0, 0.0, []
    for f in battery:
        for g in battery:
            rel, lhs, rhs = adjoint_residual(model, density, f, g, rev, parts)
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, abs(lhs - rhs))
            rows.append({"f": f.name, "g": g.name, "lhs": lhs, "rhs": rhs, "rel": rel})
    return ResidualReport("adjoint", worst_abs, worst_rel, int(rev.flagged.sum()), {"pairs": rows})


# Test functions grow polynomially, so the adjoint identity needs a deeper
# window than the default solve; integration by parts leaves r f g nu' at the
# window edge.
ADJOINT_TAIL = 1e-14
ADJOINT_NODES = 1536


def adjoint_check(model, battery=None, n_nodes=ADJOINT_NODES, tail=ADJOINT_TAIL):
    """Solve on a deep window and run the adjoint battery."""
    density = solve_stationary_grid(model, n_nodes=n_nodes, tail=tail)
    return adjoint_report(model, density, battery)


def _hazard(model, a, b):
    from .model import _hazard_between

    return _hazard_between(model, a, b)


def default_pairs(density, n_pairs=10, seed=0, lo=0.01, hi=0.99):
    """Random node pairs with both ends inside the central nu-quantile range."""
    x = density.grid
    a, b = density.quantile(np.array([lo, hi]))
    idx = np.flatnonzero((x >= a) & (x <= b))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairs):
        i, j = sorted(rng.choice(idx, size=2, replace=False))
        out.append((float(x[i]), float(x[j])))
    return out


def left_continuation_residual(model, density, pairs=None, rev=None):
    """Left-continuation identity r(u)nu'(u)P_u{W_1 past v} = r(v)nu'(v)P_v{Q_-1 before u}
    for u upstream of v, on node pairs."""
    rev = rev or derive_reversed(model, density)
    x, p, lam, q = _nodes(model, density)
    pairs = pairs if pairs is not None else default_pairs(density)
    r = np.abs(np.asarray(model.r(x), dtype=float) * np.ones(len(x)))
    rate = rev.lambda_star / r
    worst_rel, worst_abs, rows = 0.0, 0.0, []
    for y, xx in pairs:
        i, j = (int(v) for v in locate(x, [min(y, xx), max(y, xx)]))
        u, v = (i, j) if model.increasing else (j, i)
        lhs = r[u] * p[u] * math.exp(-_hazard(model, x[u], x[v]))
        rhs = r[v] * p[v] * math.exp(-float(q.weights(i, j) @ np.nan_to_num(rate)))
        d = abs(lhs - rhs)
        rel = d / abs(lhs) if lhs else d
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, d)
        rows.append({"y": float(x[u]), "x": float(x[v]), "lhs": lhs, "rhs": rhs, "rel": rel})
    return ResidualReport("corollary", worst_abs, worst_rel, 0, {"pairs": rows})


def _central(density, lo_q=1e-3, hi_q=1 - 1e-3):
    return density.quantile(np.array([lo_q, hi_q]))


def route_gap(model, density, lo=None, hi=None, rev=None):
    """L-infinity gap between the kernel-ratio and derivative lambda* on [lo, hi]
    (default: the central 99.8% of nu, since the far tail is pure noise)."""
    rev = rev or derive_reversed(model, density)
    x = density.grid
    a = rev.lambda_star
    b = reversed_intensity_derivative(model, density)
    qa, qb = _central(density)
    lo = qa if lo is None else lo
    hi = qb if hi is None else hi
    sel = np.isfinite(a) & np.isfinite(b) & (x >= lo) & (x <= hi)
    gap = np.abs(a - b)[sel]
    scale = np.maximum(np.abs(a[sel]), 1.0)  # lambda* may vanish identically
    details = {}
    if not model.increasing:
        # the variant lambda - r' - r nu''/nu', with the log-slope term sign-flipped
        p = density.values
        lam = np.asarray(model.lam(x), dtype=float) * np.ones(len(x))
        r = np.asarray(model.r(x), dtype=float) * np.ones(len(x))
        rp = np.asarray(model.r_prime(x), dtype=float) * np.ones(len(x))
        with np.errstate(divide="ignore", invalid="ignore"):
            alt = lam - rp - r * (derivative_matrix(x) @ p) / p
        details["flipped_sign_gap"] = float(np.max(np.abs(alt - a)[sel]))
    return ResidualReport("lambda_star_routes", float(gap.max()), float((gap / scale).max()), int((~sel).sum()),
                          details)


def kernel_normalization_report(rev):
    mass = kernel_row_mass(rev)
    ok = np.isfinite(mass)
    dev = np.abs(mass[ok] - 1.0)
    return ResidualReport("kernel_star_rows", float(dev.max()) if dev.size else 0.0,
                          float(dev.max()) if dev.size else 0.0, int((~ok).sum()))


def double_reversal(model, density, rev=None, lo_q=1e-3, hi_q=1 - 1e-3):
    """Reverse the reversed parameters once more and compare with lambda and mu'."""
    rev = rev or derive_reversed(model, density)
    x, p, lam, q = _nodes(model, density)
    col = split_matrix(q, rev.flux.T, *rev.flux_limits_y).sum(axis=1)
    for loc, rate in rev.sigma_star:
        col = col + rate * rev.boundary_kernel_star[loc][0]
    a, b = _central(density, lo_q, hi_q)
    sel = _mask(p) & (x >= a) & (x <= b)
    lam2 = np.full(len(x), np.nan)
    lam2[sel] = col[sel] / p[sel]
    gap_l = np.abs(lam2 - lam)[sel]
    D = kernel_density_matrix(model.kernel, x)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu2 = rev.flux.T[sel] / (lam2[sel] * p[sel])[:, None]
    live = lam[sel] > 0
    gap_k = np.abs(mu2[live] - D[sel][live]) if live.any() else np.zeros(1)
    worst = max(float(gap_l.max()), float(np.nanmax(gap_k)))
    return ResidualReport("double_reversal", worst, worst, int((~sel).sum()),
                          {"lambda_gap": float(gap_l.max()), "kernel_gap": float(np.nanmax(gap_k))})


def sign_diagnostic(model, density, rev=None, tol=1e-4):
    """Nodes where lambda* - lambda and sign(r) d/dx log(|r| nu') disagree in sign."""
    rev = rev or derive_reversed(model, density)
    x, p, lam, q = _nodes(model, density)
    r = np.asarray(model.r(x), dtype=float) * np.ones(len(x))
    qa, qb = _central(density)
    ok = _mask(p) & np.isfinite(rev.lambda_star) & (x >= qa) & (x <= qb)
    slope = np.full(len(x), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        logv = np.log(np.abs(r) * p)
    slope[ok] = np.sign(r[ok]) * (derivative_matrix(x) @ np.where(ok, logv, 0.0))[ok]
    diff = rev.lambda_star - lam
    # stencils touching masked nodes are unreliable
    inner = ok & (np.convolve(ok.astype(int), np.ones(5, dtype=int), mode="same") == 5)
    test = inner & (np.abs(diff) > tol) & (np.abs(slope) > tol)
    bad = test & (np.sign(diff) != np.sign(slope))
    return ResidualReport("sign", float(np.max(np.abs(diff[inner] - slope[inner] * np.abs(r[inner])), initial=0.0)),
                          0.0, int(bad.sum()), {"tested_nodes": int(test.sum())})
