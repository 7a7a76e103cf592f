"""Stationary density of a 1-D PDMP: a direct grid solver for the flux-balance
integro-differential equation, a regenerative power iteration on the
post-jump chain, and closed forms for the zoo.

The flux-balance equation, valid for either drift orientation, reads

    r(x) p(x) = int lambda(z) K(x, z) p(z) dz + sum_b s_b K(x, b),
    K(x, z)   = mu_z((-inf, x]) - 1{z <= x},

where the point sources s_b are the forced-jump rate at an active boundary
(with its boundary kernel) and the exit flux lambda_a nu({a}) of holding atoms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from ._grid import GridQuadrature, _side_coefficients, locate, one_sided, split_matrix, split_operator
from .errors import DegenerateModelError, IterationLimitError, ModelSpecError, NoBoundaryError, NonPhysicalSolutionError, SolverError
from .model import mirror_model

DEFAULT_TAIL = 1e-8
DEFAULT_NODES = 1024
PILOT_SEED = 20240607
PILOT_PATHS = 16
PILOT_HORIZON = 2000.0
NEGATIVE_TOL = 1e-6  # relative to max p
RESIDUAL_TOL = 1e-4  # relative to max |r p|


@dataclass
class GridDensity:
    """Stationary law on a grid: density values, atoms (location, mass) and
    the boundary hit rate sigma_gamma."""

    grid: np.ndarray
    values: np.ndarray
    atoms: list = field(default_factory=list)
    boundary_mass: float = 0.0
    normalization_error: float = 0.0
    metadata: dict = field(default_factory=dict)

    @cached_property
    def quad(self):
        return GridQuadrature(self.grid)

    def mass(self):
        return float(self.quad.full @ self.values) + sum(m for _, m in self.atoms)

    def trapezoid_mass(self):
        return float(np.trapezoid(self.values, self.grid)) + sum(m for _, m in self.atoms)

    def atom_mass(self, location):
        return sum(m for loc, m in self.atoms if loc == location)

    def __call__(self, x):
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    def cdf(self, x):
        """Distribution function including atoms (piecewise linear between nodes)."""
        cum = self.quad.cumulative(self.values)
        out = np.interp(x, self.grid, cum, left=0.0, right=cum[-1])
        for loc, m in self.atoms:
            out = out + m * (np.asarray(x) >= loc)
        return out

    def quantile(self, q):
        cum = self.quad.cumulative(self.values)
        tot = np.maximum.accumulate(cum + sum(m for loc, m in self.atoms if loc <= self.grid[0]))
        return np.interp(q, tot, self.grid)


@dataclass
class Source:
    """A point from which jumps start at a positive rate: the active boundary
    (forced jumps) or a holding atom (exits)."""

    location: float
    flux: float
    kernel: object
    kind: str  # "boundary" or "atom"


@dataclass
class EmbeddedDist:
    """Pre-jump law pi_W and post-jump law pi_Q, each as a GridDensity."""

    before: GridDensity
    after: GridDensity
    xi_norm: float


# ---------------------------------------------------------------- windows


def _pilot_samples(model, tail_seed=PILOT_SEED):
    from .simulate import flow_pieces, simulate_batch

    start = model.boundary_point
    if start is None:
        lo, hi = model.space.lower, model.space.upper
        start = lo if math.isfinite(lo) else (hi if math.isfinite(hi) else 0.0)
        if math.isfinite(lo) and math.isfinite(hi):
            start = 0.5 * (lo + hi)
    trajs = simulate_batch(model, PILOT_PATHS, PILOT_HORIZON, tail_seed, init=start)
    samples = []
    P, Pinv = model.drift.potential, model.drift.potential_inv
    for tr in trajs:
        t0, t1, x0, x1, atom = flow_pieces(tr)
        times = np.arange(0.1 * PILOT_HORIZON, PILOT_HORIZON, 0.5)
        j = np.clip(np.searchsorted(t0, times, side="right") - 1, 0, len(t0) - 1)
        dt = times - t0[j]
        if P is not None and Pinv is not None:
            with np.errstate(all="ignore"):
                xs = np.asarray(Pinv(P(x0[j]) + dt), dtype=float)
        else:
            from .model import _flow_unchecked

            xs = np.array([_flow_unchecked(model, a, d) for a, d in zip(x0[j], dt)])
        samples.append(np.where(atom[j], x0[j], xs))
    return np.concatenate(samples)


def _extrapolate(q2, q3, tail):
    # exponential tail: every decade of tail mass adds the same distance
    return q3 + math.log10(1e-3 / tail) * (q3 - q2)


def truncation_window(model, tail=DEFAULT_TAIL):
    """(lo, hi, source) covering all but ``tail`` of the stationary mass."""
    if model.window is not None:
        return float(model.window[0]), float(model.window[1]), "model"
    lo, hi = model.space.lower, model.space.upper
    if math.isfinite(lo) and math.isfinite(hi):
        return lo, hi, "space"
    spec = model.zoo
    if spec is not None:
        from .zoo import closed_form_tail_point

        point = closed_form_tail_point(spec, tail)
        if point is not None and math.isfinite(lo):
            return lo, float(point), "closed_form"
    s = _pilot_samples(model)
    if not math.isfinite(hi):
        hi = _extrapolate(np.quantile(s, 1 - 1e-2), np.quantile(s, 1 - 1e-3), tail)
    if not math.isfinite(lo):
        lo = -_extrapolate(-np.quantile(s, 1e-2), -np.quantile(s, 1e-3), tail)
    return float(lo), float(hi), "pilot"


def _grid_for(model, n_nodes, window, tail):
    if n_nodes < 64:
        raise ValueError("n_nodes must be at least 64")
    if window is None:
        lo, hi, src = truncation_window(model, tail)
    else:
        lo, hi, src = float(window[0]), float(window[1]), "given"
    s = np.linspace(0.0, 1.0, n_nodes)
    r = np.abs(np.asarray(model.r(np.array([lo, hi])), dtype=float) * np.ones(2))
    stalled = r <= 1e-12 * max(float(r.max()), 1e-300)
    # power-law behaviour where the flow stalls: grade the nodes quadratically
    if stalled[0] and not stalled[1]:
        s = s**2
    elif stalled[1] and not stalled[0]:
        s = 1.0 - (1.0 - s) ** 2
    x = lo + (hi - lo) * s
    return x, {"window": [lo, hi], "window_source": src, "tail": tail, "graded": bool(stalled.any())}


# ---------------------------------------------------------------- kernels on grids


def kernel_density_matrix(kern, x, y=None):
    """D[i, j] = mu'_{x_i}(y_j)."""
    y = x if y is None else y
    return np.asarray(kern.density(x[:, None], y[None, :]), dtype=float) * np.ones((len(x), len(y)))


def kernel_point_masses(kern, x, grid):
    """{node index: masses from every x} for the singular part, snapped to ``grid``."""
    out = {}
    for i, z in enumerate(x):
        for loc, m in kern.point_masses(float(z)):
            k = int(locate(grid, loc)[0])
            out.setdefault(k, np.zeros(len(x)))[i] += m
    return out


def point_sources(model, density):
    """Point sources of jumps for a solved density."""
    out = []
    b = model.boundary_point
    if b is not None:
        atom = model.atom_at(b)
        if atom is None:
            out.append(Source(b, density.boundary_mass, model.boundary_kernel, "boundary"))
    for a in model.space.atoms:
        out.append(Source(a.location, a.exit_rate * density.atom_mass(a.location), model.kernel, "atom"))
    return out


def _source_indicator(model, b, x):
    """1{b <= x}, except that a source at the upper end of an increasing flow counts as above all x."""
    if model.increasing and b == model.boundary_point:
        return np.zeros_like(x)
    return (b <= x).astype(float)


# ---------------------------------------------------------------- grid solver


def _unknown_sources(model):
    """Source descriptions for the linear system: (location, kernel, kind, exit rate)."""
    out = []
    b = model.boundary_point
    if b is not None and model.atom_at(b) is None:
        out.append((b, model.boundary_kernel, "boundary", None))
    for a in model.space.atoms:
        out.append((a.location, model.kernel, "atom", a.exit_rate))
    return out


def _flux_matrix(model, x, q):
    """Matrix F with (F p)_i = r(x_i) p_i - int lambda K(x_i, z) p(z) dz."""
    lam = np.asarray(model.lam(x), dtype=float) * np.ones(len(x))
    r = np.asarray(model.r(x), dtype=float) * np.ones(len(x))
    def K(z, y):
        return np.asarray(model.kernel.cdf(z, y), dtype=float) - (z <= y)

    return np.diag(r) - split_operator(q, K, exact_limits=True) * lam[None, :], r, lam


def _pin_stalled_ends(A, x, r):
    """Where the drift vanishes at a window end the flux row is void and any
    mass could sit on that node; tie the node to its neighbours instead."""
    scale = float(np.max(np.abs(r)))
    pinned = []
    for i, side in ((0, 1), (len(x) - 1, -1)):
        if abs(r[i]) <= 1e-12 * scale:
            idx, coef = _side_coefficients(x, side)
            A[i, :] = 0.0
            A[i, i] = 1.0
            np.add.at(A[i], idx[i], -coef[i])
            pinned.append(i)
    return pinned


def solve_stationary_grid(model, n_nodes=DEFAULT_NODES, window=None, tail=DEFAULT_TAIL):
    """Solve the flux-balance equation with closures by dense least squares."""
    x, meta = _grid_for(model, n_nodes, window, tail)
    q = GridQuadrature(x)
    Fm, r, lam = _flux_matrix(model, x, q)
    srcs = _unknown_sources(model)
    n, m = len(x), len(srcs)
    A = np.zeros((n + m + 1, n + m))
    rhs = np.zeros(n + m + 1)
    A[:n, :n] = Fm
    pinned = _pin_stalled_ends(A, x, r)
    for k, (b, kern, kind, rate) in enumerate(srcs):
        col = n + k
        A[:n, col] = -(np.asarray(kern.cdf(b, x), dtype=float) - _source_indicator(model, b, x))
        j = int(locate(x, b)[0])
        if abs(x[j] - b) > 1e-12 * max(1.0, abs(b)):
            raise SolverError(f"grid window does not reach the source at {b}")
        # closure: the source flux equals the flow flux into the point
        A[n + k, col] = 1.0
        A[n + k, j] = -abs(r[j])
        A[n + m, col] = 1.0 / rate if kind == "atom" else 0.0
    A[n + m, :n] = q.full
    rhs[n + m] = 1.0
    sol, _, rank, sv = linalg.lstsq(A, rhs, lapack_driver="gelsd")
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
    if rank < n + m or not math.isfinite(cond) or cond > 1e14:
        raise SolverError(f"stationary system is singular (condition {cond:.3g})", cond)
    resid = float(np.max(np.abs(A @ sol - rhs)))
    p = sol[:n]
    if resid > RESIDUAL_TOL * max(float(np.max(np.abs(r * p))), 1e-300):
        raise SolverError(f"flux balance has no consistent solution (residual {resid:.3g}); "
                          "the model may have no stationary law", cond)
    atoms, sigma = [], 0.0
    for k, (b, kern, kind, rate) in enumerate(srcs):
        if kind == "atom":
            atoms.append((b, float(sol[n + k] / rate)))
        else:
            sigma = float(sol[n + k])
    total = float(q.full @ p) + sum(a for _, a in atoms)
    p, atoms, sigma = p / total, [(b, a / total) for b, a in atoms], sigma / total
    floor = -NEGATIVE_TOL * max(float(p.max()), 1.0)
    if np.delete(p, pinned).min() < floor or any(a < floor for _, a in atoms) or sigma < floor:
        raise NonPhysicalSolutionError(f"solved density has negative values (min {p.min():.3g})", cond)
    p = np.maximum(p, 0.0)
    b = model.boundary_point
    if b is not None and model.atom_at(b) is not None:
        sigma = model.atom_at(b).exit_rate * sum(a for loc, a in atoms if loc == b)
    meta.update(solver="grid", n_nodes=n_nodes, condition=cond, residual=resid)
    d = GridDensity(x, p, atoms, sigma, 0.0, meta)
    d.normalization_error = d.mass() - 1.0
    _flag_degenerate(model, d)
    return d


def _flag_degenerate(model, d):
    b = model.boundary_point
    if b is not None and boundary_density(d, b) <= 1e-12 * max(float(d.values.max()), 1e-300):
        d.metadata["degenerate_closure"] = True


# ---------------------------------------------------------------- regenerative solver


def _regenerative_increasing(model, x, max_iters, tol):
    q = GridQuadrature(x)
    n = len(x)
    r = np.abs(np.asarray(model.r(x), dtype=float) * np.ones(n))
    lam = np.asarray(model.lam(x), dtype=float) * np.ones(n)
    if model.hazard_potential is not None:
        H = np.asarray(model.hazard_potential(x), dtype=float) * np.ones(n)
        H = H - H[0]
    else:
        H = q.cumulative(lam / r)
    with np.errstate(over="ignore"):
        S = np.exp(-(H[:, None] - H[None, :]))
    S = np.where(x[None, :] <= x[:, None], S, 0.0)  # S[u, y]: survive from y to u
    reach = q.left * S
    jump = split_operator(q, model.kernel.density)  # jump[y, u]: pre-jump u to post-jump y
    PM = kernel_point_masses(model.kernel, x, x)

    b = model.boundary_point
    atom = model.atom_at(b) if b is not None else None
    if b is not None and x[-1] != b:
        raise SolverError("grid window must end at the active boundary")
    bkern = model.kernel if atom is not None else model.boundary_kernel
    if b is not None:
        b_dens = np.asarray(bkern.density(b, x), dtype=float) * np.ones(n)
        b_pm = {int(locate(x, loc)[0]): m for loc, m in bkern.point_masses(b)}
    pts = sorted(set(PM) | (set(b_pm) if b is not None else set()))

    dens = np.full(n, 1.0 / (x[-1] - x[0]))
    c = np.zeros(len(pts))
    if not np.any(lam > 0) and b is None:
        raise DegenerateModelError("model has no jumps")
    for it in range(1, max_iters + 1):
        V = reach @ dens + sum(c[k] * S[:, pts[k]] for k in range(len(pts)))
        w = lam / r * V
        forced = V[-1] if b is not None else 0.0
        new = jump @ w
        newc = np.array([q.full @ (w * PM[k]) if k in PM else 0.0 for k in pts])
        if b is not None:
            new = new + forced * b_dens
            newc = newc + np.array([b_pm.get(k, 0.0) * forced for k in pts])
        tot = float(q.full @ new) + float(newc.sum())
        if not tot > 0:
            raise DegenerateModelError("post-jump chain lost all mass")
        new, newc = new / tot, newc / tot
        change = float(q.full @ np.abs(new - dens)) + float(np.abs(newc - c).sum())
        dens, c = new, newc
        if change < tol:
            break
    else:
        raise IterationLimitError(f"regenerative iteration did not converge in {max_iters} steps", change)
    V = reach @ dens + sum(c[k] * S[:, pts[k]] for k in range(len(pts)))
    occ = V / r
    forced = V[-1] if b is not None else 0.0
    atom_time = forced / atom.exit_rate if atom is not None else 0.0
    cycle = float(q.full @ occ) + atom_time
    post = GridDensity(x, dens, [(float(x[k]), float(c[i])) for i, k in enumerate(pts) if c[i] > 0])
    return occ / cycle, [(b, atom_time / cycle)] if atom is not None else [], forced / cycle, it, change, post


def solve_stationary_regenerative(model, n_nodes=DEFAULT_NODES, max_iters=10000, window=None,
                                  tail=DEFAULT_TAIL, tol=1e-10):
    """Power-iterate the post-jump chain, then average occupation over a cycle."""
    x, meta = _grid_for(model, n_nodes, window, tail)
    if model.increasing:
        p, atoms, sigma, its, change, post = _regenerative_increasing(model, x, max_iters, tol)
    else:
        p, atoms, sigma, its, change, post = _regenerative_increasing(mirror_model(model), -x[::-1], max_iters, tol)
        p = p[::-1]
        atoms = [(-loc, m) for loc, m in atoms]
        post = GridDensity(x, post.values[::-1], [(-loc, m) for loc, m in post.atoms])
    meta.update(solver="regenerative", n_nodes=n_nodes, iterations=its, last_change=change)
    d = GridDensity(x, p, atoms, float(sigma), 0.0, meta)
    d.normalization_error = d.mass() - 1.0
    d.metadata["post_jump"] = post
    return d


# ---------------------------------------------------------------- closed forms


def _neumann_mg1(spec, x, tol=1e-12, max_iters=100000):
    """Unnormalized density with nu({0}) = 1, then normalization: returns (p, atom, iterations)."""
    lam0, F = spec.params["lam0"], spec.params["F"]
    q = GridQuadrature(x)
    base = lam0 * F.sf(x)
    M = lam0 * q.left * np.where(x[None, :] <= x[:, None], F.sf(np.maximum(x[:, None] - x[None, :], 0.0)), 0.0)
    p = base.copy()
    for it in range(1, max_iters + 1):
        new = base + M @ p
        inc = float(q.full @ np.abs(new - p))
        p = new
        if inc < tol:
            break
    else:
        raise IterationLimitError("Neumann iteration did not converge", inc)
    atom = 1.0 / (1.0 + float(q.full @ p))
    return p * atom, atom, it


def closed_form_stationary(spec, n_nodes=DEFAULT_NODES, window=None, tail=DEFAULT_TAIL):
    """Stationary law of a zoo model from its closed form (M/G/1 by Neumann series)."""
    from .zoo import closed_form_density, zoo_build, zoo_spec

    if isinstance(spec, str):
        spec = zoo_spec(spec)
    model = zoo_build(spec)
    x, meta = _grid_for(model, n_nodes, window, tail)
    meta.update(solver="closed", n_nodes=n_nodes)
    if spec.variant == "reflected_mg1":
        p, atom, its = _neumann_mg1(spec, x)
        meta["iterations"] = its
        d = GridDensity(x, p, [(0.0, atom)], float(p[0]), 0.0, meta)
    else:
        res = closed_form_density(spec, x)
        if res is None:
            raise ModelSpecError(f"no closed form for {spec.variant}")
        vals, atoms = res
        d = GridDensity(x, np.asarray(vals, dtype=float), atoms, 0.0, 0.0, meta)
        b = model.boundary_point
        if b is not None:
            d.boundary_mass = float(abs(model.r(b)) * boundary_density(d, b))
    d.normalization_error = d.mass() - 1.0
    return d


# ---------------------------------------------------------------- derived quantities


def boundary_density(density, b):
    """nu'(b) by quadratic extrapolation through the three nodes nearest b."""
    x, v = density.grid, density.values
    idx = np.argsort(np.abs(x - b))[:3]
    coef = np.polyfit(x[idx] - b, v[idx], 2)
    return float(coef[-1])


def boundary_mass(density, model):
    """sigma at the active boundary: |r(b)| nu'(b)."""
    b = model.boundary_point
    if b is None:
        raise NoBoundaryError(f"model {model.name} has no active boundary")
    return float(abs(model.r(b)) * boundary_density(density, b))


def embedded_laws(density, model):
    """pi_W and pi_Q with the total jump rate ||xi||."""
    x = density.grid
    q = density.quad
    p = density.values
    lam = np.asarray(model.lam(x), dtype=float) * np.ones(len(x))
    srcs = point_sources(model, density)
    xi = float(q.full @ (lam * p)) + sum(s.flux for s in srcs)
    if not xi > 0:
        raise DegenerateModelError("total jump rate is zero")
    before = GridDensity(x, lam * p / xi, [(s.location, s.flux / xi) for s in srcs if s.flux > 0])
    after_vals = split_operator(q, model.kernel.density) @ (lam * p)
    pm = {}
    for k, masses in kernel_point_masses(model.kernel, x, x).items():
        pm[k] = pm.get(k, 0.0) + float(q.full @ (lam * p * masses))
    for s in srcs:
        after_vals = after_vals + s.flux * np.asarray(s.kernel.density(s.location, x), dtype=float)
        for loc, m in s.kernel.point_masses(s.location):
            k = int(locate(x, loc)[0])
            pm[k] = pm.get(k, 0.0) + s.flux * m
    after = GridDensity(x, after_vals / xi, [(float(x[k]), v / xi) for k, v in sorted(pm.items()) if v > 0])
    return EmbeddedDist(before, after, xi)


def equation_residual(model, density):
    """Relative L-infinity residual of the flux-balance equation at interior nodes."""
    x = density.grid
    q = density.quad
    Fm, r, _ = _flux_matrix(model, x, q)
    res = Fm @ density.values
    for s in point_sources(model, density):
        res = res - s.flux * (np.asarray(s.kernel.cdf(s.location, x), dtype=float) - _source_indicator(model, s.location, x))
    scale = np.max(np.abs(r * density.values))
    return float(np.max(np.abs(res[1:-1])) / scale)


def _kernel_mean(kern, z, f, x, q):
    """mu_z f for one source point z."""
    val = float(q.full @ (np.asarray(kern.density(z, x), dtype=float) * f(x)))
    return val + sum(m * float(f(np.asarray(loc))) for loc, m in kern.point_masses(z))


def stationarity_residual(model, density, f, df):
    """|int A f dnu + sum over point sources of flux (mu f - f)|, scaled by
    1 + max |f| on the grid. Zero for an exact stationary law."""
    x = density.grid
    q = density.quad
    p = density.values
    lam = np.asarray(model.lam(x), dtype=float) * np.ones(len(x))
    r = np.asarray(model.r(x), dtype=float) * np.ones(len(x))
    fx = np.asarray(f(x), dtype=float)
    D = kernel_density_matrix(model.kernel, x)
    lo, hi = one_sided(model.kernel.density, x, source=False)
    mu_f = split_matrix(q, D, lo, hi) @ fx
    for k, masses in kernel_point_masses(model.kernel, x, x).items():
        mu_f = mu_f + masses * fx[k]
    total = float(q.full @ ((r * np.asarray(df(x), dtype=float) + lam * (mu_f - fx)) * p))
    for s in point_sources(model, density):
        total += s.flux * (_kernel_mean(s.kernel, s.location, f, x, q) - float(f(np.asarray(s.location))))
    return abs(total) / (1.0 + float(np.max(np.abs(fx))))


def l1_distance(a, b):
    """L1 distance between two densities on the same grid, atoms included."""
    if not np.array_equal(a.grid, b.grid):
        raise ValueError("densities live on different grids")
    locs = {loc for loc, _ in a.atoms} | {loc for loc, _ in b.atoms}
    return float(a.quad.full @ np.abs(a.values - b.values)) + sum(abs(a.atom_mass(l) - b.atom_mass(l)) for l in locs)
