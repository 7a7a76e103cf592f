"""Node-based quadrature and differentiation on (possibly nonuniform) 1-D grids.

All rules are built from local cubic Lagrange interpolants, so integrals over
any run of consecutive nodes are fourth-order accurate. Integrals can be split
at interior nodes; each piece then only uses node values from its own side,
which is what makes integrands with a jump or kink at a node tractable.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np


def _cell_rule(x, cells, offsets):
    """Weights integrating the Lagrange interpolant through ``cells + offsets``
    over each cell ``[x[m], x[m+1]]``. Returns (indices, weights), shape (k, 4)."""
    idx = cells[:, None] + offsets[None, :]
    a = x[cells]
    h = x[cells + 1] - a
    s = (x[idx] - a[:, None]) / h[:, None]  # local coordinates, cell is [0, 1]
    powers = np.arange(4)
    vander = s[:, None, :] ** powers[None, :, None]  # (k, p, j)
    moments = np.broadcast_to(1.0 / (powers + 1.0), (len(cells), 4))
    w = np.linalg.solve(vander, moments[..., None])[..., 0]
    return idx, w * h[:, None]


class GridQuadrature:
    """Quadrature weights on the nodes ``x`` (strictly increasing, n >= 2)."""

    def __init__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or len(x) < 2 or np.any(np.diff(x) <= 0):
            raise ValueError("grid must be strictly increasing with at least 2 nodes")
        self.x = x
        self.n = len(x)
        n_cells = self.n - 1
        self._rules = {}
        if self.n >= 4:
            cells = np.arange(n_cells)
            for name, off in (("C", (-1, 0, 1, 2)), ("L", (-2, -1, 0, 1)), ("R", (0, 1, 2, 3))):
                off = np.array(off)
                ok = (cells + off.min() >= 0) & (cells + off.max() <= n_cells)
                idx = np.zeros((n_cells, 4), dtype=int)
                w = np.zeros((n_cells, 4))
                if ok.any():
                    i, ww = _cell_rule(x, cells[ok], off)
                    idx[ok], w[ok] = i, ww
                self._rules[name] = (idx, w)

    def _small(self, lo, hi):
        # fewer than four nodes: exact polynomial through all of them
        nodes = np.arange(lo, hi + 1)
        t = self.x[nodes]
        a, b = t[0], t[-1]
        s = (t - a) / (b - a)
        p = np.arange(len(nodes))
        w = np.linalg.solve(s[None, :] ** p[:, None], 1.0 / (p + 1.0)) * (b - a)
        out = np.zeros(self.n)
        out[nodes] = w
        return out

    def segment(self, lo, hi):
        """Weight vector for the integral from ``x[lo]`` to ``x[hi]`` (lo <= hi)."""
        out = np.zeros(self.n)
        if hi <= lo:
            return out
        if hi - lo < 3:
            return self._small(lo, hi)
        idx, w = self._rules["R"]
        np.add.at(out, idx[lo], w[lo])
        idx, w = self._rules["L"]
        np.add.at(out, idx[hi - 1], w[hi - 1])
        if hi - lo > 2:
            idx, w = self._rules["C"]
            sl = slice(lo + 1, hi - 1)
            out += np.bincount(idx[sl].ravel(), w[sl].ravel(), minlength=self.n)
        return out

    def weights(self, lo=0, hi=None, splits=()):
        """Weights from node ``lo`` to node ``hi``, never interpolating across
        any node index listed in ``splits``."""
        hi = self.n - 1 if hi is None else hi
        cuts = sorted({s for s in splits if lo < s < hi})
        bounds = [lo, *cuts, hi]
        out = np.zeros(self.n)
        for a, b in zip(bounds[:-1], bounds[1:]):
            out += self.segment(a, b)
        return out

    @cached_property
    def full(self):
        return self.weights()

    @cached_property
    def left(self):
        """Row i integrates from the first node to node i."""
        return np.array([self.segment(0, i) for i in range(self.n)])

    @cached_property
    def right(self):
        """Row i integrates from node i to the last node."""
        return np.array([self.segment(i, self.n - 1) for i in range(self.n)])

    @cached_property
    def split(self):
        """Row i integrates over the whole grid, split at node i."""
        return self.left + self.right

    def cumulative(self, f):
        """Running integral of node values ``f`` from the first node."""
        return self.left @ np.asarray(f, dtype=float)


def derivative_matrix(x, width=5):
    """Sparse-pattern dense matrix D with (D @ f)[i] ~ f'(x[i]).

    Uses ``width``-point stencils (centered where possible, one-sided at the
    ends), giving order ``width - 1`` accuracy on smooth data.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    width = min(width, n)
    half = width // 2
    D = np.zeros((n, n))
    for i in range(n):
        start = min(max(i - half, 0), n - width)
        nodes = np.arange(start, start + width)
        scale = x[nodes[-1]] - x[nodes[0]]
        s = (x[nodes] - x[i]) / scale
        p = np.arange(width)
        rhs = np.zeros(width)
        rhs[1] = 1.0
        D[i, nodes] = np.linalg.solve(s[None, :] ** p[:, None], rhs) / scale
    return D


def locate(x, values):
    """Index of the grid node nearest to each value."""
    x = np.asarray(x)
    values = np.atleast_1d(np.asarray(values, dtype=float))
    j = np.clip(np.searchsorted(x, values), 1, len(x) - 1)
    left_closer = (values - x[j - 1]) <= (x[j] - values)
    return np.where(left_closer, j - 1, j)


def _side_coefficients(x, side, k=4):
    """For every node i: indices of up to k neighbours on one side and the
    Lagrange weights extrapolating their values back to x[i]. Missing
    neighbours (near the ends) get index i and weight 0."""
    n = len(x)
    rows = np.arange(n)
    idx = rows[:, None] + side * np.arange(1, k + 1)[None, :]
    valid = (idx >= 0) & (idx < n)
    idx = np.where(valid, idx, rows[:, None])
    t = x[idx] - x[:, None]
    coef = np.ones((n, k))
    for j in range(k):
        for m in range(k):
            if m != j:
                # points beyond the end drop out of the product
                f = np.where(valid[:, m], (0.0 - t[:, m]) / np.where(valid[:, m], t[:, j] - t[:, m], 1.0), 1.0)
                coef[:, j] *= f
    return idx, np.where(valid, coef, 0.0)


def one_sided_operator(x, WL, WR, M, below=None, above=None):
    """Operator Op with Op @ v ~ row-wise integrals of M * v, where row i is
    split at node i into a ``WL`` part (below) and a ``WR`` part (above).

    M may jump at the diagonal. Its one-sided diagonal values are taken from
    ``below`` / ``above`` where those are finite, else extrapolated from that
    side's neighbours. Extrapolation is the safe choice for products such as
    p(z) f(z, y) whose factors are zero/singular at the diagonal separately;
    given limits are better at the grid ends where neighbours run out.
    """
    n = len(x)
    rows = np.arange(n)
    M = np.array(M, dtype=float)
    M[rows, rows] = 0.0  # never used directly; may be singular
    Op = WL * M + WR * M
    wl, wr = WL[rows, rows].copy(), WR[rows, rows].copy()
    for side, w, lim in ((-1, wl, below), (1, wr, above)):
        known = np.zeros(n, dtype=bool) if lim is None else np.isfinite(lim)
        if known.any():
            Op[rows[known], rows[known]] += w[known] * lim[known]
        w = np.where(known, 0.0, w)
        idx, coef = _side_coefficients(x, side)
        for j in range(idx.shape[1]):
            np.add.at(Op, (rows, idx[:, j]), w * coef[:, j] * M[rows, idx[:, j]])
    return Op


def split_matrix(quad, M, below=None, above=None):
    """Operator integrating row i of M over the whole grid, split at node i."""
    return one_sided_operator(quad.x, quad.left, quad.right, M, below, above)


def split_operator(quad, f, exact_limits=False, rel_step=1e-9):
    """Matrix Op with (Op @ v)[i] ~ integral of f(z, x_i) v(z) dz, where f
    may jump or kink at z = x_i. ``f(z, y)`` must broadcast over arrays.

    With ``exact_limits`` the diagonal one-sided values are f(x_i -+ d, x_i)
    wherever finite; only use it when f is bounded there.
    """
    x = quad.x
    F = np.asarray(f(x[None, :], x[:, None]), dtype=float) * np.ones((quad.n, quad.n))
    lims = one_sided(f, x, rel_step) if exact_limits else (None, None)
    return split_matrix(quad, F, *lims)


def one_sided(f, x, rel_step=1e-9, source=True):
    """Limits of f(z, y) at z = y = x_i from below and above in z
    (``source=False``: in y)."""
    d = rel_step * np.maximum(1.0, np.abs(x))
    with np.errstate(all="ignore"):
        return _one_sided(f, x, d, source)


def _one_sided(f, x, d, source):
    if source:
        return (np.asarray(f(x - d, x), dtype=float) * np.ones_like(x),
                np.asarray(f(x + d, x), dtype=float) * np.ones_like(x))
    return (np.asarray(f(x, x - d), dtype=float) * np.ones_like(x),
            np.asarray(f(x, x + d), dtype=float) * np.ones_like(x))


def interval_split_weights(quad, a, b):
    """Weights over [x_a, x_b] for every row i, split at node i.

    Returns (left, right) matrices: row i of ``left`` covers the part of the
    interval below x_i and row i of ``right`` the part above it.
    """
    n = quad.n
    WL = np.zeros((n, n))
    WR = np.zeros((n, n))
    if b <= a:
        return WL, WR
    sub = GridQuadrature(quad.x[a : b + 1])
    WR[:a, a : b + 1] = sub.full
    WL[a : b + 1, a : b + 1] = sub.left
    WR[a : b + 1, a : b + 1] = sub.right
    WL[b + 1 :, a : b + 1] = sub.full
    return WL, WR
