"""Green functions of the weighted Laplacian and their regularizations.

The unregularized kernel is the spectral sum over nonzero modes; the
epsilon-regularized variant damps each term by the heat semigroup.  The
verification helpers check the defining action identity, the Laplacian
identity, distance-power comparability, slope bounds, and strong W^{1,p}
convergence of the regularization, all on the discrete model spaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .space import MetricMeasureSpace
from .spectral import SpectralBasis, heat_kernel_matrix, heat_semigroup_apply


@dataclass(eq=False)
class GreenFunction:
    """Symmetric mean-zero Green matrix at a fixed regularization time."""

    values: np.ndarray
    epsilon: float
    basis_ref: SpectralBasis

    @property
    def space(self) -> MetricMeasureSpace:
        return self.basis_ref.space


@dataclass(frozen=True)
class ShiftedGreen:
    """Comparability data: A two-sided constant, A_bar shift, alpha floor."""

    base: GreenFunction
    A: float
    A_bar: float
    alpha: float


def _check_connected(basis: SpectralBasis) -> None:
    if basis.k_max < 2 or basis.eigenvalues[1] <= 1e-12:
        raise ValueError("Green function needs a spectral gap (lambda_1 > 0)")


def green_function(basis: SpectralBasis, epsilon: float = 0.0) -> GreenFunction:
    """Assemble the dense Green matrix sum_{i>=1} e^{-lam_i eps} u_i u_i^T / lam_i."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    _check_connected(basis)
    lam = basis.eigenvalues[1:]
    u = basis.eigenfunctions[:, 1:]
    coeff = np.exp(-lam * epsilon) / lam
    values = (u * coeff[None, :]) @ u.T
    values = 0.5 * (values + values.T)
    return GreenFunction(values=values, epsilon=float(epsilon), basis_ref=basis)


def green(basis: SpectralBasis, epsilon: float, x: int, y: int) -> float:
    """Pointwise G^epsilon(x, y) from the spectral sum."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    _check_connected(basis)
    lam = basis.eigenvalues[1:]
    ux = basis.eigenfunctions[x, 1:]
    uy = basis.eigenfunctions[y, 1:]
    return float(np.sum(np.exp(-lam * epsilon) / lam * ux * uy))


def green_time_quadrature(basis: SpectralBasis, x: int, y: int,
                          t_lo: float = 1e-6, t_hi: float = 50.0,
                          num: int = 400) -> float:
    """Independent route to G(x,y): integrate p_t(x,y) - 1 over time.

    Log-spaced trapezoid plus the analytic tail of the leading mode above
    t_hi.  Reliable off the diagonal; on the diagonal the truncated spike
    below t_lo costs more than the 1e-4 cross-check budget.
    """
    _check_connected(basis)
    ts = np.geomspace(t_lo, t_hi, num)
    lam = basis.eigenvalues[1:]
    ux = basis.eigenfunctions[x, 1:]
    uy = basis.eigenfunctions[y, 1:]
    vals = np.exp(-np.outer(ts, lam)) @ (ux * uy)
    head = float(np.trapezoid(vals, ts))
    tail = float(np.sum(np.exp(-lam * t_hi) / lam * ux * uy))
    return head + tail


def verify_green_action(basis: SpectralBasis, f: np.ndarray, x: int) -> float:
    """Residual of sum_y G(x,y) (Delta f)(y) w(y) = mean(f) - f(x)."""
    f = np.asarray(f, dtype=float)
    g = green_function(basis)
    w = g.space.weights
    lap_f = -(basis.eigenfunctions @ (basis.eigenvalues * basis.coefficients(f)))
    lhs = float(g.values[x] @ (lap_f * w))
    rhs = float(np.sum(f * w) - f[x])
    return abs(lhs - rhs)


def verify_green_laplacian(basis: SpectralBasis, epsilon: float, x: int) -> float:
    """Residual of (Delta G^eps_x)(y) = 1 - p_eps(x, y) over all y."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    g = green_function(basis, epsilon)
    col = g.values[x]
    lap = -(basis.eigenfunctions @ (basis.eigenvalues * basis.coefficients(col)))
    p_row = heat_kernel_matrix(basis, epsilon, rows=np.array([x]))[0]
    return float(np.abs(lap - (1.0 - p_row)).max())


def fit_comparability_constants(green_fn: GreenFunction, space: MetricMeasureSpace,
                                n: int, distance_band=None) -> ShiftedGreen:
    """Two-sided comparison of the shifted Green kernel with d^{2-n}.

    A_bar is the smallest shift making G positive off the diagonal plus a
    10% margin; A is the smallest constant with |G| <= A d^{2-n} and
    (1/A) d^{2-n} <= G + A_bar <= A d^{2-n} on the pair set.  An optional
    (lo, hi) distance band restricts the pairs (used for cross-resolution
    stability, where the near-diagonal discretization artifacts dominate).
    """
    if n <= 2:
        raise ValueError("comparability needs n > 2; lift n = 2 spaces first")
    g = green_fn.values
    d = space.pairwise()
    off = ~np.eye(space.npoints, dtype=bool)
    if distance_band is not None:
        lo, hi = distance_band
        off &= (d >= lo) & (d <= hi)
        if not off.any():
            raise ValueError("empty distance band")
    a_bar = 1.1 * max(0.0, -float(g[off].min()))
    shifted = g + a_bar
    power = d[off] ** (2 - n)
    ratios = [np.abs(g[off]) / power, shifted[off] / power, power / shifted[off]]
    big = max(float(r.max()) for r in ratios)
    if not np.isfinite(big) or big > 1e6:
        raise ValueError(f"comparability fit failed (A = {big:.3g})")
    alpha = float(shifted[off].min())
    return ShiftedGreen(base=green_fn, A=big, A_bar=a_bar, alpha=alpha)


def _slope_neighbors(space: MetricMeasureSpace):
    d = space.pairwise()
    mask = (d > 0) & (d <= 1.5 * space.spacing)
    return d, mask


def green_gradient(basis: SpectralBasis, x: int,
                   green_fn: GreenFunction | None = None) -> np.ndarray:
    """Discrete slope of G_x: max over nearby z of |G_x(z)-G_x(y)|/d(z,y).

    Entry x itself is 0; the neighbor set is the punctured ball of radius
    1.5 grid spacings.  Pass a prebuilt matrix to skip re-assembly.
    """
    g = green_function(basis) if green_fn is None else green_fn
    col = g.values[x]
    d, mask = _slope_neighbors(g.space)
    diff = np.abs(col[None, :] - col[:, None])
    quot = np.where(mask, diff / np.where(mask, d, 1.0), 0.0)
    slopes = quot.max(axis=1)
    slopes[x] = 0.0
    return slopes


def fit_slope_constant(basis: SpectralBasis, space: MetricMeasureSpace, n: int,
                       sample_x, green_fn: GreenFunction | None = None) -> float:
    """Smallest C with slope(G_x)(y) <= C / d(x,y)^{n-1} over sampled x."""
    if green_fn is None:
        green_fn = green_function(basis)
    d = space.pairwise()
    best = 0.0
    for x in np.asarray(sample_x, dtype=int):
        slopes = green_gradient(basis, x, green_fn)
        mask = d[x] > 0
        best = max(best, float((slopes[mask] * d[x, mask] ** (n - 1)).max()))
    return best


@dataclass(frozen=True)
class W1pReport:
    """Per-epsilon W^{1,p} distance of G^eps_x from G_x (report only)."""

    epsilons: tuple[float, ...]
    norms: tuple[float, ...]
    decreasing_within_10pct: bool
    final_norm: float
    final_below_tol: bool


def _lp_norm(w: np.ndarray, v: np.ndarray, p: float) -> float:
    return float(np.sum(np.abs(v) ** p * w) ** (1.0 / p))


def verify_w1p_convergence(basis: SpectralBasis, x: int, p: float,
                           eps_sequence) -> W1pReport:
    """Track ||G^eps_x - G_x||_p + ||slope(G^eps_x - G_x)||_p as eps -> 0."""
    if p < 1:
        raise ValueError("p must be at least 1")
    eps_sequence = [float(e) for e in eps_sequence]
    if any(b >= a for a, b in zip(eps_sequence, eps_sequence[1:])):
        raise ValueError("eps_sequence must be strictly decreasing")
    g0 = green_function(basis)
    space = g0.space
    w = space.weights
    d, mask = _slope_neighbors(space)
    safe = np.where(mask, d, 1.0)
    norms = []
    for eps in eps_sequence:
        diff = green_function(basis, eps).values[x] - g0.values[x]
        slope = np.where(mask, np.abs(diff[None, :] - diff[:, None]) / safe, 0.0).max(axis=1)
        norms.append(_lp_norm(w, diff, p) + _lp_norm(w, slope, p))
    drops = all(b <= 1.10 * a for a, b in zip(norms, norms[1:]))
    final = norms[-1] if norms else 0.0
    return W1pReport(epsilons=tuple(eps_sequence), norms=tuple(norms),
                     decreasing_within_10pct=drops, final_norm=final,
                     final_below_tol=final < 1e-6)


def slope_lp_semigroup_consistency(basis: SpectralBasis, x: int, p: float,
                                   epsilon: float, K: float = 0.0,
                                   tol: float = 0.05) -> bool:
    """Check ||slope G^eps_x||_p <= e^{-K eps} ||slope G_x||_p (1 + tol)."""
    space = basis.space
    w = space.weights
    d, mask = _slope_neighbors(space)
    safe = np.where(mask, d, 1.0)

    def slope_norm(col):
        s = np.where(mask, np.abs(col[None, :] - col[:, None]) / safe, 0.0).max(axis=1)
        return _lp_norm(w, s, p)

    reg = green_function(basis, epsilon).values[x]
    base = green_function(basis).values[x]
    return slope_norm(reg) <= np.exp(-K * epsilon) * slope_norm(base) * (1.0 + tol)


def regularized_matches_semigroup(basis: SpectralBasis, epsilon: float) -> float:
    """Max deviation of G^eps_x from P_{eps/2} G^{eps/2}_x over all x."""
    half = green_function(basis, epsilon / 2.0)
    full = green_function(basis, epsilon)
    pushed = np.stack([heat_semigroup_apply(basis, epsilon / 2.0, half.values[i])
                       for i in range(half.space.npoints)])
    return float(np.abs(pushed - full.values).max())
