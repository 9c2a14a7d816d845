"""Discrete Laplacians, spectral bases, and heat kernels.

Two assembly schemes: an exact Fourier diagonalization on flat-torus grids
(modes are sampled trigonometric products, eigenvalues 4 pi^2 |k|^2, and both
values and gradients evaluate in closed form at arbitrary chart points), and
a calibrated Gaussian-kernel graph scheme for spheres and explicit graphs.
The heat kernel and semigroup come from the spectral identity
p_t(x,y) = sum_i exp(-lambda_i t) u_i(x) u_i(y).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .space import AhlforsReport, MetricMeasureSpace, ball, check_ahlfors

__all__ = [
    "LaplacianOperator",
    "SpectralBasis",
    "HeatKernelReport",
    "assemble_laplacian",
    "eigendecompose",
    "heat_kernel",
    "heat_kernel_matrix",
    "heat_semigroup_apply",
    "verify_gaussian_bounds",
    "verify_bakry_emery",
    "eigenfunction_bounds",
]

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# exact torus modes


@dataclass(frozen=True)
class TorusMode:
    """One trigonometric product mode: per-axis (kind, frequency) factors."""

    axes: tuple[tuple[str, int], ...]
    eigenvalue: float


def _axis_modes(m: int) -> list[tuple[str, int]]:
    out: list[tuple[str, int]] = [("const", 0)]
    for k in range(1, (m - 1) // 2 + 1):
        out.append(("cos", k))
        out.append(("sin", k))
    if m % 2 == 0:
        out.append(("nyq", m // 2))
    return out


def _axis_values(kind: str, k: int, x: np.ndarray) -> np.ndarray:
    if kind == "const":
        return np.ones_like(x)
    if kind == "cos":
        return np.sqrt(2.0) * np.cos(TWO_PI * k * x)
    if kind == "sin":
        return np.sqrt(2.0) * np.sin(TWO_PI * k * x)
    return np.cos(TWO_PI * k * x)  # Nyquist: amplitude 1, values +-1 on grid


def _axis_derivs(kind: str, k: int, x: np.ndarray) -> np.ndarray:
    if kind == "const":
        return np.zeros_like(x)
    if kind == "cos":
        return -np.sqrt(2.0) * TWO_PI * k * np.sin(TWO_PI * k * x)
    if kind == "sin":
        return np.sqrt(2.0) * TWO_PI * k * np.cos(TWO_PI * k * x)
    return -TWO_PI * k * np.sin(TWO_PI * k * x)


def _torus_mode_table(res: tuple[int, ...]) -> list[TorusMode]:
    tables = [_axis_modes(m) for m in res]
    modes: list[TorusMode] = []
    grids = np.meshgrid(*[np.arange(len(t)) for t in tables], indexing="ij")
    for idx in zip(*[g.ravel() for g in grids]):
        axes = tuple(tables[a][i] for a, i in enumerate(idx))
        lam = 4.0 * np.pi**2 * sum(k * k for _, k in axes)
        modes.append(TorusMode(axes=axes, eigenvalue=lam))
    modes.sort(key=lambda mo: mo.eigenvalue)
    return modes


def _torus_basis_matrix(res: tuple[int, ...], modes: list[TorusMode]) -> np.ndarray:
    axis_mats = []
    for a, m in enumerate(res):
        x = np.arange(m) / m
        cols = [_axis_values(kind, k, x) for kind, k in _axis_modes(m)]
        axis_mats.append(np.column_stack(cols))
    full = axis_mats[0]
    for mat in axis_mats[1:]:
        full = np.kron(full, mat)
    # kron column order is the C-order mode product; permute to sorted order
    tables = [_axis_modes(m) for m in res]
    index_of = [{mk: i for i, mk in enumerate(t)} for t in tables]
    strides = np.cumprod([1] + [len(t) for t in reversed(tables[1:])])[::-1]
    cols = [
        sum(index_of[a][mo.axes[a]] * strides[a] for a in range(len(res)))
        for mo in modes
    ]
    return full[:, cols]


# ---------------------------------------------------------------------------
# operators and bases


@dataclass(eq=False)
class LaplacianOperator:
    """Action of -Delta, self-adjoint for the weighted inner product."""

    space: MetricMeasureSpace
    scheme: str
    conductances: np.ndarray | None = None  # dense symmetric, graph scheme
    modes: list[TorusMode] | None = None  # exact scheme
    _basis_matrix: np.ndarray | None = field(default=None, repr=False)

    def basis_matrix(self) -> np.ndarray:
        if self._basis_matrix is None:
            res = self.space.torus_axes()
            self._basis_matrix = _torus_basis_matrix(res, self.modes)
        return self._basis_matrix

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Apply -Delta to a value vector (or a stack of columns)."""
        f = np.asarray(f, dtype=float)
        w = self.space.weights
        if self.scheme == "torus-fourier-exact":
            u = self.basis_matrix()
            lam = np.array([mo.eigenvalue for mo in self.modes])
            if f.ndim == 1:
                return u @ (lam * (u.T @ (w * f)))
            return u @ (lam[:, None] * (u.T @ (w[:, None] * f)))
        c = self.conductances
        deg = c.sum(axis=1)
        if f.ndim == 1:
            return (deg * f - c @ f) / w
        return (deg[:, None] * f - c @ f) / w[:, None]

    def matrix(self) -> np.ndarray:
        """Dense matrix of -Delta acting on value vectors."""
        return self.apply(np.eye(self.space.npoints))


@dataclass(eq=False)
class SpectralBasis:
    """Sorted eigenvalues and w-orthonormal eigenfunctions of -Delta."""

    space: MetricMeasureSpace
    scheme: str
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # (npoints, k_max)
    k_max: int
    modes: list[TorusMode] | None = None

    @property
    def weights(self) -> np.ndarray:
        return self.space.weights

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        """Expansion coefficients <f, u_i> in the weighted inner product."""
        f = np.asarray(f, dtype=float)
        if f.ndim == 1:
            return self.eigenfunctions.T @ (self.weights * f)
        return self.eigenfunctions.T @ (self.weights[:, None] * f)

    def _mode_subset(self, indices):
        if self.modes is None:
            raise ValueError("off-grid evaluation needs the exact scheme")
        if indices is None:
            return list(enumerate(self.modes))
        return [(j, self.modes[int(i)]) for j, i in enumerate(indices)]

    def evaluate_modes(self, coords: np.ndarray, indices=None) -> np.ndarray:
        """Eigenfunction values at arbitrary chart coordinates (exact scheme)."""
        chosen = self._mode_subset(indices)
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        out = np.ones((len(coords), len(chosen)))
        for i, mo in chosen:
            for a, (kind, k) in enumerate(mo.axes):
                out[:, i] *= _axis_values(kind, k, coords[:, a])
        return out

    def evaluate_mode_gradients(self, coords: np.ndarray, indices=None) -> np.ndarray:
        """Per-axis eigenfunction derivatives at chart coordinates; shape (npts, k, dims)."""
        chosen = self._mode_subset(indices)
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        dims = coords.shape[1]
        vals = np.ones((len(coords), len(chosen), dims))
        for i, mo in chosen:
            for a, (kind, k) in enumerate(mo.axes):
                fa = _axis_values(kind, k, coords[:, a])
                da = _axis_derivs(kind, k, coords[:, a])
                for b in range(dims):
                    vals[:, i, b] *= da if b == a else fa
        return vals


@dataclass(frozen=True)
class HeatKernelReport:
    """Fitted two-sided kernel bound constants and consistency residuals."""

    C1_low: float
    C1_high: float
    C2: float
    C3: float
    closed_form_deviation: float
    mass_residual: float


_CAL_TARGETS = {"torus": None, "sphere": 6.0}


def _calibration_probes(space: MetricMeasureSpace):
    """Second-degree chart harmonics and their analytic eigenvalues."""
    if space.kind == "torus":
        x = space.points
        d = x.shape[1]
        if d == 1:
            probes = [np.cos(2 * TWO_PI * x[:, 0]), np.sin(2 * TWO_PI * x[:, 0])]
            return probes, 16.0 * np.pi**2
        probes = []
        for a in range(d):
            for b in range(a + 1, d):
                s, t = x[:, a], x[:, b]
                probes += [
                    np.cos(TWO_PI * (s + t)),
                    np.sin(TWO_PI * (s + t)),
                    np.cos(TWO_PI * (s - t)),
                ]
        return probes, 8.0 * np.pi**2
    if space.kind == "sphere":
        p = space.points
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        return [x * y, y * z, z * x, x * x - y * y, 2 * z * z - x * x - y * y], 6.0
    raise ValueError(f"no calibration harmonics for chart {space.chart!r}")


def assemble_laplacian(space: MetricMeasureSpace, scheme: str = "auto",
                       bandwidth: float | None = None) -> LaplacianOperator:
    """Assemble -Delta on a model space.

    "torus-fourier-exact" diagonalizes directly in the sampled Fourier basis.
    "graph-gaussian-weights" builds symmetric kernel conductances
    exp(-d^2/bandwidth^2) truncated at 3*bandwidth, with a single global scale
    calibrated so second-degree chart harmonics reproduce their analytic
    eigenvalues (5% gate); on explicit graph charts the stored conductances
    are used as-is.
    """
    if scheme == "auto":
        scheme = "torus-fourier-exact" if space.torus_axes() else "graph-gaussian-weights"
    if scheme == "torus-fourier-exact":
        res = space.torus_axes()
        if res is None:
            raise ValueError("exact scheme requires a flat-torus chart")
        return LaplacianOperator(space=space, scheme=scheme, modes=_torus_mode_table(res))
    if scheme != "graph-gaussian-weights":
        raise ValueError(f"unknown scheme {scheme!r}")

    w = space.weights
    if space.kind == "graph":
        n = space.npoints
        e = space.edges
        c = coo_matrix((e[:, 2], (e[:, 0].astype(int), e[:, 1].astype(int))), shape=(n, n)).toarray()
        c = c + c.T
    else:
        if bandwidth is None:
            bandwidth = 2.0 * space.spacing
        if bandwidth < space.spacing:
            raise ValueError("bandwidth must be at least the grid spacing")
        d = space.pairwise()
        kernel = np.where((d > 0) & (d <= 3.0 * bandwidth), np.exp(-(d / bandwidth) ** 2), 0.0)
        c = kernel * np.outer(w, w)
        probes, target = _calibration_probes(space)
        ratios = []
        for q in probes:
            q = q - np.sum(q * w)
            energy = 0.5 * np.sum(c * (q[:, None] - q[None, :]) ** 2)
            ratios.append(energy / np.sum(q * q * w))
        scale = target / np.mean(ratios)
        worst = max(abs(scale * r - target) / target for r in ratios)
        if worst > 0.05:
            raise ValueError(f"harmonic calibration failed: {worst:.3f} > 5% spread")
        c = scale * c

    ncomp, _ = connected_components(coo_matrix(c > 0), directed=False)
    if ncomp > 1:
        raise ValueError("kernel graph is disconnected (lambda_1 = 0)")
    return LaplacianOperator(space=space, scheme="graph-gaussian-weights", conductances=c)


def _fix_signs(u: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Make the first entry of nontrivial magnitude positive in each column."""
    scale = np.abs(u).max(axis=0)
    for i in range(u.shape[1]):
        nz = np.nonzero(np.abs(u[:, i]) > tol * scale[i])[0]
        if len(nz) and u[nz[0], i] < 0:
            u[:, i] = -u[:, i]
    return u


def eigendecompose(op: LaplacianOperator, k_max: int | None = None) -> SpectralBasis:
    """Solve the weighted symmetric eigenproblem; ascending eigenvalues.

    The exact scheme enumerates the full analytic mode table (default k_max is
    every mode); the graph scheme defaults to min(npoints, 400) modes of the
    sqrt(w)-conjugated symmetric matrix.
    """
    space = op.space
    npts = space.npoints
    if op.scheme == "torus-fourier-exact":
        if k_max is None:
            k_max = npts
        if k_max > npts:
            raise ValueError("k_max exceeds the number of points")
        # the sampled trig products already have a positive first nonzero
        # entry, so no sign pass: flipping here would desync the mode table
        # used for off-grid evaluation
        u = op.basis_matrix()[:, :k_max].copy()
        lam = np.array([mo.eigenvalue for mo in op.modes[:k_max]])
        return SpectralBasis(space=space, scheme=op.scheme, eigenvalues=lam,
                             eigenfunctions=u, k_max=k_max, modes=op.modes[:k_max])

    if k_max is None:
        k_max = min(npts, 400)
    if k_max > npts:
        raise ValueError("k_max exceeds the number of points")
    w = space.weights
    sw = np.sqrt(w)
    sym = op.matrix() * sw[:, None] / sw[None, :]
    sym = 0.5 * (sym + sym.T)
    lam, vec = np.linalg.eigh(sym)
    if lam[1] <= 1e-12 * max(1.0, lam[-1]):
        raise ValueError("lambda_1 = 0: space is disconnected for this operator")
    lam = lam[:k_max].copy()
    u = vec[:, :k_max] / sw[:, None]
    lam[0] = 0.0
    u[:, 0] = 1.0
    u = _fix_signs(u)
    return SpectralBasis(space=space, scheme=op.scheme, eigenvalues=lam,
                         eigenfunctions=u, k_max=k_max)


# ---------------------------------------------------------------------------
# heat kernel and semigroup


def heat_kernel(basis: SpectralBasis, t: float, x: int, y: int) -> float:
    """p_t(x,y) via the spectral identity."""
    if t <= 0:
        raise ValueError("t must be positive")
    decay = np.exp(-basis.eigenvalues * t)
    return float(np.sum(decay * basis.eigenfunctions[x] * basis.eigenfunctions[y]))


def heat_kernel_matrix(basis: SpectralBasis, t: float,
                       rows: np.ndarray | None = None) -> np.ndarray:
    """Dense p_t(x, .) for the given row indices (all points by default)."""
    if t <= 0:
        raise ValueError("t must be positive")
    u = basis.eigenfunctions
    decay = np.exp(-basis.eigenvalues * t)
    left = u if rows is None else u[np.asarray(rows)]
    return (left * decay) @ u.T


def heat_semigroup_apply(basis: SpectralBasis, t: float, f: np.ndarray) -> np.ndarray:
    """P_t f = sum_i exp(-lambda_i t) <f, u_i> u_i."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    decay = np.exp(-basis.eigenvalues * t)
    coeff = basis.coefficients(f)
    if coeff.ndim == 1:
        return basis.eigenfunctions @ (decay * coeff)
    return basis.eigenfunctions @ (decay[:, None] * coeff)


# ---------------------------------------------------------------------------
# verifiers


def _ball_mass_at(space: MetricMeasureSpace, centers: np.ndarray, radius: float) -> np.ndarray:
    w = space.weights
    d = space.pairwise()[centers]
    return np.where(d < radius, w[None, :], 0.0).sum(axis=1)


def verify_gaussian_bounds(basis: SpectralBasis, space: MetricMeasureSpace, n: int,
                           t_grid, pair_sample) -> HeatKernelReport:
    """Fit the smallest constants for the two-sided Gaussian kernel bounds.

    Lower bound (1/C1) m(B(x,sqrt(t)))^-1 exp(-d^2/(3t) - C3 t) and upper
    bound C1 m(B(x,sqrt(t)))^-1 exp(-d^2/(5t) + C3 t), with the 1/3 and 1/5
    exponents fixed; C3 is chosen on a small grid to minimize max(C1_low,
    C1_high).  C2 is fitted for the matching gradient bound from discrete
    slopes of p_t(x, .).
    """
    pairs = np.asarray(pair_sample, dtype=int)
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.min() <= space.spacing**2 or t_grid.max() > 1.0:
        raise ValueError("t_grid must lie within (spacing^2, 1]")
    xs = pairs[:, 0]
    d_xy = space.pairwise()[xs, pairs[:, 1]]

    low_need, high_need, grad_need = [], [], []
    mass_res = 0.0
    closed_dev = np.nan
    w = space.weights
    neighbor = {}
    for t in t_grid:
        p_rows = heat_kernel_matrix(basis, t, rows=xs)
        mass_res = max(mass_res, float(np.abs(p_rows @ w - 1.0).max()))
        m_ball = _ball_mass_at(space, xs, np.sqrt(t))
        p_pair = p_rows[np.arange(len(xs)), pairs[:, 1]]
        low_need.append(np.where(p_pair > 0,
                                 np.exp(-d_xy**2 / (3 * t)) / (p_pair * m_ball),
                                 np.inf))
        high_need.append(p_pair * m_ball * np.exp(d_xy**2 / (5 * t)))
        # gradient bound: discrete slope of y -> p_t(x, y) at the pair's y
        slopes = np.empty(len(xs))
        for k, (_, y) in enumerate(pairs):
            if y not in neighbor:
                nb = ball(space, y, 1.5 * space.spacing)
                neighbor[y] = nb[nb != y]
            nb = neighbor[y]
            slopes[k] = np.max(np.abs(p_rows[k, nb] - p_rows[k, y])
                               / space.pairwise()[y, nb])
        grad_need.append(slopes * np.sqrt(t) * m_ball * np.exp(d_xy**2 / (5 * t)))
        if space.kind == "torus" and t <= 0.01:
            diag = p_rows[np.arange(len(xs)), xs]
            dev = float(np.abs(diag * (4 * np.pi * t) ** (n / 2) - 1.0).max())
            closed_dev = dev if np.isnan(closed_dev) else max(closed_dev, dev)

    low_need = np.concatenate(low_need)
    high_need = np.concatenate(high_need)
    grad_need = np.concatenate(grad_need)
    t_rep = np.repeat(t_grid, len(xs))

    # larger C3 always loosens both bounds, so pick the smallest C3 whose
    # fitted C1 is within 5% of the best achievable over the grid
    c3_grid = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    scores = []
    for c3 in c3_grid:
        c1_low = float(np.max(low_need * np.exp(-c3 * t_rep)))
        c1_high = float(np.max(high_need * np.exp(-c3 * t_rep)))
        scores.append((max(c1_low, c1_high), c1_low, c1_high, c3))
    cutoff = 1.05 * min(sc[0] for sc in scores)
    _, c1_low, c1_high, c3 = next(sc for sc in scores if sc[0] <= cutoff)
    c2 = float(np.max(grad_need * np.exp(-c3 * t_rep)))
    return HeatKernelReport(C1_low=c1_low, C1_high=c1_high, C2=c2, C3=c3,
                            closed_form_deviation=closed_dev, mass_residual=mass_res)


def _gradient_modulus(basis: SpectralBasis, space: MetricMeasureSpace, f: np.ndarray) -> np.ndarray:
    """|grad f| on points: exact mode differentiation on exact bases, else
    the centered-difference chart gradient."""
    if basis.modes is not None and basis.k_max == space.npoints:
        coeff = basis.coefficients(f)
        grads = basis.evaluate_mode_gradients(space.points)
        vec = np.einsum("k,pka->pa", coeff, grads)
        return np.sqrt((vec**2).sum(axis=1))
    from .fields import chart_gradient

    return np.sqrt((chart_gradient(space, f) ** 2).sum(axis=1))


@dataclass(frozen=True)
class BakryEmeryReport:
    worst_excess: float
    per_sample: tuple[float, ...]


def verify_bakry_emery(basis: SpectralBasis, space: MetricMeasureSpace, K: float,
                       f_sample, t_grid) -> BakryEmeryReport:
    """Worst positive excess of |grad P_t f|^2 - exp(-2Kt) P_t |grad f|^2."""
    worst = []
    for f in f_sample:
        f = np.asarray(f, dtype=float)
        excess = -np.inf
        for t in np.asarray(t_grid, dtype=float):
            ptf = heat_semigroup_apply(basis, t, f)
            lhs = _gradient_modulus(basis, space, ptf) ** 2
            rhs = np.exp(-2 * K * t) * heat_semigroup_apply(
                basis, t, _gradient_modulus(basis, space, f) ** 2)
            excess = max(excess, float((lhs - rhs).max()))
        worst.append(excess)
    return BakryEmeryReport(worst_excess=float(max(worst)), per_sample=tuple(worst))


@dataclass(frozen=True)
class EigenfunctionBoundReport:
    max_sup_ratio: float
    max_grad_ratio: float


def eigenfunction_bounds(basis: SpectralBasis, space: MetricMeasureSpace, n: int,
                         K: float, ahlfors: "AhlforsReport | None" = None,
                         C3: float = 1.0) -> EigenfunctionBoundReport:
    """Ratios of ||u_i||_inf and ||grad u_i||_inf to their fitted-constant
    bounds (C1 e/c1)(C3+lambda)^{n/2} and sqrt((lambda+|K|)/2) ||u_i||_inf,
    with c1, C1 the fitted Ahlfors window.  Report-only: ratios above 1 flag
    where the discrete basis escapes the continuum constants."""
    if ahlfors is None:
        ahlfors = check_ahlfors(space, n=n)
    c1, C1 = ahlfors.c1, ahlfors.c2
    lam = basis.eigenvalues
    u = basis.eigenfunctions
    sup_u = np.abs(u).max(axis=0)
    bound_sup = (C1 * np.e / c1) * (C3 + lam) ** (n / 2.0)
    sup_ratio = float((sup_u / bound_sup).max())
    grad_ratio = 0.0
    for i in range(1, basis.k_max):
        g = _gradient_modulus(basis, space, u[:, i]).max()
        bound = np.sqrt((lam[i] + abs(K)) / 2.0) * sup_u[i]
        grad_ratio = max(grad_ratio, float(g / bound))
    return EigenfunctionBoundReport(max_sup_ratio=sup_ratio, max_grad_ratio=grad_ratio)
