"""Finite model metric measure spaces.

Flat torus grids, Fibonacci sphere meshes, products with a unit circle, and
explicit weighted graphs, together with the ball / Ahlfors / maximal-function
diagnostics everything downstream leans on.  A space is immutable after
construction; every operation here is a pure function of its inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import shortest_path
from scipy.spatial import cKDTree

__all__ = [
    "MetricMeasureSpace",
    "AhlforsReport",
    "build_torus_grid",
    "build_sphere_mesh",
    "build_product_with_circle",
    "build_weighted_graph",
    "ball",
    "check_ahlfors",
    "maximal_function",
    "distance_power_integral",
    "chart_distance",
    "nearest_node",
]

# Dense distance matrices are kept up to this many points; all desk-scale
# scenarios stay at or below it.
DENSE_LIMIT = 4096


@dataclass(eq=False)
class MetricMeasureSpace:
    """A finite metric measure space (X, d, m) with chart coordinates.

    Attributes
    ----------
    chart : str
        Chart tag: "torus-1".."torus-3", "sphere", "product-circle" or "graph".
    n : int
        Ahlfors regularity exponent of the model.
    points : ndarray
        Chart coordinates, one row per point (torus: per-axis positions in
        [0, 1); sphere: unit 3-vectors; product: base coordinates plus a
        circle coordinate in [0, 1)).
    weights : ndarray
        Probability weights of the atoms, summing to 1.
    spacing : float
        Representative grid spacing (mesh scale) of the chart.
    diameter : float
        Maximum pairwise distance.
    """

    chart: str
    n: int
    points: np.ndarray
    weights: np.ndarray
    spacing: float
    diameter: float
    resolutions: tuple[int, ...] | None = None
    base: "MetricMeasureSpace | None" = None
    edges: np.ndarray | None = None
    _dist: np.ndarray | None = field(default=None, repr=False)
    _tree: cKDTree | None = field(default=None, repr=False)

    @property
    def npoints(self) -> int:
        return len(self.weights)

    @property
    def kind(self) -> str:
        """Chart family without the dimension suffix."""
        return "torus" if self.chart.startswith("torus") else self.chart

    def torus_axes(self) -> tuple[int, ...] | None:
        """Per-axis resolutions when the space is a flat-torus grid (possibly
        a product of one with a circle), else None."""
        if self.kind == "torus":
            return self.resolutions
        if self.kind == "product-circle" and self.base is not None:
            inner = self.base.torus_axes()
            if inner is not None:
                return inner + (self.resolutions[-1],)
        return None

    def pairwise(self) -> np.ndarray:
        """Dense symmetric distance matrix (cached)."""
        if self._dist is None:
            if self.npoints > DENSE_LIMIT:
                raise ValueError(
                    f"dense distances limited to {DENSE_LIMIT} points, "
                    f"have {self.npoints}"
                )
            self._dist = _pairwise(self)
        return self._dist

    def dist_row(self, i: int) -> np.ndarray:
        return self.pairwise()[i]

    def kdtree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(np.asarray(self.points, dtype=float))
        return self._tree


@dataclass(frozen=True)
class AhlforsReport:
    """Fitted two-sided ball-volume bounds c1 r^n <= m(B(x,r)) <= c2 r^n."""

    n: float
    c1: float
    c2: float
    worst_ratio_low: float
    worst_ratio_high: float
    c_doubling: float


def _wrap_delta(delta: np.ndarray) -> np.ndarray:
    """Per-axis wrap-around displacement magnitude on a unit period."""
    delta = np.abs(delta)
    return np.minimum(delta, 1.0 - delta)


def _torus_pairwise(coords: np.ndarray) -> np.ndarray:
    d2 = np.zeros((len(coords), len(coords)))
    for a in range(coords.shape[1]):
        col = coords[:, a]
        d2 += _wrap_delta(col[:, None] - col[None, :]) ** 2
    return np.sqrt(d2)


def _sphere_pairwise(points: np.ndarray) -> np.ndarray:
    # atan2 form stays well conditioned near coincident and antipodal pairs
    dots = points @ points.T
    sines = np.linalg.norm(np.cross(points[:, None, :], points[None, :, :]), axis=-1)
    return np.arctan2(sines, dots)


def _pairwise(space: MetricMeasureSpace) -> np.ndarray:
    if space.kind == "torus":
        return _torus_pairwise(space.points)
    if space.kind == "sphere":
        return _sphere_pairwise(space.points)
    if space.kind == "product-circle":
        base = space.base
        nb, nc = base.npoints, space.resolutions[-1]
        db = base.pairwise()
        s = np.arange(nc) / nc
        dc = _wrap_delta(s[:, None] - s[None, :])
        d2 = db[:, None, :, None] ** 2 + dc[None, :, None, :] ** 2
        return np.sqrt(d2.reshape(nb * nc, nb * nc))
    if space.kind == "graph":
        n = space.npoints
        i, j = space.edges[:, 0].astype(int), space.edges[:, 1].astype(int)
        lengths = space.edges[:, 3]
        adj = coo_matrix((lengths, (i, j)), shape=(n, n))
        adj = adj + adj.T
        return shortest_path(adj.tocsr(), directed=False)
    raise ValueError(f"unknown chart {space.chart!r}")


def chart_distance(space: MetricMeasureSpace, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Distance between arbitrary chart coordinates (vectorized, off-grid ok)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if space.kind == "torus":
        return np.sqrt((_wrap_delta(p - q) ** 2).sum(axis=-1))
    if space.kind == "sphere":
        dots = (p * q).sum(axis=-1)
        sines = np.linalg.norm(np.cross(p, q), axis=-1)
        return np.arctan2(sines, dots)
    if space.kind == "product-circle":
        db = chart_distance(space.base, p[..., :-1], q[..., :-1])
        dc = _wrap_delta(p[..., -1] - q[..., -1])
        return np.hypot(db, dc)
    raise ValueError(f"off-grid distances undefined on chart {space.chart!r}")


def nearest_node(space: MetricMeasureSpace, coords: np.ndarray) -> np.ndarray:
    """Map chart coordinates to the index of the nearest space point."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if space.kind == "torus":
        res = np.array(space.resolutions)
        idx = np.rint(coords * res).astype(int) % res
        return np.ravel_multi_index(idx.T, res)
    if space.kind == "sphere":
        # Euclidean nearest neighbour agrees with arc nearest on the sphere.
        _, idx = space.kdtree().query(coords)
        return idx
    if space.kind == "product-circle":
        nc = space.resolutions[-1]
        base_idx = nearest_node(space.base, coords[:, :-1])
        circ_idx = np.rint(coords[:, -1] * nc).astype(int) % nc
        return base_idx * nc + circ_idx
    raise ValueError(f"nearest-node lookup undefined on chart {space.chart!r}")


def build_torus_grid(dims: int, resolution) -> MetricMeasureSpace:
    """Unit-volume flat torus grid with per-axis wrap-around l2 distance.

    ``resolution`` may be one integer for all axes or a sequence per axis.
    """
    if not 1 <= dims <= 3:
        raise ValueError("dims must be 1, 2 or 3")
    res = tuple(int(r) for r in (resolution if np.iterable(resolution) else [resolution] * dims))
    if len(res) != dims:
        raise ValueError(f"expected {dims} per-axis resolutions, got {len(res)}")
    if min(res) < 4:
        raise ValueError("resolution must be at least 4 per axis")
    grids = np.meshgrid(*[np.arange(m) / m for m in res], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    npts = coords.shape[0]
    weights = np.full(npts, 1.0 / npts)
    diameter = float(np.sqrt(sum((np.floor(m / 2) / m) ** 2 for m in res)))
    return MetricMeasureSpace(
        chart=f"torus-{dims}",
        n=dims,
        points=coords,
        weights=weights,
        spacing=1.0 / min(res),
        diameter=diameter,
        resolutions=res,
    )


def build_sphere_mesh(num_points: int) -> MetricMeasureSpace:
    """Fibonacci lattice on the unit 2-sphere with uniform weights."""
    if num_points < 12:
        raise ValueError("num_points must be at least 12")
    i = np.arange(num_points)
    z = 1.0 - (2.0 * i + 1.0) / num_points
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    points = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    weights = np.full(num_points, 1.0 / num_points)
    dist = _sphere_pairwise(points)
    np.fill_diagonal(dist, np.inf)
    spacing = float(np.median(dist.min(axis=1)))
    np.fill_diagonal(dist, 0.0)
    space = MetricMeasureSpace(
        chart="sphere",
        n=2,
        points=points,
        weights=weights,
        spacing=spacing,
        diameter=float(dist.max()),
    )
    space._dist = dist
    return space


def build_product_with_circle(base: MetricMeasureSpace, circle_resolution: int) -> MetricMeasureSpace:
    """Product of a base space with a unit-circumference circle.

    The product metric is d_bar((x,s),(x',s'))^2 = d(x,x')^2 + d_circ(s,s')^2
    and the measure is the product of the base measure with the uniform one.
    """
    if circle_resolution < 4:
        raise ValueError("circle_resolution must be at least 4")
    nc = int(circle_resolution)
    s = np.arange(nc) / nc
    base_rep = np.repeat(base.points, nc, axis=0)
    circ_rep = np.tile(s, base.npoints)
    coords = np.column_stack([base_rep, circ_rep])
    weights = np.repeat(base.weights, nc) / nc
    res = (base.resolutions or ()) + (nc,)
    return MetricMeasureSpace(
        chart="product-circle",
        n=base.n + 1,
        points=coords,
        weights=weights,
        spacing=max(base.spacing, 1.0 / nc),
        diameter=float(np.hypot(base.diameter, np.floor(nc / 2) / nc)),
        resolutions=res,
        base=base,
    )


def build_weighted_graph(num_points: int, edges, weights=None, n: int = 3) -> MetricMeasureSpace:
    """Explicit weighted graph space.

    ``edges`` is a sequence of (i, j, conductance, length) tuples; distances
    are shortest paths over the lengths, the Laplacian downstream uses the
    conductances.
    """
    edges = np.asarray([(i, j, c, l) for i, j, c, l in edges], dtype=float)
    if weights is None:
        weights = np.full(num_points, 1.0 / num_points)
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    space = MetricMeasureSpace(
        chart="graph",
        n=n,
        points=np.arange(num_points, dtype=float)[:, None],
        weights=weights,
        spacing=float(edges[:, 3].min()),
        diameter=0.0,
        edges=edges,
    )
    dist = space.pairwise()
    if not np.all(np.isfinite(dist)):
        raise ValueError("graph is disconnected")
    space.diameter = float(dist.max())
    return space


def ball(space: MetricMeasureSpace, center: int, radius: float) -> np.ndarray:
    """Indices of the open ball {y : d(center, y) < radius}."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not 0 <= center < space.npoints:
        raise ValueError(f"unknown point id {center}")
    return np.nonzero(space.dist_row(center) < radius)[0]


def default_radius_grid(space: MetricMeasureSpace, num: int = 12) -> np.ndarray:
    """Log-spaced Ahlfors fit band [2*spacing, D/2]."""
    lo, hi = 2.0 * space.spacing, space.diameter / 2.0
    if hi <= lo:
        hi = space.diameter
    return np.geomspace(lo, hi, num)


def check_ahlfors(space, n=None, r_grid=None, x_sample=None) -> AhlforsReport:
    """Fit the tightest two-sided Ahlfors bounds over an (x, r) sample grid.

    Reports the extremal ratios m(B(x,r))/r^n over the sample and the
    doubling constant max m(B(x,2r))/m(B(x,r)).
    """
    if n is None:
        n = space.n
    if n <= 0:
        raise ValueError("exponent n must be positive")
    if r_grid is None:
        r_grid = default_radius_grid(space)
    r_grid = np.asarray(r_grid, dtype=float)
    if x_sample is None:
        x_sample = np.arange(space.npoints)
    x_sample = np.asarray(x_sample, dtype=int)
    if len(r_grid) == 0 or len(x_sample) == 0:
        raise ValueError("empty sample grid")

    dist = space.pairwise()[x_sample]
    w = space.weights
    order = np.argsort(dist, axis=1)
    ds = np.take_along_axis(dist, order, axis=1)
    cw = np.cumsum(w[order], axis=1)

    def masses(radii: np.ndarray) -> np.ndarray:
        out = np.empty((len(x_sample), len(radii)))
        for k, row in enumerate(ds):
            cnt = np.searchsorted(row, radii, side="left")
            out[k] = cw[k, cnt - 1]
        return out

    m_r = masses(r_grid)
    m_2r = masses(2.0 * r_grid)
    ratios = m_r / r_grid[None, :] ** n
    low, high = float(ratios.min()), float(ratios.max())
    return AhlforsReport(
        n=float(n),
        c1=low,
        c2=high,
        worst_ratio_low=low,
        worst_ratio_high=high,
        c_doubling=float((m_2r / m_r).max()),
    )


def maximal_function(space: MetricMeasureSpace, f: np.ndarray) -> np.ndarray:
    """Hardy-Littlewood maximal function over all realized discrete balls.

    The radius set is {d(x,y) + delta : y} with delta half a grid spacing,
    which exhausts every distinct ball of the finite space.
    """
    f = np.abs(np.asarray(f, dtype=float))
    w = space.weights
    dist = space.pairwise()
    delta = 0.5 * space.spacing
    out = np.empty(space.npoints)
    for x in range(space.npoints):
        order = np.argsort(dist[x])
        ds = dist[x][order]
        cw = np.cumsum(w[order])
        cfw = np.cumsum((f * w)[order])
        cnt = np.searchsorted(ds, ds + delta, side="left")
        out[x] = np.max(cfw[cnt - 1] / cw[cnt - 1])
    return out


def distance_power_integral(space: MetricMeasureSpace, x: int, alpha: float) -> float:
    """Sum_{y != x} d(x,y)^(-alpha) w(y)."""
    if alpha >= space.n:
        warnings.warn(
            f"alpha={alpha} >= n={space.n}: integral diverges in the resolution limit",
            stacklevel=2,
        )
    d = space.dist_row(x)
    mask = np.arange(space.npoints) != x
    return float(np.sum(d[mask] ** (-alpha) * space.weights[mask]))
