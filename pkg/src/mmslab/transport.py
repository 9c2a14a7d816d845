"""Small-support quadratic optimal transport and continuity-equation checks.

Exact dense LP solves give couplings and dual potentials for measures on the
model spaces; measures are evolved either by pushing atoms along a flow map
or by a conservative donor-cell scheme on torus grids.  On top sit the
derivative formulas for t -> W2^2 along one or two moving measures, the
exponential contraction bound with its trajectory-level corollary, and the
differentiation of the derivation pairing along displacement geodesics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .fields import VectorField
from .flows import FlowMap, integrate_flow
from .space import MetricMeasureSpace, chart_distance, nearest_node

__all__ = [
    "DiscreteMeasure",
    "TransportSolution",
    "MeasureTrajectory",
    "uniform_measure",
    "node_measure",
    "wasserstein2",
    "wasserstein2_positions",
    "continuity_equation_solve",
    "continuity_residual",
    "verify_w2_derivative",
    "verify_joint_derivative",
    "verify_contraction",
    "verify_geodesic_differentiation",
]

SUPPORT_CAP = 600


@dataclass(eq=False)
class DiscreteMeasure:
    """Probability measure on the points of a space.

    density_bound is the largest weight/point-measure ratio, the discrete
    stand-in for an L-infinity density bound.
    """

    space: MetricMeasureSpace
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.space.npoints,):
            raise ValueError("weights must cover every space point")
        if self.weights.min() < 0:
            raise ValueError("weights must be nonnegative")
        total = self.weights.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {total!r}, not 1")

    @property
    def support(self) -> np.ndarray:
        return np.nonzero(self.weights > 0)[0]

    @property
    def density_bound(self) -> float:
        s = self.support
        return float((self.weights[s] / self.space.weights[s]).max())


def uniform_measure(space: MetricMeasureSpace) -> DiscreteMeasure:
    """The reference measure itself, as a probability measure."""
    return DiscreteMeasure(space, space.weights / space.weights.sum())


def node_measure(space: MetricMeasureSpace, ids, masses=None) -> DiscreteMeasure:
    """Measure supported on the given nodes; uniform atoms by default."""
    ids = np.asarray(ids, dtype=int)
    w = np.zeros(space.npoints)
    masses = np.full(len(ids), 1.0 / len(ids)) if masses is None else np.asarray(masses, float)
    np.add.at(w, ids, masses)
    return DiscreteMeasure(space, w / w.sum())


# ---------------------------------------------------------------------------
# the LP solver


def _log_map(space: MetricMeasureSpace, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Initial velocity of the unit-time geodesic from p to q (chart coords)."""
    if space.kind == "torus":
        return (q - p + 0.5) % 1.0 - 0.5
    if space.kind == "sphere":
        theta = chart_distance(space, p, q)
        tang = q - (p * q).sum(axis=-1, keepdims=True) * p
        norm = np.linalg.norm(tang, axis=-1, keepdims=True)
        safe = np.where(norm > 1e-15, norm, 1.0)
        return theta[..., None] * tang / safe
    if space.kind == "product-circle":
        base = _log_map(space.base, p[..., :-1], q[..., :-1])
        circ = (q[..., -1] - p[..., -1] + 0.5) % 1.0 - 0.5
        return np.concatenate([base, circ[..., None]], axis=-1)
    raise ValueError(f"no log map on chart {space.chart!r}")


@dataclass(eq=False)
class TransportSolution:
    """Optimal quadratic-cost coupling with its dual potentials.

    cost is the squared distance W2^2.  phi and psi live on the two support
    lists; for node-based marginals phi_full / psi_full extend them to every
    space point with phi(x) + psi(y) <= d(x, y)^2 everywhere.  Potentials
    are normalized by phi[0] = 0.
    """

    space: MetricMeasureSpace
    cost: float
    coupling: np.ndarray
    x_positions: np.ndarray
    y_positions: np.ndarray
    x_weights: np.ndarray
    y_weights: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    x_ids: np.ndarray | None = None
    y_ids: np.ndarray | None = None
    phi_full: np.ndarray | None = field(default=None, repr=False)
    psi_full: np.ndarray | None = field(default=None, repr=False)

    @property
    def w2(self) -> float:
        return float(np.sqrt(max(self.cost, 0.0)))

    def phi_at(self, coords: np.ndarray) -> np.ndarray:
        """c-transform extension of the mu-side potential to chart coordinates."""
        d2 = chart_distance(self.space, np.atleast_2d(coords)[:, None, :],
                            self.y_positions[None, :, :]) ** 2
        return (d2 - self.psi[None, :]).min(axis=1)

    def psi_at(self, coords: np.ndarray) -> np.ndarray:
        d2 = chart_distance(self.space, np.atleast_2d(coords)[:, None, :],
                            self.x_positions[None, :, :]) ** 2
        return (d2 - self.phi[None, :]).min(axis=1)

    def barycentric_displacement(self) -> np.ndarray:
        """Per mu-atom mean log map to its coupled targets: T(x) - x."""
        logs = _log_map(self.space, self.x_positions[:, None, :],
                        self.y_positions[None, :, :])
        return np.einsum("ij,ijd->id", self.coupling, logs) / self.x_weights[:, None]

    def coupling_triplets(self, atol: float = 1e-14):
        """Sparse (i, j, mass) rows of the coupling."""
        ii, jj = np.nonzero(self.coupling > atol)
        return ii, jj, self.coupling[ii, jj]


def _solve_w2(space: MetricMeasureSpace, xpos, xw, ypos, yw,
              cost_matrix: np.ndarray) -> TransportSolution:
    ns, nt = cost_matrix.shape
    if ns + nt > SUPPORT_CAP:
        raise ValueError(f"support too large: {ns}+{nt} points exceed {SUPPORT_CAP}")
    if ns == 0 or nt == 0:
        raise ValueError("degenerate marginals: zero total mass")
    a_rows = np.zeros((ns, ns * nt))
    for i in range(ns):
        a_rows[i, i * nt:(i + 1) * nt] = 1.0
    b_rows = np.tile(np.eye(nt), ns)
    a_eq = np.vstack([a_rows, b_rows])
    b_eq = np.concatenate([xw, yw])
    # default HiGHS tolerances (1e-7) can stop at a near-optimal vertex whose
    # support pairs are not dual-tight; 1e-10 is the tightest it accepts
    res = linprog(cost_matrix.ravel(), A_eq=a_eq, b_eq=b_eq,
                  bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if not res.success:
        raise AssertionError(f"transport LP failed: {res.message}")
    gamma = res.x.reshape(ns, nt)
    cost = float(res.fun)
    phi = np.array(res.eqlin.marginals[:ns], dtype=float)
    psi = np.array(res.eqlin.marginals[ns:], dtype=float)
    # HiGHS duals carry its own feasibility tolerance (~1e-7); a double
    # c-transform restores phi + psi <= d^2 exactly and shrinks the gap
    psi = (cost_matrix - phi[:, None]).min(axis=0)
    phi = (cost_matrix - psi[None, :]).min(axis=1)
    shift = phi[0]
    phi -= shift
    psi += shift

    row_err = np.abs(gamma.sum(axis=1) - xw).max()
    col_err = np.abs(gamma.sum(axis=0) - yw).max()
    if max(row_err, col_err) > 1e-10:
        raise AssertionError(f"coupling marginals off by {max(row_err, col_err):.2e}")
    gap = abs(phi @ xw + psi @ yw - cost)
    if gap > 1e-8:
        raise AssertionError(f"duality gap {gap:.2e}")
    slack = cost_matrix - phi[:, None] - psi[None, :]
    if slack.min() < -1e-9:
        raise AssertionError(f"infeasible potentials: {slack.min():.2e}")
    tight = gamma > 1e-12
    if tight.any() and np.abs(slack[tight]).max() > 1e-8:
        raise AssertionError("complementary slackness violated on the coupling")

    return TransportSolution(space=space, cost=cost, coupling=gamma,
                             x_positions=xpos, y_positions=ypos,
                             x_weights=np.asarray(xw, float),
                             y_weights=np.asarray(yw, float), phi=phi, psi=psi)


def wasserstein2(space: MetricMeasureSpace, mu: DiscreteMeasure,
                 nu: DiscreteMeasure) -> TransportSolution:
    """Exact W2^2 between node-supported measures, with extended potentials."""
    sa, sb = mu.support, nu.support
    d = space.pairwise()
    cost = d[np.ix_(sa, sb)] ** 2
    sol = _solve_w2(space, space.points[sa], mu.weights[sa],
                    space.points[sb], nu.weights[sb], cost)
    sol.x_ids, sol.y_ids = sa, sb
    # extend: psi everywhere as the c-transform of phi, then phi against it;
    # the double transform can only tighten, so optimality survives
    psi_full = (d[sa, :] ** 2 - sol.phi[:, None]).min(axis=0)
    phi_full = (d[:, :] ** 2 - psi_full[None, :]).min(axis=1)
    worst = (phi_full[:, None] + psi_full[None, :] - d**2).max()
    if worst > 1e-9:
        raise AssertionError(f"extended potentials infeasible by {worst:.2e}")
    gap = abs(phi_full @ mu.weights + psi_full @ nu.weights - sol.cost)
    if gap > 1e-8:
        raise AssertionError(f"extension broke the duality gap: {gap:.2e}")
    sol.phi_full, sol.psi_full = phi_full, psi_full
    return sol


def wasserstein2_positions(space: MetricMeasureSpace, xpos, xw, ypos, yw) -> TransportSolution:
    """Exact W2^2 between atom clouds at arbitrary chart positions."""
    xpos = np.atleast_2d(np.asarray(xpos, float))
    ypos = np.atleast_2d(np.asarray(ypos, float))
    cost = chart_distance(space, xpos[:, None, :], ypos[None, :, :]) ** 2
    return _solve_w2(space, xpos, np.asarray(xw, float), ypos, np.asarray(yw, float), cost)


# ---------------------------------------------------------------------------
# continuity equation


@dataclass(eq=False)
class MeasureTrajectory:
    """A measure curve on the recorded time grid.

    Pushforward trajectories also carry the exact atom positions used for
    binning; derivative checks read those, the binned measures feed the
    contraction series and the upwind cross-check.
    """

    times: np.ndarray
    measures: list
    source: str
    atom_positions: np.ndarray | None = None
    atom_weights: np.ndarray | None = None

    def measure_at(self, t: float) -> DiscreteMeasure:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise ValueError(f"t={t} is not a recorded time")
        return self.measures[k]


def _push_measures(space, flow: FlowMap, rows, masses):
    measures = []
    for k in range(len(flow.times)):
        w = np.zeros(space.npoints)
        np.add.at(w, nearest_node(space, flow.positions[k][rows]), masses)
        measures.append(DiscreteMeasure(space, w))
    return measures


def continuity_equation_solve(space: MetricMeasureSpace, b: VectorField,
                              mu0: DiscreteMeasure, t_grid,
                              method: str = "pushforward",
                              flow: FlowMap | None = None,
                              step: float | None = None,
                              density_check: bool = False) -> MeasureTrajectory:
    """Evolve a measure under the field.

    "pushforward" transports the support atoms along the flow map (supplied,
    or integrated here from the support) and re-bins to nearest nodes; mass
    is conserved exactly.  "upwind" runs a donor-cell conservative scheme on
    torus grids with CFL at most 0.5, substepping as needed.  With
    ``density_check`` (pushforward, full-coverage flow) the binned densities
    are verified against the identically binned reference pushforward, which
    bounds them by the initial density bound exactly.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if method == "pushforward":
        sup = mu0.support
        if flow is None:
            if step is None:
                step = 0.009 * t_grid[-1]
                if b.bounded_norm > 0:
                    step = min(step, 0.9 * space.spacing / b.bounded_norm)
            flow = integrate_flow(space, b, t_grid, step, starts=sup, check=False)
        else:
            if len(flow.times) != len(t_grid) or np.abs(flow.times - t_grid).max() > 1e-12:
                raise ValueError("flow was recorded on a different time grid")
        rows = flow.rows_for(sup)
        masses = mu0.weights[sup]
        measures = _push_measures(space, flow, rows, masses)
        if density_check:
            if flow.nstarts != space.npoints:
                raise ValueError("density check needs a full-coverage flow")
            ref_rows = flow.rows_for(np.arange(space.npoints))
            bound = mu0.density_bound
            for k, measure in enumerate(measures):
                ref = np.zeros(space.npoints)
                np.add.at(ref, nearest_node(space, flow.positions[k][ref_rows]),
                          space.weights)
                if np.any(measure.weights > bound * ref * (1.0 + 1e-12) + 1e-15):
                    raise AssertionError(
                        f"pushed density exceeds the initial bound at t={flow.times[k]:g}")
        return MeasureTrajectory(times=t_grid, measures=measures,
                                 source="pushforward",
                                 atom_positions=flow.positions[:, rows],
                                 atom_weights=masses)
    if method == "upwind":
        return _upwind_solve(space, b, mu0, t_grid, step)
    raise ValueError(f"unknown method {method!r}")


def _upwind_solve(space, b, mu0, t_grid, step):
    res = space.torus_axes()
    if res is None:
        raise ValueError("the upwind scheme runs on torus grids only")
    res = tuple(res)
    h = np.array([1.0 / r for r in res])
    m = mu0.weights.reshape(res).copy()
    measures = [DiscreteMeasure(space, m.ravel().copy())]
    for k in range(len(t_grid) - 1):
        gap = t_grid[k + 1] - t_grid[k]
        bn = b.at_nodes(t_grid[k])
        speed = sum(np.abs(bn[:, a]).max() / h[a] for a in range(len(res)))
        stable = 0.5 / speed if speed > 0 else gap
        if step is not None:
            if step > stable * (1.0 + 1e-12):
                raise ValueError(f"CFL violation: step {step:g} exceeds {stable:g}")
            dt_target = step
        else:
            dt_target = stable
        nsub = max(1, int(np.ceil(gap / dt_target - 1e-9)))
        dt = gap / nsub
        t = t_grid[k]
        for _ in range(nsub):
            u = b.at_nodes(t).reshape(res + (len(res),))
            dm = np.zeros_like(m)
            for a in range(len(res)):
                u_face = 0.5 * (u[..., a] + np.roll(u[..., a], -1, axis=a))
                donor = np.where(u_face > 0, m, np.roll(m, -1, axis=a))
                flux = u_face * donor / h[a]
                dm += np.roll(flux, 1, axis=a) - flux
            m = m + dt * dm
            t += dt
        measures.append(DiscreteMeasure(space, m.ravel().copy()))
    return MeasureTrajectory(times=t_grid, measures=measures, source="upwind")


def continuity_residual(trajectory: MeasureTrajectory, b: VectorField, basis,
                        num_probes: int = 20, seed: int = 0) -> float:
    """Worst weak-form residual of the continuity equation over probe functions.

    Probes are heat-smoothed random combinations in the given exact basis,
    evaluated at the exact atom positions; the residual compares the centered
    difference of t -> int(f) d mu_t with int(b . grad f) d mu_t.
    """
    if trajectory.atom_positions is None:
        raise ValueError("weak-form residual needs atom positions")
    space = basis.space
    rng = np.random.default_rng(seed)
    damp = np.exp(-basis.eigenvalues * 4.0 * space.spacing**2)
    coeffs = rng.standard_normal((num_probes, basis.k_max)) * damp
    coeffs[:, 0] = 0.0
    times = trajectory.times
    pos = trajectory.atom_positions
    w = trajectory.atom_weights
    vals = np.empty((len(times), num_probes))
    rates = np.empty((len(times), num_probes))
    for k, t in enumerate(times):
        u = basis.evaluate_modes(pos[k])
        g = basis.evaluate_mode_gradients(pos[k])
        bv = b.values(pos[k], t)
        vals[k] = (u @ coeffs.T).T @ w
        adv = np.einsum("pkd,pd->pk", g, bv)
        rates[k] = (adv @ coeffs.T).T @ w
    worst = 0.0
    for k in range(1, len(times) - 1):
        dt = times[k + 1] - times[k - 1]
        lhs = (vals[k + 1] - vals[k - 1]) / dt
        worst = max(worst, float(np.abs(lhs - rates[k]).max()))
    return worst


# ---------------------------------------------------------------------------
# derivative formulas


def _check_gaps(times):
    gaps = np.diff(times)
    if gaps.max() > 0.01 * times[-1] * (1.0 + 1e-12):
        raise ValueError("time grid too coarse for stable centered differences")
    return gaps


def _atom_states(trajectory):
    if trajectory.atom_positions is None:
        raise ValueError("derivative checks need a pushforward trajectory with atoms")
    return trajectory.atom_positions, trajectory.atom_weights


@dataclass(frozen=True)
class DerivativeReport:
    """Centered-difference check of t -> W2^2/2 against the potential pairing."""

    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    allowance: np.ndarray
    max_discrepancy: float
    max_violation: float
    passed: bool
    one_sided: bool


def verify_w2_derivative(space: MetricMeasureSpace, trajectory: MeasureTrajectory,
                         b: VectorField, nu_fixed: DiscreteMeasure) -> DerivativeReport:
    """Check d/dt W2^2(mu_t, nu)/2 = sum of b . (discrete slope of phi) d mu_t.

    The slope at an atom is its log-map displacement to the coupled targets,
    taken from the same LP that provides the potentials; the centered
    difference must match within 5 * spacing * sup|b| * W2.
    """
    _check_gaps(trajectory.times)
    pos, w = _atom_states(trajectory)
    sb = nu_fixed.support
    ypos, yw = space.points[sb], nu_fixed.weights[sb]
    sols = [wasserstein2_positions(space, pos[k], w, ypos, yw)
            for k in range(len(trajectory.times))]
    times, lhs, rhs, allow = [], [], [], []
    for k in range(1, len(trajectory.times) - 1):
        dt = trajectory.times[k + 1] - trajectory.times[k - 1]
        times.append(trajectory.times[k])
        lhs.append((sols[k + 1].cost - sols[k - 1].cost) / dt / 2.0)
        disp = sols[k].barycentric_displacement()
        bv = b.values(pos[k], trajectory.times[k])
        rhs.append(float(np.sum(w * np.einsum("id,id->i", bv, -disp))))
        allow.append(5.0 * space.spacing * b.bounded_norm * sols[k].w2)
    times, lhs, rhs, allow = map(np.array, (times, lhs, rhs, allow))
    disc = np.abs(lhs - rhs)
    return DerivativeReport(times=times, lhs=lhs, rhs=rhs, allowance=allow,
                            max_discrepancy=float(disc.max()),
                            max_violation=float((disc - allow).max()),
                            passed=bool(np.all(disc <= allow)), one_sided=False)


def verify_joint_derivative(space: MetricMeasureSpace, traj_mu: MeasureTrajectory,
                            traj_nu: MeasureTrajectory, b: VectorField) -> DerivativeReport:
    """One-sided derivative bound when both measures move under the field.

    Both slopes come from the single LP at each node; the centered difference
    of W2^2/2 must stay below the paired sum up to the same allowance.
    """
    if len(traj_mu.times) != len(traj_nu.times) or \
            np.abs(traj_mu.times - traj_nu.times).max() > 1e-12:
        raise ValueError("trajectories live on different time grids")
    _check_gaps(traj_mu.times)
    xpos, xw = _atom_states(traj_mu)
    ypos, yw = _atom_states(traj_nu)
    sols = [wasserstein2_positions(space, xpos[k], xw, ypos[k], yw)
            for k in range(len(traj_mu.times))]
    times, lhs, rhs, allow = [], [], [], []
    for k in range(1, len(traj_mu.times) - 1):
        t = traj_mu.times[k]
        dt = traj_mu.times[k + 1] - traj_mu.times[k - 1]
        times.append(t)
        lhs.append((sols[k + 1].cost - sols[k - 1].cost) / dt / 2.0)
        ii, jj, g = sols[k].coupling_triplets()
        logs = _log_map(space, xpos[k][ii], ypos[k][jj])
        pair = b.values(xpos[k][ii], t) - b.values(ypos[k][jj], t)
        # phi-slope pairing at x plus psi-slope pairing at y, assembled on
        # the coupling: <x - T(x), b(x)> + <y - S(y), b(y)>
        rhs.append(float(np.sum(g * np.einsum("id,id->i", pair, -logs))))
        allow.append(5.0 * space.spacing * b.bounded_norm * sols[k].w2)
    times, lhs, rhs, allow = map(np.array, (times, lhs, rhs, allow))
    viol = lhs - rhs - allow
    return DerivativeReport(times=times, lhs=lhs, rhs=rhs, allowance=allow,
                            max_discrepancy=float(np.abs(lhs - rhs).max()),
                            max_violation=float(viol.max()),
                            passed=bool(np.all(viol <= 0)), one_sided=True)


# ---------------------------------------------------------------------------
# contraction


@dataclass(frozen=True)
class ContractionReport:
    """W2 series against the exponential bound, plus the pair corollary."""

    times: np.ndarray
    w2: np.ndarray
    bound: np.ndarray
    ratio: np.ndarray
    tol_disc: float
    l_sym: float
    pair_count: int
    pair_worst: float


def verify_contraction(space: MetricMeasureSpace, b: VectorField,
                       mu0: DiscreteMeasure, nu0: DiscreteMeasure, T: float,
                       L_sym: float, t_nodes: int = 11, step: float | None = None,
                       pair_sample: int = 1000, seed: int = 0) -> ContractionReport:
    """Assert W2(mu_t, nu_t) <= e^(L t) W2(mu_0, nu_0) (1 + tol_disc).

    Both measures ride the same flow; the W2 series uses the re-binned
    measures, with tol_disc = 5 * spacing / W2(0) absorbing the binning.
    The trajectory-level corollary d(X_t x, X_t y) <= e^(L t) d(x, y) is
    checked on seeded pairs from the joint support at exact positions.
    """
    t_grid = np.linspace(0.0, T, t_nodes)
    sup = np.union1d(mu0.support, nu0.support)
    if step is None:
        step = 0.009 * T
        if b.bounded_norm > 0:
            step = min(step, 0.9 * space.spacing / b.bounded_norm)
    flow = integrate_flow(space, b, t_grid, step, starts=sup, check=False)
    mu_traj = continuity_equation_solve(space, b, mu0, t_grid, flow=flow)
    nu_traj = continuity_equation_solve(space, b, nu0, t_grid, flow=flow)
    w0_sol = wasserstein2(space, mu0, nu0)
    w0 = w0_sol.w2
    if w0 <= 0:
        raise ValueError("contraction ratio undefined for identical measures")
    tol = 5.0 * space.spacing / w0
    w2s, bounds = [], []
    for k, t in enumerate(t_grid):
        wk = wasserstein2(space, mu_traj.measures[k], nu_traj.measures[k]).w2
        bk = np.exp(L_sym * t) * w0 * (1.0 + tol)
        if wk > bk:
            raise AssertionError(
                f"W2 {wk:.4f} exceeds the contraction bound {bk:.4f} at t={t:g}")
        w2s.append(wk)
        bounds.append(bk)
    w2s = np.array(w2s)
    bounds = np.array(bounds)

    rng = np.random.default_rng(seed)
    ii = sup[rng.integers(0, len(sup), size=2 * pair_sample)]
    jj = sup[rng.integers(0, len(sup), size=2 * pair_sample)]
    keep = ii != jj
    ii, jj = ii[keep][:pair_sample], jj[keep][:pair_sample]
    rows_i, rows_j = flow.rows_for(ii), flow.rows_for(jj)
    d0 = space.pairwise()[ii, jj]
    worst = 0.0
    for k, t in enumerate(t_grid):
        dk = chart_distance(space, flow.positions[k][rows_i], flow.positions[k][rows_j])
        rk = dk / (np.exp(L_sym * t) * d0)
        worst = max(worst, float(rk.max()))
        if rk.max() > 1.0 + 1e-3:
            raise AssertionError(
                f"pair stretch {rk.max():.5f} breaks e^(Lt) at t={t:g}")
    return ContractionReport(times=t_grid, w2=w2s, bound=bounds, ratio=w2s / bounds,
                             tol_disc=tol, l_sym=float(L_sym),
                             pair_count=len(ii), pair_worst=worst)


# ---------------------------------------------------------------------------
# differentiation along displacement geodesics


@dataclass(frozen=True)
class GeodesicReport:
    """Centered s-derivative of the pairing against the symmetrized form.

    Experimental: the slope identification only holds where the optimal
    coupling is unique and atoms stay in one chart.
    """

    s_values: np.ndarray
    pairing: np.ndarray
    slope: np.ndarray
    quadratic_form: np.ndarray
    max_relative: float
    passed: bool
    experimental: bool = True


def _sym_jacobian(space, b, coords, t):
    """Symmetrized chart Jacobian of the field at arbitrary coordinates."""
    delta = 0.5 * space.spacing
    dim = coords.shape[1]
    jac = np.empty((len(coords), dim, dim))
    for a in range(dim):
        e = np.zeros(dim)
        e[a] = delta
        jac[:, :, a] = (b.values(coords + e, t) - b.values(coords - e, t)) / (2 * delta)
    return 0.5 * (jac + np.transpose(jac, (0, 2, 1)))


def verify_geodesic_differentiation(space: MetricMeasureSpace, b: VectorField,
                                    eta0: DiscreteMeasure, eta1: DiscreteMeasure,
                                    s_grid) -> GeodesicReport:
    """Differentiate s -> int b . grad(phi_s) d eta_s along the displacement
    interpolation of the optimal coupling.

    Atom slopes are the constant transport velocities; the s-derivative of
    the pairing is compared with the symmetrized-Jacobian quadratic form at
    the interpolated positions, within 15% of the form's scale.
    """
    if space.torus_axes() is None:
        raise ValueError("geodesic differentiation needs a flat periodic chart")
    if len(eta0.support) + len(eta1.support) > 200:
        raise ValueError("supports too large for the geodesic check")
    s_grid = np.asarray(s_grid, dtype=float)
    if len(s_grid) < 3 or np.any(np.diff(s_grid) <= 0):
        raise ValueError("s_grid must be increasing with at least 3 values")
    sol = wasserstein2(space, eta0, eta1)
    ii, jj, g = sol.coupling_triplets()
    x = sol.x_positions[ii]
    vel = _log_map(space, x, sol.y_positions[jj])
    pairing = np.empty(len(s_grid))
    quad = np.empty(len(s_grid))
    for k, s in enumerate(s_grid):
        pos = x + s * vel
        bv = b.values(pos, 0.0)
        pairing[k] = float(np.sum(g * np.einsum("id,id->i", bv, vel)))
        sym = _sym_jacobian(space, b, pos, 0.0)
        quad[k] = float(np.sum(g * np.einsum("id,ide,ie->i", vel, sym, vel)))
    slope = np.full(len(s_grid), np.nan)
    for k in range(1, len(s_grid) - 1):
        slope[k] = (pairing[k + 1] - pairing[k - 1]) / (s_grid[k + 1] - s_grid[k - 1])
    interior = slice(1, -1)
    scale = max(float(np.abs(quad).max()), 1e-12)
    rel = float(np.abs(slope[interior] - quad[interior]).max()) / scale
    return GeodesicReport(s_values=s_grid, pairing=pairing, slope=slope,
                          quadratic_form=quad, max_relative=rel,
                          passed=bool(rel <= 0.15))
