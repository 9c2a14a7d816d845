"""Deterministic scenario runner and artifact emitter.

A run is described by a small TOML file (tables one level deep: [space],
[field], [numerics]) naming one scenario.  Everything random flows from a
single seeded generator, so two runs with the same config produce
byte-identical CSVs.  Heavy imports happen inside run_experiment so that
--threads can pin the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, field as dc_field

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

__all__ = [
    "SCENARIOS",
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "run_experiment",
    "cache_roundtrip",
    "main",
]

SCENARIOS = (
    "heat-kernel-check",
    "green-check",
    "maximal-estimates",
    "contraction",
    "lusin-regularity",
    "n2-lift",
    "full-suite",
)

# circle-of-circumference-one theta sum at t = 0.01, to 16 digits
_THETA_001 = 2.820947917817136

_DEFAULT_NUMERICS = {
    "heat-kernel-check": {"t": 0.01},
    "green-check": {"num_f": 50, "epsilon": 0.01},
    "maximal-estimates": {"pair_sample": 1000, "tau": 0.1, "amplitude": 3.0},
    "contraction": {"t_final": 1.0, "time_nodes": 11, "atoms": 25},
    "lusin-regularity": {"t_final": 0.5, "time_nodes": 6, "step": 0.005,
                         "epsilon": 0.1, "max_pairs": 100000},
    "n2-lift": {"t_final": 0.5, "time_nodes": 6, "circle": 8, "epsilon": 0.1,
                "max_pairs": 50000},
    "full-suite": {},
}

_DEFAULT_SPACE = {
    "heat-kernel-check": {"chart": "torus", "dims": 1, "resolution": 32},
    "green-check": {"chart": "torus", "dims": 3, "resolution": 10},
    "maximal-estimates": {"chart": "torus", "dims": 3, "resolution": 12},
    "contraction": {"chart": "sphere", "points": 500},
    "lusin-regularity": {"chart": "torus", "dims": 3, "resolution": 8},
    "n2-lift": {"chart": "torus", "dims": 2, "resolution": 8},
    "full-suite": {},
}


class ConfigError(ValueError):
    """Unusable config file; the message carries file/field diagnostics."""


@dataclass
class ExperimentConfig:
    scenario: str
    space: dict
    field: dict
    numerics: dict
    out: str
    source: str = "<memory>"


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    scenario = data.pop("scenario", None)
    if scenario not in SCENARIOS:
        raise ConfigError(f"{path}: field 'scenario' must be one of "
                          f"{', '.join(SCENARIOS)}; got {scenario!r}")
    out = data.pop("out", "artifacts")
    space = data.pop("space", {})
    fieldspec = data.pop("field", {})
    numerics = data.pop("numerics", {})
    for name, table in (("space", space), ("field", fieldspec),
                        ("numerics", numerics)):
        if not isinstance(table, dict):
            raise ConfigError(f"{path}: [{name}] must be a table")
    if data:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(data)}")
    return ExperimentConfig(scenario=scenario, space=space, field=fieldspec,
                            numerics=numerics, out=str(out), source=str(path))


def cache_roundtrip(path, space=None):
    """Load whichever cache format the header announces.

    Spaces come back on their own; bases and flows need the hosting space.
    """
    from . import serialize

    with open(path) as fh:
        head = fh.readline().split()
    fmt = head[0] if head else ""
    if fmt == "mms-space":
        return serialize.load_space(path)
    if fmt == "mms-spectral":
        if space is None:
            raise ValueError("loading a spectral basis needs the hosting space")
        return serialize.load_spectral(path, space)
    if fmt == "mms-flow":
        if space is None:
            raise ValueError("loading a flow map needs the hosting space")
        return serialize.load_flow(path, space)
    raise ValueError(f"{path}: version mismatch, not an mms cache file")


class _Recorder:
    """Accumulates report rows; claimed-but-unreached checks fail closed."""

    def __init__(self):
        self.rows: list[tuple[str, str, str, str, str]] = []
        self.claims: list[tuple[str, str, str]] = []
        self.notes: list[str] = []

    def claim(self, items) -> None:
        self.claims.extend(items)

    def add(self, name: str, check_id: str, constant, ok: bool,
            criterion: str) -> None:
        value = "" if constant is None else f"{float(constant):.17g}"
        self.rows.append((name, check_id, value, "pass" if ok else "fail",
                          criterion))

    def finalize(self) -> None:
        done = {row[0] for row in self.rows}
        for name, check_id, criterion in self.claims:
            if name not in done:
                self.rows.append((name, check_id, "", "fail", criterion))

    @property
    def passed(self) -> bool:
        return all(row[3] == "pass" for row in self.rows)


def _resolve(config: ExperimentConfig) -> tuple[dict, dict]:
    num = dict(_DEFAULT_NUMERICS[config.scenario])
    num.update(config.numerics)
    spc = dict(_DEFAULT_SPACE[config.scenario])
    spc.update(config.space)
    return spc, num


def _build_space(spec: dict, source: str):
    from .space import (build_sphere_mesh, build_torus_grid,
                        build_weighted_graph)

    chart = spec.get("chart")
    try:
        if chart == "torus":
            return build_torus_grid(int(spec["dims"]), spec["resolution"])
        if chart == "sphere":
            return build_sphere_mesh(int(spec["points"]))
        if chart == "graph":
            return build_weighted_graph(int(spec["num_points"]),
                                        spec["edges"],
                                        weights=spec.get("node_weights"),
                                        n=int(spec.get("n", 3)))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: [space] {exc}")
    raise ConfigError(f"{source}: space.chart must be torus, sphere or graph; "
                      f"got {chart!r}")


def _build_field(spec: dict, space, basis, rng, numerics, source: str):
    import numpy as np
    from .fields import builtin_field

    name = spec.get("name")
    params = {k: v for k, v in spec.items() if k != "name"}
    params["space"] = space
    if name == "gradient_heat":
        params.setdefault("tau", numerics.get("tau", 0.1))
        amp = float(params.pop("amplitude", numerics.get("amplitude", 3.0)))
        params["basis"] = basis
        params["f0"] = amp * rng.standard_normal(space.npoints)
    for key in ("center", "axis", "v"):
        if key in params:
            params[key] = tuple(float(c) for c in params[key])
    try:
        return builtin_field(name, params)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: [field] {exc}")


def _default_field(scenario: str, space) -> dict:
    if scenario == "contraction":
        if space.kind == "sphere":
            return {"name": "rotation", "axis": (0.0, 0.0, 1.0), "speed": 1.0}
        # rigid drift: the L_sym = 0 gate holds exactly under re-binning
        return {"name": "constant", "v": (0.3, 0.1, 0.05)[: space.n]}
    if scenario == "lusin-regularity":
        return {"name": "cdl_singular", "alpha": 0.5, "rho": 0.25,
                "center": (0.5,) * space.n}
    if scenario == "n2-lift":
        return {"name": "shear", "s": 0.5}
    if scenario == "maximal-estimates":
        return {"name": "gradient_heat"}
    raise ConfigError(f"scenario {scenario} needs a [field] table")


def _cached_basis(space, k_max, cache_dir, timings):
    from . import serialize
    from .spectral import assemble_laplacian, eigendecompose

    key = None
    if cache_dir is not None:
        res = "x".join(str(r) for r in space.resolutions) \
            if space.resolutions else str(space.npoints)
        key = os.path.join(cache_dir, f"spectral-{space.chart}-{res}"
                                      f"-k{k_max or 'full'}.mms")
        if os.path.exists(key):
            try:
                basis = serialize.load_spectral(key, space)
                timings.append(("basis (cache hit)", 0.0))
                return basis
            except ValueError as exc:
                # stale or damaged cache entries are rebuilt, not fatal
                timings.append((f"basis cache rejected: {exc}", 0.0))
    t0 = time.perf_counter()
    basis = eigendecompose(assemble_laplacian(space), k_max=k_max)
    timings.append(("eigendecompose", time.perf_counter() - t0))
    if key is not None:
        os.makedirs(cache_dir, exist_ok=True)
        serialize.save_spectral(basis, key)
    return basis


def _sample_pairs(rng, npoints: int, count: int):
    import numpy as np

    pairs = rng.integers(0, npoints, size=(int(2.2 * count), 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]][:count]
    return [(int(i), int(j)) for i, j in pairs]


def _measured_l_sym(b, t_grid) -> float:
    import numpy as np
    from .fields import sym_derivative_modulus

    return float(max(np.abs(sym_derivative_modulus(b, float(t))).max()
                     for t in t_grid))


# ---------------------------------------------------------------------------
# scenarios


def _run_heat(ctx) -> None:
    import numpy as np
    from .spectral import heat_kernel, heat_kernel_matrix
    from .serialize import _write_csv, _g

    rec, space, basis = ctx["rec"], ctx["space"], ctx["basis"]
    t = float(ctx["numerics"]["t"])
    rec.claim([("trace-identity", "spectral.heat_kernel_matrix", "residual<1e-9"),
               ("chapman-kolmogorov", "spectral.heat_kernel_matrix", "residual<1e-9"),
               ("mass-conservation", "spectral.heat_kernel_matrix", "residual<1e-9")])
    w = space.weights
    p = heat_kernel_matrix(basis, t)
    trace = float(np.sum(np.diag(p) * w))
    eigen_sum = float(np.sum(np.exp(-t * basis.eigenvalues)))
    rec.add("trace-identity", "spectral.heat_kernel_matrix",
            abs(trace - eigen_sum), abs(trace - eigen_sum) < 1e-9,
            "residual<1e-9")
    ps, pt = heat_kernel_matrix(basis, 0.4 * t), heat_kernel_matrix(basis, 0.6 * t)
    ck = float(np.abs((ps * w[None, :]) @ pt - p).max())
    rec.add("chapman-kolmogorov", "spectral.heat_kernel_matrix", ck, ck < 1e-9,
            "residual<1e-9")
    mass = float(np.abs(p @ w - 1.0).max())
    rec.add("mass-conservation", "spectral.heat_kernel_matrix", mass,
            mass < 1e-9, "residual<1e-9")
    if space.chart == "torus-1" and space.resolutions == (32,) and t == 0.01:
        dev = abs(heat_kernel(basis, t, 0, 0) - _THETA_001)
        rec.add("theta-oracle", "spectral.heat_kernel", dev, dev < 1e-6,
                "|p_t(0,0)-theta|<1e-6")
    ts = np.geomspace(1e-3, 1.0, 25)
    rows = []
    for tv in ts:
        pv = heat_kernel_matrix(basis, float(tv))
        rows.append((_g(tv), _g(np.sum(np.diag(pv) * w)),
                     _g(np.sum(np.exp(-tv * basis.eigenvalues)))))
    _write_csv(os.path.join(ctx["series"], "heat-trace.csv"),
               "t,weighted_trace,eigenvalue_sum", rows)


def _run_green(ctx) -> None:
    import numpy as np
    from .green import (green_function, green_time_quadrature,
                        verify_green_action, verify_green_laplacian)
    from .serialize import _write_csv, _g

    rec, space, basis, rng = ctx["rec"], ctx["space"], ctx["basis"], ctx["rng"]
    num = ctx["numerics"]
    rec.claim([("action-identity", "green.verify_green_action", "residual<1e-8"),
               ("regularized-identity", "green.verify_green_laplacian",
                "residual<1e-8"),
               ("time-quadrature", "green.green_time_quadrature", "error<1e-4")])
    worst = 0.0
    for _ in range(int(num["num_f"])):
        f = rng.standard_normal(space.npoints)
        x = int(rng.integers(space.npoints))
        worst = max(worst, verify_green_action(basis, f, x))
    rec.add("action-identity", "green.verify_green_action", worst,
            worst < 1e-8, "residual<1e-8")
    lap = verify_green_laplacian(basis, float(num["epsilon"]),
                                 int(rng.integers(space.npoints)))
    rec.add("regularized-identity", "green.verify_green_laplacian", lap,
            lap < 1e-8, "residual<1e-8")
    gfn = green_function(basis)
    qerr = 0.0
    for x, y in _sample_pairs(rng, space.npoints, 3):
        qerr = max(qerr, abs(green_time_quadrature(basis, x, y)
                             - gfn.values[x, y]))
    rec.add("time-quadrature", "green.green_time_quadrature", qerr,
            qerr < 1e-4, "error<1e-4")
    d0 = space.dist_row(0)
    order = np.lexsort((np.arange(space.npoints), d0))
    _write_csv(os.path.join(ctx["series"], "green-profile.csv"),
               "distance,value",
               ((_g(d0[j]), _g(gfn.values[0, j])) for j in order))


def _run_maximal(ctx) -> None:
    import numpy as np
    from .green import green_function
    from .fields import regularity_moduli, verify_key_maximal_estimate, \
        verify_pair_kernel_estimate
    from .serialize import write_moduli_csv

    rec, space, basis, rng = ctx["rec"], ctx["space"], ctx["basis"], ctx["rng"]
    num = ctx["numerics"]
    rec.claim([("pair-kernel-bound", "fields.verify_pair_kernel_estimate", "C<50"),
               ("key-maximal-estimate", "fields.verify_key_maximal_estimate",
                "C<100")])
    count = int(num["pair_sample"])
    f = np.abs(rng.standard_normal(space.npoints))
    c1 = verify_pair_kernel_estimate(space, f, space.n,
                                     _sample_pairs(rng, space.npoints, count))
    rec.add("pair-kernel-bound", "fields.verify_pair_kernel_estimate", c1,
            np.isfinite(c1) and c1 < 50.0, "C<50")
    b = _build_field(ctx["fieldspec"], space, basis, rng, num, ctx["source"])
    gfn = green_function(basis)
    c2 = verify_key_maximal_estimate(basis, gfn, b, 0.0,
                                     _sample_pairs(rng, space.npoints, count))
    rec.add("key-maximal-estimate", "fields.verify_key_maximal_estimate", c2,
            np.isfinite(c2) and c2 < 100.0, "C<100")
    write_moduli_csv(regularity_moduli(b, np.linspace(0.0, 1.0, 5)),
                     os.path.join(ctx["series"], "field-moduli.csv"))


def _run_contraction(ctx) -> None:
    import numpy as np
    from . import transport as tr
    from .serialize import write_contraction_csv, write_coupling_csv

    rec, space, rng = ctx["rec"], ctx["space"], ctx["rng"]
    num = ctx["numerics"]
    rec.claim([("w2-contraction", "transport.verify_contraction",
                "ratio<=1+tol"),
               ("pair-corollary", "transport.verify_contraction",
                "stretch<=e^(Lt)(1+1e-3)")])
    b = _build_field(ctx["fieldspec"], space, None, rng, num, ctx["source"])
    atoms = int(num["atoms"])
    mu0 = tr.node_measure(space, rng.choice(space.npoints, atoms, replace=False))
    nu0 = tr.node_measure(space, rng.choice(space.npoints, atoms, replace=False))
    T = float(num["t_final"])
    if "l_sym" in num:
        l_sym = float(num["l_sym"])
    else:
        l_sym = _measured_l_sym(b, np.linspace(0.0, T, 5))
    report = tr.verify_contraction(space, b, mu0, nu0, T=T, L_sym=l_sym,
                                   t_nodes=int(num["time_nodes"]),
                                   seed=int(rng.integers(2**31)))
    rec.add("w2-contraction", "transport.verify_contraction",
            float(report.ratio.max()), bool(np.all(report.ratio <= 1.0)),
            "ratio<=1+tol")
    rec.add("pair-corollary", "transport.verify_contraction",
            report.pair_worst, report.pair_worst <= 1.0 + 1e-3,
            "stretch<=e^(Lt)(1+1e-3)")
    write_contraction_csv(report, os.path.join(ctx["series"], "contraction.csv"))
    write_coupling_csv(tr.wasserstein2(space, mu0, nu0),
                       os.path.join(ctx["series"], "coupling-initial.csv"))


def _lusin_pipeline(ctx, space, basis, b) -> None:
    """Shared Q*/Lusin chain for the 3d scenario and the full suite."""
    import numpy as np
    from .fields import regularity_moduli
    from .green import fit_comparability_constants, green_function
    from .flows import (compressibility, integrate_flow, lusin_set, q_star,
                        verify_lipschitz_on_set, verify_q_le_phi,
                        verify_qstar_bound)
    from .serialize import (write_lusin_csv, write_moduli_csv, write_qstar_csv,
                            write_worst_pair_csv)

    rec, num = ctx["rec"], ctx["numerics"]
    rec.claim([("q-le-phi", "flows.verify_q_le_phi", "violations=0"),
               ("chebyshev-mass", "flows.lusin_set", "excluded<epsilon"),
               ("lipschitz-on-set", "flows.verify_lipschitz_on_set",
                "fitted C finite"),
               ("qstar-budget", "flows.verify_qstar_bound", "ratio finite")])
    t_grid = np.linspace(0.0, float(num["t_final"]), int(num["time_nodes"]))
    flow = integrate_flow(space, b, t_grid, step=float(num["step"]))
    gfn = green_function(basis)
    shifted = fit_comparability_constants(gfn, space, space.n)
    comp = verify_q_le_phi(flow, shifted, t_grid[1:],
                           np.linspace(2.5, 4.0, 4) * space.spacing)
    rec.add("q-le-phi", "flows.verify_q_le_phi", float(comp.violations),
            comp.violations == 0, "violations=0")
    qrep = q_star(flow, space, t_grid=t_grid)
    eps = float(num["epsilon"])
    lus = lusin_set(qrep, space, eps)
    rec.add("chebyshev-mass", "flows.lusin_set", lus.excluded_mass,
            lus.excluded_mass < eps, "excluded<epsilon")
    lus = verify_lipschitz_on_set(flow, lus, max_pairs=int(num["max_pairs"]),
                                  seed=int(ctx["rng"].integers(2**31)))
    rec.add("lipschitz-on-set", "flows.verify_lipschitz_on_set",
            lus.structural_C, np.isfinite(lus.structural_C), "fitted C finite")
    moduli = regularity_moduli(b, t_grid)
    ratio = verify_qstar_bound(qrep, moduli, compressibility(flow))
    rec.add("qstar-budget", "flows.verify_qstar_bound", ratio,
            np.isfinite(ratio), "ratio finite")
    write_qstar_csv(qrep, os.path.join(ctx["series"], "q-star.csv"))
    write_lusin_csv(lus, os.path.join(ctx["series"], "lusin.csv"))
    write_worst_pair_csv(flow, lus, os.path.join(ctx["series"], "worst-pair.csv"))
    write_moduli_csv(moduli, os.path.join(ctx["series"], "field-moduli.csv"))


def _run_lusin(ctx) -> None:
    space, rng = ctx["space"], ctx["rng"]
    if space.n == 2:
        # two-dimensional bases go through the circle lift, as in the
        # dedicated scenario
        ctx["numerics"].setdefault("circle", 8)
        _run_n2lift(ctx)
        ctx["rec"].notes.append("n=2 space routed through the circle lift")
        return
    b = _build_field(ctx["fieldspec"], space, ctx["basis"], rng,
                     ctx["numerics"], ctx["source"])
    _lusin_pipeline(ctx, space, ctx["basis"], b)


def _run_n2lift(ctx) -> None:
    import numpy as np
    from .flows import lift_and_verify_n2
    from .serialize import _write_csv, _g, write_lusin_csv, write_qstar_csv

    rec, space, rng = ctx["rec"], ctx["space"], ctx["rng"]
    num = ctx["numerics"]
    rec.claim([("tensorization", "flows.lift_and_verify_n2", "residual<1e-8"),
               ("divergence-pullback", "flows.lift_and_verify_n2",
                "residual<1e-10"),
               ("symmetric-modulus", "flows.lift_and_verify_n2", "residual<1e-8"),
               ("base-chebyshev-mass", "flows.lift_and_verify_n2",
                "excluded<epsilon"),
               ("base-lipschitz", "flows.lift_and_verify_n2", "fitted C finite")])
    if space.n != 2:
        raise ConfigError(f"{ctx['source']}: the lift needs a 2d base space")
    b = _build_field(ctx["fieldspec"], space, ctx["basis"], rng, num,
                     ctx["source"])
    t_grid = np.linspace(0.0, float(num["t_final"]), int(num["time_nodes"]))
    rep = lift_and_verify_n2(space, b, t_grid, int(num["circle"]),
                             epsilon=float(num["epsilon"]),
                             step=num.get("step"),
                             max_pairs=int(num["max_pairs"]),
                             seed=int(rng.integers(2**31)))
    rec.add("tensorization", "flows.lift_and_verify_n2", rep.tensor_residual,
            rep.tensor_residual < 1e-8, "residual<1e-8")
    rec.add("divergence-pullback", "flows.lift_and_verify_n2",
            rep.div_residual, rep.div_residual < 1e-10, "residual<1e-10")
    rec.add("symmetric-modulus", "flows.lift_and_verify_n2", rep.sym_residual,
            rep.sym_residual < 1e-8, "residual<1e-8")
    rec.add("base-chebyshev-mass", "flows.lift_and_verify_n2",
            rep.base.excluded_mass,
            rep.base.excluded_mass < float(num["epsilon"]), "excluded<epsilon")
    rec.add("base-lipschitz", "flows.lift_and_verify_n2", rep.base.structural_C,
            rep.base.structural_C is not None
            and np.isfinite(rep.base.structural_C), "fitted C finite")
    prefix = ctx.get("series_prefix", "")
    write_lusin_csv(rep.product, os.path.join(ctx["series"],
                                              f"{prefix}lusin.csv"))
    _write_csv(os.path.join(ctx["series"], f"{prefix}base-q-star.csv"),
               "base_id,q_star",
               ((str(i), _g(v)) for i, v in enumerate(rep.base_qstar)))


def _run_full(ctx) -> None:
    """One row per verify_* operation, at desk-top sizes."""
    import numpy as np
    from .space import build_sphere_mesh, build_torus_grid
    from .spectral import (assemble_laplacian, eigendecompose,
                           verify_bakry_emery, verify_gaussian_bounds)
    from .green import (green_function, verify_green_action,
                        verify_green_laplacian, verify_w1p_convergence)
    from .fields import (builtin_field, verify_key_maximal_estimate,
                         verify_pair_kernel_estimate)
    from .flows import integrate_flow, verify_green_derivative_along_flow, \
        verify_rlf_residual
    from . import transport as tr
    from .serialize import write_contraction_csv

    rec, rng = ctx["rec"], ctx["rng"]
    rec.claim([
        ("gaussian-bounds", "spectral.verify_gaussian_bounds", "constants finite"),
        ("bakry-emery", "spectral.verify_bakry_emery", "excess<=1e-8"),
        ("action-identity", "green.verify_green_action", "residual<1e-8"),
        ("regularized-identity", "green.verify_green_laplacian", "residual<1e-8"),
        ("w1p-convergence", "green.verify_w1p_convergence", "norms decreasing"),
        ("pair-kernel-bound", "fields.verify_pair_kernel_estimate", "C<50"),
        ("key-maximal-estimate", "fields.verify_key_maximal_estimate", "C<100"),
        ("w2-derivative", "transport.verify_w2_derivative", "within allowance"),
        ("joint-derivative", "transport.verify_joint_derivative",
         "one-sided bound"),
        ("w2-contraction", "transport.verify_contraction", "ratio<=1+tol"),
        ("pair-corollary", "transport.verify_contraction",
         "stretch<=e^(Lt)(1+1e-3)"),
        ("geodesic-differentiation", "transport.verify_geodesic_differentiation",
         "relative<=15%"),
        ("rlf-residual", "flows.verify_rlf_residual", "ratio<=1"),
        ("green-along-flow", "flows.verify_green_derivative_along_flow",
         "pass rate>=90%"),
    ])

    t2 = build_torus_grid(2, 8)
    basis2 = eigendecompose(assemble_laplacian(t2))
    gb = verify_gaussian_bounds(basis2, t2, 2, (0.05, 0.1, 0.2),
                                _sample_pairs(rng, t2.npoints, 200))
    gb_ok = all(np.isfinite(v) and v > 0 for v in
                (gb.C1_low, gb.C1_high, gb.C2)) and gb.mass_residual < 1e-9
    rec.add("gaussian-bounds", "spectral.verify_gaussian_bounds", gb.C1_low,
            gb_ok, "constants finite")
    be = verify_bakry_emery(basis2, t2, 0.0,
                            [rng.standard_normal(t2.npoints) for _ in range(5)],
                            (0.05, 0.1, 0.2))
    rec.add("bakry-emery", "spectral.verify_bakry_emery", be.worst_excess,
            be.worst_excess <= 1e-8, "excess<=1e-8")

    t3 = build_torus_grid(3, 8)
    basis3 = eigendecompose(assemble_laplacian(t3))
    worst = max(verify_green_action(basis3, rng.standard_normal(t3.npoints),
                                    int(rng.integers(t3.npoints)))
                for _ in range(10))
    rec.add("action-identity", "green.verify_green_action", worst,
            worst < 1e-8, "residual<1e-8")
    lap = verify_green_laplacian(basis3, 0.01, int(rng.integers(t3.npoints)))
    rec.add("regularized-identity", "green.verify_green_laplacian", lap,
            lap < 1e-8, "residual<1e-8")
    w1p = verify_w1p_convergence(basis3, 0, 1.2, (0.1, 0.05, 0.025))
    rec.add("w1p-convergence", "green.verify_w1p_convergence", w1p.final_norm,
            w1p.decreasing_within_10pct, "norms decreasing")
    c1 = verify_pair_kernel_estimate(t3, np.abs(rng.standard_normal(t3.npoints)),
                                     3, _sample_pairs(rng, t3.npoints, 300))
    rec.add("pair-kernel-bound", "fields.verify_pair_kernel_estimate", c1,
            np.isfinite(c1) and c1 < 50.0, "C<50")
    gfn3 = green_function(basis3)
    bg = builtin_field("gradient_heat",
                       {"space": t3, "basis": basis3, "tau": 0.1,
                        "f0": 3.0 * rng.standard_normal(t3.npoints)})
    c2 = verify_key_maximal_estimate(basis3, gfn3, bg, 0.0,
                                     _sample_pairs(rng, t3.npoints, 300))
    rec.add("key-maximal-estimate", "fields.verify_key_maximal_estimate", c2,
            np.isfinite(c2) and c2 < 100.0, "C<100")

    bshear = builtin_field("shear", {"space": t2, "s": 0.5})
    grid = np.linspace(0.0, 0.2, 101)
    mu0 = tr.node_measure(t2, rng.choice(t2.npoints, 5, replace=False))
    nu0 = tr.node_measure(t2, rng.choice(t2.npoints, 5, replace=False))
    traj = tr.continuity_equation_solve(t2, bshear, mu0, grid)
    drep = tr.verify_w2_derivative(t2, traj, bshear, nu0)
    rec.add("w2-derivative", "transport.verify_w2_derivative",
            drep.max_discrepancy, drep.passed, "within allowance")
    traj_nu = tr.continuity_equation_solve(t2, bshear, nu0, grid)
    jrep = tr.verify_joint_derivative(t2, traj, traj_nu, bshear)
    rec.add("joint-derivative", "transport.verify_joint_derivative",
            jrep.max_violation, jrep.passed, "one-sided bound")

    sphere = build_sphere_mesh(200)
    brot = builtin_field("rotation", {"space": sphere, "axis": (0.0, 0.0, 1.0),
                                      "speed": 1.0})
    ms = tr.node_measure(sphere, rng.choice(sphere.npoints, 15, replace=False))
    ns = tr.node_measure(sphere, rng.choice(sphere.npoints, 15, replace=False))
    crep = tr.verify_contraction(sphere, brot, ms, ns, T=0.5, L_sym=0.0,
                                 seed=int(rng.integers(2**31)))
    rec.add("w2-contraction", "transport.verify_contraction",
            float(crep.ratio.max()), bool(np.all(crep.ratio <= 1.0)),
            "ratio<=1+tol")
    rec.add("pair-corollary", "transport.verify_contraction", crep.pair_worst,
            crep.pair_worst <= 1.0 + 1e-3, "stretch<=e^(Lt)(1+1e-3)")
    write_contraction_csv(crep, os.path.join(ctx["series"], "contraction.csv"))

    e0 = tr.node_measure(t2, rng.choice(t2.npoints, 8, replace=False))
    e1 = tr.node_measure(t2, rng.choice(t2.npoints, 8, replace=False))
    grep = tr.verify_geodesic_differentiation(t2, bshear, e0, e1,
                                              np.linspace(0.0, 1.0, 11))
    rec.add("geodesic-differentiation",
            "transport.verify_geodesic_differentiation", grep.max_relative,
            grep.passed, "relative<=15%")

    bc = builtin_field("cdl_singular", {"space": t3, "alpha": 0.5, "rho": 0.25,
                                        "center": (0.5, 0.5, 0.5)})
    ctx3 = dict(ctx)
    ctx3["numerics"] = {"t_final": 0.5, "time_nodes": 6, "step": 0.005,
                        "epsilon": 0.1, "max_pairs": 20000}
    _lusin_pipeline(ctx3, t3, basis3, bc)
    flow = integrate_flow(t3, bc, np.linspace(0.0, 0.5, 6), step=0.005)
    ratio = verify_rlf_residual(flow, bc)
    rec.add("rlf-residual", "flows.verify_rlf_residual", ratio, ratio <= 1.0,
            "ratio<=1")
    cand = _sample_pairs(rng, t3.npoints, 400)
    dist = t3.pairwise()
    well_separated = [p for p in cand if dist[p] > 3.0 * t3.spacing][:60]
    frep = verify_green_derivative_along_flow(flow, basis3, bc, well_separated)
    rec.add("green-along-flow", "flows.verify_green_derivative_along_flow",
            frep.pass_rate, frep.pass_rate >= 0.9, "pass rate>=90%")

    ctx2 = dict(ctx)
    ctx2["space"] = t2
    ctx2["basis"] = basis2
    ctx2["fieldspec"] = {"name": "shear", "s": 0.5}
    ctx2["numerics"] = {"t_final": 0.5, "time_nodes": 6, "circle": 8,
                        "epsilon": 0.1, "max_pairs": 20000}
    ctx2["series_prefix"] = "lift-"
    _run_n2lift(ctx2)


_RUNNERS = {
    "heat-kernel-check": _run_heat,
    "green-check": _run_green,
    "maximal-estimates": _run_maximal,
    "contraction": _run_contraction,
    "lusin-regularity": _run_lusin,
    "n2-lift": _run_n2lift,
    "full-suite": _run_full,
}

_NEEDS_BASIS = {"heat-kernel-check", "green-check", "maximal-estimates",
                "lusin-regularity", "n2-lift"}


def run_experiment(config: ExperimentConfig, cache_dir=None) -> str:
    """Execute one scenario; returns the artifact directory.

    Gate failures are recorded in report.csv rather than raised; inspect the
    status column (or the exit code of the command-line entry).
    """
    import numpy as np

    spc, num = _resolve(config)
    outdir = config.out
    series = os.path.join(outdir, "series")
    os.makedirs(series, exist_ok=True)
    rec = _Recorder()
    timings: list[tuple[str, float]] = []
    rng = np.random.default_rng(int(num.get("seed", 0)))

    ctx = {"rec": rec, "rng": rng, "numerics": num, "series": series,
           "source": config.source, "space": None, "basis": None,
           "fieldspec": config.field}
    t0 = time.perf_counter()
    if config.scenario != "full-suite":
        ctx["space"] = _build_space(spc, config.source)
        if config.scenario in _NEEDS_BASIS:
            ctx["basis"] = _cached_basis(ctx["space"], num.get("k_max"),
                                         cache_dir, timings)
        if not ctx["fieldspec"] and config.scenario not in (
                "heat-kernel-check", "green-check"):
            ctx["fieldspec"] = _default_field(config.scenario, ctx["space"])
    try:
        _RUNNERS[config.scenario](ctx)
    except (AssertionError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        rec.notes.append(f"pipeline stopped: {exc}")
    rec.finalize()
    timings.append(("scenario", time.perf_counter() - t0))

    with open(os.path.join(outdir, "report.csv"), "w") as fh:
        fh.write("name,check_id,constant,status,tolerance\n")
        for row in rec.rows:
            fh.write(",".join(row) + "\n")
    _write_manifest(os.path.join(outdir, "manifest.txt"), config, spc, num,
                    timings, rec)
    return outdir


def _write_manifest(path, config, spc, num, timings, rec) -> None:
    import numpy
    import scipy
    from . import __version__

    lines = [f"mmslab {__version__}",
             f"python {sys.version.split()[0]}",
             f"numpy {numpy.__version__}",
             f"scipy {scipy.__version__}",
             f"scenario {config.scenario}",
             f"config {config.source}"]
    for key in sorted(spc):
        lines.append(f"space.{key} = {spc[key]}")
    for key in sorted(config.field):
        lines.append(f"field.{key} = {config.field[key]}")
    for key in sorted(num):
        lines.append(f"numerics.{key} = {num[key]}")
    for name, dt in timings:
        lines.append(f"wall {name}: {dt:.3f}s")
    lines.append(f"status {'pass' if rec.passed else 'fail'}")
    lines.extend(f"note {n}" for n in rec.notes)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mmslab",
                                     description="metric-measure-space "
                                                 "verification scenarios")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute a scenario config")
    run_p.add_argument("config", help="TOML config path")
    run_p.add_argument("--out", help="artifact directory override")
    run_p.add_argument("--seed", type=int, help="seed override")
    run_p.add_argument("--threads", type=int,
                       help="BLAS/OpenMP thread cap, set before numpy loads")
    run_p.add_argument("--cache", help="spectral cache directory "
                                       "(default: $MMS_CACHE)")
    args = parser.parse_args(argv)

    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    try:
        config = parse_config(args.config)
        if args.out is not None:
            config.out = args.out
        if args.seed is not None:
            config.numerics = dict(config.numerics, seed=args.seed)
        cache_dir = args.cache if args.cache is not None \
            else os.environ.get("MMS_CACHE")
        outdir = run_experiment(config, cache_dir=cache_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    with open(os.path.join(outdir, "report.csv")) as fh:
        failed = any(line.split(",")[3] == "fail" for line in
                     fh.read().splitlines()[1:])
    print(f"report written to {outdir}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
