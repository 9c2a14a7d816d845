"""Versioned plain-text caches and CSV emitters for the artifact pipeline.

Spaces, spectral bases and flow maps round-trip through line-oriented text
formats (no binary blobs) with a trailing sha256 checksum; every float is
written with 17 significant digits so float64 values survive exactly.  The
CSV writers produce plot-ready tables with the same formatting, which keeps
repeated runs byte-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .space import (
    MetricMeasureSpace,
    build_sphere_mesh,
    build_torus_grid,
    build_weighted_graph,
)

__all__ = [
    "save_space",
    "load_space",
    "save_spectral",
    "load_spectral",
    "save_flow",
    "load_flow",
    "write_green_csv",
    "write_comparability_csv",
    "write_moduli_csv",
    "write_contraction_csv",
    "write_coupling_csv",
    "write_qstar_csv",
    "write_lusin_csv",
    "write_worst_pair_csv",
]


def _g(x: float) -> str:
    return f"{float(x):.17g}"


def _finish(lines: list[str], path) -> None:
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w") as fh:
        fh.write(body)
        fh.write(f"checksum sha256 {digest}\n")


def _read_checked(path, fmt: str) -> tuple[list[str], list[str]]:
    """Lines up to the checksum plus the split header; the header's format
    and version are validated before the checksum so version skew is not
    misreported as corruption."""
    with open(path) as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) < 2 or head[0] != fmt or head[1] != "v1":
        raise ValueError(f"{path}: version mismatch, expected '{fmt} v1' "
                         f"header, found {lines[0]!r}")
    if len(lines) < 2 or not lines[-1].startswith("checksum sha256 "):
        raise ValueError(f"{path}: checksum failure (trailer line missing)")
    body = "\n".join(lines[:-1]) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    if lines[-1].split()[2] != digest:
        raise ValueError(f"{path}: checksum failure (file corrupted or truncated)")
    return lines[:-1], head


# ---------------------------------------------------------------------------
# spaces


def save_space(space: MetricMeasureSpace, path) -> None:
    """Write `mms-space v1` text: header, meta lines, one line per point."""
    lines = [f"mms-space v1 {space.chart} {space.npoints}",
             f"meta n {space.n}",
             f"meta spacing {_g(space.spacing)}"]
    if space.resolutions is not None:
        lines.append("meta resolutions " + " ".join(str(r) for r in space.resolutions))
    if space.chart == "product-circle":
        base = space.base
        if base is None or base.chart == "product-circle":
            raise ValueError("only single-level products are serializable")
        spec = [base.chart]
        if base.chart == "sphere":
            spec.append(str(base.npoints))
        else:
            spec.extend(str(r) for r in base.resolutions)
        lines.append("meta base " + " ".join(spec))
    for i in range(space.npoints):
        coords = " ".join(_g(c) for c in space.points[i])
        lines.append(f"{i} {_g(space.weights[i])} {coords}")
    if space.chart == "graph":
        for i, j, c, length in space.edges:
            lines.append(f"edge {int(i)} {int(j)} {_g(c)} {_g(length)}")
    _finish(lines, path)


def load_space(path) -> MetricMeasureSpace:
    """Rebuild a space from `mms-space v1` text; distances come from the
    chart formulas again, never from the file."""
    lines, head = _read_checked(path, "mms-space")
    chart, npoints = head[2], int(head[3])
    meta: dict[str, list[str]] = {}
    ids, weights, coords, edges = [], [], [], []
    for line in lines[1:]:
        tok = line.split()
        if tok[0] == "meta":
            meta[tok[1]] = tok[2:]
        elif tok[0] == "edge":
            edges.append(tuple(float(v) for v in tok[1:5]))
        else:
            ids.append(int(tok[0]))
            weights.append(float(tok[1]))
            coords.append([float(v) for v in tok[2:]])
    if len(ids) != npoints or ids != list(range(npoints)):
        raise ValueError(f"{path}: point lines do not enumerate 0..{npoints - 1}")
    weights = np.array(weights)
    points = np.array(coords)
    n = int(meta["n"][0])

    if chart == "graph":
        return build_weighted_graph(npoints, edges, weights=weights, n=n)

    resolutions = tuple(int(r) for r in meta["resolutions"]) \
        if "resolutions" in meta else None
    base = None
    if chart == "product-circle":
        bspec = meta["base"]
        if bspec[0] == "sphere":
            base = build_sphere_mesh(int(bspec[1]))
        elif bspec[0].startswith("torus"):
            res = tuple(int(r) for r in bspec[1:])
            base = build_torus_grid(len(res), res)
        else:
            raise ValueError(f"{path}: unknown base chart {bspec[0]!r}")
    space = MetricMeasureSpace(chart=chart, n=n, points=points, weights=weights,
                               spacing=float(meta["spacing"][0]), diameter=0.0,
                               resolutions=resolutions, base=base)
    space.diameter = float(space.pairwise().max())
    return space


# ---------------------------------------------------------------------------
# spectral bases


def save_spectral(basis, path) -> None:
    """Write `mms-spectral v1`: eigenvalues, the mode table when the scheme
    is exact, then the row-major eigenfunction table."""
    lines = [f"mms-spectral v1 {basis.scheme} {basis.space.npoints} {basis.k_max}",
             "eigenvalues " + " ".join(_g(v) for v in basis.eigenvalues)]
    if basis.modes is not None:
        for m in basis.modes:
            axes = " ".join(f"{kind}:{freq}" for kind, freq in m.axes)
            lines.append(f"mode {_g(m.eigenvalue)} {axes}")
    for row in basis.eigenfunctions:
        lines.append("row " + " ".join(_g(v) for v in row))
    _finish(lines, path)


def load_spectral(path, space: MetricMeasureSpace):
    """Rebuild a basis onto ``space``; the point count must match."""
    from .spectral import SpectralBasis, TorusMode

    lines, head = _read_checked(path, "mms-spectral")
    scheme, npoints, k_max = head[2], int(head[3]), int(head[4])
    if npoints != space.npoints:
        raise ValueError(f"{path}: dimension mismatch, basis has {npoints} "
                         f"points but the space has {space.npoints}")
    eigenvalues = None
    modes, rows = [], []
    for line in lines[1:]:
        tok = line.split()
        if tok[0] == "eigenvalues":
            eigenvalues = np.array([float(v) for v in tok[1:]])
        elif tok[0] == "mode":
            axes = tuple((kf.split(":")[0], int(kf.split(":")[1])) for kf in tok[2:])
            modes.append(TorusMode(axes=axes, eigenvalue=float(tok[1])))
        elif tok[0] == "row":
            rows.append([float(v) for v in tok[1:]])
    eigenfunctions = np.array(rows)
    if eigenfunctions.shape != (npoints, k_max):
        raise ValueError(f"{path}: eigenfunction table is {eigenfunctions.shape}, "
                         f"expected {(npoints, k_max)}")
    return SpectralBasis(space=space, scheme=scheme, eigenvalues=eigenvalues,
                         eigenfunctions=eigenfunctions, k_max=k_max,
                         modes=modes or None)


# ---------------------------------------------------------------------------
# flow maps


def save_flow(flow, path) -> None:
    """Write `mms-flow v1`: one `start_id time coords` line per recorded
    sample, grouped by time slice."""
    lines = [f"mms-flow v1 {flow.space.chart} {flow.nstarts} {len(flow.times)}",
             f"meta field {flow.field_name}",
             f"meta integrator {flow.integrator}",
             f"meta step {_g(flow.step)}",
             f"meta sup_speed {_g(flow.sup_speed)}"]
    if flow.compressibility is not None:
        lines.append(f"meta compressibility {_g(flow.compressibility)}")
    if flow.rlf_ratio is not None:
        lines.append(f"meta rlf_ratio {_g(flow.rlf_ratio)}")
    for k, t in enumerate(flow.times):
        for i, sid in enumerate(flow.start_ids):
            coords = " ".join(_g(c) for c in flow.positions[k, i])
            lines.append(f"{int(sid)} {_g(t)} {coords}")
    _finish(lines, path)


def load_flow(path, space: MetricMeasureSpace):
    """Rebuild a flow map onto ``space``; chart and start count must fit."""
    from .flows import FlowMap

    lines, head = _read_checked(path, "mms-flow")
    chart, nstarts, ntimes = head[2], int(head[3]), int(head[4])
    if chart != space.chart:
        raise ValueError(f"{path}: dimension mismatch, flow recorded on "
                         f"{chart!r} but the space chart is {space.chart!r}")
    meta: dict[str, str] = {}
    sids, times, rows = [], [], []
    for line in lines[1:]:
        tok = line.split()
        if tok[0] == "meta":
            meta[tok[1]] = " ".join(tok[2:])
        else:
            sids.append(int(tok[0]))
            times.append(float(tok[1]))
            rows.append([float(v) for v in tok[2:]])
    start_ids = np.array(sids[:nstarts])
    if start_ids.max(initial=0) >= space.npoints:
        raise ValueError(f"{path}: dimension mismatch, start ids exceed the "
                         f"space's {space.npoints} points")
    positions = np.array(rows).reshape(ntimes, nstarts, -1)
    return FlowMap(space=space, field_name=meta["field"], start_ids=start_ids,
                   times=np.array(times[::nstarts]), positions=positions,
                   integrator=meta["integrator"], step=float(meta["step"]),
                   sup_speed=float(meta["sup_speed"]),
                   compressibility=float(meta["compressibility"])
                   if "compressibility" in meta else None,
                   rlf_ratio=float(meta["rlf_ratio"])
                   if "rlf_ratio" in meta else None)


# ---------------------------------------------------------------------------
# CSV emitters


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def write_green_csv(green_fn, path) -> None:
    """Dense Green matrix as `x_id,y_id,value` triplets."""
    values = green_fn.values
    npts = values.shape[0]
    rows = ((str(i), str(j), _g(values[i, j]))
            for i in range(npts) for j in range(npts))
    _write_csv(path, "x_id,y_id,value", rows)


def write_comparability_csv(shifted, space: MetricMeasureSpace, path) -> None:
    res = "x".join(str(r) for r in space.resolutions) if space.resolutions \
        else str(space.npoints)
    _write_csv(path, "resolution,n,A,A_bar,alpha",
               [(res, str(space.n), _g(shifted.A), _g(shifted.A_bar),
                 _g(shifted.alpha))])


def write_moduli_csv(moduli, path) -> None:
    """Per-time L2 and sup norms of the divergence and symmetric parts."""
    w = None
    rows = []
    for k, t in enumerate(moduli.times):
        g = moduli.g_combined[k]
        if w is None:
            w = np.full(g.shape, 1.0 / g.size)
        rows.append((_g(t),
                     _g(np.abs(moduli.div[k]).max()),
                     _g(np.abs(moduli.sym_modulus[k]).max()),
                     _g(np.sqrt(np.sum(g * g * w)))))
    _write_csv(path, "t,div_sup,sym_sup,g_l2", rows)


def write_contraction_csv(report, path) -> None:
    rows = ((_g(t), _g(w), _g(bd), _g(r))
            for t, w, bd, r in zip(report.times, report.w2, report.bound,
                                   report.ratio))
    _write_csv(path, "t,w2,bound,ratio", rows)


def write_coupling_csv(solution, path) -> None:
    """Optimal coupling as sparse `x_id,y_id,mass` triplets."""
    ii, jj, g = solution.coupling_triplets()
    xs = solution.x_ids if solution.x_ids is not None else np.arange(
        len(solution.x_weights))
    ys = solution.y_ids if solution.y_ids is not None else np.arange(
        len(solution.y_weights))
    rows = ((str(int(xs[i])), str(int(ys[j])), _g(m))
            for i, j, m in zip(ii, jj, g))
    _write_csv(path, "x_id,y_id,mass", rows)


def write_qstar_csv(q_report, path) -> None:
    rows = ((str(i), _g(v)) for i, v in enumerate(q_report.values))
    _write_csv(path, "start_id,q_star", rows)


def write_lusin_csv(report, path) -> None:
    _write_csv(path, "epsilon,threshold,excluded_mass,q_star_l2,structural_C,"
                     "lip_constant,max_pair_ratio",
               [(_g(report.epsilon), _g(report.threshold),
                 _g(report.excluded_mass), _g(report.q_star_l2),
                 _g(report.structural_C) if report.structural_C is not None else "",
                 _g(report.lip_constant) if report.lip_constant is not None else "",
                 _g(report.max_pair_ratio) if report.max_pair_ratio is not None else "")])


def write_worst_pair_csv(flow, report, path) -> None:
    """Full trajectories of the Lipschitz check's worst pair, for plotting."""
    from .space import chart_distance

    if report.worst_pair is None:
        raise ValueError("report carries no worst pair (run the pair scan first)")
    i, j, _, _ = report.worst_pair
    ri, rj = flow.rows_for([int(i), int(j)])
    rows = []
    for k, t in enumerate(flow.times):
        pi, pj = flow.positions[k, ri], flow.positions[k, rj]
        d = float(chart_distance(flow.space, pi[None, :], pj[None, :])[0])
        rows.append((_g(t),) + tuple(_g(c) for c in pi)
                    + tuple(_g(c) for c in pj) + (_g(d),))
    dim = flow.positions.shape[2]
    xcols = ",".join(f"x{a}" for a in range(dim))
    ycols = ",".join(f"y{a}" for a in range(dim))
    _write_csv(path, f"t,{xcols},{ycols},distance", rows)
