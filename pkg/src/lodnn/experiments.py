"""Reproducible study harness: config parsing, deterministic sampling,
study drivers, and CSV/manifest writers.

A study is described by a single JSON-style config dict.  Every random draw
comes from a counter-based generator keyed by (seed, stream label), so the
sampled data depends only on the config — never on execution order or worker
count — and the emitted CSV is byte-identical across reruns.  Wall-clock
times are kept on the row objects and in the manifest, never in the CSV, for
the same reason.
"""

import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import scipy
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import eigh

from . import fem, lod, mesh, nncalc, surrogate

SCHEMA_VERSION = 1

STUDY_KINDS = ("h-sweep", "ell-sweep", "H-sweep", "eig-study",
               "nn-calculus-suite", "local-contract")

_DEFAULTS = {
    "schema": SCHEMA_VERSION,
    "seed": 0,
    "study": {"kind": None, "sweep": None, "cases": 100},
    "problem": {
        "d": 1, "n_coarse": [8], "r_eps": 2, "r_h": 2,
        "alpha": 1.0, "beta": 2.0,
        "f": {"kind": "one"},
        "coefficient": {"kind": "random"},
    },
    "lod": {"ell": "log"},
    "surrogate": {"eta": None, "k": None, "size_cap": 10 ** 4},
    "output": ".",
    "threads": 1,
}


def _merge(base, override):
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def normalize_config(config):
    """Fill defaults and canonicalize shorthand forms."""
    cfg = _merge(_DEFAULTS, config)
    kind = cfg["study"]["kind"]
    if kind not in STUDY_KINDS:
        raise ValueError("study.kind must be one of %s, got %r"
                         % (", ".join(STUDY_KINDS), kind))
    prob = cfg["problem"]
    if isinstance(prob["n_coarse"], int):
        prob["n_coarse"] = [prob["n_coarse"]]
    prob["n_coarse"] = [int(v) for v in prob["n_coarse"]]
    if isinstance(prob["f"], str):
        prob["f"] = {"kind": prob["f"]}
    if isinstance(prob["coefficient"], str):
        prob["coefficient"] = {"kind": prob["coefficient"]}
    if not 0.0 < prob["alpha"] <= prob["beta"]:
        raise ValueError("need 0 < alpha <= beta")
    cfg["seed"] = int(cfg["seed"])
    cfg["threads"] = max(1, int(cfg["threads"]))
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return normalize_config(json.load(fh))


def rng_for(seed, label):
    """Independent deterministic stream for (seed, label)."""
    digest = hashlib.sha256(("%d:%s" % (seed, label)).encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def forcing(descr):
    """Named right-hand sides; points arrive as an (m, d) array."""
    kind = descr["kind"]
    if kind == "one":
        return lambda x: np.ones(x.shape[0])
    if kind == "sin":
        freq = float(descr.get("freq", 1))
        return lambda x: np.prod(np.sin(freq * np.pi * x), axis=1)
    if kind == "bump":
        return lambda x: np.prod(x * (1.0 - x), axis=1)
    raise ValueError("unknown forcing kind %r" % kind)


def _eps_centers(hier):
    n = hier.n_eps
    axis = (np.arange(n) + 0.5) / n
    grids = np.meshgrid(*([axis] * hier.d), indexing="ij")
    # element index is axis-0-fastest, matching the mesh ordering
    return np.stack([g.ravel(order="F") for g in grids], axis=1)


def coefficient_values(descr, hier, alpha, beta, seed, label):
    """Per-eps-element coefficient vector for a named source."""
    kind = descr["kind"]
    if kind == "random":
        rng = rng_for(seed, label)
        return rng.uniform(alpha, beta, hier.num_elements("eps"))
    if kind == "constant":
        value = float(descr.get("value", alpha))
        return np.full(hier.num_elements("eps"), value)
    if kind == "smooth":
        # 2 + sin(2 pi x_0) sampled at element centers, clipped to the class
        centers = _eps_centers(hier)
        vals = 2.0 + np.sin(2.0 * np.pi * centers[:, 0])
        return np.clip(vals, alpha, beta)
    if kind == "file":
        loaded = fem.load_coefficient(descr["path"])
        if loaded.hier != hier:
            raise ValueError("coefficient file was sampled on a different mesh")
        return loaded.values
    raise ValueError("unknown coefficient kind %r" % kind)


def make_field(cfg, hier, label):
    prob = cfg["problem"]
    vals = coefficient_values(prob["coefficient"], hier, prob["alpha"],
                              prob["beta"], cfg["seed"], label)
    return fem.CoefficientField(hier, vals, prob["alpha"], prob["beta"])


def resolve_ell(cfg, n_coarse):
    rule = cfg["lod"]["ell"]
    if rule == "log":
        return lod.default_ell(n_coarse)
    return int(rule)


def resolve_eta(cfg, n_coarse):
    rule = cfg["surrogate"]["eta"]
    if rule is None:
        return None
    if rule == "H^k":
        d = cfg["problem"]["d"]
        k = cfg["surrogate"]["k"]
        k = (2 * d + 1) if k is None else float(k)
        return (1.0 / n_coarse) ** k
    return float(rule)


def prolong_to(hier_src, inner_values, hier_dst):
    """Multilinear lift of an inner-node vector onto a finer mesh's inner
    nodes (zero boundary on both)."""
    d = hier_src.d
    n_src = hier_src.n_fine
    grid_axis = np.linspace(0.0, 1.0, n_src + 1)
    full = np.zeros((n_src + 1,) * d)
    inner = inner_values.reshape((n_src - 1,) * d, order="F")
    full[(slice(1, -1),) * d] = inner
    interp = RegularGridInterpolator([grid_axis] * d, full, method="linear")
    n_dst = hier_dst.n_fine
    axis = np.arange(1, n_dst) / n_dst
    pts = np.meshgrid(*([axis] * d), indexing="ij")
    points = np.stack([g.ravel(order="F") for g in pts], axis=1)
    return interp(points)


def _sym_extreme_eigs(mat):
    """(lambda_min, lambda_max) of a symmetric matrix, dense under a size
    threshold, Lanczos with shift-invert above it."""
    n = mat.shape[0]
    if n <= 1500:
        dense = mat.toarray() if sp.issparse(mat) else np.asarray(mat)
        evals = eigh(dense, eigvals_only=True, subset_by_index=[0, n - 1])
        return float(evals[0]), float(evals[-1])
    from scipy.sparse.linalg import eigsh
    top = eigsh(mat, k=1, which="LA", return_eigenvectors=False)[0]
    bottom = eigsh(mat, k=1, sigma=0.0, which="LM", return_eigenvectors=False)[0]
    return float(bottom), float(top)


@dataclass
class ResultRow:
    study: str
    point: str
    status: str
    params: dict
    metrics: dict
    wall_time_s: float = 0.0


@dataclass
class PointSpec:
    label: str
    params: dict
    fn: object


PARAM_COLUMNS = ("H", "h", "eps", "ell", "eta", "seed")

METRIC_COLUMNS = {
    "h-sweep": ("l2_error", "h1_error"),
    "ell-sweep": ("decay_l2", "pg_clod_gap_max", "l2_error"),
    "H-sweep": ("l2_error", "nn_l2_gap", "oracle_gap", "networks_built",
                "net_depth_max", "net_params_max"),
    "eig-study": ("lam_min_coarse", "lam_min_over_Hd", "lam_max_fine_scaled",
                  "lam_min_fine_scaled", "mass_ray_min", "mass_ray_max",
                  "mass_lower_bound", "mass_upper_bound"),
    "nn-calculus-suite": ("cases", "failures", "max_error"),
    "local-contract": ("max_gap", "mean_gap", "theta", "gamma",
                       "net_depth", "net_params", "cert_depth", "cert_params",
                       "accounting_exact"),
}


def _fmt(value):
    if value is None or value == "":
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def rows_to_csv(kind, rows):
    """Render rows with a stable per-kind schema; shortest round-trip
    decimals; deterministic newline handling."""
    columns = ("study", "point", "status") + PARAM_COLUMNS + METRIC_COLUMNS[kind]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        record = [row.study, row.point, row.status]
        record += [_fmt(row.params.get(name)) for name in PARAM_COLUMNS]
        record += [_fmt(row.metrics.get(name)) for name in METRIC_COLUMNS[kind]]
        writer.writerow(record)
    return buf.getvalue()


def _run_points(kind, specs, seed, threads):
    def work(spec):
        start = time.perf_counter()
        try:
            metrics = spec.fn()
            status = "ok"
            for name, value in metrics.items():
                if not np.isfinite(value):
                    raise ValueError("metric %s is not finite: %r" % (name, value))
        except Exception as exc:  # keep the sweep alive; the row records why
            metrics = {}
            status = "error: %s: %s" % (type(exc).__name__, exc)
        elapsed = time.perf_counter() - start
        params = dict(spec.params)
        params.setdefault("seed", seed)
        return ResultRow(study=kind, point=spec.label, status=status,
                         params=params, metrics=metrics, wall_time_s=elapsed)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, specs))
    return [work(spec) for spec in specs]


# ---------------------------------------------------------------------------
# study drivers


def _points_h_sweep(cfg):
    """Fine-scale FEM convergence: sweep the fine refinement under a fixed
    eps-mesh, errors against the finest sweep member."""
    prob = cfg["problem"]
    n_coarse = prob["n_coarse"][0]
    sweep = cfg["study"]["sweep"] or [2, 4, 8, 16]
    sweep = sorted(int(v) for v in sweep)
    if len(sweep) < 2:
        raise ValueError("h-sweep needs at least two refinement values")
    ref_rh = sweep[-1]
    hier_ref = mesh.build_hierarchy(prob["d"], n_coarse, prob["r_eps"], ref_rh)
    field_ref = make_field(cfg, hier_ref, "coefficient")
    f = forcing(prob["f"])
    u_ref = lod.solve_fine_reference(hier_ref, field_ref, f)
    s_unit_ref = lod.assemble_fine_stiffness(
        hier_ref, fem.constant_coefficient(hier_ref, 1.0))
    m_ref = fem.assemble_mass(hier_ref, "fine")

    specs = []
    for r_h in sweep[:-1]:
        hier = mesh.build_hierarchy(prob["d"], n_coarse, prob["r_eps"], r_h)
        # same eps mesh, hence the same sampled coefficient function
        field = fem.CoefficientField(hier, field_ref.values,
                                     prob["alpha"], prob["beta"])
        params = {"H": hier.H, "h": hier.h, "eps": hier.eps, "ell": None,
                  "eta": None}

        def fn(hier=hier, field=field):
            u = lod.solve_fine_reference(hier, field, f)
            diff = prolong_to(hier, u, hier_ref) - u_ref
            return {
                "l2_error": lod.l2_norm(m_ref, diff),
                "h1_error": lod.energy_norm(s_unit_ref, diff),
            }

        specs.append(PointSpec(label="r_h=%d" % r_h, params=params, fn=fn))
    return specs


def _points_ell_sweep(cfg):
    """Localization decay: growing patch radius at fixed meshes."""
    prob = cfg["problem"]
    n_coarse = prob["n_coarse"][0]
    sweep = cfg["study"]["sweep"] or [1, 2, 3, 4, 5]
    hier = mesh.build_hierarchy(prob["d"], n_coarse, prob["r_eps"], prob["r_h"])
    field = make_field(cfg, hier, "coefficient")
    f = forcing(prob["f"])
    u_fine = lod.solve_fine_reference(hier, field, f)
    m_fine = fem.assemble_mass(hier, "fine")

    specs = []
    for ell in sweep:
        params = {"H": hier.H, "h": hier.h, "eps": hier.eps, "ell": int(ell),
                  "eta": None}

        def fn(ell=int(ell)):
            ws = lod.LodWorkspace(hier, field, ell)
            sol_pg = lod.solve_lod(hier, field, f, ell, workspace=ws)
            sol_c = lod.solve_lod(hier, field, f, ell, method="clod",
                                  workspace=ws)
            gap = abs(ws.pg_matrix() - ws.clod_matrix()[0])
            diff = sol_c.fine - sol_pg.fine
            return {
                "decay_l2": lod.l2_norm(m_fine, diff),
                "pg_clod_gap_max": float(gap.max()) if gap.nnz else 0.0,
                "l2_error": lod.l2_norm(m_fine, sol_pg.fine - u_fine),
            }

        specs.append(PointSpec(label="ell=%d" % ell, params=params, fn=fn))
    return specs


def _points_H_sweep(cfg):
    """Coarse convergence: sweep the coarse mesh under one shared fine mesh
    and one shared coefficient; optionally run the network assembly."""
    prob = cfg["problem"]
    sweep = cfg["study"]["sweep"] or prob["n_coarse"]
    sweep = sorted(int(v) for v in sweep)
    n_eps_shared = sweep[-1] * prob["r_eps"]
    for n_coarse in sweep:
        if n_eps_shared % n_coarse:
            raise ValueError("every swept n_coarse must divide the shared "
                             "eps resolution %d" % n_eps_shared)
    hier_fine = mesh.build_hierarchy(prob["d"], sweep[-1], prob["r_eps"], prob["r_h"])
    field_fine = make_field(cfg, hier_fine, "coefficient")
    f = forcing(prob["f"])
    u_ref = lod.solve_fine_reference(hier_fine, field_fine, f)
    m_fine = fem.assemble_mass(hier_fine, "fine")

    specs = []
    for n_coarse in sweep:
        hier = mesh.build_hierarchy(prob["d"], n_coarse,
                                    n_eps_shared // n_coarse, prob["r_h"])
        field = fem.CoefficientField(hier, field_fine.values,
                                     prob["alpha"], prob["beta"])
        ell = resolve_ell(cfg, n_coarse)
        eta = resolve_eta(cfg, n_coarse)
        params = {"H": hier.H, "h": hier.h, "eps": hier.eps, "ell": ell,
                  "eta": eta}

        def fn(hier=hier, field=field, ell=ell, eta=eta):
            ws = lod.LodWorkspace(hier, field, ell)
            sol = lod.solve_lod(hier, field, f, ell, workspace=ws)
            metrics = {"l2_error": lod.l2_norm(m_fine, sol.fine - u_ref)}
            if eta is not None:
                nn, entries = surrogate.assemble_nn_banked(
                    hier, field, ell, eta, field.alpha, field.beta,
                    size_cap=cfg["surrogate"]["size_cap"])
                rhs = fem.load_vector(hier, f, "coarse")
                u_nn = lod.solve_coarse(nn.s_nn, rhs)
                diff = sol.coeffs - u_nn
                m_coarse = fem.assemble_mass(hier, "coarse")
                s_pg = ws.pg_matrix()
                orc = lod.scatter_pg(hier, ws.patches,
                                     [m for _, m in ws.results])
                u_orc = lod.solve_coarse(orc, rhs)
                gap_mat = abs(orc - s_pg)
                metrics.update({
                    "nn_l2_gap": lod.l2_norm(m_coarse, diff),
                    "oracle_gap": max(
                        float(np.linalg.norm(sol.coeffs - u_orc)),
                        float(gap_mat.max()) if gap_mat.nnz else 0.0),
                    "networks_built": len(entries),
                    "net_depth_max": max(e.depth for e in entries),
                    "net_params_max": max(e.num_params for e in entries),
                })
            return metrics

        specs.append(PointSpec(label="n_coarse=%d" % n_coarse,
                               params=params, fn=fn))
    return specs


def _points_eig_study(cfg):
    """Spectral scaling laws of the coarse operator, the fine stiffness, and
    the coarse mass matrix."""
    prob = cfg["problem"]
    sweep = cfg["study"]["sweep"] or prob["n_coarse"]
    f_d = prob["d"]

    specs = []
    for n_coarse in (int(v) for v in sweep):
        hier = mesh.build_hierarchy(f_d, n_coarse, prob["r_eps"], prob["r_h"])
        ell = resolve_ell(cfg, n_coarse)
        params = {"H": hier.H, "h": hier.h, "eps": hier.eps, "ell": ell,
                  "eta": None}
        label = "n_coarse=%d" % n_coarse

        def fn(hier=hier, ell=ell, label=label):
            field = make_field(cfg, hier, "coefficient/%s" % label)
            ws = lod.LodWorkspace(hier, field, ell)
            s_c, _ = ws.clod_matrix()
            lam_min = _sym_extreme_eigs(s_c)[0]
            s_fine = lod.assemble_fine_stiffness(hier, field)
            lam_fine = _sym_extreme_eigs(s_fine)
            m_coarse = fem.assemble_mass(hier, "coarse")
            rng = rng_for(cfg["seed"], "mass-vectors/%s" % label)
            n_free = hier.num_inner_nodes("coarse")
            rays = []
            for _ in range(100):
                v = rng.standard_normal(n_free)
                rays.append(float(v @ (m_coarse @ v)) / float(v @ v))
            d = hier.d
            return {
                "lam_min_coarse": lam_min,
                "lam_min_over_Hd": lam_min / hier.H ** d,
                "lam_max_fine_scaled": lam_fine[1] * hier.h ** (2 - d),
                "lam_min_fine_scaled": lam_fine[0] * hier.h ** (-d),
                "mass_ray_min": min(rays),
                "mass_ray_max": max(rays),
                "mass_lower_bound": (hier.H / 6.0) ** d,
                "mass_upper_bound": hier.H ** d,
            }

        specs.append(PointSpec(label=label, params=params, fn=fn))
    return specs


def _random_affine(rng, din, dout):
    w = rng.standard_normal((dout, din))
    return nncalc.affine_network(sp.csr_array(w), rng.standard_normal(dout))


def _random_deep(rng, din, dout):
    net = _random_affine(rng, din, dout)
    return nncalc.pad_to_depth(net, int(rng.integers(2, 5)))


def _calculus_properties(seed, cases):
    """Randomized checks of the network-calculus accounting laws."""

    def identity_exact(rng):
        n = int(rng.integers(1, 9))
        x = rng.standard_normal(n) * 10.0
        y = nncalc.realize(nncalc.identity_network(n), x)
        return float(np.max(np.abs(y - x)))

    def sparse_concat_accounting(rng):
        a, b, c = (int(v) for v in rng.integers(1, 7, 3))
        g = _random_deep(rng, a, b)
        h = _random_deep(rng, b, c)
        net = nncalc.sparse_concat(h, g)
        if nncalc.depth(net) != nncalc.depth(g) + nncalc.depth(h):
            return math.inf
        if nncalc.num_params(net) > 2 * (nncalc.num_params(g) + nncalc.num_params(h)):
            return math.inf
        x = rng.standard_normal(a)
        direct = nncalc.realize(h, nncalc.realize(g, x))
        return float(np.max(np.abs(nncalc.realize(net, x) - direct)))

    def parallelize_additive(rng):
        a, b, c = (int(v) for v in rng.integers(1, 7, 3))
        depth = int(rng.integers(2, 5))
        g = nncalc.pad_to_depth(_random_affine(rng, a, b), depth)
        h = nncalc.pad_to_depth(_random_affine(rng, a, c), depth)
        net = nncalc.parallelize([g, h])
        if nncalc.num_params(net) != nncalc.num_params(g) + nncalc.num_params(h):
            return math.inf
        x = rng.standard_normal(2 * a)
        got = nncalc.realize(net, x)
        want = np.concatenate([nncalc.realize(g, x[:a]), nncalc.realize(h, x[a:])])
        return float(np.max(np.abs(got - want)))

    def permutation_neutral(rng):
        a, b = (int(v) for v in rng.integers(2, 7, 2))
        g = _random_deep(rng, a, b)
        perm = rng.permutation(b)
        p_mat = sp.csr_array((np.ones(b), (np.arange(b), perm)), shape=(b, b))
        net = nncalc.concat(nncalc.affine_network(p_mat), g)
        if nncalc.depth(net) != nncalc.depth(g):
            return math.inf
        if nncalc.num_params(net) != nncalc.num_params(g):
            return math.inf
        x = rng.standard_normal(a)
        got = nncalc.realize(net, x)
        want = nncalc.realize(g, x)[perm]
        return float(np.max(np.abs(got - want)))

    properties = {
        "identity-exact": (identity_exact, 0.0),
        "sparse-concat-accounting": (sparse_concat_accounting, 1e-10),
        "parallelize-additive": (parallelize_additive, 1e-12),
        "permutation-neutral": (permutation_neutral, 1e-12),
    }

    def make_fn(name, check, tol):
        def fn():
            rng = rng_for(seed, "calculus/%s" % name)
            worst = 0.0
            failures = 0
            for _ in range(cases):
                err = check(rng)
                if not err <= tol:
                    failures += 1
                worst = max(worst, err if math.isfinite(err) else -1.0)
            return {"cases": cases, "failures": failures, "max_error": worst}
        return fn

    return {name: make_fn(name, check, tol)
            for name, (check, tol) in properties.items()}


def _points_nn_calculus(cfg):
    cases = int(cfg["study"]["cases"])
    fns = _calculus_properties(cfg["seed"], cases)
    return [PointSpec(label=name,
                      params={"H": None, "h": None, "eps": None, "ell": None,
                              "eta": None},
                      fn=fn)
            for name, fn in fns.items()]


def _points_local_contract(cfg):
    """Forward-pass accuracy of one interior surrogate per target eta."""
    prob = cfg["problem"]
    n_coarse = prob["n_coarse"][0]
    sweep = cfg["study"]["sweep"] or [0.25, 0.1]
    cases = int(cfg["study"]["cases"])
    hier = mesh.build_hierarchy(prob["d"], n_coarse, prob["r_eps"], prob["r_h"])
    ell = resolve_ell(cfg, n_coarse)

    specs = []
    for eta in (float(v) for v in sweep):
        params = {"H": hier.H, "h": hier.h, "eps": hier.eps, "ell": ell,
                  "eta": eta}

        def fn(eta=eta):
            s = surrogate.build_pg_network(
                hier, ell, prob["alpha"], prob["beta"], eta,
                size_cap=cfg["surrogate"]["size_cap"])
            p = mesh.patch(hier, s.element, ell)
            ops = lod.OperatorCache().get(p)
            rng = rng_for(cfg["seed"], "local-contract/eta=%r" % eta)
            gaps = []
            for _ in range(cases):
                a = rng.uniform(prob["alpha"], prob["beta"], p.num_eps_elements)
                got = surrogate.surrogate_local_matrix(s, a)
                res = lod.solve_corrector(p, ops, a)
                want = lod.local_pg_matrix(p, ops, res)
                gaps.append(float(np.linalg.norm(got - want, 2)))
            cert = s.certificate
            exact = (cert.depth == nncalc.depth(s.net)
                     and cert.num_params == nncalc.num_params(s.net))
            return {
                "max_gap": max(gaps), "mean_gap": float(np.mean(gaps)),
                "theta": s.theta, "gamma": s.gamma,
                "net_depth": nncalc.depth(s.net),
                "net_params": nncalc.num_params(s.net),
                "cert_depth": cert.depth, "cert_params": cert.num_params,
                "accounting_exact": 1.0 if exact else 0.0,
            }

        specs.append(PointSpec(label="eta=%r" % eta, params=params, fn=fn))
    return specs


_DRIVERS = {
    "h-sweep": _points_h_sweep,
    "ell-sweep": _points_ell_sweep,
    "H-sweep": _points_H_sweep,
    "eig-study": _points_eig_study,
    "nn-calculus-suite": _points_nn_calculus,
    "local-contract": _points_local_contract,
}


def run(config, out=None, seed=None, threads=None):
    """Execute one study; returns (rows, csv_path, manifest_path).

    Points are prepared up front (all sampling included), fanned out to the
    worker pool, and collected in declaration order; a single writer then
    emits the CSV and a manifest with config echo, environment, and
    checksums.  Per-point failures become error rows; the sweep continues.
    """
    cfg = normalize_config(dict(config))
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        cfg["threads"] = max(1, int(threads))
    if out is not None:
        cfg["output"] = str(out)
    kind = cfg["study"]["kind"]

    start = time.perf_counter()
    specs = _DRIVERS[kind](cfg)
    rows = _run_points(kind, specs, cfg["seed"], cfg["threads"])
    wall = time.perf_counter() - start

    out_dir = cfg["output"]
    os.makedirs(out_dir, exist_ok=True)
    csv_text = rows_to_csv(kind, rows)
    csv_path = os.path.join(out_dir, "%s.csv" % kind)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "seed": cfg["seed"],
        "config": cfg,
        "environment": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "platform": platform.platform(),
        },
        "outputs": {
            "csv": {
                "path": os.path.basename(csv_path),
                "sha256": hashlib.sha256(csv_text.encode()).hexdigest(),
                "rows": len(rows),
                "columns": list(("study", "point", "status")
                                + PARAM_COLUMNS + METRIC_COLUMNS[kind]),
            },
        },
        "wall_time_s": round(wall, 3),
        "row_status": [row.status for row in rows],
    }
    manifest_path = os.path.join(out_dir, "%s.manifest.json" % kind)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows, csv_path, manifest_path
