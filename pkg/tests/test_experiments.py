"""Study-harness tests: config handling, deterministic streams, drivers,
CSV schema stability, and byte-identical reruns."""

import hashlib
import json
import os

import numpy as np
import pytest

from lodnn import experiments, fem, mesh


def sha256_file(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def test_normalize_config_fills_defaults():
    cfg = experiments.normalize_config(
        {"study": {"kind": "ell-sweep"}, "problem": {"n_coarse": 8, "f": "sin"}})
    assert cfg["problem"]["n_coarse"] == [8]
    assert cfg["problem"]["f"] == {"kind": "sin"}
    assert cfg["problem"]["coefficient"] == {"kind": "random"}
    assert cfg["seed"] == 0
    assert cfg["threads"] == 1
    assert cfg["lod"]["ell"] == "log"


def test_normalize_config_rejects_bad_input():
    with pytest.raises(ValueError):
        experiments.normalize_config({"study": {"kind": "nope"}})
    with pytest.raises(ValueError):
        experiments.normalize_config(
            {"study": {"kind": "ell-sweep"},
             "problem": {"alpha": 2.0, "beta": 1.0}})


def test_rng_streams_are_deterministic_and_labeled():
    a1 = experiments.rng_for(7, "x").uniform(size=5)
    a2 = experiments.rng_for(7, "x").uniform(size=5)
    b = experiments.rng_for(7, "y").uniform(size=5)
    c = experiments.rng_for(8, "x").uniform(size=5)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


def test_forcing_kinds():
    pts = np.array([[0.25], [0.5]])
    assert np.allclose(experiments.forcing({"kind": "one"})(pts), [1.0, 1.0])
    assert np.allclose(experiments.forcing({"kind": "sin"})(pts),
                       np.sin(np.pi * pts[:, 0]))
    assert np.allclose(experiments.forcing({"kind": "bump"})(pts),
                       pts[:, 0] * (1 - pts[:, 0]))
    with pytest.raises(ValueError):
        experiments.forcing({"kind": "zigzag"})


def test_coefficient_sources(tmp_path):
    hier = mesh.build_hierarchy(1, 4, 2, 1)
    vals = experiments.coefficient_values(
        {"kind": "random"}, hier, 1.0, 3.0, 5, "coefficient")
    assert vals.shape == (8,) and vals.min() >= 1.0 and vals.max() <= 3.0
    const = experiments.coefficient_values(
        {"kind": "constant", "value": 2.0}, hier, 1.0, 3.0, 5, "c")
    assert np.all(const == 2.0)
    smooth = experiments.coefficient_values(
        {"kind": "smooth"}, hier, 1.0, 3.0, 5, "c")
    centers = (np.arange(8) + 0.5) / 8.0
    assert np.allclose(smooth, 2.0 + np.sin(2 * np.pi * centers))
    path = tmp_path / "coef.txt"
    fem.save_coefficient(fem.CoefficientField(hier, vals, 1.0, 3.0), path)
    from_file = experiments.coefficient_values(
        {"kind": "file", "path": str(path)}, hier, 1.0, 3.0, 5, "c")
    assert np.array_equal(from_file, vals)
    other = mesh.build_hierarchy(1, 8, 2, 1)
    with pytest.raises(ValueError):
        experiments.coefficient_values(
            {"kind": "file", "path": str(path)}, other, 1.0, 3.0, 5, "c")


def test_resolve_rules():
    cfg = experiments.normalize_config({"study": {"kind": "H-sweep"}})
    assert experiments.resolve_ell(cfg, 4) == 3
    assert experiments.resolve_ell(cfg, 8) == 4
    assert experiments.resolve_ell(cfg, 16) == 5
    cfg["lod"]["ell"] = 2
    assert experiments.resolve_ell(cfg, 16) == 2
    assert experiments.resolve_eta(cfg, 8) is None
    cfg["surrogate"]["eta"] = 0.1
    assert experiments.resolve_eta(cfg, 8) == 0.1
    cfg["surrogate"]["eta"] = "H^k"
    assert experiments.resolve_eta(cfg, 8) == (1 / 8) ** 3  # d=1 -> k=3
    cfg["surrogate"]["k"] = 2
    assert experiments.resolve_eta(cfg, 8) == (1 / 8) ** 2


def test_prolongation_consistent_at_shared_nodes():
    for d in (1, 2):
        src = mesh.build_hierarchy(d, 2, 2, 1)
        dst = mesh.build_hierarchy(d, 2, 2, 2)
        rng = np.random.default_rng(9)
        v = rng.standard_normal(src.num_inner_nodes("fine"))
        lifted = experiments.prolong_to(src, v, dst)
        # source nodes appear among destination nodes at stride r_h
        n_src, n_dst = src.n_fine, dst.n_fine
        stride = n_dst // n_src
        src_grid = v.reshape((n_src - 1,) * d, order="F")
        dst_grid = lifted.reshape((n_dst - 1,) * d, order="F")
        sel = (slice(stride - 1, None, stride),) * d
        assert np.allclose(dst_grid[sel], src_grid, atol=1e-13)


def test_csv_schema_and_float_format():
    rows = [
        experiments.ResultRow(
            study="ell-sweep", point="ell=1", status="ok",
            params={"H": 0.125, "h": 0.03125, "eps": 0.0625, "ell": 1,
                    "eta": None, "seed": 3},
            metrics={"decay_l2": 0.1, "pg_clod_gap_max": 2.0,
                     "l2_error": 1e-07}),
        experiments.ResultRow(
            study="ell-sweep", point="ell=2", status="error: X: boom",
            params={"H": 0.125, "h": 0.03125, "eps": 0.0625, "ell": 2,
                    "eta": None, "seed": 3},
            metrics={}),
    ]
    text = experiments.rows_to_csv("ell-sweep", rows)
    lines = text.splitlines()
    assert lines[0] == ("study,point,status,H,h,eps,ell,eta,seed,"
                        "decay_l2,pg_clod_gap_max,l2_error")
    assert lines[1].startswith("ell-sweep,ell=1,ok,0.125,0.03125,0.0625,1,,3,")
    assert ",0.1," in lines[1] and "1e-07" in lines[1]
    assert lines[2].endswith(",,,")  # error row leaves metric cells empty
    assert len(lines) == 3


def small_ell_config(out, threads=1):
    return {"study": {"kind": "ell-sweep", "sweep": [1, 2]},
            "problem": {"n_coarse": [8], "r_eps": 2, "r_h": 2, "beta": 5.0},
            "lod": {"ell": "log"}, "seed": 11,
            "output": str(out), "threads": threads}


def test_run_ell_sweep_and_byte_identity(tmp_path):
    rows, csv_path, man_path = experiments.run(small_ell_config(tmp_path / "a"))
    assert [r.status for r in rows] == ["ok", "ok"]
    assert rows[0].metrics["decay_l2"] > rows[1].metrics["decay_l2"]
    assert all(r.wall_time_s >= 0.0 for r in rows)
    digest = sha256_file(csv_path)
    with open(man_path) as fh:
        manifest = json.load(fh)
    assert manifest["schema_version"] == experiments.SCHEMA_VERSION
    assert manifest["outputs"]["csv"]["sha256"] == digest
    assert manifest["outputs"]["csv"]["rows"] == 2
    assert manifest["config"]["problem"]["beta"] == 5.0
    for key in ("python", "numpy", "scipy", "platform"):
        assert manifest["environment"][key]
    # reruns and worker counts do not change a byte
    _, csv_b, _ = experiments.run(small_ell_config(tmp_path / "b"))
    _, csv_c, _ = experiments.run(small_ell_config(tmp_path / "c", threads=3))
    assert sha256_file(csv_b) == digest
    assert sha256_file(csv_c) == digest


def test_run_seed_changes_output(tmp_path):
    cfg = small_ell_config(tmp_path / "a")
    _, csv_a, _ = experiments.run(cfg)
    cfg_b = small_ell_config(tmp_path / "b")
    _, csv_b, _ = experiments.run(cfg_b, seed=12)
    assert sha256_file(csv_a) != sha256_file(csv_b)


def test_errors_are_rows_not_crashes(tmp_path):
    # no interior patch exists at this size, so every point must fail softly
    cfg = {"study": {"kind": "local-contract", "sweep": [0.25, 0.1],
                     "cases": 2},
           "problem": {"n_coarse": [4], "r_eps": 2, "r_h": 1},
           "lod": {"ell": 2}, "seed": 1, "output": str(tmp_path)}
    rows, csv_path, man_path = experiments.run(cfg)
    assert len(rows) == 2
    assert all(r.status.startswith("error: ValueError") for r in rows)
    text = open(csv_path).read()
    assert text.count("error: ValueError") == 2
    with open(man_path) as fh:
        manifest = json.load(fh)
    assert all(s.startswith("error") for s in manifest["row_status"])


def test_local_contract_study(tmp_path):
    cfg = {"study": {"kind": "local-contract", "sweep": [0.25], "cases": 3},
           "problem": {"n_coarse": [5], "r_eps": 2, "r_h": 2, "beta": 2.0},
           "lod": {"ell": 1}, "seed": 13, "output": str(tmp_path)}
    rows, _, _ = experiments.run(cfg)
    (row,) = rows
    assert row.status == "ok"
    m = row.metrics
    assert m["max_gap"] <= 0.25
    assert m["accounting_exact"] == 1.0
    assert m["net_depth"] == m["cert_depth"]
    assert m["net_params"] == m["cert_params"]
    assert 0.0 < m["theta"] < 0.25 and 0.0 < m["gamma"] < 0.25


def test_h_sweep_rows(tmp_path):
    cfg = {"study": {"kind": "h-sweep", "sweep": [2, 4, 8]},
           "problem": {"n_coarse": [4], "r_eps": 2,
                        "coefficient": {"kind": "smooth"}, "beta": 3.0},
           "seed": 17, "output": str(tmp_path)}
    rows, _, _ = experiments.run(cfg)
    assert [r.point for r in rows] == ["r_h=2", "r_h=4"]
    assert rows[0].params["h"] == 2 * rows[1].params["h"]
    assert rows[0].metrics["h1_error"] > rows[1].metrics["h1_error"]
    assert rows[0].metrics["l2_error"] > rows[1].metrics["l2_error"]


def test_H_sweep_requires_nested_meshes(tmp_path):
    cfg = {"study": {"kind": "H-sweep", "sweep": [3, 8]},
           "problem": {"r_eps": 2, "r_h": 1}, "seed": 1,
           "output": str(tmp_path)}
    with pytest.raises(ValueError):
        experiments.run(cfg)


def test_eig_study_rows(tmp_path):
    cfg = {"study": {"kind": "eig-study", "sweep": [4, 8]},
           "problem": {"r_eps": 2, "r_h": 2}, "seed": 19,
           "output": str(tmp_path)}
    rows, _, _ = experiments.run(cfg)
    for row in rows:
        assert row.status == "ok"
        m = row.metrics
        assert m["lam_min_over_Hd"] > 0
        assert m["mass_lower_bound"] <= m["mass_ray_min"]
        assert m["mass_ray_max"] <= m["mass_upper_bound"]
        assert np.isfinite(m["lam_max_fine_scaled"])


def test_calculus_suite_rows(tmp_path):
    cfg = {"study": {"kind": "nn-calculus-suite", "cases": 10},
           "seed": 23, "output": str(tmp_path)}
    rows, csv_path, _ = experiments.run(cfg)
    assert {r.point for r in rows} == {
        "identity-exact", "sparse-concat-accounting",
        "parallelize-additive", "permutation-neutral"}
    for row in rows:
        assert row.status == "ok"
        assert row.metrics["failures"] == 0
        assert row.metrics["cases"] == 10
    assert os.path.basename(csv_path) == "nn-calculus-suite.csv"
