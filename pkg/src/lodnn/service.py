"""HTTP service around the solver, the network builder, and the studies.

Every route takes a pydantic request mirroring the study config layout and
returns a typed response; artifacts (CSV, manifests, networks, reports) are
written server-side under the request's output directory.  The CLI is a thin
client of these routes.
"""

import json
import os
import time
from typing import Any, Optional, Union

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, experiments, fem, lod, mesh, surrogate


class ProblemModel(BaseModel):
    d: int = 1
    n_coarse: Union[int, list] = Field(default_factory=lambda: [8])
    r_eps: int = 2
    r_h: int = 2
    alpha: float = 1.0
    beta: float = 2.0
    f: Union[str, dict] = "one"
    coefficient: Union[str, dict] = "random"


class LodModel(BaseModel):
    ell: Union[int, str] = "log"


class SurrogateModel(BaseModel):
    eta: Union[float, str, None] = None
    k: Optional[float] = None
    size_cap: int = 10 ** 4


class StudyModel(BaseModel):
    kind: str
    sweep: Optional[list] = None
    cases: int = 100


class StudyRequest(BaseModel):
    study: StudyModel
    problem: ProblemModel = ProblemModel()
    lod: LodModel = LodModel()
    surrogate: SurrogateModel = SurrogateModel()
    seed: int = 0
    threads: int = 1
    output: str = "."


class RowModel(BaseModel):
    study: str
    point: str
    status: str
    params: dict
    metrics: dict
    wall_time_s: float


class StudyResponse(BaseModel):
    kind: str
    rows: list
    csv_path: str
    manifest_path: str
    csv_sha256: str


class SolveRequest(BaseModel):
    problem: ProblemModel = ProblemModel()
    lod: LodModel = LodModel()
    seed: int = 0
    threads: int = 1
    output: Optional[str] = None


class SolveResponse(BaseModel):
    d: int
    n_coarse: int
    ell: int
    H: float
    h: float
    pg_clod_gap_max: float
    # localization quality: exact agreement once patches cover the domain
    full_coverage: bool
    solution_l2: float
    pg_vs_clod_l2: float
    solution_path: Optional[str] = None


class BuildNetworkRequest(BaseModel):
    problem: ProblemModel = ProblemModel()
    lod: LodModel = LodModel()
    surrogate: SurrogateModel = SurrogateModel()
    element: Optional[int] = None
    seed: int = 0
    output: str = "."
    name: str = "network"


class BuildNetworkResponse(BaseModel):
    npz_path: str
    json_path: str
    eta: float
    theta: float
    gamma: float
    depth: int
    num_params: int
    params_bound: int
    element: int
    ell: int
    input_dim: int
    output_rows: int
    output_cols: int
    build_seconds: float


class CompareModel(BaseModel):
    mode: str = "oracle"  # oracle | banked | file
    path: Optional[str] = None
    audit: bool = True


class CompareRequest(BaseModel):
    problem: ProblemModel = ProblemModel()
    lod: LodModel = LodModel()
    surrogate: SurrogateModel = SurrogateModel()
    compare: CompareModel = CompareModel()
    seed: int = 0
    threads: int = 1
    output: Optional[str] = None


class CompareResponse(BaseModel):
    coeff_gap: float
    scaled_gap: float
    l2_gap: float
    matrix_gap: float
    decay_gap_l2: float
    eta: float
    networked_patches: int
    per_patch_errors: Optional[list] = None
    max_per_patch_error: Optional[float] = None
    report_path: Optional[str] = None


def _study_config(req: StudyRequest) -> dict:
    return experiments.normalize_config(json.loads(req.model_dump_json()))


def _problem_pieces(problem: ProblemModel, lod_model: LodModel, seed: int):
    cfg = experiments.normalize_config({
        "study": {"kind": "ell-sweep"},
        "problem": json.loads(problem.model_dump_json()),
        "lod": json.loads(lod_model.model_dump_json()),
        "seed": seed,
    })
    prob = cfg["problem"]
    n_coarse = prob["n_coarse"][0]
    hier = mesh.build_hierarchy(prob["d"], n_coarse, prob["r_eps"], prob["r_h"])
    field = experiments.make_field(cfg, hier, "coefficient")
    ell = experiments.resolve_ell(cfg, n_coarse)
    f = experiments.forcing(prob["f"])
    return cfg, hier, field, ell, f


def run_study(req: StudyRequest) -> StudyResponse:
    cfg = _study_config(req)
    rows, csv_path, manifest_path = experiments.run(cfg)
    with open(manifest_path) as fh:
        digest = json.load(fh)["outputs"]["csv"]["sha256"]
    return StudyResponse(
        kind=cfg["study"]["kind"],
        rows=[RowModel(study=r.study, point=r.point, status=r.status,
                       params=r.params, metrics=r.metrics,
                       wall_time_s=r.wall_time_s).model_dump()
              for r in rows],
        csv_path=csv_path, manifest_path=manifest_path, csv_sha256=digest)


def run_solve(req: SolveRequest) -> SolveResponse:
    cfg, hier, field, ell, f = _problem_pieces(req.problem, req.lod, req.seed)
    ws = lod.LodWorkspace(hier, field, ell, num_threads=max(1, req.threads))
    s_pg = ws.pg_matrix()
    s_c, _ = ws.clod_matrix()
    gap = abs(s_pg - s_c)
    gap_max = float(gap.max()) if gap.nnz else 0.0
    sol_pg = lod.solve_lod(hier, field, f, ell, workspace=ws)
    sol_c = lod.solve_lod(hier, field, f, ell, method="clod", workspace=ws)
    m_fine = fem.assemble_mass(hier, "fine")
    solution_path = None
    if req.output:
        os.makedirs(req.output, exist_ok=True)
        solution_path = os.path.join(req.output, "solve-lod.solution.json")
        with open(solution_path, "w", encoding="utf-8") as fh:
            json.dump({"coeffs": [float(v) for v in sol_pg.coeffs],
                       "ell": ell, "H": hier.H}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return SolveResponse(
        d=hier.d, n_coarse=hier.n_coarse, ell=ell, H=hier.H, h=hier.h,
        pg_clod_gap_max=gap_max,
        full_coverage=ell >= hier.n_coarse,
        solution_l2=lod.l2_norm(m_fine, sol_pg.fine),
        pg_vs_clod_l2=lod.l2_norm(m_fine, sol_pg.fine - sol_c.fine),
        solution_path=solution_path)


def run_build_network(req: BuildNetworkRequest) -> BuildNetworkResponse:
    cfg, hier, _, ell, _ = _problem_pieces(req.problem, req.lod, req.seed)
    eta = experiments.resolve_eta(
        {"surrogate": json.loads(req.surrogate.model_dump_json()),
         "problem": cfg["problem"]}, hier.n_coarse)
    if eta is None:
        raise ValueError("build-network needs surrogate.eta")
    start = time.perf_counter()
    s = surrogate.build_pg_network(
        hier, ell, cfg["problem"]["alpha"], cfg["problem"]["beta"], eta,
        element=req.element, size_cap=req.surrogate.size_cap)
    elapsed = time.perf_counter() - start
    os.makedirs(req.output, exist_ok=True)
    npz_path, json_path = surrogate.save_surrogate(
        s, os.path.join(req.output, req.name))
    cert = s.certificate
    return BuildNetworkResponse(
        npz_path=npz_path, json_path=json_path,
        eta=s.eta, theta=s.theta, gamma=s.gamma,
        depth=cert.depth, num_params=cert.num_params,
        params_bound=cert.params_bound,
        element=s.element, ell=s.ell,
        input_dim=cert.input_dim, output_rows=cert.output_rows,
        output_cols=cert.output_cols, build_seconds=elapsed)


def run_compare(req: CompareRequest) -> CompareResponse:
    cfg, hier, field, ell, f = _problem_pieces(req.problem, req.lod, req.seed)
    mode = req.compare.mode
    if mode == "file":
        if not req.compare.path:
            raise ValueError("compare.mode='file' needs compare.path")
        chosen = surrogate.load_surrogate(req.compare.path)
        eta = None
    elif mode in ("oracle", "banked"):
        chosen = mode
        eta = experiments.resolve_eta(
            {"surrogate": json.loads(req.surrogate.model_dump_json()),
             "problem": cfg["problem"]}, hier.n_coarse)
        if mode == "banked" and eta is None:
            raise ValueError("compare.mode='banked' needs surrogate.eta")
    else:
        raise ValueError("compare.mode must be oracle, banked or file")
    rep = surrogate.compare_solutions(
        field, f, ell, surrogate=chosen, eta=eta,
        size_cap=req.surrogate.size_cap, num_threads=max(1, req.threads),
        audit=req.compare.audit)
    per_patch = rep.per_patch_errors
    report_path = None
    if req.output:
        os.makedirs(req.output, exist_ok=True)
        report_path = os.path.join(req.output, "compare.report.json")
        payload = {k: v for k, v in rep.__dict__.items()}
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")
    return CompareResponse(
        coeff_gap=rep.coeff_gap, scaled_gap=rep.scaled_gap,
        l2_gap=rep.l2_gap, matrix_gap=rep.matrix_gap,
        decay_gap_l2=rep.decay_gap_l2, eta=rep.eta,
        networked_patches=rep.networked_patches,
        per_patch_errors=per_patch,
        max_per_patch_error=(max(per_patch) if per_patch else None),
        report_path=report_path)


def create_app() -> FastAPI:
    app = FastAPI(title="lodnn", version=__version__)

    def guarded(fn, payload):
        try:
            return fn(payload)
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/study", response_model=StudyResponse)
    def study(req: StudyRequest):
        return guarded(run_study, req)

    @app.post("/local-contract", response_model=StudyResponse)
    def local_contract(req: StudyRequest):
        if req.study.kind != "local-contract":
            raise HTTPException(status_code=422,
                                detail="study.kind must be local-contract")
        return guarded(run_study, req)

    @app.post("/solve-lod", response_model=SolveResponse)
    def solve(req: SolveRequest):
        return guarded(run_solve, req)

    @app.post("/build-network", response_model=BuildNetworkResponse)
    def build_network(req: BuildNetworkRequest):
        return guarded(run_build_network, req)

    @app.post("/compare", response_model=CompareResponse)
    def compare(req: CompareRequest):
        return guarded(run_compare, req)

    return app


app = create_app()
