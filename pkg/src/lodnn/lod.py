"""Localized orthogonal decomposition on element patches.

Per coarse element: a constrained corrector solve on the ell-patch, giving a
local Petrov-Galerkin matrix (all patch coarse nodes x the element's corners).
Global operators average the element contributions with the corner
multiplicity weight 1/2^d, so that for patches covering the whole domain the
localized operator coincides with the ideal one.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import cho_factor, cho_solve, solve

from . import fem, mesh


@dataclass(frozen=True)
class PatchOperators:
    stiffness_map: sp.csr_array      # coefficient values -> vec(stiffness)
    interp: sp.csr_array             # fine inner nodes -> patch coarse nodes
    tents: np.ndarray                # prolongation, fine x all patch coarse
    tents_center: np.ndarray         # columns of the central element corners
    free: np.ndarray                 # patch coarse nodes not on the box boundary


class OperatorCache:
    """Geometry-keyed cache; translated interior patches share operators."""

    def __init__(self):
        self._store = {}

    def get(self, p):
        key = p.signature()
        ops = self._store.get(key)
        if ops is None:
            multi = mesh.patch_coarse_multi(p)
            free = ~((multi == 0) | (multi == p.hier.n_coarse)).any(axis=1)
            tents, tents_center = fem.prolongations(p)
            ops = PatchOperators(
                stiffness_map=fem.coefficient_to_stiffness_map(p),
                interp=fem.quasi_interpolation(p),
                tents=tents,
                tents_center=tents_center,
                free=free,
            )
            self._store[key] = ops
        return ops


@dataclass
class CorrectorResult:
    corrector: np.ndarray    # in the kernel of the interpolation, n x 2^d
    multiplier: np.ndarray   # patch coarse nodes x 2^d


def solve_corrector(p, ops, a_values):
    """Constrained projection of the central element's corner tents.

    Solves S x + I' mu = S t, I x = 0 for every corner tent t; the corrector
    x carries the fine-scale part, t - x the surrogate trial function.
    """
    n = p.num_fine_inner
    s_mat = (ops.stiffness_map @ np.asarray(a_values, dtype=float)).reshape((n, n), order="F")
    chol = cho_factor(s_mat)
    i_dense = ops.interp.toarray()
    x_cols = cho_solve(chol, i_dense.T)          # S^{-1} I'
    y_mat = i_dense @ x_cols                     # I S^{-1} I'
    free = ops.free
    rhs = (ops.interp @ ops.tents_center)[free]
    mu_f = solve(y_mat[np.ix_(free, free)], rhs)
    mu = np.zeros((p.num_coarse_nodes, rhs.shape[1]))
    mu[free] = mu_f
    corrector = ops.tents_center - x_cols @ mu
    return CorrectorResult(corrector=corrector, multiplier=mu)


def local_pg_matrix(p, ops, result):
    """Patch-local Petrov-Galerkin matrix: test tents vs corrected trials."""
    return (ops.interp @ ops.tents).T @ result.multiplier


def scatter_pg(hier, patches, local_mats):
    """Average patch-local matrices into the global coarse operator.

    Every element contributes its local matrix (patch coarse nodes x the
    element's corners) weighted by the corner multiplicity 1/2^d.
    """
    share = 1.0 / 2 ** hier.d
    nc = hier.num_inner_nodes("coarse")
    rows_l, cols_l, vals_l = [], [], []
    for p, sloc in zip(patches, local_mats):
        rmap, cmap = mesh.scatter_map(p)
        rr = np.broadcast_to(rmap[:, None], sloc.shape)
        cc = np.broadcast_to(cmap[None, :], sloc.shape)
        m = (rr >= 0) & (cc >= 0)
        rows_l.append(rr[m])
        cols_l.append(cc[m])
        vals_l.append(share * sloc[m])
    mat = sp.coo_array(
        (np.concatenate(vals_l), (np.concatenate(rows_l), np.concatenate(cols_l))),
        shape=(nc, nc),
    )
    return mat.tocsr()


class LodWorkspace:
    """One corrector pass over all coarse elements, shared by the assemblies."""

    def __init__(self, hier, field, ell, cache=None, num_threads=1):
        self.hier = hier
        self.field = field
        self.ell = int(ell)
        self.cache = cache if cache is not None else OperatorCache()
        num_k = hier.num_elements("coarse")
        # warm the operator cache sequentially (its dict is not locked)
        patches = [mesh.patch(hier, k, self.ell) for k in range(num_k)]
        for p in patches:
            self.cache.get(p)

        def work(p):
            ops = self.cache.get(p)
            res = solve_corrector(p, ops, field.for_patch(p))
            return res, local_pg_matrix(p, ops, res)

        if num_threads > 1:
            with ThreadPoolExecutor(max_workers=num_threads) as pool:
                results = list(pool.map(work, patches))
        else:
            results = [work(p) for p in patches]
        self.patches = patches
        self.results = results

    def pg_matrix(self):
        """Global Petrov-Galerkin surrogate on the free coarse nodes."""
        return scatter_pg(self.hier, self.patches, [sloc for _, sloc in self.results])

    def corrected_basis(self):
        """Corrected coarse basis on the inner fine nodes (one column per
        free coarse node): tents minus averaged element correctors."""
        hier = self.hier
        share = 1.0 / 2 ** hier.d
        nc = hier.num_inner_nodes("coarse")
        nf = hier.num_inner_nodes("fine")
        rows_l, cols_l, vals_l = [], [], []
        for p, (res, _) in zip(self.patches, self.results):
            fmap = mesh.fine_inner_index_map(p)
            _, cmap = mesh.scatter_map(p)
            good_c = cmap >= 0
            good_f = fmap >= 0
            block = res.corrector[np.ix_(good_f, good_c)]
            rr = np.broadcast_to(fmap[good_f][:, None], block.shape)
            cc = np.broadcast_to(cmap[good_c][None, :], block.shape)
            rows_l.append(rr.ravel())
            cols_l.append(cc.ravel())
            vals_l.append(-share * block.ravel())
        q_mat = sp.coo_array(
            (np.concatenate(vals_l), (np.concatenate(rows_l), np.concatenate(cols_l))),
            shape=(nf, nc),
        ).tocsr()
        full = mesh.full_patch(hier)
        tents, _ = fem.prolongations(full)
        rmap, _ = mesh.scatter_map(full)
        p_glob = sp.csr_array(tents[:, rmap >= 0])
        return p_glob + q_mat

    def clod_matrix(self, s_fine=None):
        """Symmetric variant: energy products of the corrected basis."""
        if s_fine is None:
            s_fine = assemble_fine_stiffness(self.hier, self.field)
        basis = self.corrected_basis()
        mat = (basis.T @ (s_fine @ basis)).tocsr()
        return mat, basis


def assemble_fine_stiffness(hier, field):
    return fem.assemble_stiffness(mesh.full_patch(hier), field.values, fmt="csr")


def assemble_pg_global(hier, field, ell, cache=None, num_threads=1):
    return LodWorkspace(hier, field, ell, cache, num_threads).pg_matrix()


def assemble_clod_global(hier, field, ell, cache=None, num_threads=1):
    mat, _ = LodWorkspace(hier, field, ell, cache, num_threads).clod_matrix()
    return mat


def default_ell(n_coarse):
    """Patch radius growing like log2(1/H); the +1 keeps the localization
    error below the coarse discretization error in practice."""
    return max(1, int(np.ceil(np.log2(n_coarse))) + 1)


def solve_coarse(s_mat, rhs):
    if sp.issparse(s_mat):
        x = spla.spsolve(s_mat.tocsr(), rhs)
    else:
        x = solve(s_mat, rhs)
    return x


def solve_fine_reference(hier, field, f, size_cap=10 ** 6):
    """Direct fine-level solve; refuses absurdly large systems."""
    n = hier.num_inner_nodes("fine")
    if n > size_cap:
        raise ValueError(f"fine solve with {n} unknowns exceeds the cap {size_cap}")
    s_fine = assemble_fine_stiffness(hier, field)
    b = fem.load_vector(hier, f, "fine")
    return spla.spsolve(s_fine, b)


@dataclass
class CoarseSolution:
    coeffs: np.ndarray
    fine: np.ndarray


def solve_lod(hier, field, f, ell, method="pg", num_threads=1, workspace=None):
    """Coarse surrogate solve; returns coefficients and the fine-grid lift
    through the corrected basis."""
    ws = workspace if workspace is not None else LodWorkspace(hier, field, ell, num_threads=num_threads)
    rhs = fem.load_vector(hier, f, "coarse")
    if method == "pg":
        s_mat = ws.pg_matrix()
        basis = ws.corrected_basis()
    elif method == "clod":
        s_mat, basis = ws.clod_matrix()
    else:
        raise ValueError("method must be 'pg' or 'clod'")
    coeffs = solve_coarse(s_mat, rhs)
    return CoarseSolution(coeffs=coeffs, fine=basis @ coeffs)


def energy_norm(s_mat, v):
    return float(np.sqrt(abs(v @ (s_mat @ v))))


def l2_norm(m_mat, v):
    return float(np.sqrt(abs(v @ (m_mat @ v))))
