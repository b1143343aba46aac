"""Multilinear FEM operators on patches of the mesh hierarchy.

Everything is expressed on patch-local degrees of freedom (fine nodes strictly
inside the patch, all patch coarse nodes), in the lexicographic order fixed by
:mod:`lodnn.mesh`.  Matrices vectorise columnwise (Fortran order).
"""

from dataclasses import dataclass
from functools import reduce

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve as dense_solve

from .mesh import (
    MeshHierarchy,
    Patch,
    _flat,
    build_hierarchy,
    cartesian_lex,
    corner_local_columns,
    corner_offsets,
    local_indexers,
    patch_coarse_multi,
)


def mass_1d(h):
    return h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


def stiffness_1d(h):
    return 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])


def tensor_product(mats):
    """Kronecker chain so that axis 0 varies fastest in the row index."""
    return reduce(np.kron, list(reversed(mats)))


def local_matrices(d, h):
    """(stiffness, mass) of one cube element with edge h, corner-lex dofs."""
    m1, k1 = mass_1d(h), stiffness_1d(h)
    mass = tensor_product([m1] * d)
    stiff = np.zeros_like(mass)
    for a in range(d):
        stiff += tensor_product([k1 if b == a else m1 for b in range(d)])
    return stiff, mass


def _patch_fine_structure(p):
    """Per fine element of the patch: local inner-node ids of its corners
    (-1 where the corner sits on the patch boundary) and the local index of
    the eps element containing it."""
    hier = p.hier
    d, q, rh = hier.d, hier.q, hier.r_h
    w = p.widths
    fine_sizes = np.array([wa * q for wa in w])
    node_sizes = fine_sizes - 1
    ft = cartesian_lex([np.arange(s) for s in fine_sizes])
    offs = corner_offsets(d)
    corner = ft[:, None, :] + offs[None, :, :] - 1
    valid = np.all((corner >= 0) & (corner < node_sizes), axis=2)
    lidx = np.where(valid, _flat(corner, node_sizes), -1)
    eps_sizes = np.array([wa * hier.r_eps for wa in w])
    eps_local = _flat(ft // rh, eps_sizes)
    return lidx, eps_local


def _stiffness_entries(p):
    hier = p.hier
    k_loc, _ = local_matrices(hier.d, hier.h)
    lidx, eps_local = _patch_fine_structure(p)
    t, c = lidx.shape
    li = np.broadcast_to(lidx[:, :, None], (t, c, c))
    lj = np.broadcast_to(lidx[:, None, :], (t, c, c))
    kv = np.broadcast_to(k_loc[None], (t, c, c))
    ec = np.broadcast_to(eps_local[:, None, None], (t, c, c))
    m = (li >= 0) & (lj >= 0)
    return li[m], lj[m], ec[m], kv[m]


def coefficient_to_stiffness_map(p):
    """Sparse U with U @ a == vec(stiffness(a)) for eps-elementwise a."""
    li, lj, ec, kv = _stiffness_entries(p)
    n = p.num_fine_inner
    mat = sp.coo_array((kv, (li + n * lj, ec)), shape=(n * n, p.num_eps_elements))
    return mat.tocsr()


def assemble_stiffness(p, a_values, fmt="dense"):
    """Patch stiffness matrix for the piecewise-constant coefficient a_values."""
    a = np.asarray(a_values, dtype=float)
    if a.shape != (p.num_eps_elements,):
        raise ValueError("coefficient values do not match the patch")
    li, lj, ec, kv = _stiffness_entries(p)
    n = p.num_fine_inner
    mat = sp.coo_array((kv * a[ec], (li, lj)), shape=(n, n)).tocsr()
    if fmt == "dense":
        return mat.toarray()
    return mat


def _axis_tent(p, a):
    q = p.hier.q
    w = p.hi[a] - p.lo[a] + 1
    f = np.arange(1, w * q)
    c = np.arange(w + 1)
    return np.maximum(1.0 - np.abs(f[:, None] / q - c[None, :]), 0.0)


def prolongations(p):
    """(P, P_K): coarse tents sampled on the patch-inner fine nodes, and the
    columns belonging to the central element's corners.  Columns of coarse
    nodes on the box boundary are zero."""
    mats = [_axis_tent(p, a) for a in range(p.hier.d)]
    big_p = tensor_product(mats)
    multi = patch_coarse_multi(p)
    on_bd = ((multi == 0) | (multi == p.hier.n_coarse)).any(axis=1)
    big_p[:, on_bd] = 0.0
    return big_p, big_p[:, corner_local_columns(p)]


def _unit_cell_projection(d, q, h, big_h):
    """B with B[i, :] the fine-node weights of the local L2 projection onto
    the coarse cell's multilinear basis function i."""
    _, m_h = local_matrices(d, h)
    m_big = tensor_product([mass_1d(big_h)] * d)
    offs = corner_offsets(d)
    node_sizes = np.full(d, q + 1)
    g = np.zeros((2 ** d, (q + 1) ** d))
    for o in cartesian_lex([np.arange(q)] * d):
        pos = (o[None, :] + offs) / q
        w = np.ones((2 ** d, 2 ** d))
        for a in range(d):
            xa = pos[:, a][:, None]
            w *= np.where(offs[None, :, a] == 1, xa, 1.0 - xa)
        nodes = _flat(o[None, :] + offs, node_sizes)
        g[:, nodes] += w.T @ m_h
    return dense_solve(m_big, g, assume_a="pos")


def quasi_interpolation(p):
    """Averaging interpolation onto the patch coarse nodes.

    Elementwise L2 projection onto multilinears followed by corner averaging
    with the fixed denominator 2^d; rows of box-boundary nodes are zero and
    the argument is read as extended by zero outside the patch."""
    hier = p.hier
    d, q = hier.d, hier.q
    b_cell = _unit_cell_projection(d, q, hier.h, hier.H)
    w = p.widths
    node_sizes = np.array([wa * q - 1 for wa in w])
    coarse_sizes = np.array([wa + 1 for wa in w])
    offs = corner_offsets(d)
    unit_nodes = cartesian_lex([np.arange(q + 1)] * d)
    multi_c = patch_coarse_multi(p)
    on_bd_row = ((multi_c == 0) | (multi_c == hier.n_coarse)).any(axis=1)
    share = 1.0 / 2 ** d
    rows_l, cols_l, vals_l = [], [], []
    for cc in cartesian_lex([np.arange(wa) for wa in w]):
        node_multi = cc[None, :] * q + unit_nodes - 1
        valid = np.all((node_multi >= 0) & (node_multi < node_sizes), axis=1)
        nidx = _flat(node_multi[valid], node_sizes)
        bv = b_cell[:, valid]
        crows = _flat(cc[None, :] + offs, coarse_sizes)
        for bit in range(2 ** d):
            r = crows[bit]
            if on_bd_row[r]:
                continue
            rows_l.append(np.full(nidx.shape, r))
            cols_l.append(nidx)
            vals_l.append(share * bv[bit])
    mat = sp.coo_array(
        (np.concatenate(vals_l), (np.concatenate(rows_l), np.concatenate(cols_l))),
        shape=(p.num_coarse_nodes, p.num_fine_inner),
    )
    return mat.tocsr()


def assemble_mass(hier, level="fine"):
    """Global mass matrix on the inner nodes of the given level."""
    n = hier.axis_elements(level)
    hh = 1.0 / n
    main = np.full(n - 1, 2.0 * hh / 3.0)
    off = np.full(n - 2, hh / 6.0)
    m1 = sp.diags_array([off, main, off], offsets=[-1, 0, 1], format="csr")
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), [m1] * hier.d)


_GAUSS_REL = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def load_vector(hier, f, level="fine"):
    """Inner-node load vector for a callable f((n_pts, d) -> (n_pts,))."""
    d = hier.d
    n = hier.axis_elements(level)
    hh = 1.0 / n
    els = cartesian_lex([np.arange(n)] * d)
    offs = corner_offsets(d)
    out = np.zeros((n - 1) ** d)
    wgt = (hh / 2.0) ** d
    for g in cartesian_lex([np.arange(2)] * d):
        rel = _GAUSS_REL[g]
        x = (els + rel[None, :]) * hh
        fx = np.asarray(f(x), dtype=float)
        for bit in range(2 ** d):
            lam = np.prod(np.where(offs[bit] == 1, rel, 1.0 - rel))
            inner = hier.inner_node_index(els + offs[bit][None, :], level)
            m = inner >= 0
            np.add.at(out, inner[m], wgt * lam * fx[m])
    return out


@dataclass
class CoefficientField:
    """Piecewise-constant coefficient on the eps mesh with bounds [alpha, beta]."""

    hier: MeshHierarchy
    values: np.ndarray
    alpha: float
    beta: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.hier.num_elements("eps"),):
            raise ValueError("coefficient length does not match the eps mesh")
        if not (0 < self.alpha <= self.beta):
            raise ValueError("need 0 < alpha <= beta")
        if self.values.min() < self.alpha - 1e-12 or self.values.max() > self.beta + 1e-12:
            raise ValueError("coefficient values leave [alpha, beta]")

    def for_patch(self, p):
        eps_els, _, _ = local_indexers(p)
        return self.values[eps_els]


def constant_coefficient(hier, value=1.0):
    v = np.full(hier.num_elements("eps"), float(value))
    return CoefficientField(hier, v, value, value)


def save_coefficient(field, path):
    hier = field.hier
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(
            f"{hier.d} {hier.n_coarse} {hier.r_eps} {hier.r_h} "
            f"{float(field.alpha)!r} {float(field.beta)!r}\n"
        )
        for v in field.values:
            fh.write(f"{float(v)!r}\n")


def load_coefficient(path):
    with open(path, "r", encoding="ascii") as fh:
        head = fh.readline().split()
        if len(head) != 6:
            raise ValueError("coefficient header must be: d n_coarse r_eps r_h alpha beta")
        d, n_coarse, r_eps, r_h = (int(x) for x in head[:4])
        alpha, beta = float(head[4]), float(head[5])
        values = np.array([float(line) for line in fh if line.strip()])
    hier = build_hierarchy(d, n_coarse, r_eps, r_h)
    return CoefficientField(hier, values, alpha, beta)
