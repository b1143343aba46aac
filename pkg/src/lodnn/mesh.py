"""Nested uniform Cartesian meshes on the unit box and element patches.

Three nested levels: a coarse mesh with ``n_coarse`` elements per axis, an
oscillation-resolving mesh refined by ``r_eps``, and a fine mesh refined from
that by ``r_h``.  Multi-indices are flattened with axis 0 fastest throughout.
"""

from dataclasses import dataclass

import numpy as np


def _flat(multi, sizes):
    """Flatten multi-indices (..., d) with axis 0 fastest."""
    multi = np.asarray(multi)
    strides = np.concatenate(([1], np.cumprod(sizes[:-1])))
    return multi @ strides


def _unflat(idx, sizes):
    """Inverse of _flat; returns (..., d)."""
    idx = np.asarray(idx)
    out = np.empty(idx.shape + (len(sizes),), dtype=np.int64)
    rem = idx
    for a, n in enumerate(sizes):
        out[..., a] = rem % n
        rem = rem // n
    return out


def cartesian_lex(ranges):
    """All combinations of the given per-axis index ranges, axis 0 fastest."""
    grids = np.meshgrid(*ranges, indexing="ij")
    return np.stack([g.ravel(order="F") for g in grids], axis=-1)


@dataclass(frozen=True)
class MeshHierarchy:
    d: int
    n_coarse: int
    r_eps: int
    r_h: int

    @property
    def n_eps(self):
        return self.n_coarse * self.r_eps

    @property
    def n_fine(self):
        return self.n_eps * self.r_h

    @property
    def H(self):
        return 1.0 / self.n_coarse

    @property
    def eps(self):
        return 1.0 / self.n_eps

    @property
    def h(self):
        return 1.0 / self.n_fine

    @property
    def q(self):
        """Fine elements per coarse element and axis."""
        return self.r_eps * self.r_h

    def num_elements(self, level):
        return self.axis_elements(level) ** self.d

    def axis_elements(self, level):
        return {"coarse": self.n_coarse, "eps": self.n_eps, "fine": self.n_fine}[level]

    def num_inner_nodes(self, level):
        return (self.axis_elements(level) - 1) ** self.d

    def element_multi(self, idx, level):
        n = self.axis_elements(level)
        return _unflat(idx, np.full(self.d, n))

    def element_index(self, multi, level):
        n = self.axis_elements(level)
        return _flat(multi, np.full(self.d, n))

    def node_index(self, multi, level):
        n = self.axis_elements(level) + 1
        return _flat(multi, np.full(self.d, n))

    def inner_node_index(self, multi, level):
        """Index into the inner (non-boundary) nodes, or -1 on the boundary."""
        multi = np.asarray(multi)
        n = self.axis_elements(level)
        inside = np.all((multi >= 1) & (multi <= n - 1), axis=-1)
        idx = _flat(multi - 1, np.full(self.d, n - 1))
        return np.where(inside, idx, -1)


def build_hierarchy(d, n_coarse, r_eps, r_h):
    if d not in (1, 2, 3):
        raise ValueError("d must be 1, 2 or 3")
    if n_coarse < 2:
        raise ValueError("need at least 2 coarse elements per axis")
    if r_eps < 1 or r_h < 1:
        raise ValueError("refinement ratios must be positive integers")
    return MeshHierarchy(int(d), int(n_coarse), int(r_eps), int(r_h))


@dataclass(frozen=True)
class Patch:
    """ell-ring neighbourhood of one coarse element, clipped to the domain."""

    hier: MeshHierarchy
    element: int
    ell: int
    lo: tuple
    hi: tuple

    @property
    def k_multi(self):
        return tuple(self.hier.element_multi(self.element, "coarse"))

    @property
    def widths(self):
        """Coarse elements per axis covered by the patch."""
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def is_interior(self):
        n = self.hier.n_coarse
        k = self.k_multi
        return all(min(k[a], n - 1 - k[a]) >= self.ell + 1 for a in range(self.hier.d))

    @property
    def num_eps_elements(self):
        r = self.hier.r_eps
        return int(np.prod([w * r for w in self.widths]))

    @property
    def num_fine_inner(self):
        q = self.hier.q
        return int(np.prod([w * q - 1 for w in self.widths]))

    @property
    def num_coarse_nodes(self):
        return int(np.prod([w + 1 for w in self.widths]))

    def signature(self):
        """Geometry key: equal signatures give identical local operators."""
        k = self.k_multi
        n = self.hier.n_coarse
        rel = tuple(
            (k[a] - self.lo[a], self.hi[a] - self.lo[a], self.lo[a] == 0, self.hi[a] == n - 1)
            for a in range(self.hier.d)
        )
        return (self.hier, self.ell, rel)


def patch(hier, element, ell):
    if ell < 0:
        raise ValueError("ell must be non-negative")
    k = hier.element_multi(element, "coarse")
    lo = tuple(int(max(0, ki - ell)) for ki in k)
    hi = tuple(int(min(hier.n_coarse - 1, ki + ell)) for ki in k)
    return Patch(hier, int(element), int(ell), lo, hi)


def full_patch(hier):
    """Patch covering the whole domain (used for global fine-level assembly)."""
    return Patch(hier, 0, hier.n_coarse, (0,) * hier.d, (hier.n_coarse - 1,) * hier.d)


def interior_patch_counts(d, ell, r_eps, r_h):
    """(#eps elements, #fine inner nodes, #coarse nodes) of an interior patch."""
    w = 2 * ell + 1
    m = (w * r_eps) ** d
    n = (w * r_eps * r_h - 1) ** d
    big_n = (w + 1) ** d
    return m, n, big_n


def local_indexers(p):
    """Global indices addressed by a patch, each in local lexicographic order.

    Returns (eps_elements, fine_inner_nodes, coarse_nodes) as flat global
    index arrays on the respective grids.
    """
    hier = p.hier
    d = hier.d
    r, q = hier.r_eps, hier.q

    eps_ranges = [np.arange(p.lo[a] * r, (p.hi[a] + 1) * r) for a in range(d)]
    eps_multi = cartesian_lex(eps_ranges)
    eps_elements = hier.element_index(eps_multi, "eps")

    fine_ranges = [np.arange(p.lo[a] * q + 1, (p.hi[a] + 1) * q) for a in range(d)]
    fine_multi = cartesian_lex(fine_ranges)
    fine_inner_nodes = hier.node_index(fine_multi, "fine")

    coarse_ranges = [np.arange(p.lo[a], p.hi[a] + 2) for a in range(d)]
    coarse_multi = cartesian_lex(coarse_ranges)
    coarse_nodes = hier.node_index(coarse_multi, "coarse")

    return eps_elements, fine_inner_nodes, coarse_nodes


def patch_coarse_multi(p):
    """Multi-indices of the patch coarse nodes, local lexicographic order."""
    ranges = [np.arange(p.lo[a], p.hi[a] + 2) for a in range(p.hier.d)]
    return cartesian_lex(ranges)


def patch_fine_multi(p):
    """Multi-indices of the patch-inner fine nodes, local lexicographic order."""
    q = p.hier.q
    ranges = [np.arange(p.lo[a] * q + 1, (p.hi[a] + 1) * q) for a in range(p.hier.d)]
    return cartesian_lex(ranges)


def corner_offsets(d):
    """The 2^d corner bit patterns of an element, axis 0 fastest."""
    return cartesian_lex([np.arange(2)] * d)


def element_corner_nodes(hier, element, level):
    """Global node indices of an element's corners, corner-lex order."""
    k = hier.element_multi(element, level)
    corners = k[None, :] + corner_offsets(hier.d)
    return hier.node_index(corners, level)


def scatter_map(p):
    """(row_map, col_map) from patch-local to global free coarse indices.

    row_map: for every patch coarse node, the global inner-node index or -1.
    col_map: for the 2^d corners of the central element, same convention.
    """
    hier = p.hier
    row_map = hier.inner_node_index(patch_coarse_multi(p), "coarse")
    k = hier.element_multi(p.element, "coarse")
    corners = k[None, :] + corner_offsets(hier.d)
    col_map = hier.inner_node_index(corners, "coarse")
    return np.asarray(row_map), np.asarray(col_map)


def corner_local_columns(p):
    """Positions of the central element's corners inside the patch coarse nodes."""
    widths = np.array([w + 1 for w in p.widths])
    k = np.array(p.k_multi)
    lo = np.array(p.lo)
    corners = (k - lo)[None, :] + corner_offsets(p.hier.d)
    return _flat(corners, widths)


def fine_inner_index_map(p):
    """Map patch-inner fine nodes to global inner fine indices (-1 on the box boundary)."""
    return p.hier.inner_node_index(patch_fine_multi(p), "fine")
