"""Per-patch network surrogates for the local Petrov-Galerkin matrices.

A LocalSurrogate is an explicitly constructed ReLU network that maps the
coefficient values on a patch to the patch-local matrix, certified so that
the spectral gap to the deterministic corrector path stays below a target
tolerance eta.  The construction chains seven blocks: coefficient-to-
stiffness (affine), certified inversion of the stiffness, interpolation
applied column- and row-wise (affine, with a transpose permutation in
between), certified inversion of the resulting interpolated inverse, and two
affine blocks applying the corner-tent data and embedding the result on all
patch coarse nodes.

Global assembly replaces the deterministic local matrices by forward passes
on patches whose geometry matches the surrogate; everything else falls back
to the deterministic path, so the assembled operator is always well defined.
"""

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvalsh

from . import fem, lod, mesh, nncalc


class SizeCapError(ValueError):
    """The requested construction exceeds the configured size guard."""


def power_iteration(mat, tol=1e-8, max_iter=20000):
    """Spectral norm estimate; deterministic start vector.

    Iterates v <- normalize(M'(M v)) and returns ||M v|| once successive
    estimates agree to the relative tolerance.  Raises RuntimeError when the
    cap is hit, so a stalled estimate is reported instead of silently used.
    """
    dense = not sp.issparse(mat)
    m = np.asarray(mat, dtype=float) if dense else mat
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        return 0.0
    v = 1.0 + np.arange(cols, dtype=float) / max(cols, 1)
    v /= np.linalg.norm(v)
    sigma = None
    for _ in range(max_iter):
        w = m @ v
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        if sigma is not None and abs(est - sigma) <= tol * est:
            return est
        sigma = est
        u = m.T @ w
        v = u / np.linalg.norm(u)
    raise RuntimeError("power iteration did not settle in %d steps" % max_iter)


@dataclass(frozen=True)
class SpectralBounds:
    """Coefficient-class-wide spectral data for one patch geometry.

    v_inf/v_sup bound the patch stiffness spectrum over all admissible
    coefficients; vhat_inf/vhat_sup bound the interpolated inverse
    (I S^{-1} I').  The *_raw values carry no safety padding; the padded
    values are the ones certified constructions rely on.  Norms refer to the
    free-node-restricted operators the network applies.
    """

    v_inf: float
    v_sup: float
    vhat_inf: float
    vhat_sup: float
    vhat_inf_raw: float
    vhat_sup_raw: float
    norm_interp: float
    norm_tents: float
    norm_tents_center: float
    norm_interp_tents: float
    norm_interp_center: float

    def __post_init__(self):
        if not 0.0 < self.v_inf <= self.v_sup:
            raise ValueError("stiffness bounds must satisfy 0 < inf <= sup")
        if not 0.0 < self.vhat_inf <= self.vhat_sup:
            raise ValueError("interpolated-inverse bounds must satisfy 0 < inf <= sup")
        for name in ("norm_interp", "norm_tents", "norm_tents_center",
                     "norm_interp_tents", "norm_interp_center"):
            if getattr(self, name) <= 0.0:
                raise ValueError("%s must be positive" % name)


def estimate_spectral_bounds(p, ops, alpha, beta):
    """Class-wide bounds from the unit-coefficient operators.

    The stiffness form is monotone in the coefficient, so the extremal
    constant fields alpha and beta bound the whole class; the interpolated
    inverse is anti-monotone, swapping the roles of the two ends.  Eigenvalue
    ends are padded 1% outward; operator norms come from power iteration.
    """
    if not 0.0 < alpha <= beta:
        raise ValueError("coefficient bounds must satisfy 0 < alpha <= beta")
    n = p.num_fine_inner
    s_unit = (ops.stiffness_map @ np.ones(p.num_eps_elements)).reshape((n, n), order="F")
    evals = eigvalsh(s_unit)
    if evals[0] <= 0.0:
        raise ValueError("unit stiffness is not positive definite")
    free = ops.free
    i_free = ops.interp.toarray()[free]
    y_unit = i_free @ np.linalg.solve(s_unit, i_free.T)
    y_evals = eigvalsh(y_unit)
    if y_evals[0] <= 0.0:
        raise ValueError("interpolated inverse is not positive definite")
    p_free = ops.tents[:, free]
    return SpectralBounds(
        v_inf=alpha * evals[0] / 1.01,
        v_sup=beta * evals[-1] * 1.01,
        vhat_inf=(y_evals[0] / beta) / 1.01,
        vhat_sup=(y_evals[-1] / alpha) * 1.01,
        vhat_inf_raw=y_evals[0] / beta,
        vhat_sup_raw=y_evals[-1] / alpha,
        norm_interp=power_iteration(i_free),
        norm_tents=power_iteration(p_free),
        norm_tents_center=power_iteration(ops.tents_center),
        norm_interp_tents=power_iteration(i_free @ p_free),
        norm_interp_center=power_iteration(i_free @ ops.tents_center),
    )


@dataclass(frozen=True)
class ToleranceSplit:
    """Inner tolerances and rescaling data derived from spectral bounds.

    theta budgets the stiffness inversion, gamma the second inversion.  The
    recorded constants certify

        c1_sharp * theta + c2_sharp * gamma <= eta,

    where the c1 channel carries the perturbation the first inversion leaves
    in the second inversion's input, and c2 the second inversion's own error.
    The *_display constants are the looser textbook combination; both
    inequalities are enforced.
    """

    eta: float
    theta: float
    gamma: float
    v_resc: float
    vhat_resc: float
    delta: float
    delta_hat: float
    vhat_inf_eff: float
    vhat_sup_eff: float
    perturbation: float
    c1_sharp: float
    c2_sharp: float
    c1_display: float
    c2_display: float
    total_bound: float
    display_bound: float

    def __iter__(self):
        yield self.theta
        yield self.gamma


# Safety inflation applied to power-iteration norm estimates wherever they
# enter an error bound (power iteration converges from below).
_NORM_PAD = 1.001


def split_tolerances(eta, bounds):
    """Split the target tolerance between the two inversion stages.

    Equal allocation of eta to the two error channels, followed by the
    cap on theta from the second-stage admissibility conditions: theta stays
    below the smallest interpolated-inverse eigenvalue (scaled variants
    included) so the perturbed second-stage input remains well conditioned.
    A short fixed-point pass makes the perturbation allowance self-
    consistent: the recorded split is valid whenever the realized first-stage
    error stays within the recorded perturbation.
    """
    if not 0.0 < eta <= 0.25:
        raise ValueError("eta must lie in (0, 1/4]")
    ni = bounds.norm_interp * _NORM_PAD
    npw = bounds.norm_tents * _NORM_PAD
    npk = bounds.norm_tents_center * _NORM_PAD
    nip = bounds.norm_interp_tents * _NORM_PAD
    nipk = bounds.norm_interp_center * _NORM_PAD
    v_resc = 0.99 / bounds.v_sup
    delta = v_resc * bounds.v_inf
    c1_display = v_resc * npk * npw * ni ** 4 / bounds.vhat_inf ** 2
    c2_display = npk * npw * ni ** 2

    pert = 0.0
    theta = None
    for _ in range(32):
        vhat_inf_eff = (bounds.vhat_inf_raw - pert) / 1.005
        vhat_sup_eff = (bounds.vhat_sup_raw + pert) * 1.005
        vhat_resc = 0.99 / vhat_sup_eff
        c1_sharp = nip * nipk * ni ** 2 * v_resc / (bounds.vhat_inf * vhat_inf_eff)
        c2_sharp = nip * nipk * vhat_resc
        c1 = max(c1_sharp, c1_display)
        c2 = max(c2_sharp, c2_display)
        theta_new = min(
            (eta / 2.0) / c1,
            0.999 * bounds.vhat_inf,
            0.999 * bounds.vhat_inf / (2.0 * v_resc * ni ** 2),
            # keep the perturbed second-stage spectrum well inside (0, inf)
            0.2 * bounds.vhat_inf_raw / (v_resc * ni ** 2),
            0.2499,
            0.999 * eta,
        )
        gamma = min((eta / 2.0) / c2, 0.2499, 0.999 * eta)
        pert_new = v_resc * ni ** 2 * theta_new
        converged = theta is not None and pert_new <= pert * (1.0 + 1e-12) + 1e-300
        theta = theta_new
        if converged:
            break
        pert = max(pert, pert_new)
    if theta <= 0.0 or gamma <= 0.0 or vhat_inf_eff <= 0.0:
        raise ValueError("degenerate spectral bounds: no feasible tolerance split")
    delta_hat = vhat_resc * vhat_inf_eff
    total = c1_sharp * theta + c2_sharp * gamma
    display = c1_display * theta + c2_display * gamma
    if total > eta or display > eta:
        raise ValueError("tolerance split failed to certify the target")
    return ToleranceSplit(
        eta=eta, theta=theta, gamma=gamma,
        v_resc=v_resc, vhat_resc=vhat_resc, delta=delta, delta_hat=delta_hat,
        vhat_inf_eff=vhat_inf_eff, vhat_sup_eff=vhat_sup_eff, perturbation=pert,
        c1_sharp=c1_sharp, c2_sharp=c2_sharp,
        c1_display=c1_display, c2_display=c2_display,
        total_bound=total, display_bound=display,
    )


@dataclass(frozen=True)
class NetworkCertificate:
    """Size and accuracy accounting for a composed surrogate network."""

    depth: int
    num_params: int
    params_bound: int
    step_depths: tuple
    step_params: tuple
    input_dim: int
    output_rows: int
    output_cols: int
    total_bound: float
    display_bound: float
    inversion_fine: nncalc.InversionCertificate
    inversion_schur: nncalc.InversionCertificate


@dataclass
class LocalSurrogate:
    """An explicit network for one patch geometry plus its certificate."""

    net: nncalc.NeuralNetwork
    d: int
    n_coarse: int
    r_eps: int
    r_h: int
    ell: int
    element: int
    signature: tuple
    alpha: float
    beta: float
    eta: float
    theta: float
    gamma: float
    v_resc: float
    vhat_resc: float
    delta: float
    delta_hat: float
    bounds: SpectralBounds
    split: ToleranceSplit
    certificate: NetworkCertificate

    def __post_init__(self):
        validate_surrogate(self)


def _canonical_interior_element(hier, ell):
    need = 2 * ell + 3
    if hier.n_coarse < need:
        raise ValueError(
            "no interior patch at ell=%d: need n_coarse >= %d, have %d"
            % (ell, need, hier.n_coarse))
    return hier.element_index((ell + 1,) * hier.d, "coarse")


def _step_networks(p, ops, split):
    """The seven chained blocks of the surrogate for patch p.

    Between the two inversions the intermediate matrices are rearranged via
    transpose permutations; this relies on the inverted stiffness being
    (bitwise) symmetric, which the inversion network guarantees for the
    symmetric assembled stiffness, and costs nothing in the error chain
    because the targets are symmetric and spectral norms ignore transposes.
    """
    n = p.num_fine_inner
    free = ops.free
    n_free = int(free.sum())
    corners = 2 ** p.hier.d
    i_free = sp.csr_array(ops.interp.toarray()[free])
    p_free = sp.csr_array(ops.tents[:, free])
    p_center = sp.csr_array(ops.tents_center)

    eye_nn = sp.eye_array(n * n, format="csr")
    psi1 = nncalc.affine_network(ops.stiffness_map)
    inv_fine, cert_fine = nncalc.inversion_network(n, split.delta, split.theta)
    pre1 = nncalc.affine_network((-split.v_resc * eye_nn).tocsr(), nncalc.vec(np.eye(n)))
    post1 = nncalc.affine_network((split.v_resc * eye_nn).tocsr())
    psi2 = nncalc.concat(post1, nncalc.sparse_concat(inv_fine, pre1))

    psi3 = nncalc.concat(
        nncalc.affine_network(nncalc.transpose_permutation(n_free, n)),
        nncalc.parallel_copies(nncalc.affine_network(i_free), n),
    )
    psi4 = nncalc.parallel_copies(nncalc.affine_network(i_free), n_free)

    eye_ff = sp.eye_array(n_free * n_free, format="csr")
    inv_schur, cert_schur = nncalc.inversion_network(n_free, split.delta_hat, split.gamma)
    pre2 = nncalc.affine_network(
        (-split.vhat_resc * eye_ff).tocsr(), nncalc.vec(np.eye(n_free)))
    post2 = nncalc.affine_network((split.vhat_resc * eye_ff).tocsr())
    psi5 = nncalc.concat(post2, nncalc.sparse_concat(inv_schur, pre2))

    center_t = sp.csr_array((i_free @ p_center).T)
    psi6 = nncalc.concat(
        nncalc.affine_network(nncalc.transpose_permutation(corners, n_free)),
        nncalc.parallel_copies(nncalc.affine_network(center_t), n_free),
    )
    test_t = sp.csr_array((i_free @ p_free).T)
    embed = sp.csr_array(
        (np.ones(n_free), (np.flatnonzero(free), np.arange(n_free))),
        shape=(p.num_coarse_nodes, n_free),
    )
    psi7 = nncalc.parallel_copies(nncalc.affine_network((embed @ test_t).tocsr()), corners)
    steps = [psi1, psi2, psi3, psi4, psi5, psi6, psi7]
    return steps, cert_fine, cert_schur


def _compose(steps):
    net = steps[0]
    for nxt in steps[1:]:
        net = nncalc.sparse_concat(nxt, net)
    return net


def _build_patch_surrogate(p, alpha, beta, eta, size_cap):
    hier = p.hier
    n = p.num_fine_inner
    if n * n > size_cap:
        raise SizeCapError(
            "stiffness inversion input has %d entries, over the cap %d; "
            "reduce the patch (ell, mesh ratios) or raise size_cap"
            % (n * n, size_cap))
    ops = lod.OperatorCache().get(p)
    bounds = estimate_spectral_bounds(p, ops, alpha, beta)
    split = split_tolerances(eta, bounds)
    steps, cert_fine, cert_schur = _step_networks(p, ops, split)
    net = _compose(steps)
    step_depths = tuple(nncalc.depth(s) for s in steps)
    step_params = tuple(nncalc.num_params(s) for s in steps)
    measured_depth = nncalc.depth(net)
    measured_params = nncalc.num_params(net)
    params_bound = 4 * sum(step_params)
    if measured_depth != sum(step_depths):
        raise AssertionError("depth accounting broke: %d != %d"
                             % (measured_depth, sum(step_depths)))
    if measured_params > params_bound:
        raise AssertionError("parameter count exceeded the folding bound")
    certificate = NetworkCertificate(
        depth=measured_depth,
        num_params=measured_params,
        params_bound=params_bound,
        step_depths=step_depths,
        step_params=step_params,
        input_dim=p.num_eps_elements,
        output_rows=p.num_coarse_nodes,
        output_cols=2 ** hier.d,
        total_bound=split.total_bound,
        display_bound=split.display_bound,
        inversion_fine=cert_fine,
        inversion_schur=cert_schur,
    )
    bounds_eff = replace(bounds, vhat_inf=split.vhat_inf_eff, vhat_sup=split.vhat_sup_eff)
    return LocalSurrogate(
        net=net,
        d=hier.d, n_coarse=hier.n_coarse, r_eps=hier.r_eps, r_h=hier.r_h,
        ell=p.ell, element=p.element, signature=p.signature(),
        alpha=float(alpha), beta=float(beta),
        eta=float(eta), theta=split.theta, gamma=split.gamma,
        v_resc=split.v_resc, vhat_resc=split.vhat_resc,
        delta=split.delta, delta_hat=split.delta_hat,
        bounds=bounds_eff, split=split, certificate=certificate,
    )


def build_pg_network(hier, ell, alpha, beta, eta, element=None, size_cap=10 ** 4):
    """LocalSurrogate for an interior patch.

    By default the canonical interior element (multi-index ell+1 on every
    axis) hosts the construction; any other interior element gives the same
    network because translated interior patches share their operators.
    """
    if element is None:
        element = _canonical_interior_element(hier, ell)
    p = mesh.patch(hier, element, ell)
    if not p.is_interior:
        raise ValueError(
            "element %d has no interior patch at ell=%d" % (element, ell))
    return _build_patch_surrogate(p, alpha, beta, eta, size_cap)


def validate_surrogate(s):
    """Re-derive every certificate claim; raise ValueError on any mismatch."""
    cert = s.certificate
    nncalc.validate_certificate(cert.inversion_fine)
    nncalc.validate_certificate(cert.inversion_schur)
    checks = [
        (0.0 < s.theta < s.eta, "theta must lie in (0, eta)"),
        (0.0 < s.gamma < s.eta, "gamma must lie in (0, eta)"),
        (math.isclose(s.delta, s.v_resc * s.bounds.v_inf, rel_tol=1e-12),
         "delta must equal v_resc * V_inf"),
        (math.isclose(s.delta_hat, s.vhat_resc * s.bounds.vhat_inf, rel_tol=1e-12),
         "delta_hat must equal vhat_resc * Vhat_inf"),
        (cert.inversion_fine.theta == s.theta and cert.inversion_fine.delta == s.delta,
         "first-stage inversion certificate mismatch"),
        (cert.inversion_schur.theta == s.gamma and cert.inversion_schur.delta == s.delta_hat,
         "second-stage inversion certificate mismatch"),
        (cert.depth == 7 + cert.inversion_fine.depth + cert.inversion_schur.depth,
         "depth does not match the composition law"),
        (cert.depth == nncalc.depth(s.net), "recorded depth differs from the network"),
        (cert.num_params == nncalc.num_params(s.net),
         "recorded parameter count differs from the network"),
        (cert.num_params <= cert.params_bound, "parameter bound violated"),
        (s.net.input_dim == cert.input_dim, "input dimension mismatch"),
        (s.net.output_dim == cert.output_rows * cert.output_cols,
         "output dimension mismatch"),
        (cert.total_bound <= s.eta and cert.display_bound <= s.eta,
         "certified bound exceeds eta"),
    ]
    split = s.split
    recomputed = split.c1_sharp * s.theta + split.c2_sharp * s.gamma
    checks.append((recomputed <= s.eta * (1.0 + 1e-12), "split inequality violated"))
    pert_actual = split.v_resc * (s.bounds.norm_interp * _NORM_PAD) ** 2 * s.theta
    checks.append((pert_actual <= split.perturbation * (1.0 + 1e-12),
                   "perturbation allowance smaller than the realized budget"))
    for ok, message in checks:
        if not ok:
            raise ValueError("surrogate certificate invalid: " + message)


def surrogate_local_matrix(s, a_values):
    """Forward pass: local coefficient vector -> local matrix.

    Rejects coefficients outside [alpha, beta]; the certificate says nothing
    about them.
    """
    a = np.asarray(a_values, dtype=float)
    if a.shape != (s.net.input_dim,):
        raise ValueError("expected %d coefficient values, got shape %s"
                         % (s.net.input_dim, a.shape))
    if np.any(a < s.alpha) or np.any(a > s.beta):
        raise ValueError("coefficient values outside the certified class "
                         "[%g, %g]" % (s.alpha, s.beta))
    out = nncalc.realize(s.net, a)
    return nncalc.unvec(out, (s.certificate.output_rows, s.certificate.output_cols))


@dataclass
class SurrogateStiffness:
    """Globally assembled coarse operator with network-provided blocks."""

    s_nn: sp.csr_array
    networked: list
    per_patch_errors: list = None


def _geometry_matches(s, hier, ell):
    return (s.d, s.n_coarse, s.r_eps, s.r_h, s.ell) == (
        hier.d, hier.n_coarse, hier.r_eps, hier.r_h, ell)


def _map_ordered(work, items, num_threads):
    if num_threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=num_threads) as pool:
            return list(pool.map(work, items))
    return [work(item) for item in items]


_libc_trim = None


def _release_heap():
    """Hand freed pages back to the OS between large network builds.

    glibc keeps freed mid-size blocks in its arenas, so back-to-back builds
    of hundred-megabyte networks would otherwise stack retained peaks until
    the process is killed.  No-op on platforms without malloc_trim.
    """
    global _libc_trim
    if _libc_trim is None:
        try:
            import ctypes
            _libc_trim = ctypes.CDLL("libc.so.6").malloc_trim
        except (OSError, AttributeError):
            _libc_trim = False
    if _libc_trim:
        _libc_trim(0)


def assemble_nn_global(s, field, ell, num_threads=1, audit=False):
    """Global matrix with forward passes on matching interior patches.

    Patches whose geometry differs from the surrogate's (boundary patches,
    in particular) take the deterministic corrector path, so the result is
    defined on the whole domain.  With audit=True the deterministic matrices
    are computed alongside every forward pass and the spectral gaps recorded.
    """
    hier = field.hier
    if not _geometry_matches(s, hier, ell):
        raise ValueError("surrogate geometry does not match the problem")
    cache = lod.OperatorCache()
    patches = [mesh.patch(hier, k, ell) for k in range(hier.num_elements("coarse"))]
    for p in patches:
        cache.get(p)

    def work(p):
        a_loc = field.for_patch(p)
        if p.signature() == s.signature:
            theta_mat = surrogate_local_matrix(s, a_loc)
            used_net = True
        else:
            ops = cache.get(p)
            theta_mat = lod.local_pg_matrix(p, ops, lod.solve_corrector(p, ops, a_loc))
            used_net = False
        err = 0.0
        if audit and used_net:
            ops = cache.get(p)
            exact = lod.local_pg_matrix(p, ops, lod.solve_corrector(p, ops, a_loc))
            err = float(np.linalg.norm(theta_mat - exact, 2))
        return theta_mat, used_net, err

    results = _map_ordered(work, patches, num_threads)
    return SurrogateStiffness(
        s_nn=lod.scatter_pg(hier, patches, [t for t, _, _ in results]),
        networked=[u for _, u, _ in results],
        per_patch_errors=[e for _, _, e in results] if audit else None,
    )


def assemble_nn_oracle(hier, field, ell, num_threads=1):
    """Zero-tolerance surrogate: the deterministic local matrices routed
    through the network assembly path (useful as a sanity oracle)."""
    ws = lod.LodWorkspace(hier, field, ell, num_threads=num_threads)
    count = len(ws.patches)
    return SurrogateStiffness(
        s_nn=lod.scatter_pg(hier, ws.patches, [m for _, m in ws.results]),
        networked=[False] * count,
        per_patch_errors=[0.0] * count,
    )


@dataclass
class BankEntry:
    """Build summary for one patch-geometry class in a banked assembly."""

    signature: tuple
    elements: list
    interior: bool
    eta: float
    theta: float
    gamma: float
    depth: int
    num_params: int
    max_error: float = None


def assemble_nn_banked(hier, field, ell, eta, alpha, beta,
                       size_cap=10 ** 4, audit=False, num_threads=1):
    """Network-assembled global matrix covering every patch-geometry class.

    One surrogate per distinct patch signature, boundary classes included
    (their operators simply carry the clipped geometry).  Each network is
    built, evaluated on its elements, and released before the next class, so
    the peak footprint is a single network.  Returns the assembled operator
    and the per-class build summaries.
    """
    num_k = hier.num_elements("coarse")
    patches = [mesh.patch(hier, k, ell) for k in range(num_k)]
    groups = {}
    for k, p in enumerate(patches):
        groups.setdefault(p.signature(), []).append(k)

    cache = lod.OperatorCache()
    theta_mats = [None] * num_k
    errors = [0.0] * num_k if audit else None
    entries = []
    for signature, elements in groups.items():
        p0 = patches[elements[0]]
        s = _build_patch_surrogate(p0, alpha, beta, eta, size_cap)

        def work(k):
            a_loc = field.for_patch(patches[k])
            theta_mat = surrogate_local_matrix(s, a_loc)
            err = 0.0
            if audit:
                p = patches[k]
                ops = cache.get(p)
                exact = lod.local_pg_matrix(p, ops, lod.solve_corrector(p, ops, a_loc))
                err = float(np.linalg.norm(theta_mat - exact, 2))
            return theta_mat, err

        for k, (theta_mat, err) in zip(elements, _map_ordered(work, elements, num_threads)):
            theta_mats[k] = theta_mat
            if audit:
                errors[k] = err
        entries.append(BankEntry(
            signature=signature, elements=list(elements), interior=p0.is_interior,
            eta=s.eta, theta=s.theta, gamma=s.gamma,
            depth=s.certificate.depth, num_params=s.certificate.num_params,
            max_error=max(errors[k] for k in elements) if audit else None,
        ))
        # drop the closure too: it pins the network past the next build
        del work, s
        _release_heap()
    return SurrogateStiffness(
        s_nn=lod.scatter_pg(hier, patches, theta_mats),
        networked=[True] * num_k,
        per_patch_errors=errors,
    ), entries


@dataclass
class CompareReport:
    """Deterministic-vs-network comparison on one problem."""

    coeff_gap: float
    scaled_gap: float
    l2_gap: float
    matrix_gap: float
    decay_gap_l2: float
    eta: float
    networked_patches: int
    per_patch_errors: list = None


def compare_solutions(field, f, ell, surrogate="oracle", eta=None,
                      size_cap=10 ** 4, num_threads=1, audit=True):
    """Solve with the deterministic and the network-assembled operators.

    surrogate: a LocalSurrogate, "oracle" (deterministic matrices through the
    same assembly path), or "banked" (per-geometry-class networks, needs
    eta).  Reports the coefficient-space gap, its H^{d/2}-scaled variant, the
    coarse mass-norm gap, the operator gap, and the classic-vs-PG fine-scale
    distance used by localization studies.
    """
    hier = field.hier
    ws = lod.LodWorkspace(hier, field, ell, num_threads=num_threads)
    s_pg = ws.pg_matrix()
    if isinstance(surrogate, LocalSurrogate):
        nn = assemble_nn_global(surrogate, field, ell,
                                num_threads=num_threads, audit=audit)
        eta = surrogate.eta
    elif surrogate == "oracle":
        nn = SurrogateStiffness(
            s_nn=lod.scatter_pg(hier, ws.patches, [m for _, m in ws.results]),
            networked=[False] * len(ws.patches),
            per_patch_errors=[0.0] * len(ws.patches))
        eta = 0.0
    elif surrogate == "banked":
        if eta is None:
            raise ValueError("banked comparison needs eta")
        nn, _ = assemble_nn_banked(hier, field, ell, eta, field.alpha, field.beta,
                                   size_cap=size_cap, audit=audit,
                                   num_threads=num_threads)
    else:
        raise ValueError("surrogate must be a LocalSurrogate, 'oracle' or 'banked'")

    sol_pg = lod.solve_lod(hier, field, f, ell, method="pg", workspace=ws)
    u_nn = lod.solve_coarse(nn.s_nn, fem.load_vector(hier, f, "coarse"))
    diff = sol_pg.coeffs - u_nn
    m_coarse = fem.assemble_mass(hier, "coarse")
    sol_c = lod.solve_lod(hier, field, f, ell, method="clod", workspace=ws)
    fine_diff = sol_c.fine - sol_pg.fine
    m_fine = fem.assemble_mass(hier, "fine")
    return CompareReport(
        coeff_gap=float(np.linalg.norm(diff)),
        scaled_gap=float(hier.H ** (hier.d / 2.0) * np.linalg.norm(diff)),
        l2_gap=float(np.sqrt(diff @ (m_coarse @ diff))),
        matrix_gap=float(power_iteration(nn.s_nn - s_pg)),
        decay_gap_l2=float(np.sqrt(fine_diff @ (m_fine @ fine_diff))),
        eta=float(eta),
        networked_patches=int(sum(nn.networked)),
        per_patch_errors=nn.per_patch_errors,
    )


def _certificate_to_dict(cert):
    data = asdict(cert)
    data["inversion_fine"] = asdict(cert.inversion_fine)
    data["inversion_schur"] = asdict(cert.inversion_schur)
    return data


def _inversion_from_dict(data):
    mults = [nncalc.MultBudget(**m) for m in data.pop("mults")]
    return nncalc.InversionCertificate(mults=mults, **data)


def save_surrogate(s, path):
    """Two files: <path>.npz (the network) and <path>.json (the metadata)."""
    base = str(path)
    if base.endswith(".npz") or base.endswith(".json"):
        base = base.rsplit(".", 1)[0]
    nncalc.save_network(s.net, base + ".npz")
    meta = {
        "format": "local-surrogate",
        "version": 1,
        "geometry": {"d": s.d, "n_coarse": s.n_coarse, "r_eps": s.r_eps,
                     "r_h": s.r_h, "ell": s.ell, "element": s.element},
        "class": {"alpha": s.alpha, "beta": s.beta},
        "tolerances": {"eta": s.eta, "theta": s.theta, "gamma": s.gamma},
        "rescaling": {"v_resc": s.v_resc, "vhat_resc": s.vhat_resc,
                      "delta": s.delta, "delta_hat": s.delta_hat},
        "bounds": asdict(s.bounds),
        "split": asdict(s.split),
        "certificate": _certificate_to_dict(s.certificate),
    }
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return base + ".npz", base + ".json"


def load_surrogate(path):
    """Load and re-validate a serialized surrogate (geometry included)."""
    base = str(path)
    if base.endswith(".npz") or base.endswith(".json"):
        base = base.rsplit(".", 1)[0]
    with open(base + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "local-surrogate":
        raise ValueError("not a surrogate metadata file: %s" % (base + ".json"))
    net = nncalc.load_network(base + ".npz")
    geo = meta["geometry"]
    hier = mesh.build_hierarchy(geo["d"], geo["n_coarse"], geo["r_eps"], geo["r_h"])
    p = mesh.patch(hier, geo["element"], geo["ell"])
    cert_data = dict(meta["certificate"])
    cert_data["inversion_fine"] = _inversion_from_dict(cert_data["inversion_fine"])
    cert_data["inversion_schur"] = _inversion_from_dict(cert_data["inversion_schur"])
    cert_data["step_depths"] = tuple(cert_data["step_depths"])
    cert_data["step_params"] = tuple(cert_data["step_params"])
    cert = NetworkCertificate(**cert_data)
    return LocalSurrogate(
        net=net,
        d=geo["d"], n_coarse=geo["n_coarse"], r_eps=geo["r_eps"], r_h=geo["r_h"],
        ell=geo["ell"], element=geo["element"], signature=p.signature(),
        alpha=meta["class"]["alpha"], beta=meta["class"]["beta"],
        eta=meta["tolerances"]["eta"], theta=meta["tolerances"]["theta"],
        gamma=meta["tolerances"]["gamma"],
        v_resc=meta["rescaling"]["v_resc"], vhat_resc=meta["rescaling"]["vhat_resc"],
        delta=meta["rescaling"]["delta"], delta_hat=meta["rescaling"]["delta_hat"],
        bounds=SpectralBounds(**meta["bounds"]),
        split=ToleranceSplit(**meta["split"]),
        certificate=cert,
    )
