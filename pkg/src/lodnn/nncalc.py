"""ReLU network calculus with sparse affine layers.

A network is a list of (weight, bias) layers; the realization applies the
ReLU between layers but not after the last one.  All constructions here are
explicit: composition merges adjacent affine maps, parallel composition
block-diagonalizes, and the arithmetic networks (squaring, multiplication,
inversion by Neumann series with repeated squaring) come with computable
error budgets.

Where it matters the constructions are *bitwise* symmetric: the scalar
product uses |x+y| and |x-y| through two-term sums only, so swapping the
operands reproduces identical floats, and the symmetric matrix mode orders
each entry's operands so that transposed entries see swapped operand pairs.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


def _as_weight(w):
    if sp.issparse(w):
        return w.tocsr()
    return sp.csr_array(np.atleast_2d(np.asarray(w, dtype=float)))


class NeuralNetwork:
    """Layered ReLU network; weights sparse CSR, biases dense."""

    __slots__ = ("layers",)

    def __init__(self, layers):
        conv = []
        prev = None
        for w, b in layers:
            w = _as_weight(w)
            if b is None:
                b = np.zeros(w.shape[0])
            else:
                b = np.asarray(b, dtype=float).ravel()
            if b.shape[0] != w.shape[0]:
                raise ValueError("bias length does not match the layer")
            if prev is not None and w.shape[1] != prev:
                raise ValueError("layer dimensions do not chain")
            prev = w.shape[0]
            conv.append((w, b))
        if not conv:
            raise ValueError("a network needs at least one layer")
        self.layers = conv

    @property
    def input_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[0]


def realize(net, x):
    """Evaluate the network on a vector or a (input_dim, batch) array."""
    y = np.asarray(x, dtype=float)
    single = y.ndim == 1
    if y.shape[0] != net.input_dim:
        raise ValueError("input dimension mismatch")
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        y = w @ y
        y += b if single else b[:, None]
        if i < last:
            np.maximum(y, 0.0, out=y)
    return y


def depth(net):
    return len(net.layers)


def num_params(net):
    return int(sum(w.nnz + np.count_nonzero(b) for w, b in net.layers))


def affine_network(w, b=None):
    return NeuralNetwork([(w, b)])


def concat(first, second):
    """Composition: realize(concat(f, s), x) == realize(f, realize(s, x)).

    The inner affine maps merge, so depth(f o s) = depth(f) + depth(s) - 1.
    """
    if second.output_dim != first.input_dim:
        raise ValueError("networks do not chain")
    w2, b2 = second.layers[-1]
    w1, b1 = first.layers[0]
    merged = ((w1 @ w2).tocsr(), w1 @ b2 + b1)
    return NeuralNetwork(list(second.layers[:-1]) + [merged] + list(first.layers[1:]))


def identity_network(n):
    """Exact two-layer ReLU identity on R^n."""
    eye = sp.eye_array(n, format="csr")
    return NeuralNetwork([(sp.vstack([eye, -eye], format="csr"), None),
                          (sp.hstack([eye, -eye], format="csr"), None)])


def sparse_concat(first, second):
    """Composition through an exact identity: depths add, parameters stay
    proportional to the sum of both operands."""
    return concat(concat(first, identity_network(second.output_dim)), second)


def parallelize(nets, shared_input=False):
    """Side-by-side composition of equal-depth networks."""
    depths = {depth(n) for n in nets}
    if len(depths) != 1:
        raise ValueError("parallelize needs equal depths (pad_to_depth first)")
    if shared_input and len({n.input_dim for n in nets}) != 1:
        raise ValueError("shared_input needs equal input dimensions")
    layers = []
    for i in range(depths.pop()):
        ws = [n.layers[i][0] for n in nets]
        bs = [n.layers[i][1] for n in nets]
        if i == 0 and shared_input:
            w = sp.vstack(ws, format="csr")
        else:
            w = sp.block_diag(ws, format="csr")
        layers.append((w, np.concatenate(bs)))
    return NeuralNetwork(layers)


def parallel_copies(net, count):
    """count independent copies of the same network (fast block structure)."""
    eye = sp.eye_array(count, format="csr")
    layers = [
        (sp.kron(eye, w, format="csr"), np.tile(b, count)) for w, b in net.layers
    ]
    return NeuralNetwork(layers)


def pad_to_depth(net, target):
    while depth(net) < target:
        net = concat(identity_network(net.output_dim), net)
    if depth(net) != target:
        raise ValueError("network deeper than the requested depth")
    return net


def vec(mat):
    return np.asarray(mat).ravel(order="F")


def unvec(v, shape):
    return np.asarray(v).reshape(shape, order="F")


def transpose_permutation(rows, cols):
    """Permutation Q with Q @ vec(M) == vec(M.T) for M of shape (rows, cols)."""
    ii, jj = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    r = (jj + cols * ii).ravel()
    c = (ii + rows * jj).ravel()
    q = sp.coo_array((np.ones(rows * cols), (r, c)), shape=(rows * cols, rows * cols))
    return q.tocsr()


def squaring_network(m):
    """Approximates x^2 on [0, 1] with sup error at most 4^-(m+1); depth m+1.

    Sawtooth refinement: each hidden layer holds the running value and the
    three ReLU pieces of the tent composition.
    """
    if m < 1:
        raise ValueError("need at least one refinement level")
    layers = [(np.array([[1.0], [1.0], [1.0]]), np.array([0.0, -0.5, -1.0]))]
    piece_bias = np.array([0.0, -0.5, -1.0])
    g_row = np.array([2.0, -4.0, 2.0])
    for s in range(2, m + 1):
        if s == 2:
            acc = np.array([0.5, 1.0, -0.5])
            pieces = np.vstack([g_row] * 3)
        else:
            scale = 4.0 ** -(s - 1)
            acc = np.array([1.0, -2.0 * scale, 4.0 * scale, -2.0 * scale])
            pieces = np.hstack([np.zeros((3, 1)), np.vstack([g_row] * 3)])
        w = np.vstack([acc, pieces])
        layers.append((w, np.concatenate(([0.0], piece_bias))))
    if m == 1:
        out = np.array([[0.5, 1.0, -0.5]])
    else:
        scale = 4.0 ** -m
        out = np.array([[1.0, -2.0 * scale, 4.0 * scale, -2.0 * scale]])
    layers.append((out, None))
    return NeuralNetwork(layers)


def mult_terms(accuracy, z_bound):
    """Sawtooth levels needed for |x|,|y| <= z to reach the given accuracy."""
    z = max(float(z_bound), 1e-150)
    m = max(1, math.ceil(math.log(z * z / (2.0 * accuracy), 4.0)))
    while 2.0 * z * z * 4.0 ** -(m + 1) > accuracy:
        m += 1
    return m


def scalar_mult_network(accuracy, z_bound):
    """Product of two scalars with |x|, |y| <= z_bound.

    Polarization through |x+y| and |x-y|: every sum is two-term, so the
    output is bitwise invariant under swapping the inputs.  Error at most
    2 z^2 4^-(m+1) <= accuracy; depth m + 2.
    """
    z = float(z_bound)
    if z <= 0 or accuracy <= 0:
        raise ValueError("need positive accuracy and operand bound")
    m = mult_terms(accuracy, z)
    sq = squaring_network(m)
    par = parallelize([sq, sq])
    c = 1.0 / (2.0 * z)
    sel = affine_network(np.array([[c, c, 0.0, 0.0], [0.0, 0.0, c, c]]))
    prep = NeuralNetwork([
        (np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]]), None),
        (sp.eye_array(4, format="csr"), None),
    ])
    out = affine_network(np.array([[z * z, -z * z]]))
    return concat(out, concat(concat(par, sel), prep))


def _mult_selection(n, k, m_dim, symmetric):
    """Operand routing for the entry products: rows 2t/2t+1 pick the two
    factors of pair t = (i, kk, j) with i fastest."""
    cnt = n * k * m_dim
    t = np.arange(cnt)
    i = t % n
    kk = (t // n) % k
    j = t // (n * k)
    a_slot = i + n * kk
    b_slot = n * k + kk + k * j
    if symmetric:
        if not (n == k == m_dim):
            raise ValueError("symmetric mode needs square operands")
        swap = i > j
        a_swapped = n * k + i + n * kk   # B[i, kk]
        b_swapped = kk + k * j           # A[kk, j]
        x_slot = np.where(swap, a_swapped, a_slot)
        y_slot = np.where(swap, b_swapped, b_slot)
    else:
        x_slot, y_slot = a_slot, b_slot
    rows = np.empty(2 * cnt, dtype=np.int64)
    cols = np.empty(2 * cnt, dtype=np.int64)
    rows[0::2], rows[1::2] = 2 * t, 2 * t + 1
    cols[0::2], cols[1::2] = x_slot, y_slot
    sel = sp.coo_array(
        (np.ones(2 * cnt), (rows, cols)), shape=(2 * cnt, n * k + k * m_dim)
    ).tocsr()
    summer = sp.coo_array(
        (np.ones(cnt), (i + n * j, t)), shape=(n * m_dim, cnt)
    ).tocsr()
    return sel, summer


def matrix_mult_network(n, k, m_dim, accuracy, z_bound, symmetric=False):
    """Product of A (n x k) and B (k x m_dim) from [vec(A); vec(B)].

    Spectral error below `accuracy` when all entries are bounded by z_bound.
    In symmetric mode (square, commuting factors) the output satisfies
    out[i, j] == out[j, i] bitwise whenever A and B are symmetric.
    """
    per_entry = accuracy / (k * math.sqrt(n * m_dim))
    scalar = scalar_mult_network(per_entry, z_bound)
    sel, summer = _mult_selection(n, k, m_dim, symmetric)
    par = parallel_copies(scalar, n * k * m_dim)
    return concat(affine_network(summer), concat(par, affine_network(sel)))


def neumann_order(theta, delta):
    """Series length with tail (1-delta)^(m+1)/delta <= theta/2."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if theta <= 0:
        raise ValueError("theta must be positive")
    val = math.log(0.5 * theta * delta) / math.log(1.0 - delta)
    return max(1, math.ceil(val))


@dataclass(frozen=True)
class MultBudget:
    kind: str      # "xx" (squaring step) or "px" (product accumulation)
    stage: int
    accuracy: float
    z_bound: float
    terms: int


@dataclass
class InversionCertificate:
    """Checkable accounting of the inverter's error sources."""

    n: int
    delta: float
    theta: float
    neumann_terms: int
    stages: int
    tail_bound: float
    mults: list
    x_errors: list = field(default_factory=list)
    p_errors: list = field(default_factory=list)
    propagated: float = 0.0
    total: float = 0.0
    depth: int = 0
    params: int = 0
    symmetric: bool = True


def _norm_schedule(delta, num_stages):
    x = [(1.0 - delta) ** (2 ** k) for k in range(num_stages)]
    p = [1.0]
    for k in range(num_stages):
        p.append(p[-1] * (1.0 + x[k]))
    return x, p


def _mult_slots(num_stages):
    slots = [("xx", k) for k in range(num_stages - 1)]
    slots += [("px", k) for k in range(1, num_stages)]
    return slots


def _propagate(delta, num_stages, eps_by_slot, symmetric, linearized=False, inflate=1.0):
    """Error recurrence through the squaring/product chain.

    Returns (x_errors, p_errors) with entries after each stage; p_errors[-1]
    is the deliverable bound on the output error.
    """
    x, p = _norm_schedule(delta, num_stages)
    ex = [0.0]
    ep = [0.0, 0.0]  # P_0 = Id and P_1 = Id + X_0 are exact
    for k in range(num_stages):
        e_xx = eps_by_slot.get(("xx", k), 0.0)
        if linearized:
            nx = 2.0 * x[k] * inflate * ex[k] + e_xx
        else:
            nx = ex[k] * (2.0 * x[k] + ex[k]) + e_xx
        ex.append(nx)
        if k >= 1:
            e_px = eps_by_slot.get(("px", k), 0.0)
            if linearized:
                grow = 1.0 + x[k] * inflate
                cross = p[k] * inflate * ex[k]
                comm = 2.0 * (x[k] * inflate * ep[k] + p[k] * inflate * ex[k]) if symmetric else 0.0
                np_err = grow * ep[k] + cross + e_px + comm
            else:
                comm = 2.0 * (x[k] * ep[k] + p[k] * ex[k] + ep[k] * ex[k]) if symmetric else 0.0
                np_err = ep[k] * (1.0 + x[k] + ex[k]) + p[k] * ex[k] + e_px + comm
            ep.append(np_err)
    return ex, ep


def _allocate_budgets(delta, theta, num_stages, symmetric):
    """Amplification-aware split of theta/2 over the multiplications."""
    slots = _mult_slots(num_stages)
    if not slots:
        return {}, [0.0], [0.0, 0.0]
    amps = []
    for s in slots:
        _, ep = _propagate(delta, num_stages, {s: 1.0}, symmetric, linearized=True, inflate=1.05)
        amps.append(max(ep[-1], 1.0))
    budget = theta / 2.0
    eps = {s: budget / (1.05 * len(slots) * a) for s, a in zip(slots, amps)}
    for _ in range(80):
        ex, ep = _propagate(delta, num_stages, eps, symmetric)
        if ep[-1] <= budget:
            return eps, ex, ep
        eps = {s: v / 2.0 for s, v in eps.items()}
    raise RuntimeError("could not certify the inversion error budget")


def _carry(dim, target_depth):
    return pad_to_depth(identity_network(dim), target_depth)


def inversion_network(n, delta, theta, symmetric=True):
    """Network mapping vec(M) to approximately vec((Id - M)^{-1}) for
    ||M|| <= 1 - delta, with spectral error at most theta.

    Neumann series of length 2^J - 1 evaluated by repeated squaring
    (X <- X^2, P <- P + P X); every multiplication carries an individually
    budgeted accuracy, recorded in the returned certificate.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not 0 < theta < 0.5:
        raise ValueError("theta must lie in (0, 0.5)")
    m = neumann_order(theta, delta)
    num_stages = max(1, math.ceil(math.log2(m + 1)))
    tail = (1.0 - delta) ** (2 ** num_stages) / delta
    nn = n * n
    eye = sp.eye_array(nn, format="csr")
    id_vec = vec(np.eye(n))

    if num_stages == 1:
        net = affine_network(eye, id_vec)
        cert = InversionCertificate(
            n=n, delta=delta, theta=theta, neumann_terms=m, stages=1,
            tail_bound=tail, mults=[], x_errors=[0.0], p_errors=[0.0, 0.0],
            propagated=0.0, total=tail, depth=depth(net), params=num_params(net),
            symmetric=symmetric,
        )
        return net, cert

    eps, ex, ep = _allocate_budgets(delta, theta, num_stages, symmetric)
    x_norm, p_norm = _norm_schedule(delta, num_stages)
    budgets = {}
    for (kind, k), acc in eps.items():
        zx = x_norm[k] + ex[k]
        if kind == "xx":
            z = zx
        else:
            z = max(p_norm[k] + ep[k], zx)
        budgets[(kind, k)] = MultBudget(
            kind=kind, stage=k, accuracy=acc, z_bound=z, terms=mult_terms(acc / (n * n), z)
        )

    def mult_net(kind, k):
        b = budgets[(kind, k)]
        return matrix_mult_network(n, n, n, b.accuracy, b.z_bound, symmetric=symmetric)

    stages = []
    # stage 0: X1 = X0^2, P1 = Id + X0
    mxx = mult_net("xx", 0)
    target = max(depth(mxx), 2)
    mxx = pad_to_depth(mxx, target)
    par = parallelize([mxx, _carry(nn, target)])
    sel = sp.vstack([eye, eye, eye], format="csr")
    out_w = sp.block_diag([eye, eye], format="csr")
    out_b = np.concatenate([np.zeros(nn), id_vec])
    stages.append(concat(affine_network(out_w, out_b), concat(par, affine_network(sel))))
    zero = sp.csr_array((nn, nn))
    for k in range(1, num_stages):
        last = k == num_stages - 1
        mpx = mult_net("px", k)
        branches = [mpx, _carry(nn, depth(mpx))]
        # input [X; P] -> mpx gets [P; X], carry gets P
        sel_rows = [sp.hstack([zero, eye]), sp.hstack([eye, zero]), sp.hstack([zero, eye])]
        if not last:
            branches.insert(0, mult_net("xx", k))
            sel_rows = [sp.hstack([eye, zero]), sp.hstack([eye, zero])] + sel_rows
        target = max(depth(b) for b in branches)
        branches = [pad_to_depth(b, target) for b in branches]
        par = parallelize(branches)
        sel = sp.vstack(sel_rows, format="csr")
        if last:
            out_w = sp.hstack([eye, eye], format="csr")
        else:
            out_w = sp.vstack(
                [sp.hstack([eye, zero, zero]), sp.hstack([zero, eye, eye])], format="csr"
            )
        stages.append(concat(affine_network(out_w), concat(par, affine_network(sel))))

    net = stages[0]
    for stage in stages[1:]:
        net = sparse_concat(stage, net)

    ordered = [budgets[s] for s in _mult_slots(num_stages)]
    cert = InversionCertificate(
        n=n, delta=delta, theta=theta, neumann_terms=m, stages=num_stages,
        tail_bound=tail, mults=ordered, x_errors=ex, p_errors=ep,
        propagated=ep[-1], total=tail + ep[-1], depth=depth(net),
        params=num_params(net), symmetric=symmetric,
    )
    return net, cert


def validate_certificate(cert):
    """Re-derive every bound in the certificate; raises on any violation."""
    m = neumann_order(cert.theta, cert.delta)
    if cert.neumann_terms != m:
        raise ValueError("series length does not match theta and delta")
    stages = max(1, math.ceil(math.log2(m + 1)))
    if cert.stages != stages:
        raise ValueError("stage count does not match the series length")
    tail = (1.0 - cert.delta) ** (2 ** stages) / cert.delta
    if not np.isclose(tail, cert.tail_bound, rtol=1e-12):
        raise ValueError("tail bound mismatch")
    if tail > cert.theta / 2.0:
        raise ValueError("series tail exceeds theta/2")
    slots = _mult_slots(stages)
    if [(b.kind, b.stage) for b in cert.mults] != slots:
        raise ValueError("multiplication slots do not match the schedule")
    eps = {(b.kind, b.stage): b.accuracy for b in cert.mults}
    ex, ep = _propagate(cert.delta, stages, eps, cert.symmetric)
    if ep[-1] > cert.theta / 2.0 + 1e-300:
        raise ValueError("propagated error exceeds theta/2")
    x_norm, p_norm = _norm_schedule(cert.delta, stages)
    for b in cert.mults:
        zx = x_norm[b.stage] + ex[b.stage]
        z_need = zx if b.kind == "xx" else max(p_norm[b.stage] + ep[b.stage], zx)
        if b.z_bound + 1e-15 < z_need:
            raise ValueError("operand bound too small for the certified norms")
        if 2.0 * b.z_bound ** 2 * 4.0 ** -(b.terms + 1) > b.accuracy / (cert.n ** 2) + 1e-300:
            raise ValueError("sawtooth depth too small for the budget")
    if cert.total < tail + ep[-1] - 1e-300:
        raise ValueError("total bound understated")
    if cert.total > cert.theta:
        raise ValueError("certificate does not reach theta")
    return True


def save_network(net, path):
    """Write the layer arrays verbatim; loading reproduces identical floats."""
    arrays = {"meta_layers": np.array([len(net.layers)], dtype=np.int64)}
    for i, (w, b) in enumerate(net.layers):
        arrays[f"w{i}_data"] = w.data
        arrays[f"w{i}_indices"] = w.indices
        arrays[f"w{i}_indptr"] = w.indptr
        arrays[f"w{i}_shape"] = np.array(w.shape, dtype=np.int64)
        arrays[f"b{i}"] = b
    np.savez_compressed(path, **arrays)


def load_network(path):
    with np.load(path) as data:
        count = int(data["meta_layers"][0])
        layers = []
        for i in range(count):
            w = sp.csr_array(
                (data[f"w{i}_data"], data[f"w{i}_indices"], data[f"w{i}_indptr"]),
                shape=tuple(data[f"w{i}_shape"]),
            )
            layers.append((w, data[f"b{i}"]))
    return NeuralNetwork(layers)
