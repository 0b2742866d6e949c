"""Machine-precision verification of the attention decomposition identities.

The ops here check, on explicit query/key embeddings:

* the four-term split of raw dot products around the mean embeddings and
  its exact reconstruction;
* that dropping the two terms constant in the key index leaves the
  softmax untouched (shift elimination);
* the factorization of the combined softmax into the elementwise product
  of the separately normalized pairwise/unary maps with a per-query
  rescaler;
* that the mean embeddings are the distinguished centering point: a
  stationary point of the normalized-separation ratio objective and the
  global maximizer of its concave centered surrogate;
* the spectral bound on the normalized difference Gram matrix that the
  surrogate's concavity rests on;
* how gradients couple through multiplicative versus additive
  combination of the two normalized attention maps.

All checks are pure functions over immutable inputs and may be run in
parallel across instances.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from . import blocks, tensor


class DegenerateInputError(ValueError):
    """Raised when an objective's denominators vanish (no spread)."""


@dataclass
class IdentityReport:
    """Outcome of one identity check over one or more instances."""

    name: str
    max_abs_error: float
    instances_tested: int
    tolerance: float
    passed: bool


def reports_to_json(reports) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2)


def merge_reports(name: str, reports: list[IdentityReport]) -> IdentityReport:
    """Combine per-instance reports; pass iff every instance passed."""
    worst = max(r.max_abs_error for r in reports)
    return IdentityReport(
        name=name,
        max_abs_error=worst,
        instances_tested=sum(r.instances_tested for r in reports),
        tolerance=reports[0].tolerance,
        passed=all(r.passed for r in reports),
    )


# ---------------------------------------------------------------------------
# four-term split and softmax identities
# ---------------------------------------------------------------------------


@dataclass
class WhitenSplit:
    """Terms of ``q_i . k_j`` split around the mean embeddings.

    Expanding the whitened product gives
    ``q.k = (q-muQ).(k-muK) + muQ.k + q.muK - muQ.muK``: the constant
    mean/mean interaction enters *negatively* (a plain sum of all four
    positive terms would double-count it). ``const_bias`` therefore
    stores ``-muQ.muK`` so that the four fields sum back to the raw
    products. Both row-constant terms drop out of the softmax either way.
    """

    pairwise: np.ndarray     # [n, n]  (q_i - muQ) . (k_j - muK)
    key_unary: np.ndarray    # [n]     muQ . k_j
    query_bias: np.ndarray   # [n]     q_i . muK   (constant in the key index)
    const_bias: float        #         -(muQ . muK)

    def reconstruction(self) -> np.ndarray:
        return (self.pairwise + self.key_unary[None, :]
                + self.query_bias[:, None] + self.const_bias)


def whiten_split(Q: np.ndarray, K: np.ndarray) -> WhitenSplit:
    """Split raw dot products into pairwise/key-unary/query-bias/const terms."""
    Q = np.asarray(Q, dtype=float)
    K = np.asarray(K, dtype=float)
    if Q.shape != K.shape:
        raise tensor.DimensionError(f"query/key shapes differ: {Q.shape} vs {K.shape}")
    mu_q = Q.mean(axis=1)
    mu_k = K.mean(axis=1)
    qw = Q - mu_q[:, None]
    kw = K - mu_k[:, None]
    return WhitenSplit(
        pairwise=qw.T @ kw,
        key_unary=mu_q @ K,
        query_bias=Q.T @ mu_k,
        const_bias=-float(mu_q @ mu_k),
    )


def whiten_reconstruction_check(Q, K, tol: float = 1e-10) -> IdentityReport:
    """The four terms must reconstruct the raw dot products elementwise."""
    split = whiten_split(Q, K)
    err = float(np.abs(split.reconstruction() - np.asarray(Q).T @ np.asarray(K)).max())
    return IdentityReport("whitening-reconstruction", err, 1, tol, err <= tol)


def elimination_check(Q, K, tol: float = 1e-10) -> IdentityReport:
    """Softmax of raw logits equals softmax of pairwise + key-unary logits.

    Exact because the dropped terms are constant in the key index and the
    softmax is invariant to per-row shifts.
    """
    split = whiten_split(Q, K)
    lhs = tensor.softmax_rows(np.asarray(Q).T @ np.asarray(K))
    rhs = tensor.softmax_rows(split.pairwise + split.key_unary[None, :])
    err = float(np.abs(lhs - rhs).max())
    return IdentityReport("shift-elimination", err, 1, tol, err <= tol)


def factorization_check(Q, K, tol: float = 1e-10):
    """Combined softmax equals the rescaled product of the two softmaxes.

    With ``a`` the pairwise logits and ``b`` the key-unary logits,
    ``softmax(a_i + b) == softmax(a_i) * softmax(b) / lam_i`` where
    ``lam_i`` is the inner product of the two normalized maps.
    Returns ``(report, lam)``.
    """
    split = whiten_split(Q, K)
    a = split.pairwise
    b = split.key_unary
    lhs = tensor.softmax_rows(a + b[None, :])
    pa = tensor.softmax_rows(a)
    pb = tensor.softmax_vec(b)
    lam = (pa * pb[None, :]).sum(axis=1)
    rhs = pa * pb[None, :] / lam[:, None]
    err = float(np.abs(lhs - rhs).max())
    return IdentityReport("product-factorization", err, 1, tol, err <= tol), lam


# ---------------------------------------------------------------------------
# optimality of mean centering
# ---------------------------------------------------------------------------


def _require_spread(Q: np.ndarray, K: np.ndarray) -> None:
    if Q.shape[1] < 2:
        raise DegenerateInputError("need at least two pixels")
    if not np.any(Q != Q[:, :1]):
        raise DegenerateInputError("all query embeddings identical")
    if not np.any(K != K[:, :1]):
        raise DegenerateInputError("all key embeddings identical")


def separation_objective(Q, K, alpha, beta) -> float:
    """Normalized-separation ratio objective of the centering vectors.

    Measures, as two symmetric ratio terms evaluated by explicit triple
    sums over pixels, how strongly centered queries separate pairs of
    centered keys (and vice versa), normalized by the centered spreads.
    """
    Q = np.asarray(Q, dtype=float)
    K = np.asarray(K, dtype=float)
    _require_spread(Q, K)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    qa = Q - alpha[:, None]
    kb = K - beta[:, None]
    if not np.any(qa):
        raise DegenerateInputError("all queries coincide with the centering point")
    if not np.any(kb):
        raise DegenerateInputError("all keys coincide with the centering point")

    kdiff = ((K[:, :, None] - K[:, None, :]) ** 2).sum()
    qdiff = ((Q[:, :, None] - Q[:, None, :]) ** 2).sum()

    G = qa.T @ kb                       # [i, m]
    num1 = ((G[:, :, None] - G[:, None, :]) ** 2).sum()
    den1 = (qa ** 2).sum() * kdiff

    H = kb.T @ qa                       # [m, i]
    num2 = ((H[:, :, None] - H[:, None, :]) ** 2).sum()
    den2 = (kb ** 2).sum() * qdiff
    return float(num1 / den1 + num2 / den2)


def normalized_difference_gram(M) -> np.ndarray:
    """Sum of outer products of all column differences, trace-normalized.

    Symmetric positive semidefinite with trace exactly 1 by construction.
    """
    M = np.asarray(M, dtype=float)
    diff = M[:, :, None] - M[:, None, :]
    denom = float((diff ** 2).sum())
    if denom == 0.0:
        raise DegenerateInputError("all columns identical; difference Gram undefined")
    return np.einsum("amn,bmn->ab", diff, diff) / denom


def centered_separation_surrogate(Q, K, alpha, beta) -> float:
    """Concave companion of :func:`separation_objective`.

    Numerator-minus-denominator form of each ratio term:
    ``sum_i (q_i-alpha)^T (A - I) (q_i-alpha)`` plus the symmetric key
    term, with ``A``/``B`` the normalized difference Grams. Because every
    eigenvalue of those Grams is at most 1, both quadratic forms are
    concave in the centering vectors, and the unique maximizer (up to
    flat directions) is the mean embedding pair.
    """
    Q = np.asarray(Q, dtype=float)
    K = np.asarray(K, dtype=float)
    _require_spread(Q, K)
    A = normalized_difference_gram(K)
    B = normalized_difference_gram(Q)
    qa = Q - np.asarray(alpha, dtype=float)[:, None]
    kb = K - np.asarray(beta, dtype=float)[:, None]
    term_q = np.einsum("ai,ab,bi->", qa, A - np.eye(A.shape[0]), qa)
    term_k = np.einsum("ai,ab,bi->", kb, B - np.eye(B.shape[0]), kb)
    return float(term_q + term_k)


@dataclass
class OracleVerdict:
    """Outcome of the mean-centering optimality oracle."""

    passed: bool
    grad_norm: float
    max_improvement: float
    objective_at_center: float
    surrogate_at_center: float
    trials: int
    radius: float


def mean_optimality_oracle(Q, K, trials: int = 1000, radius: float = 0.5,
                           seed: int = 0, center=None, grad_h: float = 1e-5,
                           grad_tol: float = 1e-6,
                           improve_tol: float = 1e-9) -> OracleVerdict:
    """Check that mean centering is optimal, by two independent probes.

    1. The centered finite-difference gradient of the ratio objective at
       the centering point must vanish (norm <= ``grad_tol``).
    2. ``trials`` uniform perturbations in a ball of ``radius`` must not
       improve the concave surrogate by more than ``improve_tol``.

    The perturbation probe runs on the surrogate because the ratio form
    shares its stationary point but not its curvature: along the top
    eigendirection of the difference Gram the ratio increases away from
    the mean toward its supremum at infinity, so only the surrogate's
    maximality is a theorem. ``center`` overrides the mean pair (used as
    a negative control).
    """
    Q = np.asarray(Q, dtype=float)
    K = np.asarray(K, dtype=float)
    _require_spread(Q, K)
    if center is None:
        a0, b0 = Q.mean(axis=1), K.mean(axis=1)
    else:
        a0, b0 = (np.asarray(c, dtype=float) for c in center)
    d = Q.shape[0]

    grad = np.empty(2 * d)
    for j in range(2 * d):
        step = np.zeros(2 * d)
        step[j] = grad_h
        grad[j] = (
            separation_objective(Q, K, a0 + step[:d], b0 + step[d:])
            - separation_objective(Q, K, a0 - step[:d], b0 - step[d:])
        ) / (2.0 * grad_h)
    grad_norm = float(np.linalg.norm(grad))

    base = centered_separation_surrogate(Q, K, a0, b0)
    rng = np.random.default_rng(seed)
    max_improvement = 0.0
    if radius > 0:
        for _ in range(trials):
            direction = rng.normal(size=2 * d)
            direction *= (rng.uniform() ** (1.0 / (2 * d))) * radius / np.linalg.norm(direction)
            value = centered_separation_surrogate(
                Q, K, a0 + direction[:d], b0 + direction[d:]
            )
            max_improvement = max(max_improvement, value - base)
    passed = grad_norm <= grad_tol and max_improvement <= improve_tol
    return OracleVerdict(
        passed=passed, grad_norm=grad_norm, max_improvement=max_improvement,
        objective_at_center=separation_objective(Q, K, a0, b0),
        surrogate_at_center=base, trials=trials, radius=radius,
    )


# ---------------------------------------------------------------------------
# spectral bound of the difference Gram
# ---------------------------------------------------------------------------


def power_iteration(A: np.ndarray, iters: int = 200, tol: float = 1e-10) -> float:
    """Dominant eigenvalue of a symmetric PSD matrix via power iteration."""
    d = A.shape[0]
    v = np.random.default_rng(12345).normal(size=d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        av = A @ v
        norm = np.linalg.norm(av)
        if norm == 0.0:
            return 0.0
        v = av / norm
        lam = float(v @ (A @ v))
        if np.linalg.norm(A @ v - lam * v) <= tol:
            break
    return lam


@dataclass
class GramEigenReport:
    """Spectral facts of one normalized difference Gram matrix."""

    max_eigenvalue: float
    min_eigenvalue: float
    trace_error: float
    symmetric: bool
    passed: bool


def gram_eigen_bound(M, iters: int = 200, tol: float = 1e-10,
                     eig_slack: float = 1e-8,
                     trace_tol: float = 1e-10) -> GramEigenReport:
    """Verify the difference Gram is symmetric PSD, trace 1, top eig <= 1."""
    A = normalized_difference_gram(M)
    symmetric = bool(np.array_equal(A, A.T))
    trace_error = abs(float(np.trace(A)) - 1.0)
    lam_max = power_iteration(A, iters=iters, tol=tol)
    # min eigenvalue from power iteration on the reflected spectrum
    shift = lam_max + 1.0
    lam_min = shift - power_iteration(shift * np.eye(A.shape[0]) - A, iters=iters, tol=tol)
    passed = (
        symmetric
        and trace_error <= trace_tol
        and lam_max <= 1.0 + eig_slack
        and lam_min >= -1e-10
    )
    return GramEigenReport(lam_max, lam_min, trace_error, symmetric, passed)


# ---------------------------------------------------------------------------
# gradient coupling of the combination rules
# ---------------------------------------------------------------------------


@dataclass
class CouplingProbeReport:
    """Gradients reaching the two normalized maps under both combination rules."""

    product_rule_max_dev: float      # |dP - dTotal * U| over all positions
    product_rule_max_dev_unary: float
    sum_rule_exact: bool             # dP == dTotal bitwise (and dU likewise)
    grad_total_product: np.ndarray
    grad_pairwise_product: np.ndarray
    grad_unary_product: np.ndarray
    grad_total_sum: np.ndarray
    grad_pairwise_sum: np.ndarray
    unary_weights: np.ndarray
    passed: bool = False
    tolerance: float = 1e-9

    def __post_init__(self):
        self.passed = self.sum_rule_exact and max(
            self.product_rule_max_dev, self.product_rule_max_dev_unary
        ) <= self.tolerance


def coupling_probe_from_logits(pairwise_logits: np.ndarray,
                               unary_logits: np.ndarray,
                               values: np.ndarray,
                               seed: int = 0) -> CouplingProbeReport:
    """Probe gradient coupling with explicit logit terms.

    Builds the two normalized maps as leaves (the unary one tiled to the
    full map so per-position gradients are explicit), combines them once
    multiplicatively and once additively, and pushes a fixed quadratic
    aggregation loss back through each graph. The per-query rescaling of
    the multiplicative form is held fixed, i.e. the product graph is the
    raw product of the two normalized maps.

    Verifies that under the product rule each map's gradient is the total
    map's gradient attenuated by the other map's value, while under the
    sum rule both gradients equal the total map's gradient bit-exactly.
    """
    pairwise_logits = np.asarray(pairwise_logits, dtype=float)
    unary_logits = np.asarray(unary_logits, dtype=float)
    n = pairwise_logits.shape[0]
    p_val = tensor.softmax_rows(pairwise_logits)
    u_val = np.repeat(tensor.softmax_vec(unary_logits)[None, :], n, axis=0)
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(values.shape[0], n))
    v_const = ag.constant(values)
    t_const = ag.constant(target)

    def agg_loss(attn: ag.Node) -> ag.Node:
        resid = ag.sub(ag.matmul(v_const, ag.transpose(attn)), t_const)
        return ag.scale(ag.sum_all(ag.mul(resid, resid)), 0.5)

    # product rule
    p_leaf = ag.param("pairwise", p_val)
    u_leaf = ag.param("unary", u_val)
    ag.backward(agg_loss(ag.mul(p_leaf, u_leaf)))
    total_leaf = ag.param("total", p_val * u_val)
    ag.backward(agg_loss(total_leaf))
    d_total = total_leaf.grad
    dev_p = float(np.abs(p_leaf.grad - d_total * u_val).max())
    dev_u = float(np.abs(u_leaf.grad - d_total * p_val).max())

    # sum rule
    p_leaf_s = ag.param("pairwise", p_val)
    u_leaf_s = ag.param("unary", u_val)
    ag.backward(agg_loss(ag.add(p_leaf_s, u_leaf_s)))
    total_leaf_s = ag.param("total", p_val + u_val)
    ag.backward(agg_loss(total_leaf_s))
    sum_exact = bool(
        np.array_equal(p_leaf_s.grad, total_leaf_s.grad)
        and np.array_equal(u_leaf_s.grad, total_leaf_s.grad)
    )
    return CouplingProbeReport(
        product_rule_max_dev=dev_p,
        product_rule_max_dev_unary=dev_u,
        sum_rule_exact=sum_exact,
        grad_total_product=d_total,
        grad_pairwise_product=p_leaf.grad,
        grad_unary_product=u_leaf.grad,
        grad_total_sum=total_leaf_s.grad,
        grad_pairwise_sum=p_leaf_s.grad,
        unary_weights=u_val[0],
    )


def coupling_gradient_probe(x: np.ndarray, p: blocks.BlockParams,
                            seed: int = 0) -> CouplingProbeReport:
    """Gradient-coupling probe on the attention terms of a real block input."""
    e = blocks.compute_embeddings(x, p, blocks.Variant.NL)
    d = blocks.attention(blocks.Variant.NL, e)
    return coupling_probe_from_logits(d.pairwise_logits, d.unary_logits, e.V, seed=seed)


# ---------------------------------------------------------------------------
# seeded instance generator shared by the suites
# ---------------------------------------------------------------------------

EMBED_DIMS = (1, 2, 4, 8)
PIXEL_COUNTS = (1, 2, 4, 9, 49)
LOGIT_TARGETS = (1.0, 10.0, 50.0)


def random_embedding_instances(count: int, seed: int):
    """Yield ``count`` seeded (Q, K) column-per-pixel embedding pairs.

    Sweeps embedding dims, pixel counts, and logit magnitudes up to about
    +-50 so the softmax identities are exercised in their stiff regime.
    """
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        dim = EMBED_DIMS[idx % len(EMBED_DIMS)]
        n = PIXEL_COUNTS[(idx // len(EMBED_DIMS)) % len(PIXEL_COUNTS)]
        target = LOGIT_TARGETS[idx % len(LOGIT_TARGETS)]
        scale = (target / dim) ** 0.5
        yield rng.normal(size=(dim, n)) * scale, rng.normal(size=(dim, n)) * scale
