"""The six attention block variants and their decompositions.

Every variant embeds a ``[C, H, W]`` feature map into C/2-dimensional
queries/keys/values, forms an ``[HW, HW]`` attention matrix (row = query
pixel, column = key pixel, softmax always normalizing over keys), and
aggregates values back through an output projection plus a residual
connection.

Variants:

* ``NL``          -- softmax of the raw query-key dot products.
* ``PairwiseNL``  -- softmax of the whitened (mean-centered) dot products.
* ``UnaryNL``     -- softmax of the mean-query/key scores, shared by all
                     queries.
* ``DNL``         -- sum of the whitened softmax and an independently
                     projected, independently normalized key-saliency map.
* ``DNLStar``     -- the independent key projection added into the logits
                     before a single softmax.
* ``DNLDagger``   -- sum of the whitened softmax and the separately
                     normalized mean-query/key map (shared key transform).

Row sums are 1 for NL/PairwiseNL/UnaryNL/DNLStar and 2 for DNL/DNLDagger
(sum of two normalized maps). The decomposition object exposes the raw
and separately-normalized pairwise/unary constituents for analysis; any
constituent that is not part of a variant's forward path is computed
lazily, so instrumented FLOP counts reflect the canonical forward only.

Blocks are stateless: parameters are immutable inputs, forwards on
distinct inputs may run concurrently.
"""

import enum
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import tensor
from .precision import scalar_dtype


class Variant(str, enum.Enum):
    NL = "NL"
    PAIRWISE_NL = "PairwiseNL"
    UNARY_NL = "UnaryNL"
    DNL = "DNL"
    DNL_STAR = "DNLStar"
    DNL_DAGGER = "DNLDagger"


VARIANTS = tuple(Variant)

# variants whose unary term uses the dedicated 1-channel key projection
NEEDS_WM = frozenset({Variant.DNL, Variant.DNL_STAR})

# contract: sum of every attention row
EXPECTED_ROW_SUM = {
    Variant.NL: 1.0,
    Variant.PAIRWISE_NL: 1.0,
    Variant.UNARY_NL: 1.0,
    Variant.DNL_STAR: 1.0,
    Variant.DNL: 2.0,
    Variant.DNL_DAGGER: 2.0,
}


def parse_variant(token: str) -> Variant:
    for v in VARIANTS:
        if v.value == token:
            return v
    raise ValueError(
        f"unknown variant {token!r}; expected one of {[v.value for v in VARIANTS]}"
    )


@dataclass
class BlockParams:
    """Learnable weights of one block; key/query/value width is C/2 exactly."""

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wout: np.ndarray
    Wm: np.ndarray | None = None

    def __post_init__(self):
        half, c = self.Wq.shape
        if c != 2 * half:
            raise tensor.DimensionError(
                f"query projection must be [C/2, C], got {self.Wq.shape}"
            )
        for name, w, shape in (
            ("Wk", self.Wk, (half, c)),
            ("Wv", self.Wv, (half, c)),
            ("Wout", self.Wout, (c, half)),
        ):
            if w.shape != shape:
                raise tensor.DimensionError(f"{name} must be {shape}, got {w.shape}")
        if self.Wm is not None and self.Wm.shape != (1, c):
            raise tensor.DimensionError(f"Wm must be (1, {c}), got {self.Wm.shape}")

    @property
    def channels(self) -> int:
        return self.Wq.shape[1]

    def param_count(self) -> int:
        total = self.Wq.size + self.Wk.size + self.Wv.size + self.Wout.size
        if self.Wm is not None:
            total += self.Wm.size
        return total

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"Wq": self.Wq, "Wk": self.Wk, "Wv": self.Wv, "Wout": self.Wout}
        if self.Wm is not None:
            out["Wm"] = self.Wm
        return out


def init_block_params(channels: int, variant: Variant, rng: np.random.Generator) -> BlockParams:
    """Neutral initialization: Gaussian embeddings, zero unary and output.

    Zero ``Wout`` makes an untrained block the identity map (residual
    passthrough); zero ``Wm`` starts the learned unary attention uniform.
    """
    if channels % 2:
        raise ValueError(f"channels must be even, got {channels}")
    half = channels // 2
    std = channels ** -0.5
    dt = scalar_dtype()

    def gauss(shape):
        return (rng.normal(size=shape) * std).astype(dt)

    wm = np.zeros((1, channels), dtype=dt) if variant in NEEDS_WM else None
    return BlockParams(
        Wq=gauss((half, channels)),
        Wk=gauss((half, channels)),
        Wv=gauss((half, channels)),
        Wout=np.zeros((channels, half), dtype=dt),
        Wm=wm,
    )


@dataclass
class Embeddings:
    """Per-pixel projections, flattened to ``[C/2, HW]`` column-per-pixel."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    muQ: np.ndarray
    muK: np.ndarray
    m: np.ndarray | None = None

    @property
    def positions(self) -> int:
        return self.Q.shape[1]


def compute_embeddings(x: np.ndarray, p: BlockParams, v: Variant) -> Embeddings:
    """Project a feature map to Q/K/V (and the key-saliency scores m)."""
    x = tensor.as_feature_map(x, channels=p.channels)
    c, h, w = x.shape
    xflat = x.reshape(c, h * w)
    q = tensor.matmul(p.Wq, xflat)
    k = tensor.matmul(p.Wk, xflat)
    val = tensor.matmul(p.Wv, xflat)
    m = None
    if v in NEEDS_WM:
        if p.Wm is None:
            raise ValueError(f"variant {v.value} requires the unary projection Wm")
        m = tensor.matmul(p.Wm, xflat)[0]
    return Embeddings(
        Q=q, K=k, V=val, muQ=tensor.spatial_mean(q), muK=tensor.spatial_mean(k), m=m
    )


class AttentionDecomposition:
    """Total attention rows plus their pairwise and unary constituents.

    ``total`` is always materialized. ``pairwise_logits`` (whitened
    query-key products), ``unary_logits`` (per-key scores), and their
    separately softmax-normalized forms are available for every variant
    that has them and are ``None`` otherwise (UnaryNL has no pairwise
    part, PairwiseNL no unary part). Constituents off the forward path
    are derived on first access.
    """

    def __init__(self, variant: Variant, emb: Embeddings, total: np.ndarray,
                 pairwise_logits=None, unary_logits=None,
                 pairwise_norm=None, unary_norm=None):
        self.variant = variant
        self._emb = emb
        self.total = total
        self._pairwise_logits = pairwise_logits
        self._unary_logits = unary_logits
        self._pairwise_norm = pairwise_norm
        self._unary_norm = unary_norm

    @property
    def has_pairwise(self) -> bool:
        return self.variant is not Variant.UNARY_NL

    @property
    def has_unary(self) -> bool:
        return self.variant is not Variant.PAIRWISE_NL

    @property
    def pairwise_logits(self) -> np.ndarray | None:
        if self._pairwise_logits is None and self.has_pairwise:
            e = self._emb
            qw = e.Q - e.muQ[:, None]
            kw = e.K - e.muK[:, None]
            self._pairwise_logits = qw.T @ kw
        return self._pairwise_logits

    @property
    def unary_logits(self) -> np.ndarray | None:
        if self._unary_logits is None and self.has_unary:
            e = self._emb
            if self.variant in NEEDS_WM:
                self._unary_logits = e.m
            else:
                self._unary_logits = e.muQ @ e.K
        return self._unary_logits

    @property
    def pairwise_norm(self) -> np.ndarray | None:
        if self._pairwise_norm is None and self.has_pairwise:
            self._pairwise_norm = tensor.softmax_rows(self.pairwise_logits)
        return self._pairwise_norm

    @property
    def unary_norm(self) -> np.ndarray | None:
        if self._unary_norm is None and self.has_unary:
            self._unary_norm = tensor.softmax_vec(self.unary_logits)
        return self._unary_norm


def attention(v: Variant, e: Embeddings) -> AttentionDecomposition:
    """Build a variant's attention matrix from embeddings."""
    if v is Variant.NL:
        logits = tensor.matmul(e.Q.T, e.K)
        return AttentionDecomposition(v, e, total=tensor.softmax_rows(logits))

    if v is Variant.UNARY_NL:
        u = tensor.matmul(e.muQ[None, :], e.K)[0]
        unary = tensor.softmax_vec(u)
        total = np.repeat(unary[None, :], e.positions, axis=0)
        return AttentionDecomposition(v, e, total=total,
                                      unary_logits=u, unary_norm=unary)

    # remaining variants all use the whitened pairwise product
    qw = e.Q - e.muQ[:, None]
    kw = e.K - e.muK[:, None]
    pair = tensor.matmul(qw.T, kw)

    if v is Variant.PAIRWISE_NL:
        norm = tensor.softmax_rows(pair)
        return AttentionDecomposition(v, e, total=norm,
                                      pairwise_logits=pair, pairwise_norm=norm)
    if v is Variant.DNL:
        pnorm = tensor.softmax_rows(pair)
        unorm = tensor.softmax_vec(e.m)
        total = tensor.combine_maps(pnorm, unorm)
        return AttentionDecomposition(v, e, total=total,
                                      pairwise_logits=pair, unary_logits=e.m,
                                      pairwise_norm=pnorm, unary_norm=unorm)
    if v is Variant.DNL_STAR:
        logits = tensor.combine_maps(pair, e.m)
        return AttentionDecomposition(v, e, total=tensor.softmax_rows(logits),
                                      pairwise_logits=pair, unary_logits=e.m)
    if v is Variant.DNL_DAGGER:
        u = tensor.matmul(e.muQ[None, :], e.K)[0]
        pnorm = tensor.softmax_rows(pair)
        unorm = tensor.softmax_vec(u)
        total = tensor.combine_maps(pnorm, unorm)
        return AttentionDecomposition(v, e, total=total,
                                      pairwise_logits=pair, unary_logits=u,
                                      pairwise_norm=pnorm, unary_norm=unorm)
    raise ValueError(f"unhandled variant {v}")


def combine_attention_terms(v: Variant, pairwise_logits: np.ndarray,
                            unary_logits: np.ndarray) -> np.ndarray:
    """Each variant's combination rule applied to explicit logit terms."""
    if v in (Variant.NL, Variant.DNL_STAR):
        return tensor.softmax_rows(pairwise_logits + unary_logits[None, :])
    if v is Variant.PAIRWISE_NL:
        return tensor.softmax_rows(pairwise_logits)
    if v is Variant.UNARY_NL:
        u = tensor.softmax_vec(unary_logits)
        return np.repeat(u[None, :], pairwise_logits.shape[0], axis=0)
    # DNL and DNLDagger: sum of the two separately normalized maps
    return tensor.combine_maps(
        tensor.softmax_rows(pairwise_logits), tensor.softmax_vec(unary_logits)
    )


def block_forward(x: np.ndarray, p: BlockParams, v: Variant):
    """Full block: embeddings, attention, aggregation, output, residual.

    Returns ``(y, decomposition)`` with ``y = x + Wout (V total^T)``
    arranged so that output pixel i aggregates value columns weighted by
    attention row i.
    """
    x = tensor.as_feature_map(x, channels=p.channels)
    c, h, w = x.shape
    e = compute_embeddings(x, p, v)
    d = attention(v, e)
    agg = tensor.matmul(e.V, d.total.T)
    y = x + tensor.matmul(p.Wout, agg).reshape(c, h, w)
    return y, d


# ---------------------------------------------------------------------------
# graph (differentiable) path
#
# Mirrors block_forward kernel-for-kernel so forward values are
# bit-identical; used by training, gradient checks, and probes.
# ---------------------------------------------------------------------------


def block_graph(x: ag.Node, params: dict[str, ag.Node], v: Variant):
    """Differentiable block forward over parameter nodes.

    ``params`` maps ``Wq/Wk/Wv/Wout`` (and ``Wm`` where needed) to Nodes.
    Returns ``(y, aux)`` where aux exposes the graph's attention nodes.
    """
    c, h, w = x.value.shape
    hw = h * w
    xflat = ag.reshape(x, (c, hw))
    q = ag.matmul(params["Wq"], xflat)
    k = ag.matmul(params["Wk"], xflat)
    val = ag.matmul(params["Wv"], xflat)
    aux: dict[str, ag.Node] = {}

    if v is Variant.NL:
        total = ag.softmax_rows(ag.matmul_tn(q, k))
    elif v is Variant.UNARY_NL:
        mu_q = ag.mean_cols(q)
        u = ag.reshape(ag.matmul(ag.reshape(mu_q, (1, c // 2)), k), (hw,))
        unary = ag.softmax_vec(u)
        aux["unary_norm"] = unary
        total = ag.tile_rows(unary, hw)
    else:
        mu_q = ag.mean_cols(q)
        mu_k = ag.mean_cols(k)
        qw = ag.sub_colvec(q, mu_q)
        kw = ag.sub_colvec(k, mu_k)
        pair = ag.matmul_tn(qw, kw)
        aux["pairwise_logits"] = pair
        if v is Variant.PAIRWISE_NL:
            total = ag.softmax_rows(pair)
            aux["pairwise_norm"] = total
        elif v is Variant.DNL:
            m = ag.reshape(ag.matmul(params["Wm"], xflat), (hw,))
            pnorm = ag.softmax_rows(pair)
            unorm = ag.softmax_vec(m)
            aux["pairwise_norm"] = pnorm
            aux["unary_norm"] = unorm
            total = ag.combine_attention(pnorm, unorm)
        elif v is Variant.DNL_STAR:
            m = ag.reshape(ag.matmul(params["Wm"], xflat), (hw,))
            total = ag.softmax_rows(ag.combine_attention(pair, m))
        elif v is Variant.DNL_DAGGER:
            u = ag.reshape(ag.matmul(ag.reshape(mu_q, (1, c // 2)), k), (hw,))
            pnorm = ag.softmax_rows(pair)
            unorm = ag.softmax_vec(u)
            aux["pairwise_norm"] = pnorm
            aux["unary_norm"] = unorm
            total = ag.combine_attention(pnorm, unorm)
        else:
            raise ValueError(f"unhandled variant {v}")

    aux["total"] = total
    agg = ag.matmul_nt(val, total)
    y = ag.add(x, ag.reshape(ag.matmul(params["Wout"], agg), (c, h, w)))
    return y, aux


def row_sum_errors(v: Variant, d: AttentionDecomposition) -> float:
    """Max deviation of attention row sums from the variant's contract."""
    return float(np.abs(d.total.sum(axis=1) - EXPECTED_ROW_SUM[v]).max())
