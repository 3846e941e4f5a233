"""Mix-and-Match token-mixing blocks.

A block updates an (n,d) token matrix (and optionally a d-wide query vector)
through pluggable stages: Mix aggregates token information into an attention
matrix or a pooled vector, Match redistributes the aggregate onto every
token, and a residual feed-forward refines the result. With Mix set to masked
self-attention and Match to the attention matmul, the basic block is exactly
a pre-norm transformer encoder layer; with max pooling and concatenation it
is a far cheaper mixer with the same interface.

Multi-head variants split the channels into contiguous groups after the
shared normalization; Mix and Match run per group and the group outputs are
concatenated before the residual add. Feed-forward layers stay full-width.
The coordinate-wise max makes per-group pooling identical to full-width
pooling, so only attention heads need an explicit per-group pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from . import numerics as nm
from .numerics import DimensionError, Node, Parameter, Tape


class MixKind(Enum):
    ATTENTION = "attention"
    MAX_POOL = "max_pool"


class MatchKind(Enum):
    ATTENTION_MATMUL = "attention_matmul"
    CONCAT = "concat"
    PRODUCT = "product"


LAYER_NORM_EPS = 1e-5


def mix(kind: MixKind, x: Node, mask, wq: Node | None = None, wk: Node | None = None) -> Node:
    """Aggregate token information.

    MAX_POOL returns the masked column-wise max, a (d,) vector. ATTENTION
    returns the (n,n) row-softmax of (xQ)(xK)^T / sqrt(d), with invalid key
    columns zeroed and invalid query rows all-zero; Q and K default to the
    identity.
    """
    if kind is MixKind.MAX_POOL:
        return nm.masked_max_pool(x, mask)
    q = nm.matmul(x, wq) if wq is not None else x
    k = nm.matmul(x, wk) if wk is not None else x
    scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(x.value.shape[1]))
    return nm.masked_softmax_rows(scores, mask, mask)


def match(kind: MatchKind, c: Node, x: Node, wm: Node | None = None) -> Node:
    """Redistribute the mixed aggregate back onto each token row."""
    n, d = x.value.shape
    if kind is MatchKind.ATTENTION_MATMUL:
        if c.value.shape != (n, n):
            raise DimensionError(f"attention match: mix output {c.value.shape}, tokens {x.value.shape}")
        return nm.matmul(c, x)
    if c.value.shape != (d,):
        raise DimensionError(f"{kind.value} match: mix output {c.value.shape}, tokens {x.value.shape}")
    if kind is MatchKind.CONCAT:
        if wm is None:
            raise DimensionError("concat match requires a (2d,d) projection")
        return nm.matmul(nm.concat_last(x, nm.tile_rows(c, n)), wm)
    # PRODUCT: c broadcast over rows, optional square projection.
    out = nm.mul(x, nm.tile_rows(c, n))
    if wm is not None:
        out = nm.matmul(out, wm)
    return out


@dataclass
class MnMBlockParams:
    """Weights for one block; per-head lists are indexed by head."""

    d: int
    heads: int
    d_ff: int
    mix: MixKind
    match: MatchKind
    activation: str
    query_variant: bool
    norm_mix_gamma: Parameter
    norm_mix_beta: Parameter
    norm_ffn_gamma: Parameter
    norm_ffn_beta: Parameter
    w1: Parameter
    w2: Parameter
    # Match projections, one per head (absent for ATTENTION_MATMUL and for
    # PRODUCT without an explicit projection).
    wm: list[Parameter] = field(default_factory=list)
    # Optional learned attention projections, one per head.
    wq: list[Parameter] = field(default_factory=list)
    wk: list[Parameter] = field(default_factory=list)
    # Query-variant extras.
    norm_q_gamma: Parameter | None = None
    norm_q_beta: Parameter | None = None
    w3: Parameter | None = None
    w4: Parameter | None = None

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        yield prefix + "norm_mix.gamma", self.norm_mix_gamma
        yield prefix + "norm_mix.beta", self.norm_mix_beta
        yield prefix + "norm_ffn.gamma", self.norm_ffn_gamma
        yield prefix + "norm_ffn.beta", self.norm_ffn_beta
        yield prefix + "w1", self.w1
        yield prefix + "w2", self.w2
        for h, p in enumerate(self.wm):
            yield f"{prefix}wm.{h}", p
        for h, p in enumerate(self.wq):
            yield f"{prefix}wq.{h}", p
        for h, p in enumerate(self.wk):
            yield f"{prefix}wk.{h}", p
        if self.query_variant:
            yield prefix + "norm_q.gamma", self.norm_q_gamma
            yield prefix + "norm_q.beta", self.norm_q_beta
            yield prefix + "w3", self.w3
            yield prefix + "w4", self.w4


def init_mnm_block(
    rng: np.random.Generator,
    d: int,
    heads: int,
    d_ff: int,
    mix_kind: MixKind,
    match_kind: MatchKind,
    activation: str = "gelu",
    query_variant: bool = False,
    attn_proj: bool = False,
    product_proj: bool = False,
) -> MnMBlockParams:
    if d % heads != 0:
        raise ValueError(f"embedding dim {d} not divisible by {heads} heads")
    if (mix_kind is MixKind.ATTENTION) != (match_kind is MatchKind.ATTENTION_MATMUL):
        raise ValueError("attention mix pairs only with the attention matmul match")
    if query_variant and mix_kind is not MixKind.MAX_POOL:
        # An attention mix would turn the query into an (n,n) matrix, whose
        # norm/FFN widths depend on the token count; only vector-valued mixes
        # are supported here.
        raise ValueError("query-variant blocks require a vector-valued mix (MAX_POOL)")
    dh = d // heads
    params = MnMBlockParams(
        d=d,
        heads=heads,
        d_ff=d_ff,
        mix=mix_kind,
        match=match_kind,
        activation=activation,
        query_variant=query_variant,
        norm_mix_gamma=Parameter(np.ones(d)),
        norm_mix_beta=Parameter(np.zeros(d)),
        norm_ffn_gamma=Parameter(np.ones(d)),
        norm_ffn_beta=Parameter(np.zeros(d)),
        w1=Parameter(nm.uniform_init(rng, (d, d_ff), d)),
        w2=Parameter(nm.uniform_init(rng, (d_ff, d), d_ff)),
    )
    if match_kind is MatchKind.CONCAT:
        params.wm = [Parameter(nm.uniform_init(rng, (2 * dh, dh), 2 * dh)) for _ in range(heads)]
    elif match_kind is MatchKind.PRODUCT and product_proj:
        params.wm = [Parameter(nm.uniform_init(rng, (dh, dh), dh)) for _ in range(heads)]
    if mix_kind is MixKind.ATTENTION and attn_proj:
        params.wq = [Parameter(np.eye(dh)) for _ in range(heads)]
        params.wk = [Parameter(np.eye(dh)) for _ in range(heads)]
    if query_variant:
        params.norm_q_gamma = Parameter(np.ones(d))
        params.norm_q_beta = Parameter(np.zeros(d))
        params.w3 = Parameter(nm.uniform_init(rng, (d, d_ff), d))
        params.w4 = Parameter(nm.uniform_init(rng, (d_ff, d), d_ff))
    return params


def _match_with_query(tape: Tape, params: MnMBlockParams, c: Node, x: Node) -> Node:
    """Per-head Match of a (d,) query onto (n,d) tokens, heads re-concatenated."""
    if params.heads == 1:
        wm = tape.watch(params.wm[0]) if params.wm else None
        return match(params.match, c, x, wm)
    dh = params.d_head
    parts = []
    for h in range(params.heads):
        lo, hi = h * dh, (h + 1) * dh
        wm = tape.watch(params.wm[h]) if params.wm else None
        parts.append(match(params.match, nm.slice_last(c, lo, hi), nm.slice_last(x, lo, hi), wm))
    out = parts[0]
    for part in parts[1:]:
        out = nm.concat_last(out, part)
    return out


def _attention_mix_match(tape: Tape, params: MnMBlockParams, xn: Node, x: Node, mask) -> Node:
    """Per-head attention over normalized tokens, matched onto the raw ones."""
    dh = params.d_head
    parts = []
    for h in range(params.heads):
        lo, hi = h * dh, (h + 1) * dh
        xn_h = nm.slice_last(xn, lo, hi) if params.heads > 1 else xn
        x_h = nm.slice_last(x, lo, hi) if params.heads > 1 else x
        wq = tape.watch(params.wq[h]) if params.wq else None
        wk = tape.watch(params.wk[h]) if params.wk else None
        parts.append(match(MatchKind.ATTENTION_MATMUL, mix(MixKind.ATTENTION, xn_h, mask, wq, wk), x_h))
    out = parts[0]
    for part in parts[1:]:
        out = nm.concat_last(out, part)
    return out


def _ffn(tape: Tape, params: MnMBlockParams, z: Node, w_first: Parameter, w_second: Parameter) -> Node:
    mm = nm.matmul if z.value.ndim == 2 else nm.vecmat
    hidden = nm.activation(mm(z, tape.watch(w_first)), params.activation)
    return mm(hidden, tape.watch(w_second))


def mnm_basic(tape: Tape, x: Node, mask, params: MnMBlockParams) -> Node:
    """C <- Mix(Norm(X), M);  S <- Match(C, X) + X;  X <- FFN(Norm(S)) + S."""
    xn = nm.layer_norm(x, tape.watch(params.norm_mix_gamma), tape.watch(params.norm_mix_beta),
                       LAYER_NORM_EPS)
    if params.mix is MixKind.ATTENTION:
        matched = _attention_mix_match(tape, params, xn, x, mask)
    else:
        matched = _match_with_query(tape, params, nm.masked_max_pool(xn, mask), x)
    s = nm.add(matched, x)
    sn = nm.layer_norm(s, tape.watch(params.norm_ffn_gamma), tape.watch(params.norm_ffn_beta),
                       LAYER_NORM_EPS)
    return nm.add(_ffn(tape, params, sn, params.w1, params.w2), s)


def mnm_query(tape: Tape, x: Node, c: Node, mask, params: MnMBlockParams) -> tuple[Node, Node]:
    """Query-conditioned variant; Match runs first, on the incoming query.

    S  <- Match(C, X) + X
    C' <- Mix(Norm(S), M)
    X' <- FFN(Norm(S)) + S
    C''<- FFN_q(Norm(C')) + C'
    """
    if not params.query_variant:
        raise ValueError("block was not initialized as a query-variant block")
    if c.value.shape != (params.d,):
        raise DimensionError(f"query vector {c.value.shape}, expected ({params.d},)")
    s = nm.add(_match_with_query(tape, params, c, x), x)
    s_mix = nm.layer_norm(s, tape.watch(params.norm_mix_gamma), tape.watch(params.norm_mix_beta),
                          LAYER_NORM_EPS)
    c_mix = nm.masked_max_pool(s_mix, mask)
    sn = nm.layer_norm(s, tape.watch(params.norm_ffn_gamma), tape.watch(params.norm_ffn_beta),
                       LAYER_NORM_EPS)
    x_out = nm.add(_ffn(tape, params, sn, params.w1, params.w2), s)
    cn = nm.layer_norm(c_mix, tape.watch(params.norm_q_gamma), tape.watch(params.norm_q_beta),
                       LAYER_NORM_EPS)
    c_out = nm.add(_ffn(tape, params, cn, params.w3, params.w4), c_mix)
    return x_out, c_out
