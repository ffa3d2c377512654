"""Attention with relative position embedding, and plain scaled dot-product attention.

Queries and keys are built from four blocks each::

    q_i = [xW_Q * cos(p_i W1 + b1), xW_Q * sin(p_i W1 + b1),
           xW_Q * cos(p_i W2 + b2), xW_Q * sin(p_i W2 + b2)]
    k_j = [yW_K * cos(p_j W1),      yW_K * sin(p_j W1),
           cos(p_j W2),             sin(p_j W2)]

so that q_i . k_j only sees p_i - p_j. A head returns
``Linear(A Y W_V) + Linear(sum_j a_ij (p_i - p_j))``.

All functions accept an optional leading batch axis: features (..., L, E),
positions (..., L, 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, LayerNorm, Linear, Module, Tensor, as_tensor, param


@dataclass
class TokenSet:
    features: Tensor
    positions: Tensor

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.positions = as_tensor(self.positions)
        f, p = self.features.shape, self.positions.shape
        if p[-1] != 2 or f[:-1] != p[:-1]:
            raise ad.ShapeError("TokenSet", f, p, "features and positions must pair row-for-row")
        if not np.isfinite(self.positions.data).all():
            raise ad.NonFiniteError("TokenSet positions")

    def __len__(self):
        return self.features.shape[-2]


def frequency_init(n_heads: int, d: int, rng: np.random.Generator,
                   lo: float = 1.0, hi: float = 32.0) -> np.ndarray:
    """(heads, 2, d) frequency matrices: log-uniform magnitudes, random directions.

    Positions live in [-1, 1], so magnitudes between ``lo`` and ``hi`` rad per
    unit span whole-image to sub-patch wavelengths.
    """
    mag = np.exp(rng.uniform(math.log(lo), math.log(hi), (n_heads, d)))
    ang = rng.uniform(0.0, 2 * math.pi, (n_heads, d))
    return np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)


def _projection(n_in, n_out, rng, use_mlp):
    return MLP(n_in, n_out, n_out, rng) if use_mlp else Linear(n_in, n_out, rng, bias=False)


class RelAttentionHead(Module):
    """One head: W_Q, W_K, W_V (E x d), W1, W2 (2 x d), b1, b2 (d), and output linears."""

    def __init__(self, embed: int, d: int, rng: np.random.Generator, use_mlp: bool = False,
                 zero_out: bool = False):
        self.d = d
        self.q = _projection(embed, d, rng, use_mlp)
        self.k = _projection(embed, d, rng, use_mlp)
        self.v = _projection(embed, d, rng, use_mlp)
        w = frequency_init(2, d, rng)
        self.w1, self.w2 = param(w[0]), param(w[1])
        self.b1, self.b2 = param(np.zeros(d)), param(np.zeros(d))
        self.value_out = Linear(d, embed, rng, zero=zero_out)
        self.pos_out = Linear(2, embed, rng, zero=zero_out)

    def forward(self, X: TokenSet, Y: TokenSet):
        return attention_output(X, Y, self)


def _rows(x, p):
    x, p = as_tensor(x), as_tensor(p)
    single = x.ndim == 1
    if single:
        x, p = x.reshape(1, -1), p.reshape(1, -1)
    return x, p, single


def make_query(x, p, head: RelAttentionHead) -> Tensor:
    x, p, single = _rows(x, p)
    xq = head.q(x)
    if xq.shape[-1] != head.d or p.shape[-1] != 2:
        raise ad.ShapeError("make_query", xq.shape, p.shape)
    ph1 = p @ head.w1 + head.b1
    ph2 = p @ head.w2 + head.b2
    q = ad.concat([xq * ad.cos(ph1), xq * ad.sin(ph1), xq * ad.cos(ph2), xq * ad.sin(ph2)], -1)
    return q.reshape(-1) if single else q


def make_key(y, p, head: RelAttentionHead) -> Tensor:
    y, p, single = _rows(y, p)
    yk = head.k(y)
    if yk.shape[-1] != head.d or p.shape[-1] != 2:
        raise ad.ShapeError("make_key", yk.shape, p.shape)
    ph1 = p @ head.w1
    ph2 = p @ head.w2
    k = ad.concat([yk * ad.cos(ph1), yk * ad.sin(ph1), ad.cos(ph2), ad.sin(ph2)], -1)
    return k.reshape(-1) if single else k


def score_logits(X: TokenSet, Y: TokenSet, head: RelAttentionHead) -> Tensor:
    """Pre-softmax scores q_i . k_j / sqrt(d)."""
    if len(X) == 0 or len(Y) == 0:
        raise ad.ShapeError("attention_scores", X.features.shape, Y.features.shape, "empty tokens")
    q = make_query(X.features, X.positions, head)
    k = make_key(Y.features, Y.positions, head)
    return (q @ k.swapaxes(-1, -2)) / math.sqrt(head.d)


def attention_scores(X: TokenSet, Y: TokenSet, head: RelAttentionHead) -> Tensor:
    return ad.softmax(score_logits(X, Y, head), axis=-1)


def attention_output(X: TokenSet, Y: TokenSet, head: RelAttentionHead) -> Tensor:
    A = attention_scores(X, Y, head)
    ctx = A @ head.v(Y.features)
    # sum_j a_ij (p_i - p_j) = p_i - sum_j a_ij p_j since rows of A sum to 1
    rel = X.positions - A @ Y.positions
    return head.value_out(ctx) + head.pos_out(rel)


def baseline_attention(Q, K, V) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ad.ShapeError("baseline_attention", Q.shape, K.shape, f"values {V.shape}")
    A = ad.softmax((Q @ K.swapaxes(-1, -2)) / math.sqrt(K.shape[-1]), axis=-1)
    return A @ V


class MultiHeadRelAttention(Module):
    """All heads evaluated at once; head h owns slice h of every stacked parameter.

    The result is the sum of the per-head outputs, each already projected back
    to E by its own value and position linears.
    """

    def __init__(self, embed: int, n_heads: int, rng: np.random.Generator,
                 use_mlp: bool = False, zero_out: bool = False):
        if embed % n_heads:
            raise ad.ShapeError("MultiHeadRelAttention", (embed,), (n_heads,),
                                "embedding size must be divisible by head count")
        self.embed, self.n_heads, self.d = embed, n_heads, embed // n_heads
        hd = embed  # n_heads * d
        self.q = _projection(embed, hd, rng, use_mlp)
        self.k = _projection(embed, hd, rng, use_mlp)
        self.v = _projection(embed, hd, rng, use_mlp)
        self.w1 = param(frequency_init(n_heads, self.d, rng))
        self.w2 = param(frequency_init(n_heads, self.d, rng))
        self.b1 = param(np.zeros((n_heads, 1, self.d)))
        self.b2 = param(np.zeros((n_heads, 1, self.d)))
        scale = 0.0 if zero_out else math.sqrt(2.0 / (self.d + embed))
        self.wvo = param(rng.standard_normal((n_heads, self.d, embed)) * scale)
        self.bvo = param(np.zeros((n_heads, 1, embed)))
        scale = 0.0 if zero_out else math.sqrt(2.0 / (2 + embed))
        self.wpo = param(rng.standard_normal((n_heads, 2, embed)) * scale)
        self.bpo = param(np.zeros((n_heads, 1, embed)))

    def _split(self, t: Tensor) -> Tensor:
        # (..., L, H*d) -> (..., H, L, d)
        *lead, L, _ = t.shape
        t = t.reshape(*lead, L, self.n_heads, self.d)
        nd = t.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return t.transpose(*axes)

    def logits(self, X: TokenSet, Y: TokenSet) -> Tensor:
        if len(X) == 0 or len(Y) == 0:
            raise ad.ShapeError("attention_scores", X.features.shape, Y.features.shape,
                                "empty tokens")
        if X.features.shape[-1] != self.embed or Y.features.shape[-1] != self.embed:
            raise ad.ShapeError("multi_head", X.features.shape, Y.features.shape,
                                f"expected feature size {self.embed}")
        xq = self._split(self.q(X.features))
        yk = self._split(self.k(Y.features))
        px = ad.reshape(X.positions, X.positions.shape[:-2] + (1,) + X.positions.shape[-2:])
        py = ad.reshape(Y.positions, Y.positions.shape[:-2] + (1,) + Y.positions.shape[-2:])
        ph1, ph2 = px @ self.w1 + self.b1, px @ self.w2 + self.b2
        q = ad.concat([xq * ad.cos(ph1), xq * ad.sin(ph1), xq * ad.cos(ph2), xq * ad.sin(ph2)], -1)
        k1, k2 = py @ self.w1, py @ self.w2
        k = ad.concat([yk * ad.cos(k1), yk * ad.sin(k1), ad.cos(k2), ad.sin(k2)], -1)
        return (q @ k.swapaxes(-1, -2)) / math.sqrt(self.d)

    def forward(self, X: TokenSet, Y: TokenSet) -> Tensor:
        A = ad.softmax(self.logits(X, Y), axis=-1)                # (..., H, Lx, Ly)
        v = self._split(self.v(Y.features))                       # (..., H, Ly, d)
        out = (A @ v) @ self.wvo + self.bvo                       # (..., H, Lx, E)
        py = ad.reshape(Y.positions, Y.positions.shape[:-2] + (1,) + Y.positions.shape[-2:])
        px = ad.reshape(X.positions, X.positions.shape[:-2] + (1,) + X.positions.shape[-2:])
        out = out + (px - A @ py) @ self.wpo + self.bpo
        return out.sum(axis=-3)

    def head(self, h: int) -> RelAttentionHead:
        """Copy of head ``h`` as a standalone RelAttentionHead (linear projections only)."""
        if not isinstance(self.q, Linear):
            raise TypeError("head() is only defined for linear projections")
        rng = np.random.default_rng(0)
        out = RelAttentionHead(self.embed, self.d, rng)
        sl = slice(h * self.d, (h + 1) * self.d)
        out.q.weight.data[...] = self.q.weight.data[:, sl]
        out.k.weight.data[...] = self.k.weight.data[:, sl]
        out.v.weight.data[...] = self.v.weight.data[:, sl]
        out.w1.data[...] = self.w1.data[h]
        out.w2.data[...] = self.w2.data[h]
        out.b1.data[...] = self.b1.data[h, 0]
        out.b2.data[...] = self.b2.data[h, 0]
        out.value_out.weight.data[...] = self.wvo.data[h]
        out.value_out.bias.data[...] = self.bvo.data[h, 0]
        out.pos_out.weight.data[...] = self.wpo.data[h]
        out.pos_out.bias.data[...] = self.bpo.data[h, 0]
        return out


class RelAttentionBlock(Module):
    """Pre-norm block: X + MHA(LN(X), LN(Y)), then X + FFN(LN(X)). Positions pass through."""

    def __init__(self, embed: int, n_heads: int, rng: np.random.Generator,
                 use_mlp: bool = False, zero_out: bool = False, ffn_mult: int = 2,
                 cross: bool = True):
        self.norm_x = LayerNorm(embed)
        self.norm_y = LayerNorm(embed) if cross else None
        self.attn = MultiHeadRelAttention(embed, n_heads, rng, use_mlp, zero_out)
        self.norm_ff = LayerNorm(embed)
        self.ffn = MLP(embed, ffn_mult * embed, embed, rng, zero_last=zero_out)

    def forward(self, X: TokenSet, Y: TokenSet | None = None) -> TokenSet:
        xn = TokenSet(self.norm_x(X.features), X.positions)
        if Y is None:
            yn = xn
        else:
            norm = self.norm_y or self.norm_x
            yn = TokenSet(norm(Y.features), Y.positions)
        h = X.features + self.attn(xn, yn)
        h = h + self.ffn(self.norm_ff(h))
        return TokenSet(h, X.positions)


def multi_head(X: TokenSet, Y: TokenSet, block: RelAttentionBlock) -> TokenSet:
    return block(X, Y)
