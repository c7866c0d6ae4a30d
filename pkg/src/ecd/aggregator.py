"""Semantic aggregator: multi-head cross-attention from each pseudo-aligned
view into the concatenated reference features, residual + FFN, averaged
across scales."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .ops import ShapeError


class MultiHeadAttention:
    """Scaled dot-product multi-head attention with trainable q/k/v/output
    projections. No positional encodings."""

    def __init__(self, dim: int, heads: int, seed: int = 0, dtype=np.float32, prefix="mha"):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)

        def w():
            return ad.Tensor(rng.normal(0, scale, (dim, dim)).astype(dtype), requires_grad=True)

        def b():
            return ad.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

        self.params = {
            f"{prefix}.wq": w(), f"{prefix}.bq": b(),
            f"{prefix}.wk": w(), f"{prefix}.bk": b(),
            f"{prefix}.wv": w(), f"{prefix}.bv": b(),
            f"{prefix}.wo": w(), f"{prefix}.bo": b(),
        }
        self._prefix = prefix

    def __call__(self, query_tokens: ad.Tensor, kv_tokens: ad.Tensor) -> ad.Tensor:
        p, pre = self.params, self._prefix
        if query_tokens.shape[-1] != self.dim or kv_tokens.shape[-1] != self.dim:
            raise ShapeError(
                f"token dim mismatch: got {query_tokens.shape[-1]}/{kv_tokens.shape[-1]}, "
                f"params expect {self.dim}"
            )
        h, dh = self.heads, self.head_dim
        if query_tokens.ndim == 3:
            # batched (B, t, d) tokens
            b, tq = query_tokens.shape[0], query_tokens.shape[1]
            tkv = kv_tokens.shape[1]

            def split(x, t):
                # (B, t, d) -> (B, heads, t, head_dim)
                return x.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

            q = split(query_tokens @ p[f"{pre}.wq"] + p[f"{pre}.bq"], tq)
            k = split(kv_tokens @ p[f"{pre}.wk"] + p[f"{pre}.bk"], tkv)
            v = split(kv_tokens @ p[f"{pre}.wv"] + p[f"{pre}.bv"], tkv)
            scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
            attn = ad.softmax_lastaxis(scores)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, tq, self.dim)
            return ctx @ p[f"{pre}.wo"] + p[f"{pre}.bo"]

        tq, tkv = query_tokens.shape[0], kv_tokens.shape[0]

        def split(x, t):
            # (t, d) -> (heads, t, head_dim)
            return x.reshape(t, h, dh).transpose(1, 0, 2)

        q = split(query_tokens @ p[f"{pre}.wq"] + p[f"{pre}.bq"], tq)
        k = split(kv_tokens @ p[f"{pre}.wk"] + p[f"{pre}.bk"], tkv)
        v = split(kv_tokens @ p[f"{pre}.wv"] + p[f"{pre}.bv"], tkv)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
        attn = ad.softmax_lastaxis(scores)  # rows sum to 1 per head
        ctx = (attn @ v).transpose(1, 0, 2).reshape(tq, self.dim)
        return ctx @ p[f"{pre}.wo"] + p[f"{pre}.bo"]


class AggregatorParams:
    """MHA + token-wise two-layer FFN with ReLU; dropout on the attention
    output only (applied before the residual)."""

    def __init__(self, dim: int, heads: int = 6, ffn_width: int | None = None,
                 dropout: float = 0.1, seed: int = 0, dtype=np.float32):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.dim = dim
        self.dropout = dropout
        ffn_width = dim if ffn_width is None else ffn_width
        self.mha = MultiHeadAttention(dim, heads, seed=seed, dtype=dtype, prefix="agg.mha")
        rng = np.random.default_rng(seed + 1)
        self.params = dict(self.mha.params)
        self.params.update(
            {
                "agg.ffn.w1": ad.Tensor(
                    rng.normal(0, 1.0 / np.sqrt(dim), (dim, ffn_width)).astype(dtype),
                    requires_grad=True,
                ),
                "agg.ffn.b1": ad.Tensor(np.zeros(ffn_width, dtype=dtype), requires_grad=True),
                "agg.ffn.w2": ad.Tensor(
                    rng.normal(0, 1.0 / np.sqrt(ffn_width), (ffn_width, dim)).astype(dtype),
                    requires_grad=True,
                ),
                "agg.ffn.b2": ad.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
            }
        )

    def ffn(self, x: ad.Tensor) -> ad.Tensor:
        p = self.params
        return ad.relu(x @ p["agg.ffn.w1"] + p["agg.ffn.b1"]) @ p["agg.ffn.w2"] + p["agg.ffn.b2"]


def flatten_tokens(maps) -> ad.Tensor:
    """(d, H, W) maps -> (sum HW, d) token matrix, map order then raster order."""
    ts = [m if isinstance(m, ad.Tensor) else ad.Tensor(m) for m in maps]
    if not ts:
        raise ShapeError("no maps to flatten")
    d = ts[0].shape[0]
    if any(t.shape[0] != d for t in ts):
        raise ShapeError("channel mismatch across maps")
    flat = [t.reshape(d, -1).transpose(1, 0) for t in ts]
    return flat[0] if len(flat) == 1 else ad.concat(flat, axis=0)


def unflatten_tokens(tokens: ad.Tensor, h: int, w: int) -> ad.Tensor:
    d = tokens.shape[1]
    return tokens.transpose(1, 0).reshape(d, h, w)


def flatten_tokens_b(x: ad.Tensor) -> ad.Tensor:
    """(B, d, H, W) -> (B, H*W, d) token batch, raster order per sample."""
    b, d, h, w = x.shape
    return x.reshape(b, d, h * w).transpose(0, 2, 1)


def unflatten_tokens_b(tokens: ad.Tensor, h: int, w: int) -> ad.Tensor:
    b, _, d = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, d, h, w)


def ref_tokens_b(refs: ad.Tensor) -> ad.Tensor:
    """(B, K, d, H, W) -> (B, K*H*W, d); reference-major then raster order,
    matching flatten_tokens over a list of K maps."""
    b, k, d, h, w = refs.shape
    return refs.reshape(b, k, d, h * w).transpose(0, 1, 3, 2).reshape(b, k * h * w, d)


def cross_attend(query_tokens, kv_tokens, agg: AggregatorParams) -> ad.Tensor:
    return agg.mha(query_tokens, kv_tokens)


def dropout_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based deterministic dropout stream keyed by (seed, step)."""
    return np.random.Generator(np.random.Philox(key=(seed << 32) | (step & 0xFFFFFFFF)))


def aggregate_scale(view_map, ref_tokens, agg: AggregatorParams,
                    training: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
    """FFN(Dropout(MHA(view, refs, refs)) + view), reshaped back to (d, H, W)."""
    view_t = view_map if isinstance(view_map, ad.Tensor) else ad.Tensor(view_map)
    d, h, w = view_t.shape
    q_tokens = flatten_tokens([view_t])
    attn_out = agg.mha(q_tokens, ref_tokens)
    if training and agg.dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        attn_out = ad.dropout(attn_out, agg.dropout, rng)
    out_tokens = agg.ffn(attn_out + q_tokens)
    return unflatten_tokens(out_tokens, h, w)


def aggregate_scale_b(view: ad.Tensor, ref_tokens: ad.Tensor, agg: AggregatorParams,
                      training: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Batched aggregate_scale on (B, d, H, W) views and (B, T, d) tokens."""
    _, _, h, w = view.shape
    q_tokens = flatten_tokens_b(view)
    attn_out = agg.mha(q_tokens, ref_tokens)
    if training and agg.dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        attn_out = ad.dropout(attn_out, agg.dropout, rng)
    out_tokens = agg.ffn(attn_out + q_tokens)
    return unflatten_tokens_b(out_tokens, h, w)


def reconstruct_scene(views, refs, agg: AggregatorParams,
                      training: bool = False, rng: np.random.Generator | None = None) -> ad.Tensor:
    """Average the per-scale aggregated maps into the reconstructed scene."""
    if not views:
        raise ValueError("no views to aggregate")
    ref_tokens = flatten_tokens(refs)
    outs = [
        aggregate_scale(v.features if hasattr(v, "features") else v, ref_tokens, agg,
                        training=training, rng=rng)
        for v in views
    ]
    acc = outs[0]
    for o in outs[1:]:
        acc = acc + o
    return acc / len(outs)
