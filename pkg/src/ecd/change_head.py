"""Change detection head: bidirectional cross-attention between the
reconstructed scene and the query feature, channel concat, two convolutions,
bilinear upsampling to pixel resolution, sigmoid, threshold."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .aggregator import (
    MultiHeadAttention,
    flatten_tokens,
    flatten_tokens_b,
    unflatten_tokens,
    unflatten_tokens_b,
)
from .ops import ShapeError


@dataclass
class ChangePrediction:
    logits: np.ndarray  # (1, P*H, P*W)
    probabilities: np.ndarray  # sigmoid(logits)
    mask: np.ndarray  # probabilities >= threshold
    threshold: float


class ChangeHeadParams:
    """Two plain cross-attention blocks (no residual/FFN), a 3x3 conv halving
    channels 2d -> d with ReLU, and a 1x1 conv to one logit channel."""

    def __init__(self, dim: int, heads: int = 6, seed: int = 0, dtype=np.float32):
        self.dim = dim
        self.attn_q = MultiHeadAttention(dim, heads, seed=seed, dtype=dtype, prefix="head.attn_q")
        self.attn_r = MultiHeadAttention(dim, heads, seed=seed + 1, dtype=dtype, prefix="head.attn_r")
        rng = np.random.default_rng(seed + 2)
        self.params = dict(self.attn_q.params)
        self.params.update(self.attn_r.params)
        self.params.update(
            {
                "head.convA.weight": ad.Tensor(
                    rng.normal(0, 1.0 / np.sqrt(2 * dim * 9), (dim, 2 * dim, 3, 3)).astype(dtype),
                    requires_grad=True,
                ),
                "head.convA.bias": ad.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
                "head.convB.weight": ad.Tensor(
                    rng.normal(0, 1.0 / np.sqrt(dim), (1, dim, 1, 1)).astype(dtype),
                    requires_grad=True,
                ),
                "head.convB.bias": ad.Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
            }
        )


def change_logits(fr_star, f_q, head: ChangeHeadParams, up_factor: int) -> ad.Tensor:
    """Upsampled single-channel logits (differentiable path used in training)."""
    fr = fr_star if isinstance(fr_star, ad.Tensor) else ad.Tensor(fr_star)
    fq = f_q if isinstance(f_q, ad.Tensor) else ad.Tensor(f_q)
    if fr.shape != fq.shape:
        raise ShapeError(f"shape mismatch: scene {fr.shape} vs query {fq.shape}")
    d, h, w = fq.shape
    q_tokens = flatten_tokens([fq])
    r_tokens = flatten_tokens([fr])
    a = unflatten_tokens(head.attn_q(q_tokens, r_tokens), h, w)  # query attends to scene
    b = unflatten_tokens(head.attn_r(r_tokens, q_tokens), h, w)  # scene attends to query
    x = ad.concat([a, b], axis=0)  # (2d, h, w)
    x = ad.relu(ad.conv2d(x, head.params["head.convA.weight"], head.params["head.convA.bias"], "same"))
    x = ad.conv2d(x, head.params["head.convB.weight"], head.params["head.convB.bias"], (0, 0))
    return ad.upsample_bilinear(x, up_factor)  # logits upsampled before sigmoid


def change_logits_b(fr_star: ad.Tensor, f_q: ad.Tensor, head: ChangeHeadParams,
                    up_factor: int) -> ad.Tensor:
    """Batched change_logits on (B, d, h, w) scene/query stacks -> (B, 1, H, W)."""
    if fr_star.shape != f_q.shape:
        raise ShapeError(f"shape mismatch: scene {fr_star.shape} vs query {f_q.shape}")
    _, _, h, w = f_q.shape
    q_tokens = flatten_tokens_b(f_q)
    r_tokens = flatten_tokens_b(fr_star)
    a = unflatten_tokens_b(head.attn_q(q_tokens, r_tokens), h, w)
    b = unflatten_tokens_b(head.attn_r(r_tokens, q_tokens), h, w)
    x = ad.concat([a, b], axis=1)  # (B, 2d, h, w)
    x = ad.relu(ad.conv2d(x, head.params["head.convA.weight"], head.params["head.convA.bias"], "same"))
    x = ad.conv2d(x, head.params["head.convB.weight"], head.params["head.convB.bias"], (0, 0))
    return ad.upsample_bilinear(x, up_factor)


def detect_change(fr_star, f_q, head: ChangeHeadParams, up_factor: int,
                  threshold: float = 0.5) -> ChangePrediction:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    logits = change_logits(fr_star, f_q, head, up_factor).data
    from .ops import sigmoid

    probs = sigmoid(logits)
    return ChangePrediction(
        logits=logits,
        probabilities=probs,
        mask=probs >= threshold,  # >= by convention
        threshold=threshold,
    )
