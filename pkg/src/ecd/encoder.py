"""Frozen patch encoder and the trainable shared projection head.

The encoder is a deterministic stand-in for a pretrained backbone: each
non-overlapping PxPx3 pixel patch is flattened and multiplied by a fixed
seeded Gaussian matrix, giving a d-channel feature map at 1/P resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .ops import ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 14
    dim: int = 384
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.dim < 1:
            raise ValueError("patch_size and dim must be positive")


@lru_cache(maxsize=8)
def _projection_matrix(patch_size: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    fan_in = 3 * patch_size * patch_size
    mat = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(dim, fan_in))
    return mat.astype(np.float32)


def encode(img: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Map a (3, P*H, P*W) image in [0, 1] to a (d, H, W) feature map.

    Pure deterministic function of (pixels, seed, P, d); a pixel affects
    only the feature column of the patch containing it.
    """
    p = cfg.patch_size
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {img.shape}")
    if img.shape[1] % p or img.shape[2] % p:
        raise ShapeError(f"image dims {img.shape[1:]} not divisible by patch size {p}")
    h, w = img.shape[1] // p, img.shape[2] // p
    # (3, h, P, w, P) -> (h, w, 3*P*P)
    patches = (
        img.reshape(3, h, p, w, p)
        .transpose(1, 3, 0, 2, 4)
        .reshape(h * w, 3 * p * p)
        .astype(np.float32)
    )
    feat = patches @ _projection_matrix(p, cfg.dim, cfg.seed).T  # (h*w, d)
    return np.ascontiguousarray(feat.T.reshape(cfg.dim, h, w))


class ProjectionHead:
    """Two 5x5 same-padded convolutions with ReLU, then per-position unit
    normalization. Shared between query and reference features."""

    def __init__(self, dim: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        k = 5
        scale = 1.0 / np.sqrt(dim * k * k)
        self.dim = dim
        self.params = {
            "conv1.weight": ad.Tensor(
                rng.normal(0, scale, (dim, dim, k, k)).astype(dtype), requires_grad=True
            ),
            "conv1.bias": ad.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
            "conv2.weight": ad.Tensor(
                rng.normal(0, scale, (dim, dim, k, k)).astype(dtype), requires_grad=True
            ),
            "conv2.bias": ad.Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
        }

    def to_blocks(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.data) for name, p in self.params.items()}

    def load_blocks(self, blocks: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.array(blocks[name], dtype=p.data.dtype)


def project(f, head: ProjectionHead) -> ad.Tensor:
    """conv5x5 -> ReLU -> conv5x5 -> ReLU -> unit-normalize, shape-preserving.

    Accepts a single (d, H, W) map or a batched (B, d, H, W) stack."""
    x = f if isinstance(f, ad.Tensor) else ad.Tensor(f)
    if x.shape[-3] != head.dim:
        raise ShapeError(f"channel mismatch: input d={x.shape[-3]}, head d={head.dim}")
    p = head.params
    x = ad.relu(ad.conv2d(x, p["conv1.weight"], p["conv1.bias"], "same"))
    x = ad.relu(ad.conv2d(x, p["conv2.weight"], p["conv2.bias"], "same"))
    return ad.l2_normalize_channels(x)
